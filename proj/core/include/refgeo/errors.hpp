#pragma once

#include <stdexcept>
#include <string>

namespace refgeo {

enum class ErrorKind {
  length,
  numeric,
  domain,
  shape,
  format,
  io,
  validation,
  tokenization,
  consistency,
  compatibility,
  degenerate_contrast,
  degenerate_normalizer,
  degenerate_input,
  degenerate_row,
  degenerate_rdm,
  slice_size,
  missing_table,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

}  // namespace refgeo
