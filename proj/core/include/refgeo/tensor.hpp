#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "refgeo/errors.hpp"

namespace refgeo {

// Dense row-major tensor of doubles. Rank is dims.size().
struct Tensor {
  std::vector<uint64_t> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<uint64_t> d) : dims(std::move(d)) {
    data.assign(numel_of(dims), 0.0);
  }

  static size_t numel_of(const std::vector<uint64_t>& dims) {
    size_t n = 1;
    for (uint64_t d : dims) n *= static_cast<size_t>(d);
    return n;
  }

  size_t numel() const { return data.size(); }

  double& at(size_t i, size_t j) { return data[i * dims[1] + j]; }
  double at(size_t i, size_t j) const { return data[i * dims[1] + j]; }

  double* row(size_t i) { return data.data() + i * dims[1]; }
  const double* row(size_t i) const { return data.data() + i * dims[1]; }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
  }
};

}  // namespace refgeo
