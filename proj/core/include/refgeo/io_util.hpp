#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace refgeo {

// Shortest representation that round-trips the double exactly.
std::string format_double(double v);

std::string read_text_file(const std::string& path);
void write_text_file_atomic(const std::string& path, const std::string& content);
std::vector<std::string> read_lines(const std::string& path);
void atomic_rename(const std::string& tmp, const std::string& path);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

uint64_t fnv1a64(const std::string& s);
std::string hex_u64(uint64_t v);

// REFGEO_LOG: quiet | warn | info | debug (default info)
enum class LogLevel { quiet = 0, warn = 1, info = 2, debug = 3 };
LogLevel log_level();
void log_msg(LogLevel level, const std::string& msg);

}  // namespace refgeo
