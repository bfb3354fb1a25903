#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dime {

// Error taxonomy. The CLI maps these onto process exit codes:
// ValueError -> usage (1), ShapeError/DataError/IoError -> data (2),
// NumericError -> numeric (3).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// Tensor extents, row-major. Rank 0 (scalar), 1 (vector) or 2 (matrix).
using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  if (s.empty()) return "[scalar]";
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

// Writes content to a sibling temp file, then renames over path, so a failed
// or interrupted command never leaves a partially written output behind.
void write_file_atomic(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);  // IoError if unreadable

}  // namespace dime
