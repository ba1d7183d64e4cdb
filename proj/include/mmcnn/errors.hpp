#pragma once

#include <stdexcept>
#include <string>

namespace mmcnn {

// Shape or rank mismatch between tensors.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value (bad stride, non-integral output size, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed serialized data; carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
  std::size_t offset;
  FormatError(const std::string& msg, std::size_t off)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(off) + ")"),
        offset(off) {}
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mmcnn
