// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lego {

/// Base of every error thrown by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define LEGO_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

LEGO_DEFINE_ERROR(ParameterError, "parameter")
LEGO_DEFINE_ERROR(ShapeError, "shape")
LEGO_DEFINE_ERROR(DomainError, "domain")
LEGO_DEFINE_ERROR(IndexError, "index")
LEGO_DEFINE_ERROR(ConfigError, "config")
LEGO_DEFINE_ERROR(NumericError, "numeric")
LEGO_DEFINE_ERROR(StructuralError, "structural")
LEGO_DEFINE_ERROR(IngestError, "ingest")
LEGO_DEFINE_ERROR(FormatError, "format")

#undef LEGO_DEFINE_ERROR

namespace detail {

template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace detail
}  // namespace lego
