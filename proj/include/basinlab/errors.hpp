#pragma once

#include <stdexcept>
#include <string>

namespace basinlab {

// Root of every error the toolkit raises. Callers that only care about
// "something went wrong in basinlab" catch this one.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };
struct SpecError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct GeometryError : Error { using Error::Error; };

struct SchemaError : Error {
  SchemaError(std::string path, const std::string& what)
      : Error(path + ": " + what), field_path(std::move(path)) {}
  std::string field_path;
};

// Raised when a training run produces a non-finite loss.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, long long step)
      : Error(what), global_step(step) {}
  long long global_step;
};

}  // namespace basinlab
