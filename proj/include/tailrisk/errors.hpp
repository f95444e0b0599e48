#pragma once

#include <stdexcept>
#include <string>

namespace tailrisk {

struct NonIntegrableError : std::runtime_error {
  explicit NonIntegrableError(const std::string& what) : std::runtime_error(what) {}
};

struct DegenerateBlocksError : std::runtime_error {
  explicit DegenerateBlocksError(const std::string& what) : std::runtime_error(what) {}
};

struct NetTooLargeError : std::runtime_error {
  explicit NetTooLargeError(const std::string& what) : std::runtime_error(what) {}
};

struct SingularJacobianError : std::runtime_error {
  explicit SingularJacobianError(const std::string& what) : std::runtime_error(what) {}
};

struct NoConvergenceError : std::runtime_error {
  explicit NoConvergenceError(const std::string& what) : std::runtime_error(what) {}
};

struct InsufficientPointsError : std::runtime_error {
  explicit InsufficientPointsError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tailrisk
