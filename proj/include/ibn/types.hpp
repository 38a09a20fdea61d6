#ifndef IBN_TYPES_HPP
#define IBN_TYPES_HPP

#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace ibn {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// Error categories. Each maps to a distinct failure mode so callers (and the
// CLI) can report them differently.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, int line)
      : std::runtime_error(what), line(line) {}
  int line;
};

// File could not be opened or written; `path` names it.
struct IoError : std::runtime_error {
  IoError(const std::string& what, std::string path)
      : std::runtime_error(what + ": " + path), path(std::move(path)) {}
  std::string path;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct OptimizationError : std::runtime_error {
  OptimizationError(const std::string& what, long epoch)
      : std::runtime_error(what), epoch(epoch) {}
  long epoch;
};

}  // namespace ibn

#endif  // IBN_TYPES_HPP
