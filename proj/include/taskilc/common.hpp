#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace taskilc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Joint/base channels carried by a command: 7 arm joints then 3 base translations.
inline constexpr int kArmJoints = 7;
inline constexpr int kBaseDofs = 3;
inline constexpr int kChannels = kArmJoints + kBaseDofs;

inline constexpr double kGravity = 9.81;

/// Input outside the mathematical domain of an operation (spline time, basis index, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Inconsistent sizes or invalid configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

inline Vec3 gravity_vector() { return Vec3(0.0, 0.0, -kGravity); }

}  // namespace taskilc
