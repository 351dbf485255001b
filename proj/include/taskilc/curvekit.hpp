#pragma once

// Bezier command curves (Bernstein basis) and SO(3) helpers.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SparseCore>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"
#include "taskilc/common.hpp"

namespace taskilc {

/// Curve degree used for every command channel. 8 knots per channel.
inline constexpr int kSplineDegree = 7;
inline constexpr int kKnots = kSplineDegree + 1;
inline constexpr int kKnotParams = kChannels * kKnots;

using KnotMatrix = Eigen::Matrix<double, kChannels, kKnots>;
using ChannelVec = Eigen::Matrix<double, kChannels, 1>;
using KnotVec = Eigen::Matrix<double, kKnotParams, 1>;
using KnotJacobian = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

/// C(n,i) s^i (1-s)^(n-i).
inline double bernstein(int i, int n, double s) {
  if (n < 0 || i < 0 || i > n) throw DomainError("bernstein: index out of range");
  if (!(s >= 0.0 && s <= 1.0)) throw DomainError("bernstein: s outside [0,1]");
  return binomial(n, i) * std::pow(s, i) * std::pow(1.0 - s, n - i);
}

/// Ten Bezier channels with knots equally spaced over [0, duration].
/// Row c holds channel c; column j is knot j.
struct CommandSpline {
  KnotMatrix knots = KnotMatrix::Zero();
  double duration = 1.0;

  CommandSpline() = default;
  CommandSpline(const KnotMatrix& k, double T) : knots(k), duration(T) { validate(); }

  void validate() const {
    if (!(duration > 0.0) || !std::isfinite(duration))
      throw DomainError("CommandSpline: duration must be positive and finite");
    if (!knots.allFinite()) throw DomainError("CommandSpline: non-finite knot");
  }

  /// Channel-major flattening: index = channel * 8 + knot.
  KnotVec flat() const {
    KnotVec v;
    for (int c = 0; c < kChannels; ++c)
      for (int j = 0; j < kKnots; ++j) v[c * kKnots + j] = knots(c, j);
    return v;
  }

  static CommandSpline from_flat(const KnotVec& v, double T) {
    KnotMatrix k;
    for (int c = 0; c < kChannels; ++c)
      for (int j = 0; j < kKnots; ++j) k(c, j) = v[c * kKnots + j];
    return CommandSpline(k, T);
  }

  CommandSpline operator-(const KnotMatrix& delta) const { return CommandSpline(knots - delta, duration); }
  CommandSpline operator+(const KnotMatrix& delta) const { return CommandSpline(knots + delta, duration); }
};

/// Weights w_j such that d^order/dt^order B(t) = sum_j knots_j * w_j.
inline Eigen::Matrix<double, kKnots, 1> spline_basis_weights(double t, double duration, int order) {
  if (order < 0 || order > 3) throw DomainError("spline: derivative order must be 0..3");
  constexpr double kSlack = 1e-12;
  if (!(t >= -kSlack * duration && t <= duration * (1.0 + kSlack)))
    throw DomainError("spline: time outside [0, T]");
  const double s = std::clamp(t / duration, 0.0, 1.0);
  const int n = kSplineDegree;
  const int reduced = n - order;
  double scale = 1.0;
  for (int i = 0; i < order; ++i) scale *= static_cast<double>(n - i) / duration;

  Eigen::Matrix<double, kKnots, 1> w = Eigen::Matrix<double, kKnots, 1>::Zero();
  for (int i = 0; i <= reduced; ++i) {
    const double b = binomial(reduced, i) * std::pow(s, i) * std::pow(1.0 - s, reduced - i);
    // forward difference of order `order` starting at knot i
    for (int j = 0; j <= order; ++j) {
      const double sign = ((order - j) % 2 == 0) ? 1.0 : -1.0;
      w[i + j] += scale * b * sign * binomial(order, j);
    }
  }
  return w;
}

inline ChannelVec eval_spline(const CommandSpline& c, double t, int order = 0) {
  return c.knots * spline_basis_weights(t, c.duration, order);
}

/// d eval_spline / d flat knots. Row i only touches the 8 knots of channel i.
inline KnotJacobian spline_knot_jacobian(const CommandSpline& c, double t, int order) {
  const auto w = spline_basis_weights(t, c.duration, order);
  KnotJacobian J(kChannels, kKnotParams);
  J.reserve(Eigen::VectorXi::Constant(kChannels, kKnots));
  for (int ch = 0; ch < kChannels; ++ch)
    for (int j = 0; j < kKnots; ++j) J.insert(ch, ch * kKnots + j) = w[j];
  J.makeCompressed();
  return J;
}

/// Dense variant restricted to one channel block, handy for assembling constraint rows.
inline Eigen::Matrix<double, kChannels, kKnotParams> spline_knot_jacobian_dense(const CommandSpline& c, double t,
                                                                                 int order) {
  const auto w = spline_basis_weights(t, c.duration, order);
  Eigen::Matrix<double, kChannels, kKnotParams> J = Eigen::Matrix<double, kChannels, kKnotParams>::Zero();
  for (int ch = 0; ch < kChannels; ++ch) J.block<1, kKnots>(ch, ch * kKnots) = w.transpose();
  return J;
}

// --- SO(3) ---------------------------------------------------------------------------------

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)) * 0.5; }

inline Mat3 so3_exp(const Vec3& w) {
  const double th = w.norm();
  const Mat3 W = hat(w);
  if (th < 1e-8) return Mat3::Identity() + W + 0.5 * W * W;
  return Mat3::Identity() + std::sin(th) / th * W + (1.0 - std::cos(th)) / (th * th) * W * W;
}

inline bool is_rotation(const Mat3& R, double tol = 1e-10) {
  return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

/// Axis-angle vector theta * axis with theta in [0, pi].
inline Vec3 so3_log(const Mat3& R) {
  const Vec3 skew = vee(R);  // sin(theta) * axis
  const double s = skew.norm();
  const double c = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
  const double th = std::atan2(s, c);
  if (th < 1e-6) return skew * (1.0 + s * s / 6.0);
  if (M_PI - th > 1e-3) return skew * (th / s);

  // Near pi the skew part vanishes; recover the axis from (R + R^T)/2 - cos(th) I = (1 - cos th) a a^T.
  const Mat3 B = 0.5 * (R + R.transpose()) - c * Mat3::Identity();
  int k = 0;
  B.diagonal().maxCoeff(&k);
  Vec3 axis = B.col(k) / std::sqrt(std::max(B(k, k), 1e-300));
  axis.normalize();
  if (axis.dot(skew) < 0.0) axis = -axis;
  return th * axis;
}

/// Inverse of the right Jacobian: Log(R exp(d^)) ~ Log(R) + Jr^{-1}(Log R) d.
inline Mat3 so3_right_jacobian_inv(const Vec3& phi) {
  const double th = phi.norm();
  const Mat3 P = hat(phi);
  if (th < 1e-6) return Mat3::Identity() + 0.5 * P + P * P / 12.0;
  const double coef = 1.0 / (th * th) - (1.0 + std::cos(th)) / (2.0 * th * std::sin(th));
  return Mat3::Identity() + 0.5 * P + coef * P * P;
}

// --- serialization ---------------------------------------------------------------------------

inline nlohmann::json spline_to_json(const CommandSpline& c) {
  nlohmann::json j;
  j["duration_s"] = c.duration;
  auto knots = nlohmann::json::array();
  for (int col = 0; col < kKnots; ++col) {
    auto k = nlohmann::json::array();
    for (int ch = 0; ch < kChannels; ++ch) k.push_back(c.knots(ch, col));
    knots.push_back(k);
  }
  j["knots"] = knots;
  return j;
}

inline CommandSpline spline_from_json(const nlohmann::json& j) {
  if (!j.contains("duration_s") || !j.contains("knots")) throw ConfigError("command JSON needs duration_s and knots");
  const auto& knots = j.at("knots");
  if (!knots.is_array() || knots.size() != kKnots) throw ConfigError("command JSON: knots must hold 8 columns");
  KnotMatrix k;
  for (int col = 0; col < kKnots; ++col) {
    const auto& column = knots.at(col);
    if (!column.is_array() || column.size() != kChannels)
      throw ConfigError("command JSON: each knot column must hold 10 values");
    for (int ch = 0; ch < kChannels; ++ch) k(ch, col) = column.at(ch).get<double>();
  }
  return CommandSpline(k, j.at("duration_s").get<double>());
}

inline void save_spline(const CommandSpline& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << spline_to_json(c).dump(2) << "\n";
}

inline CommandSpline load_spline(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read command file " + path);
  return spline_from_json(nlohmann::json::parse(in));
}

}  // namespace taskilc
