#pragma once

// Maximal-coordinate point-mass rope driven at its first point by the fingertip.
//
// Points are indexed 0..N with point 0 the kinematically driven fingertip and points 1..N the
// free rope links. One step solves, for (v+, lambda+):
//
//   p+ = p + dt/2 (v + v+)
//   M (v+ - v) = dt [ f_grav + f_bend(P+) + f_damp(V_mid) + G(P_mid)^T lambda+ ]
//   g(P+) = 0,   g_i = |P_i - P_{i-1}|^2 - l^2
//
// Constraint multipliers act on squared distances, so the tension in link i is -2 l lambda_i.
// The midpoint constraint gradient makes constraint forces workless for the quadratic g, the
// trapezoidal position update makes the kinetic-energy change exact, and the implicit bending
// force only removes energy. With b = 0 and a static tip a step conserves energy; with b > 0 it
// dissipates.
//
// Bending: U = k / (2 l^2) sum_j |P_{j+1} - 2 P_j + P_{j-1}|^2 over the joints j = 1..N-1. On the
// constraint manifold this equals k (1 - cos theta_j), i.e. a restoring torque k sin(theta) ~ k
// theta about a straight rest shape. Damping uses the same operator on velocities with b.

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskilc/common.hpp"

namespace taskilc {

struct RopeParams {
  double k = 1e5;       // bending stiffness (units relative to link mass)
  double b = 50.0;      // bending damping
  double m_e = 5.0;     // end link mass
  double m = 1.0;       // link mass
  double l = 0.1;       // link length (m)
  int N = 11;           // number of free links
  double dt = 0.005;    // timestep (s)

  void validate() const {
    if (!(k >= 0.0 && b >= 0.0)) throw ConfigError("rope: stiffness and damping must be nonnegative");
    if (!(m > 0.0 && m_e > 0.0 && l > 0.0 && dt > 0.0)) throw ConfigError("rope: masses, length and dt must be positive");
    if (N < 1) throw ConfigError("rope: at least one link required");
  }

  double mass(int link) const { return link == N - 1 ? m_e : m; }
  double total_mass() const { return m * (N - 1) + m_e; }
};

struct RopeState {
  VecX p;       // 3N stacked link positions
  VecX v;       // 3N stacked link velocities
  VecX lambda;  // N constraint multipliers

  Vec3 point(int i) const { return p.segment<3>(3 * i); }
  VecX x() const {
    VecX out(p.size() + v.size());
    out << p, v;
    return out;
  }
};

class NewtonDivergence : public std::runtime_error {
 public:
  NewtonDivergence(const std::string& what, int step_index) : std::runtime_error(what), step(step_index) {}
  int step;
};

class SingularKKT : public std::runtime_error {
 public:
  SingularKKT(const std::string& what, int step_index) : std::runtime_error(what), step(step_index) {}
  int step;
};

struct NewtonOptions {
  double tolerance = 1e-10;  // scaled residual
  int max_iterations = 50;
  int retry_substeps = 10;
};

namespace rope_detail {

/// Second-difference operator L = D2^T D2 over points 0..N (scalar, per coordinate).
inline MatX bending_operator(int N) {
  MatX L = MatX::Zero(N + 1, N + 1);
  for (int j = 1; j < N; ++j) {
    const int idx[3] = {j - 1, j, j + 1};
    const double w[3] = {1.0, -2.0, 1.0};
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c) L(idx[a], idx[c]) += w[a] * w[c];
  }
  return L;
}

inline MatX kron3(const MatX& s) {
  MatX out = MatX::Zero(3 * s.rows(), 3 * s.cols());
  for (int i = 0; i < s.rows(); ++i)
    for (int j = 0; j < s.cols(); ++j)
      if (s(i, j) != 0.0) out.block<3, 3>(3 * i, 3 * j) = s(i, j) * Mat3::Identity();
  return out;
}

inline VecX full_points(const Vec3& tip, const VecX& p) {
  VecX P(p.size() + 3);
  P << tip, p;
  return P;
}

/// g(P) for full point vector P (3(N+1)).
inline VecX constraints(const VecX& P, int N, double l) {
  VecX g(N);
  for (int i = 1; i <= N; ++i) g[i - 1] = (P.segment<3>(3 * i) - P.segment<3>(3 * (i - 1))).squaredNorm() - l * l;
  return g;
}

/// dg/dP, N x 3(N+1).
inline MatX constraint_jacobian(const VecX& P, int N) {
  MatX G = MatX::Zero(N, 3 * (N + 1));
  for (int i = 1; i <= N; ++i) {
    const Vec3 d = P.segment<3>(3 * i) - P.segment<3>(3 * (i - 1));
    G.block<1, 3>(i - 1, 3 * i) = 2.0 * d.transpose();
    G.block<1, 3>(i - 1, 3 * (i - 1)) = -2.0 * d.transpose();
  }
  return G;
}

/// d(G(P)^T lambda)/dP, 3(N+1) square.
inline MatX constraint_force_hessian(const VecX& lambda, int N) {
  MatX H = MatX::Zero(3 * (N + 1), 3 * (N + 1));
  for (int i = 1; i <= N; ++i) {
    const Mat3 B = 2.0 * lambda[i - 1] * Mat3::Identity();
    H.block<3, 3>(3 * i, 3 * i) += B;
    H.block<3, 3>(3 * (i - 1), 3 * (i - 1)) += B;
    H.block<3, 3>(3 * i, 3 * (i - 1)) -= B;
    H.block<3, 3>(3 * (i - 1), 3 * i) -= B;
  }
  return H;
}

}  // namespace rope_detail

/// Precomputed operators for one parameter set; one per concurrent rollout.
class RopeModel {
 public:
  explicit RopeModel(const RopeParams& params) : params_(params) {
    params_.validate();
    const int N = params_.N;
    L_ = rope_detail::kron3(rope_detail::bending_operator(N));
    L_norm_ = L_.cwiseAbs().rowwise().sum().maxCoeff();
    mass_.resize(3 * N);
    for (int i = 0; i < N; ++i) mass_.segment<3>(3 * i).setConstant(params_.mass(i));
    gravity_ = VecX::Zero(3 * N);
    for (int i = 0; i < N; ++i) gravity_[3 * i + 2] = -kGravity * params_.mass(i);
  }

  const RopeParams& params() const { return params_; }
  int N() const { return params_.N; }
  double stiffness_scale() const { return params_.k / (params_.l * params_.l); }
  double damping_scale() const { return params_.b / (params_.l * params_.l); }
  const VecX& mass_diagonal() const { return mass_; }
  const VecX& gravity_force() const { return gravity_; }
  /// Kronecker-expanded bending operator over the full point vector (tip first).
  const MatX& bending_matrix() const { return L_; }

  /// Bending + damping forces on every point including the driven tip (no gravity).
  VecX internal_forces_full(const VecX& P, const VecX& V) const {
    return -stiffness_scale() * (L_ * P) - damping_scale() * (L_ * V);
  }

  /// Total applied force on the free links: gravity plus bending stiffness and damping.
  VecX bending_forces(const VecX& p, const VecX& v, const Vec3& p_tip, const Vec3& v_tip) const {
    const VecX full = internal_forces_full(rope_detail::full_points(p_tip, p), rope_detail::full_points(v_tip, v));
    return gravity_ + full.tail(3 * N());
  }

  /// Scaled residual of one step for candidate (v+, lambda+). Exposed for tests.
  struct StepResidual {
    VecX dynamics;     // 3N, momentum units
    VecX constraint;   // N
    double scaled_norm = 0.0;
  };

  StepResidual step_residual(const RopeState& z, const Vec3& tip_a, const Vec3& tip_b, double dt, const VecX& v1,
                             const VecX& lambda1) const {
    const int N = this->N();
    const VecX p1 = z.p + 0.5 * dt * (z.v + v1);
    const VecX P1 = rope_detail::full_points(tip_b, p1);
    const VecX Pm = rope_detail::full_points(0.5 * (tip_a + tip_b), 0.5 * (z.p + p1));
    const VecX Vm = rope_detail::full_points((tip_b - tip_a) / dt, 0.5 * (z.v + v1));
    const VecX f_el = (-stiffness_scale() * (L_ * P1)).tail(3 * N);
    const VecX f_d = (-damping_scale() * (L_ * Vm)).tail(3 * N);
    const MatX Gm = rope_detail::constraint_jacobian(Pm, N);
    StepResidual r;
    r.dynamics = mass_.cwiseProduct(v1 - z.v) -
                 dt * (gravity_ + f_el + f_d + (Gm.transpose() * lambda1).tail(3 * N));
    r.constraint = rope_detail::constraints(P1, N, params_.l);
    // the elastic force carries a round-off floor proportional to stiffness times absolute position
    const double ro_floor = 1e-5 * stiffness_scale() * L_norm_ * (1.0 + P1.cwiseAbs().maxCoeff());
    const double dyn_scale = dt * (kGravity * params_.total_mass() + ro_floor);
    r.scaled_norm = std::max(r.dynamics.cwiseAbs().maxCoeff() / dyn_scale,
                             r.constraint.cwiseAbs().maxCoeff() / (params_.l * params_.l));
    return r;
  }

  /// Jacobian of the step residual with respect to (v+, lambda+), 4N square.
  MatX step_jacobian(const RopeState& z, const Vec3& tip_a, const Vec3& tip_b, double dt, const VecX& v1,
                     const VecX& lambda1) const {
    const int N = this->N();
    const int n3 = 3 * N;
    const VecX p1 = z.p + 0.5 * dt * (z.v + v1);
    const VecX P1 = rope_detail::full_points(tip_b, p1);
    const VecX Pm = rope_detail::full_points(0.5 * (tip_a + tip_b), 0.5 * (z.p + p1));
    const MatX Gm = rope_detail::constraint_jacobian(Pm, N);
    const MatX G1 = rope_detail::constraint_jacobian(P1, N);
    const MatX Lam = rope_detail::constraint_force_hessian(lambda1, N);
    const auto Lff = L_.bottomRightCorner(n3, n3);
    MatX J = MatX::Zero(4 * N, 4 * N);
    J.topLeftCorner(n3, n3) = -dt * (-stiffness_scale() * 0.5 * dt * Lff - damping_scale() * 0.5 * Lff +
                                     0.25 * dt * Lam.bottomRightCorner(n3, n3));
    J.topLeftCorner(n3, n3).diagonal() += mass_;
    J.topRightCorner(n3, N) = -dt * Gm.rightCols(n3).transpose();
    J.bottomLeftCorner(N, n3) = 0.5 * dt * G1.rightCols(n3);
    return J;
  }

  /// Partial derivatives of the step residual with respect to the step inputs.
  struct StepInputJacobians {
    MatX d_p;      // 4N x 3N
    MatX d_v;      // 4N x 3N
    MatX d_tip_a;  // 4N x 3
    MatX d_tip_b;  // 4N x 3
  };

  StepInputJacobians step_input_jacobians(const RopeState& z, const Vec3& tip_a, const Vec3& tip_b, double dt,
                                          const VecX& v1, const VecX& lambda1) const {
    const int N = this->N();
    const int n3 = 3 * N;
    const VecX p1 = z.p + 0.5 * dt * (z.v + v1);
    const VecX P1 = rope_detail::full_points(tip_b, p1);
    const VecX Pm = rope_detail::full_points(0.5 * (tip_a + tip_b), 0.5 * (z.p + p1));
    const MatX G1 = rope_detail::constraint_jacobian(P1, N);
    const MatX Lam = rope_detail::constraint_force_hessian(lambda1, N);
    const double ks = stiffness_scale(), bs = damping_scale();
    const auto Lff = L_.bottomRightCorner(n3, n3);
    const auto Lf0 = L_.bottomLeftCorner(n3, 3);
    const auto Lamff = Lam.bottomRightCorner(n3, n3);
    const auto Lamf0 = Lam.bottomLeftCorner(n3, 3);

    StepInputJacobians out;
    out.d_p = MatX::Zero(4 * N, n3);
    out.d_p.topRows(n3) = -dt * (-ks * Lff + Lamff);
    out.d_p.bottomRows(N) = G1.rightCols(n3);

    out.d_v = MatX::Zero(4 * N, n3);
    out.d_v.topRows(n3) = -dt * (-ks * 0.5 * dt * Lff - bs * 0.5 * Lff + 0.25 * dt * Lamff);
    out.d_v.topRows(n3).diagonal() -= mass_;
    out.d_v.bottomRows(N) = 0.5 * dt * G1.rightCols(n3);

    out.d_tip_b = MatX::Zero(4 * N, 3);
    out.d_tip_b.topRows(n3) = -dt * (-ks * Lf0 - bs / dt * Lf0 + 0.5 * Lamf0);
    out.d_tip_b.bottomRows(N) = G1.leftCols(3);

    out.d_tip_a = MatX::Zero(4 * N, 3);
    out.d_tip_a.topRows(n3) = -dt * (bs / dt * Lf0 + 0.5 * Lamf0);
    return out;
  }

  /// Newton solve of one step of length dt. Returns nullopt when Newton does not converge.
  std::optional<RopeState> try_step(const RopeState& z, const Vec3& tip_a, const Vec3& tip_b, double dt,
                                    const NewtonOptions& opt = {}) const {
    const int N = this->N();
    VecX v1 = z.v;
    VecX lam = z.lambda.size() == N ? z.lambda : VecX::Zero(N);
    bool converged = false;
    for (int it = 0; it < opt.max_iterations; ++it) {
      const auto r = step_residual(z, tip_a, tip_b, dt, v1, lam);
      if (!std::isfinite(r.scaled_norm)) return std::nullopt;
      const bool small = r.scaled_norm <= opt.tolerance;
      VecX rhs(4 * N);
      rhs << r.dynamics, r.constraint;
      const MatX J = step_jacobian(z, tip_a, tip_b, dt, v1, lam);
      const VecX delta = J.partialPivLu().solve(-rhs);
      if (!delta.allFinite()) return std::nullopt;
      v1 += delta.head(3 * N);
      lam += delta.tail(N);
      // one polishing update past the tolerance drives the residual to round-off
      if (small) {
        converged = true;
        break;
      }
    }
    if (!converged) return std::nullopt;
    RopeState out;
    out.v = v1;
    out.p = z.p + 0.5 * dt * (z.v + v1);
    out.lambda = lam;
    return out;
  }

  /// Number of substeps used for one grid step (1 normally, `retry_substeps` after a failed solve).
  struct StepResult {
    RopeState state;
    int substeps = 1;
  };

  StepResult step(const RopeState& z, const Vec3& tip_a, const Vec3& tip_b, int step_index = 0,
                  const NewtonOptions& opt = {}) const {
    const double dt = params_.dt;
    if (auto s = try_step(z, tip_a, tip_b, dt, opt)) return {*s, 1};
    const int n = opt.retry_substeps;
    RopeState cur = z;
    for (int j = 0; j < n; ++j) {
      const Vec3 a = tip_a + (tip_b - tip_a) * (static_cast<double>(j) / n);
      const Vec3 b = tip_a + (tip_b - tip_a) * (static_cast<double>(j + 1) / n);
      auto s = try_step(cur, a, b, dt / n, opt);
      if (!s)
        throw NewtonDivergence("rope step " + std::to_string(step_index) + ": Newton did not converge", step_index);
      cur = *s;
    }
    return {cur, n};
  }

  /// Vertical chain hanging below the tip at rest, multipliers from the static force balance.
  RopeState static_hanging_state(const Vec3& tip) const {
    const int N = this->N();
    RopeState z;
    z.p.resize(3 * N);
    for (int i = 0; i < N; ++i) z.p.segment<3>(3 * i) = tip - Vec3(0.0, 0.0, params_.l * (i + 1));
    z.v = VecX::Zero(3 * N);
    const MatX G = rope_detail::constraint_jacobian(rope_detail::full_points(tip, z.p), N).rightCols(3 * N);
    // G^T lambda = -f  (bending forces vanish on the straight rope)
    z.lambda = (G * G.transpose()).ldlt().solve(-G * gravity_);
    return z;
  }

  VecX constraint_residual(const RopeState& z, const Vec3& tip) const {
    return rope_detail::constraints(rope_detail::full_points(tip, z.p), N(), params_.l);
  }

  /// Kinetic + gravitational + bending energy (tip treated as an external driver).
  double energy(const RopeState& z, const Vec3& tip) const {
    const VecX P = rope_detail::full_points(tip, z.p);
    const double kinetic = 0.5 * z.v.dot(mass_.cwiseProduct(z.v));
    const double potential = -gravity_.dot(z.p);
    const double bending = 0.5 * stiffness_scale() * P.dot(L_ * P);
    return kinetic + potential + bending;
  }

 private:
  RopeParams params_;
  MatX L_;
  double L_norm_ = 0.0;
  VecX mass_;
  VecX gravity_;
};

// --- free functions mirroring the operations -------------------------------------------------

inline VecX bending_forces(const RopeParams& params, const VecX& p, const VecX& v, const Vec3& p_tip,
                           const Vec3& v_tip) {
  return RopeModel(params).bending_forces(p, v, p_tip, v_tip);
}

inline RopeState static_hanging_state(const RopeParams& params, const Vec3& p_tip) {
  return RopeModel(params).static_hanging_state(p_tip);
}

/// One grid step. The tip velocity used by damping is (p_tip_next - p_tip_prev) / dt.
inline RopeState rope_step(const RopeParams& params, const RopeState& z, const Vec3& p_tip_prev,
                           const Vec3& p_tip_next) {
  return RopeModel(params).step(z, p_tip_prev, p_tip_next).state;
}

struct Rollout {
  std::vector<RopeState> states;  // states[k] at time k * dt
  std::vector<Vec3> tips;
  std::vector<int> substeps;      // substeps[k] used to reach states[k + 1]
  double dt = 0.0;

  int size() const { return static_cast<int>(states.size()); }
  double time(int k) const { return k * dt; }
};

inline Rollout rollout(const RopeModel& model, const RopeState& z0, const std::vector<Vec3>& tip_traj,
                       const NewtonOptions& opt = {}) {
  if (tip_traj.empty()) throw ConfigError("rollout: empty tip trajectory");
  Rollout r;
  r.dt = model.params().dt;
  r.tips = tip_traj;
  r.states.reserve(tip_traj.size());
  r.states.push_back(z0);
  for (std::size_t k = 0; k + 1 < tip_traj.size(); ++k) {
    auto s = model.step(r.states.back(), tip_traj[k], tip_traj[k + 1], static_cast<int>(k), opt);
    r.states.push_back(std::move(s.state));
    r.substeps.push_back(s.substeps);
  }
  return r;
}

inline Rollout rollout(const RopeParams& params, const RopeState& z0, const std::vector<Vec3>& tip_traj) {
  return rollout(RopeModel(params), z0, tip_traj);
}

/// Forward sensitivity accumulation through a converged rollout.
///
/// Parameters theta enter only through the tip positions: tip_derivative(k) returns d tip_k / d theta
/// (3 x P). The initial state translates rigidly with tip 0. The returned snapshots are
/// d[p_k; v_k]/d theta (6N x P) for each requested step index, in request order.
inline std::vector<MatX> accumulate_sensitivities(const RopeModel& model, const Rollout& roll,
                                                  const std::function<MatX(int)>& tip_derivative, int parameters,
                                                  const std::vector<int>& snapshot_steps) {
  const int N = model.N();
  const int n3 = 3 * N;
  const double dt = roll.dt;
  int last = 0;
  for (int s : snapshot_steps) {
    if (s < 0 || s >= roll.size()) throw ConfigError("sensitivity snapshot outside rollout");
    last = std::max(last, s);
  }

  std::vector<MatX> snaps(snapshot_steps.size());
  auto record = [&](int k, const MatX& S) {
    for (std::size_t i = 0; i < snapshot_steps.size(); ++i)
      if (snapshot_steps[i] == k) snaps[i] = S;
  };

  MatX S = MatX::Zero(2 * n3, parameters);
  MatX dtip_prev = tip_derivative(0);
  for (int i = 0; i < N; ++i) S.block(3 * i, 0, 3, parameters) = dtip_prev;
  record(0, S);

  RopeState sub_prev, sub_next;
  for (int k = 0; k < last; ++k) {
    const MatX dtip_next = tip_derivative(k + 1);
    const int n = roll.substeps[k];
    const double h = dt / n;
    const Vec3& ta = roll.tips[k];
    const Vec3& tb = roll.tips[k + 1];
    RopeState cur = roll.states[k];
    for (int j = 0; j < n; ++j) {
      const double wa = static_cast<double>(j) / n, wb = static_cast<double>(j + 1) / n;
      const Vec3 a = ta + (tb - ta) * wa;
      const Vec3 b = ta + (tb - ta) * wb;
      RopeState nxt;
      if (n == 1) {
        nxt = roll.states[k + 1];
      } else {
        auto s = model.try_step(cur, a, b, h);
        if (!s) throw NewtonDivergence("sensitivity replay failed", k);
        nxt = *s;
      }
      const MatX J = model.step_jacobian(cur, a, b, h, nxt.v, nxt.lambda);
      Eigen::PartialPivLU<MatX> lu(J);
      if (!(lu.rcond() > 1e-14)) throw SingularKKT("singular step Jacobian at step " + std::to_string(k), k);
      const auto D = model.step_input_jacobians(cur, a, b, h, nxt.v, nxt.lambda);
      const MatX da = dtip_prev * (1.0 - wa) + dtip_next * wa;
      const MatX db = dtip_prev * (1.0 - wb) + dtip_next * wb;
      const MatX rhs = D.d_p * S.topRows(n3) + D.d_v * S.bottomRows(n3) + D.d_tip_a * da + D.d_tip_b * db;
      const MatX dy = lu.solve(-rhs);
      MatX next(2 * n3, parameters);
      next.bottomRows(n3) = dy.topRows(n3);
      next.topRows(n3) = S.topRows(n3) + 0.5 * h * (S.bottomRows(n3) + dy.topRows(n3));
      S = std::move(next);
      cur = nxt;
    }
    dtip_prev = dtip_next;
    record(k + 1, S);
  }
  return snaps;
}

/// d[p; v](critical_index) / d tip_traj as a (6N) x (3 len) matrix. Columns are grouped per tip.
inline MatX linearize_rollout(const RopeModel& model, const Rollout& roll, int critical_index) {
  const int len = roll.size();
  const int P = 3 * len;
  auto tipd = [&](int k) {
    MatX d = MatX::Zero(3, P);
    d.block<3, 3>(0, 3 * k) = Mat3::Identity();
    return d;
  };
  return accumulate_sensitivities(model, roll, tipd, P, {critical_index}).front();
}

inline MatX linearize_rollout(const RopeParams& params, const RopeState& z0, const std::vector<Vec3>& tip_traj,
                              int critical_index) {
  RopeModel model(params);
  return linearize_rollout(model, rollout(model, z0, tip_traj), critical_index);
}

// --- export ------------------------------------------------------------------------------------

inline nlohmann::json vec_to_json(const VecX& v) {
  auto a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline VecX vec_from_json(const nlohmann::json& a) {
  VecX v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

}  // namespace taskilc
