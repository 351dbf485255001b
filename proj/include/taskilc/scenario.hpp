#pragma once

// Reference throwing motion and reachable variations of it, used to synthesize demonstrations.

#include <random>

#include "taskilc/curvekit.hpp"
#include "taskilc/demo_io.hpp"
#include "taskilc/plant.hpp"
#include "taskilc/rng.hpp"

namespace taskilc {

inline constexpr double kReferenceDuration = 0.7;
inline constexpr double kReferenceBaseHeight = 0.95;

/// Upward, twisting swing of the arm that flings the hanging rope over the hand. Starts and ends
/// at rest; stays inside the default joint limits.
inline CommandSpline reference_throw(double duration = kReferenceDuration) {
  ConfigVec a, b;
  a << 0.0, 0.6, 0.0, 1.4, 0.0, 0.6, 0.0, 0.0, 0.0, kReferenceBaseHeight;
  b << 0.8, -0.3, 0.3, 0.5, 0.5, -0.3, 0.0, 0.0, 0.0, kReferenceBaseHeight;
  constexpr std::array<double, kKnots> s = {0.0, 0.0, 0.05, 0.3, 0.7, 0.95, 1.0, 1.0};
  CommandSpline c;
  c.duration = duration;
  for (int j = 0; j < kKnots; ++j) c.knots.col(j) = a + (b - a) * s[j];
  return c;
}

/// Random change of the interior arm knots (2..5) with the given standard deviation in rad. The
/// end knots and the base are untouched, so rest-to-rest boundary conditions survive.
inline CommandSpline perturb_command(const CommandSpline& c, double std_rad, std::uint64_t seed) {
  auto rng = make_stream(seed, "command-perturbation");
  std::normal_distribution<double> g(0.0, std_rad);
  CommandSpline out = c;
  for (int ch = 0; ch < kArmJoints; ++ch)
    for (int j = 2; j <= 5; ++j) out.knots(ch, j) += g(rng);
  return out;
}

inline constexpr double kDemoDuration = 0.55;
inline constexpr double kDemoCriticalFraction = 0.7;

/// Plant stand-in for the human demonstrator: the same rope, an exact "servo" and no fault checks.
inline PlantConfig demonstrator(const PlantConfig& plant) {
  PlantConfig h = plant;
  h.servo_tau = 0.0;
  h.fault_tolerance = 1e6;
  return h;
}

/// Demonstration of a quick reference throw captured on `plant`'s rope, run through timing
/// selection and cropping like a recorded capture.
inline Demonstration standard_demonstration(const ChainSpec& chain, const PlantConfig& plant, std::uint64_t seed,
                                            double duration = kDemoDuration,
                                            double t_c_fraction = kDemoCriticalFraction) {
  const RawCapture raw = synthesize_demo(chain, reference_throw(duration), demonstrator(plant), t_c_fraction, seed);
  const TimingResult t = select_timing(raw);
  return build_demonstration(raw, t.t0, t.t_f, raw.t_c);
}

inline constexpr double kTargetCriticalTime = 0.5;  // s into the reference throw

/// Reachable target: a perturbed reference throw executed on the model itself, recorded noise-free.
inline Demonstration target_demonstration(const ChainSpec& chain, const RopeParams& model, std::uint64_t seed,
                                          double perturbation = 0.05, double t_c = kTargetCriticalTime) {
  const CommandSpline target = perturb_command(reference_throw(), perturbation, seed);
  const auto m = execute_trial(chain, target, PlantConfig::ideal(model), seed);
  return demonstration_from_trial(chain, m, t_c);
}

/// Robot plant used for the mismatch experiments: rope stiffness and damping doubled, 20 ms servo lag.
inline PlantConfig mismatched_plant(const RopeParams& model) {
  PlantConfig p;
  p.rope = model;
  p.rope.k *= 2.0;
  p.rope.b *= 2.0;
  p.servo_tau = 0.02;
  return p;
}

}  // namespace taskilc
