// Huber loss family on squared errors, IRLS weights, and the predicted-cost
// to Huber-delta mapping used for reliability-aware bundle adjustment.

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ivba {

// 95th percentile of the chi-square distribution with 3 DOF, the inlier
// boundary for a stereo observation.
inline constexpr double kDeltaMaxStereo = 7.82;

// The piecewise Huber formula is continuous only when the branch switches at
// x = delta^2; kLiteral switches at x = delta and exists for comparison runs.
enum class HuberBranch { kContinuous, kLiteral };

namespace detail {
inline bool huber_inlier(double x, double delta, HuberBranch branch) {
  return branch == HuberBranch::kContinuous ? x < delta * delta : x < delta;
}
}  // namespace detail

// Huber loss of a squared error x. delta = 0 rejects the observation
// entirely (loss identically zero).
inline double huber_eval(double x, double delta,
                         HuberBranch branch = HuberBranch::kContinuous) {
  if (x < 0.0) throw std::domain_error("huber_eval: squared error must be >= 0");
  if (delta == 0.0) return 0.0;
  if (detail::huber_inlier(x, delta, branch)) return x;
  return 2.0 * delta * (std::sqrt(x) - 0.5 * delta);
}

// IRLS weight dL/dx. In [0, 1] for the continuous branch.
inline double huber_weight(double x, double delta,
                           HuberBranch branch = HuberBranch::kContinuous) {
  if (x < 0.0) throw std::domain_error("huber_weight: squared error must be >= 0");
  if (delta == 0.0) return 0.0;
  if (detail::huber_inlier(x, delta, branch)) return 1.0;
  return delta / std::sqrt(x);
}

// Maps a predicted cost c in [0, 1] to the per-observation Huber parameter
// delta(z) = ((1 - c) / (1 + c)) * delta_max. Inputs slightly outside [0, 1]
// are clamped (learned predictors may overshoot).
inline double delta_from_cost(double c_hat, double delta_max = kDeltaMaxStereo) {
  const double c = std::clamp(c_hat, 0.0, 1.0);
  return (1.0 - c) / (1.0 + c) * delta_max;
}

// Per-observation Huber parameter, bounded by delta_max.
struct LossParams {
  double delta = kDeltaMaxStereo;
  double delta_max = kDeltaMaxStereo;

  static LossParams from_cost(double c_hat, double delta_max = kDeltaMaxStereo) {
    return LossParams{delta_from_cost(c_hat, delta_max), delta_max};
  }

  void validate() const {
    if (delta_max <= 0.0) throw std::invalid_argument("LossParams: delta_max must be positive");
    if (delta < 0.0 || delta > delta_max) {
      throw std::invalid_argument("LossParams: delta must lie in [0, delta_max]");
    }
  }
};

// Isotropic per-axis measurement variance tied to the pyramid level at which
// a feature was extracted: sigma2 = base_sigma^2 * scale_factor^(2 * level).
struct ObservationCovariance {
  int level = 0;
  double sigma2 = 1.0;

  static ObservationCovariance for_level(int level, double base_sigma = 1.0,
                                         double scale_factor = 1.2) {
    ObservationCovariance c;
    c.level = level;
    c.sigma2 = base_sigma * base_sigma * std::pow(scale_factor, 2.0 * level);
    return c;
  }
};

}  // namespace ivba
