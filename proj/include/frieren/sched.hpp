#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "frieren/errors.hpp"

namespace frieren {

enum class ScheduleKind { kFedSwaLinear, kPolynomial, kConstant };

inline const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kFedSwaLinear: return "fedswa-linear";
    case ScheduleKind::kPolynomial: return "polynomial";
    case ScheduleKind::kConstant: return "constant";
  }
  return "?";
}

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kPolynomial;
  double base_lr = 5e-5;   // eta_0 (linear) or eta_l (polynomial)
  double delta = 0.1;      // final factor of the FedSWA linear decay
  double power = 0.9;      // p
  double floor = 0.0;      // rho
  std::size_t horizon = 1; // N local iterations or T rounds
};

/// Rejects out-of-range schedule parameters. Powers below 1 are accepted down to 0.5.
inline void validate(const ScheduleSpec& s) {
  if (!(s.base_lr > 0.0) || !std::isfinite(s.base_lr)) throw ConfigError("schedule: base learning rate must be positive");
  if (!(s.delta >= 0.0 && s.delta <= 1.0)) throw ConfigError("schedule: delta must lie in [0, 1]");
  if (!(s.power >= 0.5) || !std::isfinite(s.power)) throw ConfigError("schedule: power must be >= 0.5");
  if (!(s.floor >= 0.0 && s.floor <= 1.0)) throw ConfigError("schedule: rho must lie in [0, 1]");
  if (s.horizon == 0) throw ConfigError("schedule: horizon must be positive");
}

/// eta_i = eta_0 (1 - i/N) + (i/N) delta eta_0 for local iteration i in [0, N).
inline double fedswa_lr(const ScheduleSpec& s, std::size_t i) {
  if (i >= s.horizon)
    throw std::out_of_range("fedswa_lr: iteration " + std::to_string(i) + " outside [0, " +
                            std::to_string(s.horizon) + ")");
  const double f = static_cast<double>(i) / static_cast<double>(s.horizon);
  return s.base_lr * (1.0 - f) + f * s.delta * s.base_lr;
}

/// eta = eta_l [ (1 - s)^p + rho (1 - (1 - s)^p) ] at progress fraction s in [0, 1].
inline double poly_lr(const ScheduleSpec& s, double progress) {
  if (!(progress >= 0.0 && progress <= 1.0))
    throw std::out_of_range("poly_lr: progress must lie in [0, 1]");
  const double q = std::pow(1.0 - progress, s.power);
  return s.base_lr * (q + s.floor * (1.0 - q));
}

/// Linear decay lambda_0 (1 - t/T) of the prior-distillation weight.
inline double lambda_mclip(std::size_t t, std::size_t total, double lambda0) {
  if (total == 0) return lambda0;
  if (t > total) throw std::out_of_range("lambda_mclip: round beyond horizon");
  return lambda0 * (1.0 - static_cast<double>(t) / static_cast<double>(total));
}

}  // namespace frieren
