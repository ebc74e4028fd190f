#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "pnml/errors.hpp"
#include "pnml/model.hpp"

namespace pnml {

/// Black-box FGSM: gradients come from `source_model`, not the evaluated model.
struct AttackSpec {
  double epsilon = 0.0;
  const ModelParams* source_model = nullptr;
  double pixel_lo = -1.0;
  double pixel_hi = 1.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw UsageError("attack epsilon must be >= 0");
    if (!(pixel_lo < pixel_hi)) throw UsageError("attack pixel range is empty");
    if (source_model == nullptr) throw UsageError("attack has no source model");
  }
};

/// x + epsilon * sign(grad_x loss(source, x, y)), clamped to the pixel range.
/// sign(0) = 0. epsilon = 0 returns x unchanged.
inline Vector fgsm(const AttackSpec& spec, std::span<const double> x, Label y) {
  spec.validate();
  const Vector g = input_gradient(*spec.source_model, x, y);
  Vector adv(x.begin(), x.end());
  if (spec.epsilon == 0.0) return adv;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    double v = std::clamp(x[i] + spec.epsilon * s, spec.pixel_lo, spec.pixel_hi);
    // Rounded sums can overshoot epsilon by an ulp; step back toward x.
    while (std::abs(v - x[i]) > spec.epsilon) v = std::nextafter(v, x[i]);
    adv[i] = v;
  }
  return adv;
}

}  // namespace pnml
