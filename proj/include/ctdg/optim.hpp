#pragma once

#include <span>

#include "ctdg/nn.hpp"

namespace ctdg {

struct AdamConfig {
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update; a parameter without a gradient is updated
/// as if its gradient were zero.
void adam_step(std::span<Parameter* const> params, const AdamConfig& config = {});

}  // namespace ctdg
