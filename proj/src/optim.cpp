#include "ctdg/optim.hpp"

#include <cmath>

namespace ctdg {

void adam_step(std::span<Parameter* const> params, const AdamConfig& config) {
  for (Parameter* p : params) {
    p->step_count += 1;
    const Tensor& grad = p->value.grad();
    const bool has_grad = !grad.empty();
    const double t = static_cast<double>(p->step_count);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    Tensor& value = p->value.mutable_value();
    for (int64_t i = 0; i < value.numel(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      p->adam_m[i] = config.beta1 * p->adam_m[i] + (1.0 - config.beta1) * g;
      p->adam_v[i] = config.beta2 * p->adam_v[i] + (1.0 - config.beta2) * g * g;
      const double m_hat = p->adam_m[i] / c1;
      const double v_hat = p->adam_v[i] / c2;
      value[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

}  // namespace ctdg
