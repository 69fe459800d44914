#include "cprompt/optim.hpp"

#include <cmath>

namespace cprompt::optim {

AdamW::AdamW(AdamWConfig config, std::vector<Tensor*> params)
    : config_(config), params_(std::move(params)) {
  if (!(config_.lr > 0.0f)) throw ConfigError("AdamW: learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamW::step(std::span<const Tensor* const> grads, float lr) {
  if (grads.size() != params_.size()) {
    throw ContractError("AdamW: got " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params_.size()) + " parameters");
  }
  ++t_;
  const float rate = lr > 0.0f ? lr : config_.lr;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(t_));
  const float step_size = static_cast<float>(rate / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float decay = 1.0f - rate * config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    const Tensor& g = *grads[i];
    if (g.shape() != p.shape()) {
      throw ShapeError("AdamW: gradient " + shape_string(g.shape()) + " for parameter " +
                       shape_string(p.shape()));
    }
    float* pd = p.data();
    float* md = m_[i].data();
    float* vd = v_[i].data();
    const float* gd = g.data();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      md[j] = config_.beta1 * md[j] + (1.0f - config_.beta1) * gd[j];
      vd[j] = config_.beta2 * vd[j] + (1.0f - config_.beta2) * gd[j] * gd[j];
      const float denom = std::sqrt(vd[j]) * inv_sqrt_bc2 + config_.eps;
      pd[j] = pd[j] * decay - step_size * md[j] / denom;
    }
  }
}

double clip_global_norm(std::span<Tensor* const> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor* g : grads)
    for (float v : g->values()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float factor = static_cast<float>(max_norm / norm);
    for (Tensor* g : grads)
      for (float& v : g->values()) v *= factor;
  }
  return norm;
}

}  // namespace cprompt::optim
