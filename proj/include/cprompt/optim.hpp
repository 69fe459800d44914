#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cprompt/core.hpp"

namespace cprompt::optim {

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-5f;
};

/// Adam with decoupled weight decay: the decay term shrinks the parameter
/// directly (p -= lr * wd * p) instead of being folded into the gradient.
/// Holds one pair of moment buffers per registered parameter and nothing else.
class AdamW {
 public:
  AdamW(AdamWConfig config, std::vector<Tensor*> params);

  // Applies one update. grads[i] pairs with params[i]; `lr` overrides the
  // configured learning rate when positive (used by schedules).
  void step(std::span<const Tensor* const> grads, float lr = -1.0f);

  std::uint64_t steps_taken() const { return t_; }
  std::size_t state_tensor_count() const { return m_.size() + v_.size(); }
  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t t_ = 0;
};

// Rescales the gradients in place so their joint L2 norm is at most
// `max_norm`. Returns the norm measured before clipping.
double clip_global_norm(std::span<Tensor* const> grads, double max_norm);

}  // namespace cprompt::optim
