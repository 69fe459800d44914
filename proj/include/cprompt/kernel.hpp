#pragma once

// Dense f32 kernels. Every reduction runs in a fixed ascending order so that
// results are bitwise reproducible on one platform.

#include <cstddef>
#include <cstdint>
#include <span>

#include "cprompt/core.hpp"

namespace cprompt::kernel {

inline constexpr float kLayerNormEps = 1e-5f;

// c[m x n] += a[m x p] * b[p x n], raw row-major buffers. For each output
// element the products are added for k = 0, 1, ..., p-1 in that order.
void gemm_accumulate(const float* a, const float* b, float* c, std::size_t m, std::size_t p,
                     std::size_t n);

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a^T * b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor row_softmax(const Tensor& x);

// Per-row normalisation statistics kept for the backward pass.
struct LayerNormStats {
  std::vector<float> mean;
  std::vector<float> rstd;
};

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = kLayerNormEps, LayerNormStats* stats = nullptr);

Tensor gelu(const Tensor& x);
float gelu_grad(float x);

// Mean over rows of -log softmax(logits[t])[targets[t]], in nats.
double nll_next_token(const Tensor& logits, std::span<const std::int32_t> targets);

// log-probability of `target` under softmax(logits row).
double log_prob(std::span<const float> logits, std::int32_t target);

}  // namespace cprompt::kernel
