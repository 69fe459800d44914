#include "cprompt/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cprompt::kernel {

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 64;

// Full 4x64 tile; the compiler keeps the accumulator block in vector registers.
void gemm_tile(const float* a, const float* b, float* c, std::size_t p, std::size_t n) {
  float acc[kTileRows][kTileCols];
  for (std::size_t r = 0; r < kTileRows; ++r)
    for (std::size_t j = 0; j < kTileCols; ++j) acc[r][j] = c[r * n + j];
  for (std::size_t k = 0; k < p; ++k) {
    const float* brow = b + k * n;
    const float a0 = a[0 * p + k];
    const float a1 = a[1 * p + k];
    const float a2 = a[2 * p + k];
    const float a3 = a[3 * p + k];
    for (std::size_t j = 0; j < kTileCols; ++j) {
      const float bv = brow[j];
      acc[0][j] += a0 * bv;
      acc[1][j] += a1 * bv;
      acc[2][j] += a2 * bv;
      acc[3][j] += a3 * bv;
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r)
    for (std::size_t j = 0; j < kTileCols; ++j) c[r * n + j] = acc[r][j];
}

void gemm_edge(const float* a, const float* b, float* c, std::size_t rows, std::size_t cols,
               std::size_t p, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* crow = c + r * n;
    for (std::size_t k = 0; k < p; ++k) {
      const float av = a[r * p + k];
      const float* brow = b + k * n;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

}  // namespace

void gemm_accumulate(const float* a, const float* b, float* c, std::size_t m, std::size_t p,
                     std::size_t n) {
  for (std::size_t i0 = 0; i0 < m; i0 += kTileRows) {
    const std::size_t rows = std::min(kTileRows, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kTileCols) {
      const std::size_t cols = std::min(kTileCols, n - j0);
      if (rows == kTileRows && cols == kTileCols) {
        gemm_tile(a + i0 * p, b + j0, c + i0 * n + j0, p, n);
      } else {
        gemm_edge(a + i0 * p, b + j0, c + i0 * n + j0, rows, cols, p, n);
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  gemm_accumulate(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  Tensor t = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.data()[j * r + i] = a.data()[i * c + j];
  return t;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions differ, " + shape_string(a.shape()) +
                     "^T x " + shape_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

Tensor row_softmax(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const float* in = x.data() + r * n;
    float* out = y.data() + r * n;
    float mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    float sum = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    const float inv = 1.0f / sum;
    for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps,
                  LayerNormStats* stats) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias size does not match row width " +
                     std::to_string(d));
  }
  if (!(eps > 0.0f)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t m = x.rows();
  Tensor y(x.shape());
  if (stats) {
    stats->mean.assign(m, 0.0f);
    stats->rstd.assign(m, 0.0f);
  }
  const float inv_d = 1.0f / static_cast<float>(d);
  for (std::size_t r = 0; r < m; ++r) {
    const float* in = x.data() + r * d;
    float* out = y.data() + r * d;
    float sum = 0.0f;
    for (std::size_t j = 0; j < d; ++j) sum += in[j];
    const float mean = sum * inv_d;
    float sq = 0.0f;
    for (std::size_t j = 0; j < d; ++j) {
      const float c = in[j] - mean;
      sq += c * c;
    }
    const float rstd = 1.0f / std::sqrt(sq * inv_d + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = (in[j] - mean) * rstd * gain[j] + bias[j];
    if (stats) {
      stats->mean[r] = mean;
      stats->rstd[r] = rstd;
    }
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float v = x[i];
    y[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  return y;
}

float gelu_grad(float x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
  const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
  return cdf + x * pdf;
}

double log_prob(std::span<const float> logits, std::int32_t target) {
  float mx = logits[0];
  for (float v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(logits[static_cast<std::size_t>(target)]) - mx - std::log(sum);
}

double nll_next_token(const Tensor& logits, std::span<const std::int32_t> targets) {
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("nll_next_token: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " logit rows");
  }
  if (n == 0) throw ShapeError("nll_next_token: no positions");
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto target = targets[t];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      throw IndexError("nll_next_token: target " + std::to_string(target) +
                       " outside vocabulary of size " + std::to_string(v));
    }
    total -= log_prob(logits.row(t), target);
  }
  return total / static_cast<double>(n);
}

}  // namespace cprompt::kernel
