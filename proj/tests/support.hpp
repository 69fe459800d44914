#pragma once

// Shared helpers for the test binaries: seeded random tensors, tiny model
// configurations and an independent double-precision reference forward pass.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "cprompt/compress.hpp"
#include "cprompt/model.hpp"

namespace testing_support {

using cprompt::Tensor;
using Matrix = std::vector<std::vector<double>>;

inline Tensor random_tensor(cprompt::Shape shape, std::uint64_t seed, float scale = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, scale);
  for (float& v : t.values()) v = normal(rng);
  return t;
}

inline Tensor random_uniform(cprompt::Shape shape, std::uint64_t seed, float lo, float hi) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  for (float& v : t.values()) v = u(rng);
  return t;
}

inline Tensor identity(std::size_t n) {
  Tensor h = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) h.at(i, i) = 1.0f;
  return h;
}

// Symmetric positive definite matrix A A^T / n + 0.1 I.
inline Tensor random_spd(std::size_t n, std::uint64_t seed) {
  const Tensor a = random_tensor({n, n}, seed);
  Tensor h = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += static_cast<double>(a.at(i, k)) * a.at(j, k);
      h.at(i, j) = static_cast<float>(s / static_cast<double>(n) + (i == j ? 0.1 : 0.0));
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) h.at(j, i) = h.at(i, j);
  return h;
}

// Calibration activations with correlated features: [samples x cols].
inline Tensor correlated_activations(std::size_t samples, std::size_t cols, std::uint64_t seed) {
  const Tensor z = random_tensor({samples, cols}, seed);
  const Tensor mix = random_tensor({cols, cols}, seed + 7777, 1.0f / std::sqrt(static_cast<float>(cols)));
  Tensor a = Tensor::matrix(samples, cols);
  for (std::size_t i = 0; i < samples; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double s = z.at(i, j);
      for (std::size_t k = 0; k < cols; ++k) s += 2.0 * z.at(i, k) * mix.at(k, j);
      a.at(i, j) = static_cast<float>(s);
    }
  return a;
}

// Codes of the nearest grid level for every entry, found by trying every code
// against a grid fitted to each group from its min and max (0 always inside).
inline std::vector<std::uint32_t> nearest_grid_codes(const Tensor& w, int bits, std::size_t group) {
  const int levels = 1 << bits;
  std::vector<std::uint32_t> out(w.numel());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t g0 = 0; g0 < w.cols(); g0 += group) {
      const std::size_t g1 = std::min(w.cols(), g0 + group);
      float lo = 0.0f, hi = 0.0f;
      for (std::size_t c = g0; c < g1; ++c) {
        lo = std::min(lo, w.at(r, c));
        hi = std::max(hi, w.at(r, c));
      }
      float scale = (hi - lo) / static_cast<float>(levels - 1);
      if (scale == 0.0f) scale = 1.0f;
      const float zp = std::clamp(std::round(-lo / scale), 0.0f, static_cast<float>(levels - 1));
      for (std::size_t c = g0; c < g1; ++c) {
        int best = 0;
        double best_err = 1e300;
        for (int q = 0; q < levels; ++q) {
          const double err = std::abs(static_cast<double>(w.at(r, c)) - static_cast<double>(scale) * (q - zp));
          if (err < best_err) {
            best_err = err;
            best = q;
          }
        }
        out[r * w.cols() + c] = static_cast<std::uint32_t>(best);
      }
    }
  return out;
}

// Per-block magnitude pruning across all rows: block [i1, i2) loses the
// quota(i2) - quota(i1) smallest magnitudes, ties by (row, col).
inline std::vector<bool> blockwise_magnitude_mask(const Tensor& w, double sparsity, std::size_t block) {
  const std::size_t rows = w.rows(), cols = w.cols();
  std::vector<bool> keep(rows * cols, true);
  for (std::size_t i1 = 0; i1 < cols; i1 += block) {
    const std::size_t i2 = std::min(cols, i1 + block);
    const std::size_t quota =
        cprompt::compress::prune_quota(sparsity, rows * i2) - cprompt::compress::prune_quota(sparsity, rows * i1);
    std::vector<std::pair<float, std::size_t>> entries;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = i1; c < i2; ++c) entries.push_back({std::abs(w.at(r, c)), r * cols + c});
    std::stable_sort(entries.begin(), entries.end());
    for (std::size_t i = 0; i < quota; ++i) keep[entries[i].second] = false;
  }
  return keep;
}

// One paired trial of an OBS-compensated compressor against its uncompensated
// baseline on a random 32x32 layer: {obs error, baseline error}. `bits` = 0
// selects pruning at `sparsity`, otherwise quantisation at `bits`.
inline std::pair<double, double> compensation_trial(std::uint64_t seed, double sparsity, int bits) {
  namespace cc = cprompt::compress;
  const std::size_t n = 32;
  const Tensor w = random_tensor({n, n}, seed * 2 + 1);
  const Tensor a = correlated_activations(4 * n, n, seed * 2 + 2);
  const Tensor h = cc::damped_hessian(a, 0.01);
  Tensor x = Tensor::matrix(n, a.rows());  // [cols x samples]
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) x.at(j, i) = a.at(i, j);
  cc::CompressedLinear obs, base;
  if (bits == 0) {
    obs = cc::prune_obs(w, h, sparsity);
    base = cc::prune_magnitude(w, sparsity);
  } else {
    obs = cc::quantize_obs(w, h, bits, 32);
    base = cc::quantize_rtn(w, bits, 32);
  }
  return {cc::reconstruction_error(w, obs, x), cc::reconstruction_error(w, base, x)};
}

inline cprompt::model::ModelConfig tiny_config(std::size_t d = 16, std::size_t layers = 2,
                                               std::size_t heads = 2, std::size_t ff = 32,
                                               std::size_t vocab = 32, std::size_t positions = 48) {
  cprompt::model::ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.ff_dim = ff;
  c.max_positions = positions;
  c.seed = 3;
  return c;
}

// Weights with larger random values than the default init so that every
// parameter visibly matters in gradient checks.
inline cprompt::model::ModelWeights perturbed_model(const cprompt::model::ModelConfig& c,
                                                    std::uint64_t seed, float scale = 0.3f) {
  auto w = cprompt::model::init_model(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, scale);
  w.for_each([&](const std::string& name, Tensor& t) {
    const bool gain = name.find("gain") != std::string::npos;
    for (float& v : t.values()) v = (gain ? 1.0f : 0.0f) + normal(rng);
  });
  return w;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = static_cast<std::int32_t>(rng() % vocab);
  return t;
}

// ---- reference transformer in double precision -------------------------------------

inline Matrix to_matrix(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Matrix mul_nt(const Matrix& a, const Tensor& w) {  // a * w^T
  Matrix out(a.size(), std::vector<double>(w.rows(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double s = 0.0;
      for (std::size_t k = 0; k < w.cols(); ++k) s += a[i][k] * w.at(o, k);
      out[i][o] = s;
    }
  return out;
}

inline Matrix layer_norm_ref(const Matrix& x, const Tensor& g, const Tensor& b) {
  Matrix out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    const double r = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = (x[i][j] - mean) * r * g[j] + b[j];
  }
  return out;
}

inline Matrix attention_ref(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads) {
  const std::size_t T = q.size();
  const std::size_t d = q[0].size();
  const std::size_t dh = d / heads;
  Matrix mix(T, std::vector<double>(d, 0.0));
  for (std::size_t head = 0; head < heads; ++head) {
    const std::size_t o = head * dh;
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < dh; ++e) dot += q[i][o + e] * k[j][o + e];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t e = 0; e < dh; ++e) mix[i][o + e] += s[j] / z * v[j][o + e];
    }
  }
  return mix;
}

inline double gelu_ref(double u) { return 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0))); }

// Logits for the data positions, computed straight from the definition.
inline Matrix reference_logits(const cprompt::model::ModelWeights& w, std::span<const std::int32_t> tokens,
                               const Matrix* prompt = nullptr) {
  const auto& c = w.config;
  const std::size_t d = c.embed_dim;
  const std::size_t k = prompt ? prompt->size() : 0;
  const std::size_t n = tokens.size();
  Matrix x;
  if (prompt) x = *prompt;
  for (auto t : tokens) {
    std::vector<double> row(d);
    for (std::size_t j = 0; j < d; ++j) row[j] = w.token_embedding.at(static_cast<std::size_t>(t), j);
    x.push_back(row);
  }
  for (std::size_t i = 0; i < k + n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] += w.position_embedding.at(i, j);

  const std::size_t T = k + n;
  for (const auto& l : w.layers) {
    const Matrix h = layer_norm_ref(x, l.ln1_gain, l.ln1_bias);
    const Matrix q = mul_nt(h, l.wq), kk = mul_nt(h, l.wk), v = mul_nt(h, l.wv);
    const Matrix mix = attention_ref(q, kk, v, c.n_heads);
    const Matrix a = mul_nt(mix, l.wo);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += a[i][j];
    const Matrix h2 = layer_norm_ref(x, l.ln2_gain, l.ln2_bias);
    Matrix up = mul_nt(h2, l.w_up);
    for (auto& r : up)
      for (auto& u : r) u = gelu_ref(u);
    const Matrix down = mul_nt(up, l.w_down);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += down[i][j];
  }
  const Matrix hf = layer_norm_ref(x, w.final_gain, w.final_bias);
  const Matrix data(hf.begin() + static_cast<std::ptrdiff_t>(k), hf.end());
  return mul_nt(data, w.token_embedding);
}

// Mean next-token NLL over positions 1..n-1.
inline double reference_nll(const cprompt::model::ModelWeights& w, std::span<const std::int32_t> tokens,
                            const Matrix* prompt = nullptr) {
  const Matrix logits = reference_logits(w, tokens, prompt);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    double mx = -1e300;
    for (double v : logits[t]) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits[t]) z += std::exp(v - mx);
    total -= logits[t][static_cast<std::size_t>(tokens[t + 1])] - mx - std::log(z);
  }
  return total / static_cast<double>(tokens.size() - 1);
}

}  // namespace testing_support
