#include "cprompt/compress.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cprompt/digest.hpp"
#include "cprompt/graph.hpp"
#include "cprompt/kernel.hpp"

namespace cprompt::compress {

std::string method_name(Method m) {
  switch (m) {
    case Method::none: return "none";
    case Method::magnitude_prune: return "magnitude_prune";
    case Method::obs_prune: return "obs_prune";
    case Method::rtn_quant: return "rtn_quant";
    case Method::obs_quant: return "obs_quant";
    case Method::joint: return "joint";
  }
  return "none";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::none, Method::magnitude_prune, Method::obs_prune, Method::rtn_quant,
                   Method::obs_quant, Method::joint}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown compression method '" + name + "'");
}

bool method_prunes(Method m) {
  return m == Method::magnitude_prune || m == Method::obs_prune || m == Method::joint;
}

bool method_quantizes(Method m) {
  return m == Method::rtn_quant || m == Method::obs_quant || m == Method::joint;
}

namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 8) throw ConfigError("quantization bits must be in [2, 8], got " + std::to_string(bits));
}

void check_sparsity(double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw ConfigError("sparsity must be in [0, 1), got " + std::to_string(sparsity));
  }
}

std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g%%", fraction * 100.0);
  return buf;
}

}  // namespace

void CompressionSpec::validate() const {
  if (method_prunes(method)) {
    check_sparsity(sparsity);
  } else if (sparsity != 0.0) {
    throw ConfigError("compression spec: sparsity set for non-pruning method " + method_name(method));
  }
  if (method_quantizes(method)) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
      throw ConfigError("compression spec: bits must be one of 2, 3, 4, 8");
    }
    if (group_size == 0) throw ConfigError("compression spec: group_size must be >= 1");
  } else if (bits != 0) {
    throw ConfigError("compression spec: bits set for non-quantizing method " + method_name(method));
  }
  if (method == Method::joint && (bits == 0 || sparsity <= 0.0)) {
    throw ConfigError("compression spec: joint needs both sparsity and bits");
  }
  if (block_size == 0) throw ConfigError("compression spec: block_size must be >= 1");
  if (!(damping >= 0.0)) throw ConfigError("compression spec: damping must be >= 0");
  if (method == Method::obs_prune || method == Method::obs_quant || method == Method::joint) {
    if (calib.n_sequences < 1 || calib.seq_len < 2) {
      throw ConfigError("compression spec: calibration needs n_sequences >= 1 and seq_len >= 2");
    }
  }
}

std::string CompressionSpec::label() const {
  const std::string b = std::to_string(bits) + "bit";
  switch (method) {
    case Method::none: return "full";
    case Method::magnitude_prune: return "magnitude-" + percent(sparsity);
    case Method::obs_prune: return "sparse-" + percent(sparsity);
    case Method::rtn_quant: return "rtn-" + b;
    case Method::obs_quant: return b;
    case Method::joint: return "sparse-" + percent(sparsity) + "+" + b;
  }
  return "full";
}

std::size_t prune_quota(double sparsity, std::size_t count) {
  check_sparsity(sparsity);
  const double exact = sparsity * static_cast<double>(count);
  // Guard against representation error when sparsity * count is integral.
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

// ---- CompressedLinear ------------------------------------------------------------

bool CompressedLinear::kept(std::size_t r, std::size_t c) const {
  if (!mask) return true;
  return ((*mask)[r * mask_row_bytes() + c / 8] >> (c % 8)) & 1u;
}

std::uint32_t CompressedLinear::code(std::size_t r, std::size_t c) const {
  const QuantPayload& q = *quant;
  const std::uint8_t* row = q.codes.data() + r * q.row_bytes(cols);
  const std::size_t bit0 = c * static_cast<std::size_t>(q.bits);
  std::uint32_t v = 0;
  for (int b = 0; b < q.bits; ++b) {
    const std::size_t bit = bit0 + static_cast<std::size_t>(b);
    v |= static_cast<std::uint32_t>((row[bit / 8] >> (bit % 8)) & 1u) << b;
  }
  return v;
}

float CompressedLinear::scale(std::size_t r, std::size_t c) const {
  return quant->scales[r * quant->groups_per_row + c / quant->group_size];
}

std::uint8_t CompressedLinear::zero_point(std::size_t r, std::size_t c) const {
  return quant->zero_points[r * quant->groups_per_row + c / quant->group_size];
}

std::size_t CompressedLinear::masked_count() const {
  if (!mask) return 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) n += kept(r, c) ? 0 : 1;
  return n;
}

std::string CompressedLinear::compute_fingerprint() const {
  Sha256 h;
  h.update_u64(rows).update_u64(cols);
  h.update_u64(values ? 1 : 0);
  if (values) h.update(*values);
  h.update_u64(mask ? 1 : 0);
  if (mask) h.update(mask->data(), mask->size());
  h.update_u64(quant ? 1 : 0);
  if (quant) {
    h.update_u64(static_cast<std::uint64_t>(quant->bits)).update_u64(quant->group_size);
    h.update(quant->codes.data(), quant->codes.size());
    h.update(quant->scales.data(), quant->scales.size() * sizeof(float));
    h.update(quant->zero_points.data(), quant->zero_points.size());
  }
  const Digest d = h.finish();
  return to_hex(d);
}

void CompressedLinear::seal() { fingerprint = compute_fingerprint(); }

// ---- quantisation grid -------------------------------------------------------------

GroupGrid fit_group_grid(std::span<const float> values, int bits) {
  check_bits(bits);
  GroupGrid g;
  g.max_code = (1 << bits) - 1;
  float lo = 0.0f;
  float hi = 0.0f;
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    g.scale = 1.0f;
    g.zero_point = 0;
    return g;
  }
  g.scale = (hi - lo) / static_cast<float>(g.max_code);
  const float zp = std::round(-lo / g.scale);
  g.zero_point = static_cast<std::uint8_t>(std::clamp(zp, 0.0f, static_cast<float>(g.max_code)));
  return g;
}

std::uint32_t quantize_value(float w, const GroupGrid& grid) {
  const float q = std::round(w / grid.scale) + static_cast<float>(grid.zero_point);
  return static_cast<std::uint32_t>(std::clamp(q, 0.0f, static_cast<float>(grid.max_code)));
}

float dequantize_value(std::uint32_t code, const GroupGrid& grid) {
  return grid.scale * (static_cast<float>(code) - static_cast<float>(grid.zero_point));
}

namespace {

class PayloadWriter {
 public:
  PayloadWriter(std::size_t rows, std::size_t cols, int bits, std::size_t group_size)
      : cols_(cols) {
    q_.bits = bits;
    q_.group_size = group_size;
    q_.groups_per_row = (cols + group_size - 1) / group_size;
    q_.codes.assign(rows * q_.row_bytes(cols), 0);
    q_.scales.assign(rows * q_.groups_per_row, 1.0f);
    q_.zero_points.assign(rows * q_.groups_per_row, 0);
  }

  void set_grid(std::size_t r, std::size_t group, const GroupGrid& g) {
    q_.scales[r * q_.groups_per_row + group] = g.scale;
    q_.zero_points[r * q_.groups_per_row + group] = g.zero_point;
  }

  void set_code(std::size_t r, std::size_t c, std::uint32_t code) {
    std::uint8_t* row = q_.codes.data() + r * q_.row_bytes(cols_);
    const std::size_t bit0 = c * static_cast<std::size_t>(q_.bits);
    for (int b = 0; b < q_.bits; ++b) {
      const std::size_t bit = bit0 + static_cast<std::size_t>(b);
      const auto m = static_cast<std::uint8_t>(1u << (bit % 8));
      if ((code >> b) & 1u) {
        row[bit / 8] |= m;
      } else {
        row[bit / 8] &= static_cast<std::uint8_t>(~m);
      }
    }
  }

  QuantPayload take() { return std::move(q_); }

 private:
  std::size_t cols_;
  QuantPayload q_;
};

std::vector<std::uint8_t> pack_mask(const std::vector<std::uint8_t>& keep, std::size_t rows,
                                    std::size_t cols) {
  const std::size_t rb = (cols + 7) / 8;
  std::vector<std::uint8_t> bits(rows * rb, 0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if (keep[r * cols + c]) bits[r * rb + c / 8] |= static_cast<std::uint8_t>(1u << (c % 8));
  return bits;
}

void require_matrix(const Tensor& w, const char* what) {
  if (w.rank() != 2) throw ShapeError(std::string(what) + ": weight must be a matrix");
}

// Indices of the `quota` smallest scores, ties broken by position (which is
// row-major, i.e. (row, col) ascending).
std::vector<std::size_t> smallest(const std::vector<double>& score, std::size_t quota) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  quota = std::min(quota, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return score[a] < score[b] || (score[a] == score[b] && a < b);
                    });
  idx.resize(quota);
  return idx;
}

// ---- dense SPD linear algebra (double precision) -------------------------------------

using Matrix = std::vector<double>;

Matrix cholesky_lower(const Matrix& a, std::size_t n, const std::string& layer) {
  Matrix l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) s -= l[j * n + k] * l[j * n + k];
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw NumericError("Cholesky factorisation failed" +
                         (layer.empty() ? std::string() : " for layer " + layer) + " at pivot " +
                         std::to_string(j));
    }
    const double djj = std::sqrt(s);
    l[j * n + j] = djj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double t = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) t -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = t / djj;
    }
  }
  return l;
}

Matrix inverse_spd(const Matrix& a, std::size_t n, const std::string& layer) {
  const Matrix l = cholesky_lower(a, n, layer);
  // Invert the lower-triangular factor by forward substitution.
  Matrix li(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    li[j * n + j] = 1.0 / l[j * n + j];
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l[i * n + k] * li[k * n + j];
      li[i * n + j] = -s / l[i * n + i];
    }
  }
  // a^-1 = L^-T L^-1
  Matrix inv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += li[k * n + i] * li[k * n + j];
      inv[i * n + j] = s;
      inv[j * n + i] = s;
    }
  }
  return inv;
}

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) m[i] = t[i];
  return m;
}

// Upper Cholesky factor of H^-1: row j holds the OBS update direction for
// column j over the columns that are still free.
Matrix inverse_hessian_factor(const Tensor& hessian, std::size_t cols, const std::string& layer) {
  if (hessian.rank() != 2 || hessian.rows() != cols || hessian.cols() != cols) {
    throw ShapeError("OBS: Hessian " + shape_string(hessian.shape()) + " does not match " +
                     std::to_string(cols) + " input columns");
  }
  const Matrix hinv = inverse_spd(to_matrix(hessian), cols, layer);
  const Matrix l = cholesky_lower(hinv, cols, layer);
  Matrix u(cols * cols, 0.0);
  for (std::size_t i = 0; i < cols; ++i)
    for (std::size_t j = 0; j <= i; ++j) u[j * cols + i] = l[i * cols + j];
  return u;
}

enum class PassKind { prune, quantize };

struct ObsPassResult {
  Tensor weights;
  std::vector<std::uint8_t> keep;
  std::optional<QuantPayload> quant;
};

// One left-to-right sweep over the columns. Each column is fixed (zeroed or
// snapped to its grid point) and the residual is pushed onto the remaining
// columns of the same row along row j of the factor U.
ObsPassResult obs_pass(Tensor w, const Matrix& u, PassKind kind, double sparsity,
                       std::size_t block_size, int bits, std::size_t group_size,
                       const std::vector<std::uint8_t>* fixed_keep, ObsTrace* trace) {
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  ObsPassResult out;
  out.keep = fixed_keep ? *fixed_keep : std::vector<std::uint8_t>(rows * cols, 1);
  std::optional<PayloadWriter> writer;
  std::vector<GroupGrid> grids;
  if (kind == PassKind::quantize) {
    writer.emplace(rows, cols, bits, group_size);
    grids.resize(rows);
  }
  if (trace) trace->compensated = Tensor::matrix(rows, cols);
  std::vector<float> group_vals;

  for (std::size_t i1 = 0; i1 < cols; i1 += block_size) {
    const std::size_t i2 = std::min(cols, i1 + block_size);
    if (kind == PassKind::prune) {
      const std::size_t quota =
          prune_quota(sparsity, rows * i2) - prune_quota(sparsity, rows * i1);
      const std::size_t width = i2 - i1;
      std::vector<double> saliency(rows * width);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = i1; j < i2; ++j) {
          const double wv = w.at(r, j);
          const double d = u[j * cols + j];
          saliency[r * width + (j - i1)] = wv * wv / (d * d);
        }
      }
      for (std::size_t idx : smallest(saliency, quota)) {
        out.keep[(idx / width) * cols + i1 + idx % width] = 0;
      }
    }
    for (std::size_t j = i1; j < i2; ++j) {
      if (kind == PassKind::quantize && j % group_size == 0) {
        const std::size_t g_end = std::min(cols, j + group_size);
        for (std::size_t r = 0; r < rows; ++r) {
          group_vals.clear();
          for (std::size_t c = j; c < g_end; ++c)
            if (out.keep[r * cols + c]) group_vals.push_back(w.at(r, c));
          grids[r] = fit_group_grid(group_vals, bits);
          writer->set_grid(r, j / group_size, grids[r]);
        }
      }
      const double d = u[j * cols + j];
      const double* urow = u.data() + j * cols;
      for (std::size_t r = 0; r < rows; ++r) {
        float* wr = w.data() + r * cols;
        const float current = wr[j];
        if (trace) trace->compensated.at(r, j) = current;
        float fixed = current;
        if (!out.keep[r * cols + j]) {
          fixed = 0.0f;
        } else if (kind == PassKind::quantize) {
          const std::uint32_t code = quantize_value(current, grids[r]);
          writer->set_code(r, j, code);
          fixed = dequantize_value(code, grids[r]);
        }
        wr[j] = fixed;
        const double err = (static_cast<double>(current) - fixed) / d;
        if (err == 0.0) continue;
        for (std::size_t l = j + 1; l < cols; ++l) {
          wr[l] = static_cast<float>(static_cast<double>(wr[l]) - err * urow[l]);
        }
      }
    }
  }
  out.weights = std::move(w);
  if (writer) out.quant = writer->take();
  return out;
}

}  // namespace

Tensor cholesky_upper(const Tensor& a, const std::string& layer) {
  const std::size_t n = a.rows();
  const Matrix l = cholesky_lower(to_matrix(a), n, layer);
  Tensor u = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) u.at(j, i) = static_cast<float>(l[i * n + j]);
  return u;
}

Tensor spd_inverse(const Tensor& h, const std::string& layer) {
  const std::size_t n = h.rows();
  const Matrix inv = inverse_spd(to_matrix(h), n, layer);
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n * n; ++i) out[i] = static_cast<float>(inv[i]);
  return out;
}

CompressedLinear dense_linear(const Tensor& w) {
  require_matrix(w, "dense_linear");
  CompressedLinear cl;
  cl.rows = w.rows();
  cl.cols = w.cols();
  cl.values = w;
  cl.seal();
  return cl;
}

CompressedLinear prune_magnitude(const Tensor& w, double sparsity) {
  require_matrix(w, "prune_magnitude");
  const std::size_t n = w.numel();
  const std::size_t quota = prune_quota(sparsity, n);
  std::vector<double> mag(n);
  for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(static_cast<double>(w[i]));
  std::vector<std::uint8_t> keep(n, 1);
  for (std::size_t idx : smallest(mag, quota)) keep[idx] = 0;
  CompressedLinear cl;
  cl.rows = w.rows();
  cl.cols = w.cols();
  Tensor vals = w;
  for (std::size_t i = 0; i < n; ++i)
    if (!keep[i]) vals[i] = 0.0f;
  cl.values = std::move(vals);
  cl.mask = pack_mask(keep, cl.rows, cl.cols);
  cl.seal();
  return cl;
}

CompressedLinear quantize_rtn(const Tensor& w, int bits, std::size_t group_size) {
  require_matrix(w, "quantize_rtn");
  check_bits(bits);
  if (group_size == 0) throw ConfigError("quantize_rtn: group_size must be >= 1");
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  PayloadWriter writer(rows, cols, bits, group_size);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = w.row(r);
    for (std::size_t g0 = 0; g0 < cols; g0 += group_size) {
      const std::size_t g1 = std::min(cols, g0 + group_size);
      const GroupGrid grid = fit_group_grid(row.subspan(g0, g1 - g0), bits);
      writer.set_grid(r, g0 / group_size, grid);
      for (std::size_t c = g0; c < g1; ++c) writer.set_code(r, c, quantize_value(row[c], grid));
    }
  }
  CompressedLinear cl;
  cl.rows = rows;
  cl.cols = cols;
  cl.quant = writer.take();
  cl.seal();
  return cl;
}

CompressedLinear prune_obs(const Tensor& w, const Tensor& hessian, double sparsity,
                           std::size_t block_size, const std::string& layer, ObsTrace* trace) {
  require_matrix(w, "prune_obs");
  check_sparsity(sparsity);
  if (block_size == 0) throw ConfigError("prune_obs: block_size must be >= 1");
  const Matrix u = inverse_hessian_factor(hessian, w.cols(), layer);
  ObsPassResult res = obs_pass(w, u, PassKind::prune, sparsity, block_size, 0, 1, nullptr, trace);
  CompressedLinear cl;
  cl.rows = w.rows();
  cl.cols = w.cols();
  cl.values = std::move(res.weights);
  cl.mask = pack_mask(res.keep, cl.rows, cl.cols);
  cl.seal();
  return cl;
}

CompressedLinear quantize_obs(const Tensor& w, const Tensor& hessian, int bits,
                              std::size_t group_size, std::size_t block_size,
                              const std::string& layer, ObsTrace* trace) {
  require_matrix(w, "quantize_obs");
  check_bits(bits);
  if (group_size == 0 || block_size == 0) {
    throw ConfigError("quantize_obs: group_size and block_size must be >= 1");
  }
  const Matrix u = inverse_hessian_factor(hessian, w.cols(), layer);
  ObsPassResult res =
      obs_pass(w, u, PassKind::quantize, 0.0, block_size, bits, group_size, nullptr, trace);
  CompressedLinear cl;
  cl.rows = w.rows();
  cl.cols = w.cols();
  cl.quant = std::move(res.quant);
  cl.seal();
  return cl;
}

CompressedLinear joint_compress(const Tensor& w, const Tensor& hessian, double sparsity, int bits,
                                std::size_t group_size, std::size_t block_size,
                                const std::string& layer) {
  require_matrix(w, "joint_compress");
  check_sparsity(sparsity);
  check_bits(bits);
  if (group_size == 0 || block_size == 0) {
    throw ConfigError("joint_compress: group_size and block_size must be >= 1");
  }
  const Matrix u = inverse_hessian_factor(hessian, w.cols(), layer);
  ObsPassResult pruned =
      obs_pass(w, u, PassKind::prune, sparsity, block_size, 0, 1, nullptr, nullptr);
  ObsPassResult quant = obs_pass(std::move(pruned.weights), u, PassKind::quantize, 0.0,
                                 block_size, bits, group_size, &pruned.keep, nullptr);
  CompressedLinear cl;
  cl.rows = w.rows();
  cl.cols = w.cols();
  cl.mask = pack_mask(pruned.keep, cl.rows, cl.cols);
  cl.quant = std::move(quant.quant);
  cl.seal();
  return cl;
}

Tensor reconstruct(const CompressedLinear& cl) {
  Tensor out = Tensor::matrix(cl.rows, cl.cols);
  if (cl.quant) {
    const QuantPayload& q = *cl.quant;
    const std::size_t rb = q.row_bytes(cl.cols);
    for (std::size_t r = 0; r < cl.rows; ++r) {
      const std::uint8_t* row = q.codes.data() + r * rb;
      for (std::size_t c = 0; c < cl.cols; ++c) {
        const std::size_t bit0 = c * static_cast<std::size_t>(q.bits);
        std::uint32_t code = 0;
        for (int b = 0; b < q.bits; ++b) {
          const std::size_t bit = bit0 + static_cast<std::size_t>(b);
          code |= static_cast<std::uint32_t>((row[bit / 8] >> (bit % 8)) & 1u) << b;
        }
        const std::size_t g = r * q.groups_per_row + c / q.group_size;
        out.at(r, c) = q.scales[g] * (static_cast<float>(code) - static_cast<float>(q.zero_points[g]));
      }
    }
  } else if (cl.values) {
    out = *cl.values;
  } else {
    throw ContractError("reconstruct: layer holds neither values nor quantised codes");
  }
  if (cl.mask) {
    for (std::size_t r = 0; r < cl.rows; ++r)
      for (std::size_t c = 0; c < cl.cols; ++c)
        if (!cl.kept(r, c)) out.at(r, c) = 0.0f;
  }
  return out;
}

double reconstruction_error(const Tensor& w, const CompressedLinear& cl, const Tensor& x) {
  if (w.rows() != cl.rows || w.cols() != cl.cols || x.rows() != w.cols()) {
    throw ShapeError("reconstruction_error: inconsistent shapes");
  }
  const Tensor diff_w = [&] {
    Tensor d = w;
    const Tensor rec = reconstruct(cl);
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] -= rec[i];
    return d;
  }();
  const Tensor prod = kernel::matmul(diff_w, x);
  double sq = 0.0;
  for (float v : prod.values()) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

// ---- calibration -------------------------------------------------------------------

void add_damping(Tensor& h, double damping) {
  const std::size_t n = h.rows();
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h.at(i, i);
  mean_diag /= static_cast<double>(n);
  const double add = damping * (mean_diag > 0.0 ? mean_diag : 1.0);
  for (std::size_t i = 0; i < n; ++i) h.at(i, i) = static_cast<float>(h.at(i, i) + add);
}

Tensor damped_hessian(const Tensor& activations, double damping) {
  Tensor h = kernel::matmul_tn(activations, activations);
  add_damping(h, damping);
  return h;
}

CalibStats calibrate(const model::ModelWeights& weights, const data::Corpus& corpus,
                     std::size_t n_sequences, std::size_t seq_len, double damping) {
  if (n_sequences < 1) throw ConfigError("calibrate: n_sequences must be >= 1");
  const auto windows = data::pack(corpus.split(data::SplitKind::train), seq_len);
  if (windows.empty()) {
    throw DataError("calibrate: corpus '" + corpus.name + "' is shorter than one sequence of " +
                    std::to_string(seq_len));
  }
  const std::size_t n = std::min(n_sequences, windows.size());
  const std::size_t stride = windows.size() / n;
  const auto& cfg = weights.config;

  // Accumulate in double; one accumulator per distinct layer input.
  std::vector<std::vector<double>> acc(cfg.n_layers * 4);
  std::vector<std::size_t> dims(cfg.n_layers * 4);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    dims[l * 4 + 0] = cfg.embed_dim;
    dims[l * 4 + 1] = cfg.embed_dim;
    dims[l * 4 + 2] = cfg.embed_dim;
    dims[l * 4 + 3] = cfg.ff_dim;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i].assign(dims[i] * dims[i], 0.0);

  CalibStats stats;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& window = windows[s * stride];
    kernel::Graph g;
    const model::ForwardNodes fwd = model::build_forward(g, weights, window);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const kernel::NodeId taps[4] = {fwd.blocks[l].attn_in, fwd.blocks[l].attn_mix,
                                      fwd.blocks[l].mlp_in, fwd.blocks[l].mlp_hidden};
      for (int t = 0; t < 4; ++t) {
        const Tensor& x = g.value(taps[t]);
        const Tensor xtx = kernel::matmul_tn(x, x);
        auto& a = acc[l * 4 + static_cast<std::size_t>(t)];
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += xtx[i];
      }
    }
    stats.samples += window.size();
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::array<Tensor, 4> hs;
    for (int t = 0; t < 4; ++t) {
      const std::size_t idx = l * 4 + static_cast<std::size_t>(t);
      hs[static_cast<std::size_t>(t)] = Tensor::matrix(dims[idx], dims[idx]);
      for (std::size_t i = 0; i < acc[idx].size(); ++i) {
        hs[static_cast<std::size_t>(t)][i] = static_cast<float>(acc[idx][i]);
      }
      add_damping(hs[static_cast<std::size_t>(t)], damping);
    }
    const std::string p = "layers." + std::to_string(l) + ".";
    stats.hessians[p + "attn.q"] = hs[0];
    stats.hessians[p + "attn.k"] = hs[0];
    stats.hessians[p + "attn.v"] = hs[0];
    stats.hessians[p + "attn.o"] = hs[1];
    stats.hessians[p + "mlp.up"] = hs[2];
    stats.hessians[p + "mlp.down"] = hs[3];
  }
  return stats;
}

// ---- compressed model ----------------------------------------------------------------

CompressedModel::CompressedModel(model::ModelWeights uncompressed,
                                 std::map<std::string, CompressedLinear> layers,
                                 CompressionSpec spec)
    : dense_(std::move(uncompressed)), layers_(std::move(layers)), spec_(std::move(spec)) {
  const auto names = model::linear_layer_names(dense_.config);
  if (layers_.size() != names.size()) {
    throw ContractError("compressed model: expected " + std::to_string(names.size()) +
                        " compressed layers, got " + std::to_string(layers_.size()));
  }
  for (const auto& name : names) {
    const auto it = layers_.find(name);
    if (it == layers_.end()) throw ContractError("compressed model: missing layer " + name);
    Tensor& target = model::linear_weight(dense_, name);
    if (it->second.rows != target.rows() || it->second.cols != target.cols()) {
      throw ShapeError("compressed model: layer " + name + " has the wrong shape");
    }
    target = reconstruct(it->second);
  }
  Sha256 h;
  const auto& c = dense_.config;
  for (std::size_t v : {c.vocab_size, c.embed_dim, c.n_layers, c.n_heads, c.ff_dim, c.max_positions}) {
    h.update_u64(v);
  }
  h.update(spec_.label());
  dense_.for_each([&](const std::string& name, const Tensor& t) {
    h.update(name);
    const auto it = layers_.find(name);
    if (it != layers_.end()) {
      h.update(it->second.fingerprint);
    } else {
      h.update(t);
    }
  });
  const Digest d = h.finish();
  fingerprint_ = to_hex(d);
}

std::string CompressedModel::content_digest() const {
  Sha256 h;
  h.update(fingerprint_);
  for (const auto& [name, cl] : layers_) {
    h.update(name);
    h.update(cl.compute_fingerprint());
  }
  dense_.for_each([&](const std::string& name, const Tensor& t) {
    h.update(name);
    h.update(t);
  });
  const Digest d = h.finish();
  return to_hex(d);
}

CompressedLinear compress_linear(const Tensor& w, const Tensor* hessian, const CompressionSpec& spec,
                                 const std::string& layer) {
  const auto need_h = [&]() -> const Tensor& {
    if (!hessian) throw ContractError("compress: method " + method_name(spec.method) + " needs calibration statistics");
    return *hessian;
  };
  switch (spec.method) {
    case Method::none: return dense_linear(w);
    case Method::magnitude_prune: return prune_magnitude(w, spec.sparsity);
    case Method::obs_prune: return prune_obs(w, need_h(), spec.sparsity, spec.block_size, layer);
    case Method::rtn_quant: return quantize_rtn(w, spec.bits, spec.group_size);
    case Method::obs_quant:
      return quantize_obs(w, need_h(), spec.bits, spec.group_size, spec.block_size, layer);
    case Method::joint:
      return joint_compress(w, need_h(), spec.sparsity, spec.bits, spec.group_size,
                            spec.block_size, layer);
  }
  return dense_linear(w);
}

CompressedModel compress_model(const model::ModelWeights& weights, const CompressionSpec& spec,
                               const data::Corpus& calib_corpus) {
  spec.validate();
  const bool needs_stats = spec.method == Method::obs_prune || spec.method == Method::obs_quant ||
                           spec.method == Method::joint;
  model::ModelWeights working = weights;
  std::map<std::string, CompressedLinear> layers;
  for (std::size_t b = 0; b < weights.config.n_layers; ++b) {
    CalibStats stats;
    if (needs_stats) {
      stats = calibrate(working, calib_corpus, spec.calib.n_sequences, spec.calib.seq_len,
                        spec.damping);
    }
    for (const char* role : model::kLinearRoles) {
      const std::string name = "layers." + std::to_string(b) + "." + role;
      const Tensor& w = model::linear_weight(weights, name);
      const Tensor* h = needs_stats ? &stats.hessians.at(name) : nullptr;
      CompressedLinear cl = compress_linear(w, h, spec, name);
      model::linear_weight(working, name) = reconstruct(cl);
      layers.emplace(name, std::move(cl));
    }
  }
  return CompressedModel(std::move(working), std::move(layers), spec);
}

CompressedModel uncompressed_model(const model::ModelWeights& weights) {
  std::map<std::string, CompressedLinear> layers;
  for (const auto& name : model::linear_layer_names(weights.config)) {
    layers.emplace(name, dense_linear(model::linear_weight(weights, name)));
  }
  return CompressedModel(weights, std::move(layers), CompressionSpec{});
}

}  // namespace cprompt::compress
