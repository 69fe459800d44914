#pragma once

// Post-training compression of the linear projections: magnitude and
// second-order (OBS-compensated) pruning, round-to-nearest and OBS-compensated
// grouped quantization, joint pruning + quantization, and the packed
// representation that the compressed model is assembled from.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cprompt/core.hpp"
#include "cprompt/data.hpp"
#include "cprompt/model.hpp"

namespace cprompt::compress {

enum class Method { none, magnitude_prune, obs_prune, rtn_quant, obs_quant, joint };

std::string method_name(Method m);
Method parse_method(const std::string& name);
bool method_prunes(Method m);
bool method_quantizes(Method m);

struct CalibSettings {
  std::size_t n_sequences = 16;
  std::size_t seq_len = 128;
  std::string corpus;  // corpus name; resolved by the caller
  friend bool operator==(const CalibSettings&, const CalibSettings&) = default;
};

struct CompressionSpec {
  Method method = Method::none;
  double sparsity = 0.0;
  int bits = 0;
  std::size_t group_size = 32;
  CalibSettings calib;
  double damping = 0.01;
  std::size_t block_size = 16;

  void validate() const;
  // Short human label, e.g. "obs_quant-3bit" or "joint-50%-4bit".
  std::string label() const;
  friend bool operator==(const CompressionSpec&, const CompressionSpec&) = default;
};

// Number of entries a pruner must zero: ceil(sparsity * count).
std::size_t prune_quota(double sparsity, std::size_t count);

// Packed group-wise quantisation payload. Codes are `bits` wide, packed
// little-endian within bytes (code c of a row starts at bit c*bits), and each
// row is padded to a byte boundary.
struct QuantPayload {
  int bits = 0;
  std::size_t group_size = 32;
  std::size_t groups_per_row = 0;
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;             // [rows x groups_per_row]
  std::vector<std::uint8_t> zero_points;  // [rows x groups_per_row]

  std::size_t row_bytes(std::size_t cols) const { return (cols * static_cast<std::size_t>(bits) + 7) / 8; }
  friend bool operator==(const QuantPayload&, const QuantPayload&) = default;
};

class CompressedLinear {
 public:
  std::size_t rows = 0;
  std::size_t cols = 0;
  // Full-precision values; present unless the layer is quantised.
  std::optional<Tensor> values;
  // Keep-mask, one bit per entry (1 = kept), rows padded to byte boundaries.
  std::optional<std::vector<std::uint8_t>> mask;
  std::optional<QuantPayload> quant;
  std::string fingerprint;

  std::size_t mask_row_bytes() const { return (cols + 7) / 8; }
  bool kept(std::size_t r, std::size_t c) const;
  std::uint32_t code(std::size_t r, std::size_t c) const;
  float scale(std::size_t r, std::size_t c) const;
  std::uint8_t zero_point(std::size_t r, std::size_t c) const;
  std::size_t masked_count() const;

  void seal();  // computes the fingerprint from the contents
  std::string compute_fingerprint() const;
};

// Grid of one quantisation group: asymmetric min-max over the group with 0
// always inside the range.
struct GroupGrid {
  float scale = 1.0f;
  std::uint8_t zero_point = 0;
  int max_code = 0;
};
GroupGrid fit_group_grid(std::span<const float> values, int bits);
std::uint32_t quantize_value(float w, const GroupGrid& grid);
float dequantize_value(std::uint32_t code, const GroupGrid& grid);

CompressedLinear dense_linear(const Tensor& w);
CompressedLinear prune_magnitude(const Tensor& w, double sparsity);
CompressedLinear quantize_rtn(const Tensor& w, int bits, std::size_t group_size = 32);

// Optional by-product of the OBS passes: the compensated value each entry had
// at the moment it was fixed.
struct ObsTrace {
  Tensor compensated;
};

CompressedLinear prune_obs(const Tensor& w, const Tensor& hessian, double sparsity,
                           std::size_t block_size = 16, const std::string& layer = {},
                           ObsTrace* trace = nullptr);
CompressedLinear quantize_obs(const Tensor& w, const Tensor& hessian, int bits,
                              std::size_t group_size = 32, std::size_t block_size = 16,
                              const std::string& layer = {}, ObsTrace* trace = nullptr);
CompressedLinear joint_compress(const Tensor& w, const Tensor& hessian, double sparsity, int bits,
                                std::size_t group_size = 32, std::size_t block_size = 16,
                                const std::string& layer = {});

Tensor reconstruct(const CompressedLinear& cl);

// ||w X - reconstruct(cl) X||_F with X laid out [cols x samples].
double reconstruction_error(const Tensor& w, const CompressedLinear& cl, const Tensor& x);

// ---- calibration ---------------------------------------------------------------

struct CalibStats {
  // Damped input second moments H = sum x x^T + damping * mean(diag) * I,
  // keyed by linear layer name.
  std::map<std::string, Tensor> hessians;
  std::size_t samples = 0;  // activation rows accumulated per layer
};

// H from raw activations (rows are samples) plus damping.
Tensor damped_hessian(const Tensor& activations, double damping);
void add_damping(Tensor& h, double damping);

CalibStats calibrate(const model::ModelWeights& weights, const data::Corpus& corpus,
                     std::size_t n_sequences, std::size_t seq_len, double damping = 0.01);

// Inverse of a symmetric positive definite matrix via Cholesky. Throws
// NumericError naming `layer` when the factorisation fails.
Tensor spd_inverse(const Tensor& h, const std::string& layer = {});
// Upper-triangular U with U^T U = a. Throws NumericError on failure.
Tensor cholesky_upper(const Tensor& a, const std::string& layer = {});

// ---- compressed model ----------------------------------------------------------

class CompressedModel {
 public:
  CompressedModel(model::ModelWeights uncompressed, std::map<std::string, CompressedLinear> layers,
                  CompressionSpec spec);

  const model::ModelConfig& config() const { return dense_.config; }
  const CompressionSpec& spec() const { return spec_; }
  // Dense reconstruction used by every forward pass.
  const model::ModelWeights& dense() const { return dense_; }
  const std::map<std::string, CompressedLinear>& layers() const { return layers_; }
  const std::string& fingerprint() const { return fingerprint_; }

  // Hash over every stored tensor (packed payloads, full-precision parts and
  // the dense reconstruction), recomputed from the current contents.
  std::string content_digest() const;

 private:
  model::ModelWeights dense_;
  std::map<std::string, CompressedLinear> layers_;
  CompressionSpec spec_;
  std::string fingerprint_;
};

CompressedLinear compress_linear(const Tensor& w, const Tensor* hessian, const CompressionSpec& spec,
                                 const std::string& layer = {});

// Compresses the model block by block; calibration statistics for block b are
// collected on the model whose earlier blocks are already compressed.
CompressedModel compress_model(const model::ModelWeights& weights, const CompressionSpec& spec,
                               const data::Corpus& calib_corpus);

// Wraps full-precision weights as an uncompressed CompressedModel.
CompressedModel uncompressed_model(const model::ModelWeights& weights);

}  // namespace cprompt::compress
