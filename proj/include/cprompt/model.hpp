#pragma once

// Decoder-only transformer: pre-LayerNorm blocks, GELU MLP, learned absolute
// positions, LM head tied to the token embedding.
//
// An optional prompt matrix E [k x d] is prepended to the data sequence. Its
// rows bypass the token lookup, take positions 0..k-1, and the data tokens
// take positions k..k+n-1. Logits are produced for the data positions only.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprompt/core.hpp"
#include "cprompt/data.hpp"
#include "cprompt/graph.hpp"

namespace cprompt::model {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t embed_dim = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t max_positions = 160;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Linear weights are stored [out x in]; a layer computes y = x W^T.
struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, w_down;
};

struct ModelWeights {
  ModelConfig config;
  Tensor token_embedding;     // [v x d], also the LM head
  Tensor position_embedding;  // [max_positions x d]
  std::vector<LayerWeights> layers;
  Tensor final_gain, final_bias;

  // Visits every parameter tensor in a fixed order with its canonical name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::vector<Tensor*> parameters();
  bool all_finite() const;
};

// The compressible projections of one block, in canonical order.
inline constexpr std::array<const char*, 6> kLinearRoles = {"attn.q", "attn.k", "attn.v",
                                                            "attn.o", "mlp.up", "mlp.down"};
std::vector<std::string> linear_layer_names(const ModelConfig& config);
Tensor& linear_weight(ModelWeights& weights, const std::string& name);
const Tensor& linear_weight(const ModelWeights& weights, const std::string& name);

ModelWeights init_model(const ModelConfig& config);

// Node handles into a recorded forward pass.
struct ForwardNodes {
  kernel::NodeId logits;  // [n x v], data positions only
  struct Block {
    kernel::NodeId attn_in;      // input of q/k/v projections
    kernel::NodeId attn_mix;     // input of the output projection
    kernel::NodeId mlp_in;       // input of the up projection
    kernel::NodeId mlp_hidden;   // input of the down projection
  };
  std::vector<Block> blocks;
  std::vector<std::pair<std::string, kernel::NodeId>> params;  // for_each order
};

// Records the forward pass into `graph`. The weights are borrowed, not copied.
// `prompt` is the node holding E, or nullopt for no prompt.
ForwardNodes build_forward(kernel::Graph& graph, const ModelWeights& weights,
                           std::span<const std::int32_t> tokens,
                           std::optional<kernel::NodeId> prompt = std::nullopt);

Tensor forward_logits(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                      const Tensor* prompt = nullptr);

// Records next-token loss on positions 1..n-1 (x_0 is context only).
kernel::NodeId sequence_loss(kernel::Graph& graph, const ForwardNodes& fwd,
                             std::span<const std::int32_t> tokens);

// Mean next-token NLL (nats) over positions 1..n-1, without recording a graph.
double sequence_nll(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                    const Tensor* prompt = nullptr);

struct BaseTrainConfig {
  std::size_t steps = 1000;
  float lr = 3e-3f;
  std::size_t batch = 8;
  std::size_t seq_len = 0;  // 0: use max_positions
  std::uint64_t seed = 7;
  float weight_decay = 0.0f;
  std::size_t log_every = 0;  // 0: silent
};

// Trains all parameters with next-token NLL on windows drawn from the train
// split. Linear warm-up then cosine decay to a tenth of `lr`.
ModelWeights train_base(ModelWeights weights, const data::Corpus& corpus,
                        const BaseTrainConfig& config);

// ---- generation --------------------------------------------------------------

struct GenerationRequest {
  data::TokenIds prefix;
  std::size_t steps = 0;
};

// Cached key/value decoding. Prefill processes a block of rows with matrix
// products; each decode step processes a single row.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelWeights& weights, const Tensor* prompt);

  // Appends tokens and returns the logits at the last appended position.
  std::vector<float> append(std::span<const std::int32_t> tokens);
  std::size_t length() const { return length_; }

 private:
  std::vector<float> run_rows(Tensor x);

  const ModelWeights& w_;
  std::size_t length_ = 0;
  std::vector<std::vector<float>> k_cache_;
  std::vector<std::vector<float>> v_cache_;
  std::vector<Tensor> transposed_;  // per layer: wq^T, wk^T, wv^T, wo^T, up^T, down^T
  Tensor head_t_;
  const Tensor* prompt_;
  bool prompt_done_ = false;
};

std::int32_t argmax_lowest(std::span<const float> logits);

// Greedy decoding; ties resolve to the lowest token id.
data::TokenIds generate(const ModelWeights& weights, const GenerationRequest& request,
                        const Tensor* prompt = nullptr);

// Greedy decoding by recomputing the whole sequence each step (reference path).
data::TokenIds generate_uncached(const ModelWeights& weights, const GenerationRequest& request,
                                 const Tensor* prompt = nullptr);

}  // namespace cprompt::model
