#pragma once

// Soft prompts: a k x d matrix of free input embeddings prepended to every
// sequence, trained by next-token NLL while the compressed weights stay fixed.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cprompt/compress.hpp"
#include "cprompt/core.hpp"
#include "cprompt/data.hpp"
#include "cprompt/optim.hpp"

namespace cprompt::prompt {

enum class PromptKind { learned, hard, random };
std::string kind_name(PromptKind kind);
PromptKind parse_kind(const std::string& name);

struct Provenance {
  std::string source_fingerprint;  // model the prompt was trained against
  std::string source_spec;         // compression label of that model
  std::string corpus_id;
  std::string config_digest;
  PromptKind kind = PromptKind::learned;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct SoftPrompt {
  Tensor E;  // [k x d]
  Provenance provenance;

  std::size_t k() const { return E.rows(); }
  std::size_t dim() const { return E.rank() == 2 ? E.shape()[1] : 0; }
  // Digest of E; "none" style ids are left to callers.
  std::string id() const;
};

// Fixed instruction text used for the hard-prompt baseline.
inline constexpr std::string_view kRepairInstruction =
    "Please carefully examine the weight matrix within the model, as it may contain errors. "
    "It is crucial to verify its accuracy and make any necessary adjustments to ensure "
    "optimal performance";

// k rows sampled uniformly with replacement from the rows of `embedding`.
SoftPrompt init_prompt(std::size_t k, const Tensor& embedding, std::uint64_t seed);

SoftPrompt hard_prompt(std::string_view text, const data::TokenizerSpec& tokenizer,
                       const Tensor& embedding);

// Mean over the batch of each sequence's mean NLL over positions 1..n-1.
double prompt_nll(const compress::CompressedModel& model, const SoftPrompt& prompt,
                  std::span<const data::TokenIds> batch);

struct PromptLoss {
  double nll = 0.0;
  Tensor grad;  // d nll / d E, same shape as E
};
PromptLoss prompt_nll_grad(const model::ModelWeights& weights, const Tensor& E,
                           std::span<const data::TokenIds> batch);

struct PromptTrainConfig {
  optim::AdamWConfig optimizer;  // defaults: lr 1e-3, wd 1e-5, betas 0.9/0.999
  std::size_t batch_size = 4;
  std::size_t total_steps = 2000;
  std::size_t eval_every = 200;
  std::uint64_t seed = 11;
  std::size_t k = 16;
  std::size_t seq_len = 128;
  double clip_norm = 1.0;
  std::size_t log_every = 0;

  void validate() const;
  std::string digest() const;
  friend bool operator==(const PromptTrainConfig& a, const PromptTrainConfig& b) {
    return a.digest() == b.digest();
  }
};

struct HistoryPoint {
  std::size_t step = 0;
  double train_nll = 0.0;  // running mean since the previous eval point; NaN at step 0
  double validation_ppl = 0.0;
};

struct TrainHistory {
  std::vector<HistoryPoint> points;
  std::size_t best = 0;
};

struct TrainedPrompt {
  SoftPrompt prompt;
  TrainHistory history;
};

// Validation perplexity of `E` on the fixed validation shard of `corpus`.
double validation_ppl(const model::ModelWeights& weights, const Tensor* E, const data::Corpus& corpus,
                      std::size_t seq_len);

// Learns E with the model frozen. The validation split is evaluated at step 0
// and every eval_every steps; the best snapshot is returned. `on_step`, when
// set, runs after every optimizer step with the current E.
using StepObserver = std::function<void(std::size_t step, const Tensor& E)>;
TrainedPrompt train_prompt(const compress::CompressedModel& model, const data::Corpus& corpus,
                           const PromptTrainConfig& config, const StepObserver& on_step = {});

// A prompt paired with a model for evaluation.
struct PromptedModel {
  const compress::CompressedModel* model = nullptr;
  const SoftPrompt* prompt = nullptr;
  std::optional<std::string> note;  // set when the prompt came from another model
  const Tensor* embeddings() const { return prompt ? &prompt->E : nullptr; }
};

PromptedModel stitch(const SoftPrompt& prompt, const compress::CompressedModel& target);

}  // namespace cprompt::prompt
