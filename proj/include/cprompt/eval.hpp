#pragma once

// Held-out perplexity, multiple-choice scoring and generation latency.

#include <cstdint>
#include <string>
#include <vector>

#include "cprompt/compress.hpp"
#include "cprompt/data.hpp"
#include "cprompt/prompt.hpp"

namespace cprompt::eval {

struct EvalReport {
  std::string corpus_id;
  std::string model_id;
  std::string compression;
  std::string prompt_id;  // "none" without a prompt
  double ppl = 0.0;
  double mean_nll = 0.0;  // nats per predicted token
  std::size_t token_count = 0;
  double seconds = 0.0;
};

// Non-overlapping windows of `seq_len` over `split`; each window predicts
// positions 1..seq_len-1 with the prompt prepended.
EvalReport perplexity(const compress::CompressedModel& model, const prompt::SoftPrompt* prompt,
                      const data::Corpus& corpus, std::size_t seq_len,
                      data::SplitKind split = data::SplitKind::test);

struct MCTask {
  data::TokenIds context;
  std::vector<data::TokenIds> choices;
  std::size_t gold = 0;
};

struct MCResult {
  double accuracy = 0.0;
  double standard_error = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> predictions;
};

// Sum of the choice's token log-probabilities given prompt + context.
double choice_logprob(const model::ModelWeights& weights, const Tensor* prompt,
                      const data::TokenIds& context, const data::TokenIds& choice);

// Scores each choice by its mean token log-probability (or the plain sum when
// `normalize` is false) and predicts the best one, lowest index on ties.
MCResult mc_accuracy(const compress::CompressedModel& model, const prompt::SoftPrompt* prompt,
                     const std::vector<MCTask>& tasks, bool normalize = true);

// Continuation tasks cut from a corpus split: the gold choice is the text that
// really follows the context; the distractor is the same-length continuation
// of a different, randomly chosen context.
std::vector<MCTask> continuation_tasks(const data::Corpus& corpus, data::SplitKind split,
                                       std::size_t count, std::size_t context_len,
                                       std::size_t choice_len, std::uint64_t seed);

struct LatencyProfile {
  std::size_t k = 0;
  std::size_t prefix_len = 0;
  std::size_t steps = 0;
  double first_token_ms = 0.0;  // median prefill time
  double per_token_ms = 0.0;    // median over repeats of the mean decode-step time
  double tokens_per_second = 0.0;
  double overhead_ratio = 1.0;  // per_token_ms / per_token_ms at k = 0
};

struct LatencySettings {
  std::vector<std::size_t> ks{0};
  std::size_t prefix_len = 32;
  std::size_t steps = 96;
  std::size_t repeats = 7;
  std::size_t warmup = 2;
  std::uint64_t seed = 5;
};

// Times greedy cached generation for each prompt length. Prompts are sampled
// from the token embedding; the k = 0 row is always measured and is the
// reference for overhead ratios.
std::vector<LatencyProfile> profile_latency(const compress::CompressedModel& model,
                                            const LatencySettings& settings);

}  // namespace cprompt::eval
