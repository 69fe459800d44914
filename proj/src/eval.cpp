#include "cprompt/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "cprompt/kernel.hpp"
#include "cprompt/model.hpp"

namespace cprompt::eval {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 *
                                  static_cast<double>(n));
}

}  // namespace

EvalReport perplexity(const compress::CompressedModel& model, const prompt::SoftPrompt* prompt,
                      const data::Corpus& corpus, std::size_t seq_len, data::SplitKind split) {
  const auto t0 = Clock::now();
  const auto windows = data::pack(corpus.split(split), seq_len);
  if (windows.empty()) {
    throw DataError("perplexity: corpus '" + corpus.name + "' has no full window of " +
                    std::to_string(seq_len) + " tokens");
  }
  const Tensor* E = prompt ? &prompt->E : nullptr;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& w : windows) {
    const std::size_t predicted = w.size() - 1;
    total += model::sequence_nll(model.dense(), w, E) * static_cast<double>(predicted);
    count += predicted;
  }
  EvalReport r;
  r.corpus_id = corpus.id;
  r.model_id = model.fingerprint().substr(0, 16);
  r.compression = model.spec().label();
  r.prompt_id = prompt ? prompt->id() : "none";
  r.mean_nll = total / static_cast<double>(count);
  r.ppl = std::exp(r.mean_nll);
  r.token_count = count;
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

double choice_logprob(const model::ModelWeights& weights, const Tensor* prompt,
                      const data::TokenIds& context, const data::TokenIds& choice) {
  if (context.empty()) throw ContractError("choice_logprob: context must not be empty");
  if (choice.empty()) throw ContractError("choice_logprob: choice must not be empty");
  const std::size_t k = prompt ? prompt->rows() : 0;
  if (k + context.size() + choice.size() > weights.config.max_positions) {
    throw LengthError("choice_logprob: prompt " + std::to_string(k) + " + context " +
                      std::to_string(context.size()) + " + choice " + std::to_string(choice.size()) +
                      " exceeds max_positions " + std::to_string(weights.config.max_positions));
  }
  data::TokenIds seq = context;
  seq.insert(seq.end(), choice.begin(), choice.end());
  const Tensor logits = model::forward_logits(weights, seq, prompt);
  double total = 0.0;
  for (std::size_t j = 0; j < choice.size(); ++j) {
    total += kernel::log_prob(logits.row(context.size() - 1 + j), choice[j]);
  }
  return total;
}

MCResult mc_accuracy(const compress::CompressedModel& model, const prompt::SoftPrompt* prompt,
                     const std::vector<MCTask>& tasks, bool normalize) {
  if (tasks.empty()) throw ContractError("mc_accuracy: no tasks");
  const Tensor* E = prompt ? &prompt->E : nullptr;
  MCResult r;
  r.n = tasks.size();
  std::size_t correct = 0;
  for (const auto& task : tasks) {
    if (task.choices.empty() || task.gold >= task.choices.size()) {
      throw ContractError("mc_accuracy: task needs at least one choice and a valid gold index");
    }
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t c = 0; c < task.choices.size(); ++c) {
      double s = choice_logprob(model.dense(), E, task.context, task.choices[c]);
      if (normalize) s /= static_cast<double>(task.choices[c].size());
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    r.predictions.push_back(best);
    correct += best == task.gold ? 1 : 0;
  }
  const double p = static_cast<double>(correct) / static_cast<double>(r.n);
  r.accuracy = p;
  r.standard_error = std::sqrt(p * (1.0 - p) / static_cast<double>(r.n));
  return r;
}

std::vector<MCTask> continuation_tasks(const data::Corpus& corpus, data::SplitKind split,
                                       std::size_t count, std::size_t context_len,
                                       std::size_t choice_len, std::uint64_t seed) {
  const auto tokens = corpus.split(split);
  const std::size_t span = context_len + choice_len;
  if (context_len == 0 || choice_len == 0 || tokens.size() < 2 * span) {
    throw DataError("continuation_tasks: split of '" + corpus.name + "' too short for tasks of " +
                    std::to_string(span) + " tokens");
  }
  std::mt19937_64 rng(seed);
  const std::size_t starts = tokens.size() - span + 1;
  std::vector<MCTask> tasks;
  tasks.reserve(count);
  while (tasks.size() < count) {
    const std::size_t a = uniform_index(rng, starts);
    const std::size_t b = uniform_index(rng, starts);
    const auto gold = tokens.subspan(a + context_len, choice_len);
    const auto other = tokens.subspan(b + context_len, choice_len);
    if (std::equal(gold.begin(), gold.end(), other.begin())) continue;
    MCTask t;
    t.context.assign(tokens.begin() + static_cast<std::ptrdiff_t>(a),
                     tokens.begin() + static_cast<std::ptrdiff_t>(a + context_len));
    const std::size_t gold_slot = rng() & 1u;
    t.choices.resize(2);
    t.choices[gold_slot].assign(gold.begin(), gold.end());
    t.choices[1 - gold_slot].assign(other.begin(), other.end());
    t.gold = gold_slot;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<LatencyProfile> profile_latency(const compress::CompressedModel& model,
                                            const LatencySettings& settings) {
  if (settings.repeats < 5) throw ConfigError("profile_latency: repeats must be >= 5");
  if (settings.steps < 2 || settings.prefix_len < 1) {
    throw ConfigError("profile_latency: need prefix_len >= 1 and steps >= 2");
  }
  const model::ModelWeights& w = model.dense();
  std::vector<std::size_t> ks = settings.ks;
  ks.erase(std::remove(ks.begin(), ks.end(), std::size_t{0}), ks.end());
  ks.insert(ks.begin(), 0);
  for (std::size_t k : ks) {
    if (k + settings.prefix_len + settings.steps > w.config.max_positions) {
      throw LengthError("profile_latency: k " + std::to_string(k) + " + prefix + steps exceeds max_positions");
    }
  }

  std::mt19937_64 rng(settings.seed);
  data::TokenIds prefix(settings.prefix_len);
  for (auto& t : prefix) t = static_cast<std::int32_t>(uniform_index(rng, w.config.vocab_size));
  std::vector<prompt::SoftPrompt> prompts;
  for (std::size_t k : ks) prompts.push_back(prompt::init_prompt(k, w.token_embedding, settings.seed + k));

  std::vector<std::vector<double>> prefill(ks.size()), decode(ks.size());
  // Configurations are interleaved within each repeat so slow drift in
  // machine load affects all of them alike.
  for (std::size_t rep = 0; rep < settings.warmup + settings.repeats; ++rep) {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const Tensor* E = ks[i] ? &prompts[i].E : nullptr;
      model::IncrementalDecoder dec(w, E);
      auto t0 = Clock::now();
      std::vector<float> logits = dec.append(prefix);
      std::int32_t next = model::argmax_lowest(logits);
      const double first = ms_since(t0);
      t0 = Clock::now();
      for (std::size_t s = 1; s < settings.steps; ++s) {
        logits = dec.append(std::span<const std::int32_t>(&next, 1));
        next = model::argmax_lowest(logits);
      }
      const double rest = ms_since(t0);
      if (rep >= settings.warmup) {
        prefill[i].push_back(first);
        decode[i].push_back(rest / static_cast<double>(settings.steps - 1));
      }
    }
  }

  std::vector<LatencyProfile> out;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    LatencyProfile p;
    p.k = ks[i];
    p.prefix_len = settings.prefix_len;
    p.steps = settings.steps;
    p.first_token_ms = median(prefill[i]);
    p.per_token_ms = median(decode[i]);
    p.tokens_per_second = 1000.0 / p.per_token_ms;
    out.push_back(p);
  }
  for (auto& p : out) p.overhead_ratio = p.k == 0 ? 1.0 : p.per_token_ms / out.front().per_token_ms;
  return out;
}

}  // namespace cprompt::eval
