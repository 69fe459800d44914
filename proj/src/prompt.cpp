#include "cprompt/prompt.hpp"

#include <cmath>
#include <iostream>
#include <random>

#include "cprompt/digest.hpp"
#include "cprompt/graph.hpp"
#include "cprompt/model.hpp"

namespace cprompt::prompt {

using kernel::Graph;
using kernel::NodeId;

std::string kind_name(PromptKind kind) {
  switch (kind) {
    case PromptKind::learned: return "learned";
    case PromptKind::hard: return "hard";
    case PromptKind::random: return "random";
  }
  return "learned";
}

PromptKind parse_kind(const std::string& name) {
  for (PromptKind k : {PromptKind::learned, PromptKind::hard, PromptKind::random}) {
    if (kind_name(k) == name) return k;
  }
  throw ConfigError("unknown prompt kind '" + name + "'");
}

std::string SoftPrompt::id() const {
  Sha256 h;
  h.update(E);
  const Digest d = h.finish();
  return to_hex(std::span(d).first(8));
}

SoftPrompt init_prompt(std::size_t k, const Tensor& embedding, std::uint64_t seed) {
  if (embedding.rank() != 2 || embedding.rows() == 0) {
    throw ShapeError("init_prompt: embedding must be a non-empty matrix");
  }
  const std::size_t v = embedding.rows();
  const std::size_t d = embedding.cols();
  std::mt19937_64 rng(seed);
  SoftPrompt p;
  p.E = Tensor::matrix(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    const auto src = static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 *
                                              static_cast<double>(v));
    const auto row = embedding.row(src);
    std::copy(row.begin(), row.end(), p.E.data() + i * d);
  }
  p.provenance.kind = PromptKind::learned;
  return p;
}

SoftPrompt hard_prompt(std::string_view text, const data::TokenizerSpec& tokenizer,
                       const Tensor& embedding) {
  const data::TokenIds ids = data::tokenize(text, tokenizer);
  if (ids.empty()) throw DataError("hard_prompt: text produced no tokens");
  const std::size_t d = embedding.cols();
  SoftPrompt p;
  p.E = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= embedding.rows()) {
      throw DataError("hard_prompt: token id outside the embedding table");
    }
    const auto row = embedding.row(static_cast<std::size_t>(ids[i]));
    std::copy(row.begin(), row.end(), p.E.data() + i * d);
  }
  p.provenance.kind = PromptKind::hard;
  return p;
}

double prompt_nll(const compress::CompressedModel& model, const SoftPrompt& prompt,
                  std::span<const data::TokenIds> batch) {
  if (batch.empty()) throw ContractError("prompt_nll: empty batch");
  double total = 0.0;
  for (const auto& seq : batch) total += model::sequence_nll(model.dense(), seq, &prompt.E);
  return total / static_cast<double>(batch.size());
}

PromptLoss prompt_nll_grad(const model::ModelWeights& weights, const Tensor& E,
                           std::span<const data::TokenIds> batch) {
  if (batch.empty()) throw ContractError("prompt_nll_grad: empty batch");
  PromptLoss out;
  out.grad = Tensor(E.shape());
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (const auto& seq : batch) {
    Graph g;
    const NodeId pe = g.leaf_ref(E);
    const model::ForwardNodes fwd = model::build_forward(g, weights, seq, pe);
    const NodeId loss = model::sequence_loss(g, fwd, seq);
    out.nll += g.value(loss)[0];
    const std::vector<NodeId> wanted{pe};
    const kernel::GradientMap gm = g.backward(loss, wanted);
    const Tensor& ge = gm.at(pe.index);
    for (std::size_t i = 0; i < ge.numel(); ++i) out.grad[i] += ge[i] * inv;
  }
  out.nll /= static_cast<double>(batch.size());
  return out;
}

void PromptTrainConfig::validate() const {
  if (!(optimizer.lr > 0.0f)) throw ConfigError("prompt training: lr must be > 0");
  if (batch_size < 1) throw ConfigError("prompt training: batch_size must be >= 1");
  if (eval_every < 1) throw ConfigError("prompt training: eval_every must be >= 1");
  if (total_steps % eval_every != 0) {
    throw ConfigError("prompt training: eval_every (" + std::to_string(eval_every) +
                      ") must divide total_steps (" + std::to_string(total_steps) + ")");
  }
  if (seq_len < 2) throw ConfigError("prompt training: seq_len must be >= 2");
  if (!(clip_norm > 0.0)) throw ConfigError("prompt training: clip_norm must be > 0");
}

std::string PromptTrainConfig::digest() const {
  Sha256 h;
  const float floats[] = {optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps,
                          optimizer.weight_decay};
  h.update(floats, sizeof floats);
  for (std::uint64_t v : {static_cast<std::uint64_t>(batch_size), static_cast<std::uint64_t>(total_steps),
                          static_cast<std::uint64_t>(eval_every), seed, static_cast<std::uint64_t>(k),
                          static_cast<std::uint64_t>(seq_len)}) {
    h.update_u64(v);
  }
  h.update(&clip_norm, sizeof clip_norm);
  const Digest d = h.finish();
  return to_hex(std::span(d).first(8));
}

double validation_ppl(const model::ModelWeights& weights, const Tensor* E, const data::Corpus& corpus,
                      std::size_t seq_len) {
  const auto windows = data::pack(corpus.split(data::SplitKind::validation), seq_len);
  if (windows.empty()) {
    throw DataError("corpus '" + corpus.name + "' has no full validation window of " +
                    std::to_string(seq_len));
  }
  double total = 0.0;
  for (const auto& w : windows) total += model::sequence_nll(weights, w, E);
  return std::exp(total / static_cast<double>(windows.size()));
}

TrainedPrompt train_prompt(const compress::CompressedModel& model, const data::Corpus& corpus,
                           const PromptTrainConfig& config, const StepObserver& on_step) {
  config.validate();
  const model::ModelWeights& weights = model.dense();
  const auto train = corpus.split(data::SplitKind::train);
  if (train.size() < config.seq_len) {
    throw DataError("train_prompt: corpus '" + corpus.name + "' train split is shorter than one window");
  }
  if (config.k + config.seq_len > weights.config.max_positions) {
    throw LengthError("train_prompt: k + seq_len exceeds max_positions");
  }
  const std::string frozen = model.content_digest();

  TrainedPrompt result;
  result.prompt = init_prompt(config.k, weights.token_embedding, config.seed);
  result.prompt.provenance = {model.fingerprint(), model.spec().label(), corpus.id, config.digest(),
                              PromptKind::learned};
  Tensor E = result.prompt.E;

  optim::AdamW opt(config.optimizer, {&E});
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t offsets = train.size() - config.seq_len + 1;

  auto record = [&](std::size_t step, double train_nll) {
    const double ppl = validation_ppl(weights, &E, corpus, config.seq_len);
    result.history.points.push_back({step, train_nll, ppl});
    const auto& best = result.history.points[result.history.best];
    if (ppl < best.validation_ppl || result.history.points.size() == 1) {
      result.history.best = result.history.points.size() - 1;
      result.prompt.E = E;
    }
    if (config.log_every) {
      std::clog << "[train-prompt] step " << step << " train_nll " << train_nll << " val_ppl " << ppl
                << "\n";
    }
  };

  record(0, std::nan(""));
  std::vector<data::TokenIds> batch(config.batch_size);
  double running = 0.0;
  std::size_t since_eval = 0;
  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    for (auto& seq : batch) {
      const auto start = static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 *
                                                  static_cast<double>(offsets));
      const auto window = train.subspan(start, config.seq_len);
      seq.assign(window.begin(), window.end());
    }
    PromptLoss loss = prompt_nll_grad(weights, E, batch);
    if (!std::isfinite(loss.nll) || !loss.grad.all_finite()) {
      throw DivergenceError("train_prompt: non-finite loss at step " + std::to_string(step));
    }
    Tensor* gp = &loss.grad;
    optim::clip_global_norm(std::span<Tensor* const>(&gp, 1), config.clip_norm);
    const Tensor* cgp = &loss.grad;
    opt.step(std::span<const Tensor* const>(&cgp, 1));
    if (on_step) on_step(step, E);
    running += loss.nll;
    ++since_eval;
    if (step % config.eval_every == 0) {
      record(step, running / static_cast<double>(since_eval));
      running = 0.0;
      since_eval = 0;
    }
  }

  if (model.content_digest() != frozen) {
    throw FrozenWeightViolation("train_prompt: compressed model changed during prompt training");
  }
  return result;
}

PromptedModel stitch(const SoftPrompt& prompt, const compress::CompressedModel& target) {
  if (prompt.k() > 0 && prompt.dim() != target.config().embed_dim) {
    throw CompatibilityError("stitch: prompt width " + std::to_string(prompt.dim()) +
                             " does not match model embed_dim " +
                             std::to_string(target.config().embed_dim));
  }
  PromptedModel pm{&target, &prompt, std::nullopt};
  if (prompt.provenance.source_fingerprint != target.fingerprint()) {
    pm.note = "prompt trained on " +
              (prompt.provenance.source_spec.empty() ? std::string("an unknown model")
                                                     : prompt.provenance.source_spec) +
              " attached to " + target.spec().label();
  }
  return pm;
}

}  // namespace cprompt::prompt
