#include "cprompt/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>

#include "cprompt/kernel.hpp"
#include "cprompt/optim.hpp"

namespace cprompt::model {

using kernel::Graph;
using kernel::NodeId;

void ModelConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || n_layers < 1 || n_heads < 1 || ff_dim < 1) {
    throw ConfigError("model config: all sizes must be >= 1");
  }
  if (embed_dim % n_heads != 0) {
    throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_positions < 2) throw ConfigError("model config: max_positions must be >= 2");
}

void ModelWeights::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("tok_emb", token_embedding);
  fn("pos_emb", position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights& l = layers[i];
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.q", l.wq);
    fn(p + "attn.k", l.wk);
    fn(p + "attn.v", l.wv);
    fn(p + "attn.o", l.wo);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "mlp.up", l.w_up);
    fn(p + "mlp.down", l.w_down);
  }
  fn("final.gain", final_gain);
  fn("final.bias", final_bias);
}

void ModelWeights::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<ModelWeights*>(this)->for_each(
      [&](const std::string& name, Tensor& t) { fn(name, t); });
}

std::vector<Tensor*> ModelWeights::parameters() {
  std::vector<Tensor*> out;
  for_each([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

bool ModelWeights::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

std::vector<std::string> linear_layer_names(const ModelConfig& config) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    for (const char* role : kLinearRoles) {
      names.push_back("layers." + std::to_string(i) + "." + role);
    }
  }
  return names;
}

Tensor& linear_weight(ModelWeights& weights, const std::string& name) {
  Tensor* found = nullptr;
  weights.for_each([&](const std::string& n, Tensor& t) {
    if (n == name) found = &t;
  });
  if (!found || found->rank() != 2 || name.rfind("layers.", 0) != 0) {
    throw IndexError("no linear layer named '" + name + "'");
  }
  return *found;
}

const Tensor& linear_weight(const ModelWeights& weights, const std::string& name) {
  return linear_weight(const_cast<ModelWeights&>(weights), name);
}

ModelWeights init_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.embed_dim;
  ModelWeights w;
  w.config = config;
  w.token_embedding = Tensor::matrix(config.vocab_size, d);
  w.position_embedding = Tensor::matrix(config.max_positions, d);
  w.layers.resize(config.n_layers);
  for (LayerWeights& l : w.layers) {
    l.ln1_gain = Tensor(Shape{d});
    l.ln1_bias = Tensor(Shape{d});
    l.ln2_gain = Tensor(Shape{d});
    l.ln2_bias = Tensor(Shape{d});
    l.wq = Tensor::matrix(d, d);
    l.wk = Tensor::matrix(d, d);
    l.wv = Tensor::matrix(d, d);
    l.wo = Tensor::matrix(d, d);
    l.w_up = Tensor::matrix(config.ff_dim, d);
    l.w_down = Tensor::matrix(d, config.ff_dim);
  }
  w.final_gain = Tensor(Shape{d});
  w.final_bias = Tensor(Shape{d});

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  w.for_each([&](const std::string& name, Tensor& t) {
    const bool is_gain = name.find("gain") != std::string::npos;
    const bool is_bias = name.find("bias") != std::string::npos;
    if (is_gain) {
      t.fill(1.0f);
    } else if (!is_bias) {
      for (float& v : t.values()) v = normal(rng);
    }
  });
  return w;
}

ForwardNodes build_forward(Graph& g, const ModelWeights& w, std::span<const std::int32_t> tokens,
                           std::optional<NodeId> prompt) {
  const ModelConfig& cfg = w.config;
  const std::size_t n = tokens.size();
  std::size_t k = 0;
  if (prompt) {
    const Tensor& e = g.value(*prompt);
    if (e.rank() != 2 || e.shape()[1] != cfg.embed_dim) {
      throw CompatibilityError("prompt width " + shape_string(e.shape()) +
                               " does not match model embed_dim " +
                               std::to_string(cfg.embed_dim));
    }
    k = e.shape()[0];
  }
  if (n == 0) throw LengthError("forward: empty token sequence");
  if (k + n > cfg.max_positions) {
    throw LengthError("forward: " + std::to_string(k) + " prompt + " + std::to_string(n) +
                      " data positions exceed max_positions " +
                      std::to_string(cfg.max_positions));
  }

  ForwardNodes out;
  std::vector<NodeId> p;
  w.for_each([&](const std::string& name, const Tensor& t) {
    const NodeId id = g.leaf_ref(t);
    out.params.emplace_back(name, id);
    p.push_back(id);
  });
  // for_each order: tok, pos, then 10 per layer, then final gain/bias.
  const NodeId tok_emb = p[0];
  const NodeId pos_emb = p[1];

  NodeId x = g.gather_rows(tok_emb, tokens);
  if (prompt) x = g.concat_rows(*prompt, x);
  std::vector<std::int32_t> positions(k + n);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i);
  x = g.add(x, g.gather_rows(pos_emb, positions));

  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const NodeId* lp = p.data() + 2 + layer * 10;
    ForwardNodes::Block blk{};
    blk.attn_in = g.layer_norm(x, lp[0], lp[1]);
    const NodeId q = g.matmul_nt(blk.attn_in, lp[2]);
    const NodeId kk = g.matmul_nt(blk.attn_in, lp[3]);
    const NodeId v = g.matmul_nt(blk.attn_in, lp[4]);
    blk.attn_mix = g.causal_attention(q, kk, v, cfg.n_heads);
    x = g.add(x, g.matmul_nt(blk.attn_mix, lp[5]));
    blk.mlp_in = g.layer_norm(x, lp[6], lp[7]);
    blk.mlp_hidden = g.gelu(g.matmul_nt(blk.mlp_in, lp[8]));
    x = g.add(x, g.matmul_nt(blk.mlp_hidden, lp[9]));
    out.blocks.push_back(blk);
  }
  const NodeId* fp = p.data() + 2 + cfg.n_layers * 10;
  NodeId h = g.layer_norm(x, fp[0], fp[1]);
  if (k > 0) h = g.slice_rows(h, k, k + n);
  out.logits = g.matmul_nt(h, tok_emb);
  return out;
}

Tensor forward_logits(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                      const Tensor* prompt) {
  Graph g;
  std::optional<NodeId> pn;
  if (prompt) pn = g.leaf_ref(*prompt);
  const ForwardNodes fwd = build_forward(g, weights, tokens, pn);
  return g.value(fwd.logits);
}

NodeId sequence_loss(Graph& g, const ForwardNodes& fwd, std::span<const std::int32_t> tokens) {
  const std::size_t n = tokens.size();
  if (n < 2) throw LengthError("sequence loss needs at least two tokens");
  const NodeId head = g.slice_rows(fwd.logits, 0, n - 1);
  return g.nll(head, tokens.subspan(1));
}

double sequence_nll(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                    const Tensor* prompt) {
  if (tokens.size() < 2) throw LengthError("sequence loss needs at least two tokens");
  const Tensor logits = forward_logits(weights, tokens, prompt);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto target = tokens[t + 1];
    if (target < 0 || static_cast<std::size_t>(target) >= logits.cols()) {
      throw IndexError("target token " + std::to_string(target) + " outside vocabulary");
    }
    total -= kernel::log_prob(logits.row(t), target);
  }
  return total / static_cast<double>(tokens.size() - 1);
}

ModelWeights train_base(ModelWeights weights, const data::Corpus& corpus,
                        const BaseTrainConfig& config) {
  if (config.steps == 0) return weights;
  const auto split = corpus.split(data::SplitKind::train);
  const std::size_t seq = config.seq_len ? config.seq_len : weights.config.max_positions;
  if (seq > weights.config.max_positions) {
    throw LengthError("train_base: seq_len exceeds max_positions");
  }
  if (split.size() < seq) {
    throw DataError("train_base: corpus '" + corpus.name + "' train split has " +
                    std::to_string(split.size()) + " tokens, fewer than one window of " +
                    std::to_string(seq));
  }
  if (config.batch == 0) throw ConfigError("train_base: batch must be >= 1");

  std::vector<Tensor*> params = weights.parameters();
  optim::AdamW opt({config.lr, 0.9f, 0.99f, 1e-8f, config.weight_decay}, params);
  std::vector<Tensor> grads;
  for (const Tensor* p : params) grads.emplace_back(p->shape());
  std::vector<Tensor*> grad_ptrs;
  for (Tensor& t : grads) grad_ptrs.push_back(&t);

  std::mt19937_64 rng(config.seed);
  const std::size_t offsets = split.size() - seq + 1;
  const std::size_t warmup = std::max<std::size_t>(1, std::min<std::size_t>(100, config.steps / 10));
  const float inv_batch = 1.0f / static_cast<float>(config.batch);
  double running = 0.0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    for (Tensor& gt : grads) gt.fill(0.0f);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t start =
          static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 *
                                   static_cast<double>(offsets));
      const auto window = split.subspan(start, seq);
      Graph g;
      const ForwardNodes fwd = build_forward(g, weights, window);
      const NodeId loss = sequence_loss(g, fwd, window);
      loss_sum += g.value(loss)[0];
      std::vector<NodeId> wanted;
      for (const auto& [name, id] : fwd.params) wanted.push_back(id);
      const kernel::GradientMap gm = g.backward(loss, wanted);
      for (std::size_t i = 0; i < wanted.size(); ++i) {
        const Tensor& src = gm.at(wanted[i].index);
        float* dst = grads[i].data();
        for (std::size_t j = 0; j < src.numel(); ++j) dst[j] += src[j] * inv_batch;
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(config.batch);
    if (!std::isfinite(mean_loss)) {
      throw DivergenceError("train_base: non-finite loss at step " + std::to_string(step));
    }
    optim::clip_global_norm(grad_ptrs, 1.0);
    float lr = config.lr;
    if (step < warmup) {
      lr = config.lr * static_cast<float>(step + 1) / static_cast<float>(warmup);
    } else {
      const double progress = static_cast<double>(step - warmup) /
                              static_cast<double>(std::max<std::size_t>(1, config.steps - warmup));
      lr = static_cast<float>(config.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))));
    }
    std::vector<const Tensor*> cgrads(grad_ptrs.begin(), grad_ptrs.end());
    opt.step(cgrads, lr);
    running = step == 0 ? mean_loss : 0.98 * running + 0.02 * mean_loss;
    if (config.log_every && (step + 1) % config.log_every == 0) {
      std::clog << "[train-base] step " << (step + 1) << "/" << config.steps << " loss "
                << running << "\n";
    }
  }
  return weights;
}

// ---- generation --------------------------------------------------------------

IncrementalDecoder::IncrementalDecoder(const ModelWeights& weights, const Tensor* prompt)
    : w_(weights), prompt_(prompt) {
  const ModelConfig& cfg = w_.config;
  if (prompt_ && (prompt_->rank() != 2 || prompt_->shape()[1] != cfg.embed_dim)) {
    throw CompatibilityError("prompt width does not match model embed_dim");
  }
  k_cache_.resize(cfg.n_layers);
  v_cache_.resize(cfg.n_layers);
  for (const LayerWeights& l : w_.layers) {
    transposed_.push_back(kernel::transpose(l.wq));
    transposed_.push_back(kernel::transpose(l.wk));
    transposed_.push_back(kernel::transpose(l.wv));
    transposed_.push_back(kernel::transpose(l.wo));
    transposed_.push_back(kernel::transpose(l.w_up));
    transposed_.push_back(kernel::transpose(l.w_down));
  }
  head_t_ = kernel::transpose(w_.token_embedding);
}

std::vector<float> IncrementalDecoder::append(std::span<const std::int32_t> tokens) {
  const ModelConfig& cfg = w_.config;
  const std::size_t d = cfg.embed_dim;
  const std::size_t k = (!prompt_done_ && prompt_) ? prompt_->shape()[0] : 0;
  const std::size_t rows = k + tokens.size();
  if (rows == 0) throw LengthError("decoder: nothing to append");
  if (length_ + rows > cfg.max_positions) {
    throw LengthError("decoder: sequence would exceed max_positions " +
                      std::to_string(cfg.max_positions));
  }
  Tensor x = Tensor::matrix(rows, d);
  if (k) std::copy(prompt_->values().begin(), prompt_->values().end(), x.data());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto id = tokens[i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw IndexError("decoder: token " + std::to_string(id) + " outside vocabulary");
    }
    const auto src = w_.token_embedding.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), x.row(k + i).begin());
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const auto pos = w_.position_embedding.row(length_ + i);
    auto dst = x.row(i);
    for (std::size_t j = 0; j < d; ++j) dst[j] += pos[j];
  }
  prompt_done_ = true;
  return run_rows(std::move(x));
}

std::vector<float> IncrementalDecoder::run_rows(Tensor x) {
  const ModelConfig& cfg = w_.config;
  const std::size_t d = cfg.embed_dim;
  const std::size_t rows = x.rows();
  const std::size_t heads = cfg.n_heads;
  const std::size_t dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const std::size_t start = length_;
  std::vector<float> scores;

  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const LayerWeights& l = w_.layers[layer];
    const Tensor* wt = transposed_.data() + layer * 6;
    const Tensor h = kernel::layer_norm(x, l.ln1_gain, l.ln1_bias);
    const Tensor q = kernel::matmul(h, wt[0]);
    const Tensor kk = kernel::matmul(h, wt[1]);
    const Tensor v = kernel::matmul(h, wt[2]);
    auto& kc = k_cache_[layer];
    auto& vc = v_cache_[layer];
    kc.insert(kc.end(), kk.values().begin(), kk.values().end());
    vc.insert(vc.end(), v.values().begin(), v.values().end());

    Tensor mix = Tensor::matrix(rows, d);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t ctx = start + i + 1;
      scores.resize(ctx);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const float* qi = q.data() + i * d + hd * dh;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < ctx; ++j) {
          const float* kj = kc.data() + j * d + hd * dh;
          float s = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        float total = 0.0f;
        for (std::size_t j = 0; j < ctx; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          total += scores[j];
        }
        const float inv = 1.0f / total;
        float* out = mix.data() + i * d + hd * dh;
        for (std::size_t j = 0; j < ctx; ++j) {
          const float p = scores[j] * inv;
          const float* vj = vc.data() + j * d + hd * dh;
          for (std::size_t c = 0; c < dh; ++c) out[c] += p * vj[c];
        }
      }
    }
    const Tensor o = kernel::matmul(mix, wt[3]);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += o[i];
    const Tensor h2 = kernel::layer_norm(x, l.ln2_gain, l.ln2_bias);
    const Tensor up = kernel::gelu(kernel::matmul(h2, wt[4]));
    const Tensor down = kernel::matmul(up, wt[5]);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += down[i];
  }
  length_ += rows;

  Tensor last(Shape{1, d});
  std::copy_n(x.data() + (rows - 1) * d, d, last.data());
  const Tensor hf = kernel::layer_norm(last, w_.final_gain, w_.final_bias);
  const Tensor logits = kernel::matmul(hf, head_t_);
  return logits.storage();
}

std::int32_t argmax_lowest(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = j;
  }
  return static_cast<std::int32_t>(best);
}

namespace {

void check_request(const ModelWeights& weights, const GenerationRequest& request,
                   const Tensor* prompt) {
  if (request.prefix.empty()) throw LengthError("generate: prefix must hold at least one token");
  const std::size_t k = prompt ? prompt->rows() : 0;
  if (request.prefix.size() + k + request.steps > weights.config.max_positions) {
    throw LengthError("generate: prefix " + std::to_string(request.prefix.size()) + " + prompt " +
                      std::to_string(k) + " + steps " + std::to_string(request.steps) +
                      " exceed max_positions " + std::to_string(weights.config.max_positions));
  }
}

}  // namespace

data::TokenIds generate(const ModelWeights& weights, const GenerationRequest& request,
                        const Tensor* prompt) {
  check_request(weights, request, prompt);
  data::TokenIds out = request.prefix;
  if (request.steps == 0) return out;
  IncrementalDecoder dec(weights, prompt);
  std::vector<float> logits = dec.append(request.prefix);
  for (std::size_t s = 0; s < request.steps; ++s) {
    const std::int32_t next = argmax_lowest(logits);
    out.push_back(next);
    if (s + 1 < request.steps) logits = dec.append(std::span<const std::int32_t>(&next, 1));
  }
  return out;
}

data::TokenIds generate_uncached(const ModelWeights& weights, const GenerationRequest& request,
                                 const Tensor* prompt) {
  check_request(weights, request, prompt);
  data::TokenIds out = request.prefix;
  for (std::size_t s = 0; s < request.steps; ++s) {
    const Tensor logits = forward_logits(weights, out, prompt);
    out.push_back(argmax_lowest(logits.row(logits.rows() - 1)));
  }
  return out;
}

}  // namespace cprompt::model
