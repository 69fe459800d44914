#include "cprompt/pipeline.hpp"

#include <algorithm>
#include <iostream>

namespace cprompt::harness {

namespace {

std::string file_label(const compress::CompressionSpec& spec) {
  std::string out;
  for (char c : spec.label()) {
    if (c == '%') {
      out += "pct";
    } else if (c == '+') {
      out += '_';
    } else {
      out += c;
    }
  }
  return out;
}

template <class Load>
bool try_resume(bool resume, const std::filesystem::path& path, const std::string& key, Load&& load) {
  if (!resume || !std::filesystem::exists(path)) return false;
  json extra;
  if (!load(&extra)) return false;
  return extra.value("key", std::string()) == key;
}

}  // namespace

Workspace::Workspace(ExperimentConfig config, RunOptions options)
    : config_(std::move(config)), options_(std::move(options)) {
  config_.validate();
  out_ = options_.out_dir.empty() ? std::filesystem::path(config_.output_dir) : options_.out_dir;
}

void Workspace::log(const std::string& msg) const {
  if (options_.verbose) std::clog << msg << "\n";
}

const data::Corpus& Workspace::corpus(const std::string& name) {
  if (auto it = corpora_.find(name); it != corpora_.end()) return it->second;
  for (const auto& c : config_.corpora) {
    if (c.name == name) {
      return corpora_.emplace(name, stage("corpus:" + name, [&] { return build_corpus(c); })).first->second;
    }
  }
  throw StageError("corpus:" + name, "unknown corpus '" + name + "'");
}

std::filesystem::path Workspace::base_path() const { return out_ / "base.ckpt"; }

std::filesystem::path Workspace::compressed_path(const compress::CompressionSpec& spec) const {
  return out_ / "compressed" / (file_label(spec) + ".ckpt");
}

std::filesystem::path Workspace::prompt_path(const compress::CompressionSpec& spec, std::size_t k) const {
  return out_ / "prompts" / (file_label(spec) + "_k" + std::to_string(k) + ".ckpt");
}

std::string Workspace::base_key() {
  json j;
  j["model"] = to_json(config_.model);
  auto bt = config_.base_training;
  bt.log_every = 0;
  j["base_training"] = {{"steps", bt.steps}, {"lr", bt.lr},     {"batch", bt.batch},
                        {"seq_len", bt.seq_len}, {"seed", bt.seed}, {"weight_decay", bt.weight_decay}};
  for (const auto& name : config_.base_corpora) j["corpora"].push_back(corpus(name).id);
  return json_digest(j);
}

std::string Workspace::compressed_key(const compress::CompressionSpec& spec) {
  const std::string calib = spec.calib.corpus.empty() ? config_.prompt_corpus : spec.calib.corpus;
  return json_digest({{"base", base_key()}, {"spec", to_json(spec)}, {"calib", corpus(calib).id}});
}

std::string Workspace::prompt_key(const compress::CompressionSpec& spec, std::size_t k) {
  auto pc = config_.prompt_training;
  pc.k = k;
  return json_digest(
      {{"model", compressed_key(spec)}, {"prompt", pc.digest()}, {"corpus", corpus(config_.prompt_corpus).id}});
}

const model::ModelWeights& Workspace::base_model() {
  if (base_) return *base_;
  return stage("train-base", [&]() -> const model::ModelWeights& {
    const std::string key = base_key();
    const auto path = base_path();
    model::ModelWeights loaded;
    if (try_resume(options_.resume, path, key, [&](json* extra) {
          loaded = load_model(path, extra);
          return true;
        })) {
      log("[train-base] resumed from " + path.string());
      base_ = std::move(loaded);
      return *base_;
    }
    std::vector<const data::Corpus*> members;
    for (const auto& name : config_.base_corpora) members.push_back(&corpus(name));
    const data::Corpus mix = data::mix_corpora("base-mix", members);
    log("[train-base] training on " + std::to_string(mix.train.size()) + " tokens");
    base_ = model::train_base(model::init_model(config_.model), mix, config_.base_training);
    save_model(path, *base_, {{"key", key}});
    return *base_;
  });
}

const compress::CompressedModel& Workspace::full_model() {
  if (!full_) full_ = std::make_unique<compress::CompressedModel>(compress::uncompressed_model(base_model()));
  return *full_;
}

const compress::CompressedModel& Workspace::compressed(const compress::CompressionSpec& spec) {
  if (spec.method == compress::Method::none) return full_model();
  const std::string label = spec.label();
  if (auto it = compressed_.find(label); it != compressed_.end() && it->second->spec() == spec) {
    return *it->second;
  }
  const model::ModelWeights& base = base_model();
  return stage("compress:" + label, [&]() -> const compress::CompressedModel& {
    const std::string key = compressed_key(spec);
    const auto path = compressed_path(spec);
    std::unique_ptr<compress::CompressedModel> m;
    if (try_resume(options_.resume, path, key, [&](json* extra) {
          m = std::make_unique<compress::CompressedModel>(load_compressed(path, extra));
          return true;
        })) {
      log("[compress] resumed " + label);
    } else {
      const std::string calib = spec.calib.corpus.empty() ? config_.prompt_corpus : spec.calib.corpus;
      log("[compress] " + label);
      m = std::make_unique<compress::CompressedModel>(compress::compress_model(base, spec, corpus(calib)));
      save_compressed(path, *m, {{"key", key}});
    }
    auto& slot = compressed_[label];
    slot = std::move(m);
    return *slot;
  });
}

const prompt::TrainedPrompt& Workspace::trained_prompt(const compress::CompressionSpec& spec, std::size_t k) {
  const std::string id = spec.label() + "#k" + std::to_string(k);
  if (auto it = prompts_.find(id); it != prompts_.end()) return it->second;
  const compress::CompressedModel& model = compressed(spec);
  return stage("train-prompt:" + id, [&]() -> const prompt::TrainedPrompt& {
    const std::string key = prompt_key(spec, k);
    const auto path = prompt_path(spec, k);
    prompt::TrainedPrompt tp;
    if (try_resume(options_.resume, path, key, [&](json* extra) {
          tp.prompt = load_prompt(path, &tp.history, extra);
          return true;
        })) {
      log("[train-prompt] resumed " + id);
    } else {
      auto pc = config_.prompt_training;
      pc.k = k;
      log("[train-prompt] " + id);
      const auto& bt = config_.base_training;
      const std::size_t trained = bt.seq_len ? bt.seq_len : config_.model.max_positions;
      if (k + std::max(pc.seq_len, config_.eval_seq_len) > trained) {
        log("[train-prompt] warning: k + seq_len exceeds the " + std::to_string(trained) +
            " positions the base model was trained on");
      }
      tp = prompt::train_prompt(model, corpus(config_.prompt_corpus), pc);
      save_prompt(path, tp.prompt, &tp.history, {{"key", key}});
    }
    return prompts_.emplace(id, std::move(tp)).first->second;
  });
}

eval::EvalReport Workspace::evaluate(const compress::CompressedModel& model, const prompt::SoftPrompt* prompt,
                                     const std::string& corpus_name) {
  return stage("eval:" + corpus_name, [&] {
    return eval::perplexity(model, prompt, corpus(corpus_name), config_.eval_seq_len);
  });
}

namespace {

ReportRow ppl_row(const std::string& experiment, const std::string& corpus, const std::string& compression,
                  const std::string& source, std::size_t k, const eval::EvalReport& r) {
  ReportRow row;
  row.experiment = experiment;
  row.corpus = corpus;
  row.compression = compression;
  row.prompt_source = source;
  row.k = k;
  row.ppl = r.ppl;
  row.nll = r.mean_nll;
  return row;
}

}  // namespace

ReportTable run_pipeline(Workspace& ws) {
  const auto& cfg = ws.config();
  ReportTable t;
  const auto& full = ws.full_model();
  for (const auto& c : cfg.eval_corpora) {
    t.rows.push_back(ppl_row("pipeline", c, "full", "none", 0, ws.evaluate(full, nullptr, c)));
  }
  for (const auto& spec : cfg.compression) {
    const auto& model = ws.compressed(spec);
    const std::string label = spec.label();
    if (spec.method != compress::Method::none) {
      for (const auto& c : cfg.eval_corpora) {
        t.rows.push_back(ppl_row("pipeline", c, label, "none", 0, ws.evaluate(model, nullptr, c)));
      }
    }
    const auto& tp = ws.trained_prompt(spec, cfg.prompt_training.k);
    for (const auto& c : cfg.eval_corpora) {
      t.rows.push_back(ppl_row("pipeline", c, label, label, tp.prompt.k(), ws.evaluate(model, &tp.prompt, c)));
    }
  }
  if (cfg.zero_shot) t.append(zero_shot(ws));
  return t;
}

ReportTable run_pipeline(const ExperimentConfig& config, const RunOptions& options) {
  Workspace ws(config, options);
  return run_pipeline(ws);
}

ReportTable ablation_prompt_size(Workspace& ws) {
  const auto& cfg = ws.config();
  if (!cfg.ablation) throw StageError("ablate-k", "config has no ablation section");
  const auto& spec = cfg.ablation->compression;
  const std::string label = spec.label();
  const auto& model = ws.compressed(spec);
  const std::string val_name = cfg.prompt_corpus + ":validation";
  ReportTable t;
  const auto add = [&](std::size_t k, const prompt::SoftPrompt* p, const std::string& source, double val_ppl) {
    ReportRow v;
    v.experiment = "ablate-k";
    v.corpus = val_name;
    v.compression = label;
    v.prompt_source = source;
    v.k = k;
    v.ppl = val_ppl;
    v.nll = std::log(val_ppl);
    t.rows.push_back(v);
    for (const auto& c : cfg.eval_corpora) {
      t.rows.push_back(ppl_row("ablate-k", c, label, source, k, ws.evaluate(model, p, c)));
    }
  };
  bool baseline = false;
  for (std::size_t k : cfg.ablation->ks) {
    if (k == 0) {
      if (baseline) continue;
      baseline = true;
      const double v = ws.stage("ablate-k", [&] {
        return prompt::validation_ppl(model.dense(), nullptr, ws.corpus(cfg.prompt_corpus),
                                      cfg.prompt_training.seq_len);
      });
      add(0, nullptr, "none", v);
      continue;
    }
    const auto& tp = ws.trained_prompt(spec, k);
    add(k, &tp.prompt, label, tp.history.points.at(tp.history.best).validation_ppl);
  }
  return t;
}

ReportTable transfer_matrix(Workspace& ws) {
  const auto& cfg = ws.config();
  if (!cfg.transfer) throw StageError("transfer", "config has no transfer section");
  ReportTable t;
  const std::size_t k = cfg.prompt_training.k;
  for (const auto& target : cfg.transfer->targets) {
    const auto& model = ws.compressed(target);
    const std::string tl = target.label();
    for (const auto& c : cfg.eval_corpora) {
      t.rows.push_back(ppl_row("transfer", c, tl, "none", 0, ws.evaluate(model, nullptr, c)));
    }
    for (const auto& source : cfg.transfer->sources) {
      const auto& tp = ws.trained_prompt(source, k);
      const prompt::PromptedModel pm = ws.stage("transfer", [&] { return prompt::stitch(tp.prompt, model); });
      for (const auto& c : cfg.eval_corpora) {
        t.rows.push_back(ppl_row("transfer", c, tl, source.label(), k, ws.evaluate(*pm.model, pm.prompt, c)));
      }
    }
  }
  return t;
}

ReportTable zero_shot(Workspace& ws) {
  const auto& cfg = ws.config();
  if (!cfg.zero_shot) throw StageError("zero-shot", "config has no zero_shot section");
  const auto& z = *cfg.zero_shot;
  const auto tasks = ws.stage("zero-shot", [&] {
    return eval::continuation_tasks(ws.corpus(z.corpus), data::SplitKind::test, z.count, z.context_len,
                                    z.choice_len, z.seed);
  });
  ReportTable t;
  const auto add = [&](const compress::CompressedModel& m, const prompt::SoftPrompt* p, const std::string& label,
                       const std::string& source) {
    const auto r = ws.stage("zero-shot", [&] { return eval::mc_accuracy(m, p, tasks); });
    ReportRow row;
    row.experiment = "zero-shot";
    row.corpus = z.corpus;
    row.compression = label;
    row.prompt_source = source;
    row.k = p ? p->k() : 0;
    row.accuracy = r.accuracy;
    t.rows.push_back(row);
  };
  add(ws.full_model(), nullptr, "full", "none");
  for (const auto& spec : cfg.compression) {
    const auto& model = ws.compressed(spec);
    if (spec.method != compress::Method::none) add(model, nullptr, spec.label(), "none");
    add(model, &ws.trained_prompt(spec, cfg.prompt_training.k).prompt, spec.label(), spec.label());
  }
  return t;
}

ReportTable latency_table(Workspace& ws, std::vector<eval::LatencyProfile>* profiles) {
  const auto& cfg = ws.config();
  const eval::LatencySettings settings = cfg.latency.value_or(eval::LatencySettings{});
  const auto& model = cfg.compression.empty() ? ws.full_model() : ws.compressed(cfg.compression.front());
  const auto rows = ws.stage("profile", [&] { return eval::profile_latency(model, settings); });
  ReportTable t;
  for (const auto& p : rows) {
    ReportRow row;
    row.experiment = "profile";
    row.compression = model.spec().label();
    row.prompt_source = p.k ? "random" : "none";
    row.k = p.k;
    row.latency_ms = p.per_token_ms;
    t.rows.push_back(row);
  }
  if (profiles) *profiles = rows;
  return t;
}

}  // namespace cprompt::harness
