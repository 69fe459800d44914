#include "cprompt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "cprompt/digest.hpp"

namespace cprompt::harness {

namespace {

// Reads optional fields of one JSON object and rejects keys it does not know.
class Fields {
 public:
  Fields(const json& j, std::string where, std::initializer_list<const char*> allowed)
      : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items()) {
      if (!ok.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

  template <class T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
};

}  // namespace

json to_json(const compress::CompressionSpec& s) {
  json j{{"method", compress::method_name(s.method)},
         {"group_size", s.group_size},
         {"block_size", s.block_size},
         {"damping", s.damping},
         {"calibration", {{"n_sequences", s.calib.n_sequences}, {"seq_len", s.calib.seq_len}}}};
  if (compress::method_prunes(s.method)) j["sparsity"] = s.sparsity;
  if (compress::method_quantizes(s.method)) j["bits"] = s.bits;
  if (!s.calib.corpus.empty()) j["calibration"]["corpus"] = s.calib.corpus;
  return j;
}

compress::CompressionSpec spec_from_json(const json& j) {
  Fields f(j, "compression",
           {"method", "sparsity", "bits", "group_size", "block_size", "damping", "calibration"});
  compress::CompressionSpec s;
  std::string method = "none";
  f.get("method", method);
  s.method = compress::parse_method(method);
  f.get("sparsity", s.sparsity);
  f.get("bits", s.bits);
  f.get("group_size", s.group_size);
  f.get("block_size", s.block_size);
  f.get("damping", s.damping);
  if (f.has("calibration")) {
    Fields c(f.at("calibration"), "compression.calibration", {"n_sequences", "seq_len", "corpus"});
    c.get("n_sequences", s.calib.n_sequences);
    c.get("seq_len", s.calib.seq_len);
    c.get("corpus", s.calib.corpus);
  }
  s.validate();
  return s;
}

json to_json(const model::ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"ff_dim", c.ff_dim},         {"max_positions", c.max_positions},
          {"seed", c.seed}};
}

model::ModelConfig model_config_from_json(const json& j) {
  Fields f(j, "model",
           {"vocab_size", "embed_dim", "n_layers", "n_heads", "ff_dim", "max_positions", "seed"});
  model::ModelConfig c;
  f.get("vocab_size", c.vocab_size);
  f.get("embed_dim", c.embed_dim);
  f.get("n_layers", c.n_layers);
  f.get("n_heads", c.n_heads);
  f.get("ff_dim", c.ff_dim);
  f.get("max_positions", c.max_positions);
  f.get("seed", c.seed);
  c.validate();
  return c;
}

namespace {

json to_json(const model::BaseTrainConfig& c) {
  return {{"steps", c.steps}, {"lr", c.lr},         {"batch", c.batch},
          {"seq_len", c.seq_len}, {"seed", c.seed}, {"weight_decay", c.weight_decay},
          {"log_every", c.log_every}};
}

model::BaseTrainConfig base_config_from_json(const json& j) {
  Fields f(j, "base_training", {"steps", "lr", "batch", "seq_len", "seed", "weight_decay", "log_every"});
  model::BaseTrainConfig c;
  f.get("steps", c.steps);
  f.get("lr", c.lr);
  f.get("batch", c.batch);
  f.get("seq_len", c.seq_len);
  f.get("seed", c.seed);
  f.get("weight_decay", c.weight_decay);
  f.get("log_every", c.log_every);
  return c;
}

json to_json(const CorpusConfig& c) {
  json j{{"name", c.name}, {"kind", c.kind}};
  if (c.kind == "file") {
    j["path"] = c.path;
    return j;
  }
  j["length"] = c.length;
  if (c.kind == "named") return j;
  j["seed"] = c.seed;
  if (c.kind == "template") {
    j["lexicon_seed"] = c.template_spec.lexicon_seed;
    j["rule_seed"] = c.template_spec.rule_seed;
    j["zipf"] = c.template_spec.zipf;
    j["lexicon_size"] = c.template_spec.lexicon_size;
    j["branching"] = c.template_spec.branching;
    if (c.template_spec.exclude_rule_seed) j["exclude_rule_seed"] = *c.template_spec.exclude_rule_seed;
  } else {
    j["order"] = c.markov_spec.order;
    j["transition_seed"] = c.markov_spec.transition_seed;
    j["alphabet_size"] = c.markov_spec.alphabet_size;
    j["branching"] = c.markov_spec.branching;
  }
  return j;
}

CorpusConfig corpus_from_json(const json& j) {
  Fields f(j, "corpora[]",
           {"name", "kind", "length", "seed", "lexicon_seed", "rule_seed", "zipf", "lexicon_size", "branching",
            "exclude_rule_seed", "order", "transition_seed", "alphabet_size", "path"});
  CorpusConfig c;
  f.get("name", c.name);
  f.get("kind", c.kind);
  f.get("length", c.length);
  f.get("seed", c.seed);
  f.get("path", c.path);
  if (c.name.empty()) throw ConfigError("corpora[]: every corpus needs a name");
  if (c.kind == "template") {
    f.get("lexicon_seed", c.template_spec.lexicon_seed);
    f.get("rule_seed", c.template_spec.rule_seed);
    f.get("zipf", c.template_spec.zipf);
    f.get("lexicon_size", c.template_spec.lexicon_size);
    f.get("branching", c.template_spec.branching);
    if (f.has("exclude_rule_seed")) {
      std::uint64_t ex = 0;
      f.get("exclude_rule_seed", ex);
      c.template_spec.exclude_rule_seed = ex;
    }
  } else if (c.kind == "markov") {
    f.get("order", c.markov_spec.order);
    f.get("transition_seed", c.markov_spec.transition_seed);
    f.get("alphabet_size", c.markov_spec.alphabet_size);
    f.get("branching", c.markov_spec.branching);
  } else if (c.kind == "file") {
    if (c.path.empty()) throw ConfigError("corpora[" + c.name + "]: file corpus needs a path");
  } else if (c.kind != "named") {
    throw ConfigError("corpora[" + c.name + "]: unknown kind '" + c.kind + "'");
  }
  return c;
}

std::vector<compress::CompressionSpec> specs_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array");
  std::vector<compress::CompressionSpec> out;
  for (const auto& e : j) out.push_back(spec_from_json(e));
  return out;
}

json specs_to_json(const std::vector<compress::CompressionSpec>& specs) {
  json arr = json::array();
  for (const auto& s : specs) arr.push_back(harness::to_json(s));
  return arr;
}

}  // namespace

json to_json(const prompt::PromptTrainConfig& c) {
  return {{"lr", c.optimizer.lr},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"eps", c.optimizer.eps},
          {"weight_decay", c.optimizer.weight_decay},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"eval_every", c.eval_every},
          {"seed", c.seed},
          {"k", c.k},
          {"seq_len", c.seq_len},
          {"clip_norm", c.clip_norm},
          {"log_every", c.log_every}};
}

prompt::PromptTrainConfig prompt_config_from_json(const json& j) {
  Fields f(j, "prompt_training",
           {"lr", "beta1", "beta2", "eps", "weight_decay", "batch_size", "total_steps", "eval_every",
            "seed", "k", "seq_len", "clip_norm", "log_every"});
  prompt::PromptTrainConfig c;
  f.get("lr", c.optimizer.lr);
  f.get("beta1", c.optimizer.beta1);
  f.get("beta2", c.optimizer.beta2);
  f.get("eps", c.optimizer.eps);
  f.get("weight_decay", c.optimizer.weight_decay);
  f.get("batch_size", c.batch_size);
  f.get("total_steps", c.total_steps);
  f.get("eval_every", c.eval_every);
  f.get("seed", c.seed);
  f.get("k", c.k);
  f.get("seq_len", c.seq_len);
  f.get("clip_norm", c.clip_norm);
  f.get("log_every", c.log_every);
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["base_training"] = to_json(c.base_training);
  j["corpora"] = json::array();
  for (const auto& cc : c.corpora) j["corpora"].push_back(to_json(cc));
  j["base_corpora"] = c.base_corpora;
  j["prompt_corpus"] = c.prompt_corpus;
  j["eval_corpora"] = c.eval_corpora;
  j["compression"] = specs_to_json(c.compression);
  j["prompt_training"] = to_json(c.prompt_training);
  if (c.ablation) {
    j["ablation"] = {{"compression", to_json(c.ablation->compression)}, {"ks", c.ablation->ks}};
  }
  if (c.transfer) {
    j["transfer"] = {{"sources", specs_to_json(c.transfer->sources)},
                     {"targets", specs_to_json(c.transfer->targets)}};
  }
  if (c.zero_shot) {
    j["zero_shot"] = {{"corpus", c.zero_shot->corpus},
                      {"count", c.zero_shot->count},
                      {"context_len", c.zero_shot->context_len},
                      {"choice_len", c.zero_shot->choice_len},
                      {"seed", c.zero_shot->seed}};
  }
  if (c.latency) {
    j["latency"] = {{"ks", c.latency->ks},           {"prefix_len", c.latency->prefix_len},
                    {"steps", c.latency->steps},     {"repeats", c.latency->repeats},
                    {"warmup", c.latency->warmup},   {"seed", c.latency->seed}};
  }
  j["eval_seq_len"] = c.eval_seq_len;
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  Fields f(j, "config",
           {"model", "base_training", "corpora", "base_corpora", "prompt_corpus", "eval_corpora",
            "compression", "prompt_training", "ablation", "transfer", "zero_shot", "latency",
            "eval_seq_len", "output_dir", "seed"});
  ExperimentConfig c;
  if (f.has("model")) c.model = model_config_from_json(f.at("model"));
  if (f.has("base_training")) c.base_training = base_config_from_json(f.at("base_training"));
  if (f.has("corpora")) {
    if (!f.at("corpora").is_array()) throw ConfigError("config.corpora: expected an array");
    for (const auto& e : f.at("corpora")) c.corpora.push_back(corpus_from_json(e));
  }
  f.get("base_corpora", c.base_corpora);
  f.get("prompt_corpus", c.prompt_corpus);
  f.get("eval_corpora", c.eval_corpora);
  if (f.has("compression")) c.compression = specs_from_json(f.at("compression"), "config.compression");
  if (f.has("prompt_training")) c.prompt_training = prompt_config_from_json(f.at("prompt_training"));
  if (f.has("ablation")) {
    Fields a(f.at("ablation"), "ablation", {"compression", "ks"});
    AblationConfig ab;
    if (a.has("compression")) ab.compression = spec_from_json(a.at("compression"));
    a.get("ks", ab.ks);
    c.ablation = ab;
  }
  if (f.has("transfer")) {
    Fields t(f.at("transfer"), "transfer", {"sources", "targets"});
    TransferConfig tc;
    if (t.has("sources")) tc.sources = specs_from_json(t.at("sources"), "transfer.sources");
    if (t.has("targets")) tc.targets = specs_from_json(t.at("targets"), "transfer.targets");
    c.transfer = tc;
  }
  if (f.has("zero_shot")) {
    Fields z(f.at("zero_shot"), "zero_shot", {"corpus", "count", "context_len", "choice_len", "seed"});
    MCConfig mc;
    z.get("corpus", mc.corpus);
    z.get("count", mc.count);
    z.get("context_len", mc.context_len);
    z.get("choice_len", mc.choice_len);
    z.get("seed", mc.seed);
    c.zero_shot = mc;
  }
  if (f.has("latency")) {
    Fields l(f.at("latency"), "latency", {"ks", "prefix_len", "steps", "repeats", "warmup", "seed"});
    eval::LatencySettings ls;
    l.get("ks", ls.ks);
    l.get("prefix_len", ls.prefix_len);
    l.get("steps", ls.steps);
    l.get("repeats", ls.repeats);
    l.get("warmup", ls.warmup);
    l.get("seed", ls.seed);
    c.latency = ls;
  }
  f.get("eval_seq_len", c.eval_seq_len);
  f.get("output_dir", c.output_dir);
  f.get("seed", c.seed);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FilesystemError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void ExperimentConfig::validate() const {
  model.validate();
  std::set<std::string> names;
  for (const auto& c : corpora) {
    if (!names.insert(c.name).second) throw ConfigError("config: duplicate corpus '" + c.name + "'");
  }
  const auto known = [&](const std::string& name, const std::string& where) {
    if (!names.count(name)) throw ConfigError("config." + where + ": unknown corpus '" + name + "'");
  };
  if (base_corpora.empty()) throw ConfigError("config.base_corpora: at least one corpus required");
  for (const auto& n : base_corpora) known(n, "base_corpora");
  known(prompt_corpus, "prompt_corpus");
  for (const auto& n : eval_corpora) known(n, "eval_corpora");
  std::vector<compress::CompressionSpec> specs = compression;
  if (ablation) specs.push_back(ablation->compression);
  if (transfer) {
    specs.insert(specs.end(), transfer->sources.begin(), transfer->sources.end());
    specs.insert(specs.end(), transfer->targets.begin(), transfer->targets.end());
  }
  for (const auto& s : specs) {
    s.validate();
    if (!s.calib.corpus.empty()) known(s.calib.corpus, "compression.calibration.corpus");
  }
  if (zero_shot) known(zero_shot->corpus, "zero_shot.corpus");
  if (transfer && (transfer->sources.empty() || transfer->targets.empty())) {
    throw ConfigError("config.transfer: sources and targets must be non-empty");
  }
  if (ablation && ablation->ks.empty()) throw ConfigError("config.ablation.ks: must be non-empty");
  if (eval_seq_len < 2) throw ConfigError("config.eval_seq_len: must be >= 2");
  prompt_training.validate();
}

void ExperimentConfig::apply_seed(std::uint64_t global_seed) {
  seed = global_seed;
  model.seed = global_seed;
  base_training.seed = global_seed * 1000003ULL + 7;
  prompt_training.seed = global_seed * 1000003ULL + 11;
}

std::string json_digest(const json& j) { return sha256_hex(j.dump()).substr(0, 16); }

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.base_training.steps = 1000;
  CorpusConfig alpha;
  alpha.name = "alpha";
  CorpusConfig beta;
  beta.name = "beta";
  c.corpora = {alpha, beta};
  c.base_corpora = {"alpha", "beta"};
  c.prompt_corpus = "alpha";
  c.eval_corpora = {"alpha", "beta"};
  compress::CompressionSpec q3;
  q3.method = compress::Method::obs_quant;
  q3.bits = 3;
  compress::CompressionSpec q2 = q3;
  q2.bits = 2;
  c.compression = {q3, q2};
  c.apply_seed(1);
  c.validate();
  return c;
}

data::Corpus build_corpus(const CorpusConfig& c) {
  const auto byte = data::TokenizerSpec::byte_level();
  if (c.kind == "file") return data::load_corpus_file(c.path, byte, c.name);
  data::SynthSpec spec;
  if (c.kind == "named") {
    spec = data::named_synth_spec(c.name, c.length);
  } else {
    spec.name = c.name;
    spec.length = c.length;
    spec.seed = c.seed;
    if (c.kind == "template") {
      spec.generator = c.template_spec;
    } else {
      spec.generator = c.markov_spec;
    }
  }
  return data::synth_corpus(spec);
}

}  // namespace cprompt::harness
