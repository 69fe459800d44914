#pragma once

// Experiment configuration, read from and written to JSON. Unknown keys are
// rejected everywhere so that a typo fails loudly instead of silently running
// with a default.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cprompt/compress.hpp"
#include "cprompt/data.hpp"
#include "cprompt/eval.hpp"
#include "cprompt/model.hpp"
#include "cprompt/prompt.hpp"

namespace cprompt::harness {

using nlohmann::json;

// A corpus entry: either one of the built-in named corpora, a synthetic
// generator, or a raw byte file.
struct CorpusConfig {
  std::string name;
  std::string kind = "named";  // named | template | markov | file
  std::size_t length = 400000;
  std::uint64_t seed = 1;
  data::TemplateSpec template_spec;
  data::MarkovSpec markov_spec;
  std::string path;
};

struct TransferConfig {
  std::vector<compress::CompressionSpec> sources;
  std::vector<compress::CompressionSpec> targets;
};

struct AblationConfig {
  compress::CompressionSpec compression;
  std::vector<std::size_t> ks;
};

struct MCConfig {
  std::string corpus;
  std::size_t count = 200;
  std::size_t context_len = 48;
  std::size_t choice_len = 16;
  std::uint64_t seed = 3;
};

struct ExperimentConfig {
  model::ModelConfig model;
  model::BaseTrainConfig base_training;
  std::vector<CorpusConfig> corpora;
  std::vector<std::string> base_corpora;  // mixed for base training
  std::string prompt_corpus;              // calibration + prompt training
  std::vector<std::string> eval_corpora;
  std::vector<compress::CompressionSpec> compression;
  prompt::PromptTrainConfig prompt_training;
  std::optional<AblationConfig> ablation;
  std::optional<TransferConfig> transfer;
  std::optional<MCConfig> zero_shot;
  std::optional<eval::LatencySettings> latency;
  std::size_t eval_seq_len = 128;
  std::string output_dir = "out";
  std::uint64_t seed = 1;

  // Checks that every referenced corpus exists and the sub-configs are valid.
  void validate() const;
  // Sets `seed` and derives the model, base-training and prompt seeds from it.
  void apply_seed(std::uint64_t global_seed);
};

json to_json(const compress::CompressionSpec& spec);
compress::CompressionSpec spec_from_json(const json& j);
json to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const json& j);
json to_json(const prompt::PromptTrainConfig& c);
prompt::PromptTrainConfig prompt_config_from_json(const json& j);

json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Stable hash of a JSON value (keys are sorted by the serializer).
std::string json_digest(const json& j);

// A small configuration matching the reference desk experiment.
ExperimentConfig default_config();

data::Corpus build_corpus(const CorpusConfig& c);

}  // namespace cprompt::harness
