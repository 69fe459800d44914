#pragma once

// Experiment pipelines. A Workspace owns every artifact of one configuration
// (corpora, base model, compressed models, trained prompts), builds each on
// first use, and persists it as a checkpoint under the output directory. With
// `resume`, a checkpoint whose recorded inputs match is loaded instead of
// being rebuilt.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "cprompt/checkpoint.hpp"
#include "cprompt/config.hpp"
#include "cprompt/eval.hpp"
#include "cprompt/report.hpp"

namespace cprompt::harness {

// Failure inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: config.output_dir
  bool resume = false;
  bool verbose = false;
};

class Workspace {
 public:
  Workspace(ExperimentConfig config, RunOptions options);

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return out_; }

  const data::Corpus& corpus(const std::string& name);
  const model::ModelWeights& base_model();
  const compress::CompressedModel& full_model();
  const compress::CompressedModel& compressed(const compress::CompressionSpec& spec);
  // Prompt of length k trained on the prompt corpus against `spec`'s model,
  // with every other setting from config().prompt_training.
  const prompt::TrainedPrompt& trained_prompt(const compress::CompressionSpec& spec, std::size_t k);

  eval::EvalReport evaluate(const compress::CompressedModel& model, const prompt::SoftPrompt* prompt,
                            const std::string& corpus_name);

  std::filesystem::path base_path() const;
  std::filesystem::path compressed_path(const compress::CompressionSpec& spec) const;
  std::filesystem::path prompt_path(const compress::CompressionSpec& spec, std::size_t k) const;

  // Runs `fn`, rethrowing any failure as a StageError tagged with `stage`.
  template <class F>
  decltype(auto) stage(const std::string& name, F&& fn) {
    try {
      return fn();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }

 private:
  std::string base_key();
  std::string compressed_key(const compress::CompressionSpec& spec);
  std::string prompt_key(const compress::CompressionSpec& spec, std::size_t k);
  void log(const std::string& msg) const;

  ExperimentConfig config_;
  RunOptions options_;
  std::filesystem::path out_;
  std::map<std::string, data::Corpus> corpora_;
  std::optional<model::ModelWeights> base_;
  std::unique_ptr<compress::CompressedModel> full_;
  std::map<std::string, std::unique_ptr<compress::CompressedModel>> compressed_;
  std::map<std::string, prompt::TrainedPrompt> prompts_;
};

// Base model, then per compression spec: compress, evaluate without a prompt,
// train a prompt, evaluate with it on every eval corpus. Adds zero-shot rows
// when the config asks for them.
ReportTable run_pipeline(Workspace& ws);
ReportTable run_pipeline(const ExperimentConfig& config, const RunOptions& options = {});

// One prompt per k against config().ablation->compression, plus the k = 0 row.
ReportTable ablation_prompt_size(Workspace& ws);

// Prompts trained on each source spec, stitched onto each target spec.
ReportTable transfer_matrix(Workspace& ws);

// Zero-shot continuation accuracy with and without the learned prompt.
ReportTable zero_shot(Workspace& ws);

// Per-token generation latency for the configured prompt lengths.
ReportTable latency_table(Workspace& ws, std::vector<eval::LatencyProfile>* profiles = nullptr);

}  // namespace cprompt::harness
