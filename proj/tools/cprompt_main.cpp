// Command-line front end: each subcommand runs one stage of the experiment
// described by a JSON config and writes its artifacts under --out.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"

#include "cprompt/pipeline.hpp"

using namespace cprompt;
using namespace cprompt::harness;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "experiment config (JSON); built-in desk config if omitted");
  sub->add_option("--out", c.out, "output directory (overrides config.output_dir)");
  sub->add_option("--seed", c.seed, "global seed (overrides config.seed)");
  sub->add_flag("--resume", c.resume, "reuse checkpoints whose recorded inputs match");
  sub->add_flag("-q,--quiet", c.quiet, "suppress progress logging");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? default_config() : load_config(c.config_path);
  if (c.seed) cfg.apply_seed(*c.seed);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (!c.quiet) {
    cfg.base_training.log_every = cfg.base_training.log_every ? cfg.base_training.log_every : 100;
    cfg.prompt_training.log_every = cfg.prompt_training.log_every ? cfg.prompt_training.log_every : 1;
  }
  cfg.validate();
  return cfg;
}

RunOptions options(const Common& c, const ExperimentConfig& cfg) {
  return RunOptions{cfg.output_dir, c.resume, !c.quiet};
}

void finish(const ReportTable& t, const std::filesystem::path& dir) {
  emit_report(t, dir);
  std::cout << to_markdown(t) << "wrote " << (dir / "report.csv").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compress a small transformer and recover it with a learned soft prompt"};
  app.require_subcommand(1);
  Common common;

  auto* cfg_cmd = app.add_subcommand("config", "print the resolved config as JSON");
  auto* base_cmd = app.add_subcommand("train-base", "train the base model");
  auto* compress_cmd = app.add_subcommand("compress", "compress the base model with every configured spec");
  auto* prompt_cmd = app.add_subcommand("train-prompt", "learn a soft prompt for every configured spec");
  std::optional<std::size_t> k_override;
  prompt_cmd->add_option("-k,--tokens", k_override, "prompt length (overrides prompt_training.k)");
  auto* eval_cmd = app.add_subcommand("eval", "perplexity with and without prompts; writes report.csv");
  auto* transfer_cmd = app.add_subcommand("transfer", "stitch prompts across compression levels");
  auto* ablate_cmd = app.add_subcommand("ablate-k", "prompt-length sweep");
  auto* profile_cmd = app.add_subcommand("profile", "per-token generation latency against prompt length");
  auto* report_cmd = app.add_subcommand("report", "run every configured experiment into one report.csv");
  for (auto* s : {cfg_cmd, base_cmd, compress_cmd, prompt_cmd, eval_cmd, transfer_cmd, ablate_cmd, profile_cmd,
                  report_cmd}) {
    add_common(s, common);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    try {
      cfg = resolve(common);
      if (k_override) {
        cfg.prompt_training.k = *k_override;
        cfg.validate();
      }
    } catch (const std::exception& e) {
      std::cerr << "error: [config] " << e.what() << "\n";
      return 2;
    }
    if (cfg_cmd->parsed()) {
      std::cout << to_json(cfg).dump(2) << "\n";
      return 0;
    }
    Workspace ws(cfg, options(common, cfg));
    const std::filesystem::path out = ws.out_dir();

    if (base_cmd->parsed()) {
      ws.base_model();
      std::cout << "base model: " << ws.base_path().string() << "\n";
    } else if (compress_cmd->parsed()) {
      for (const auto& spec : cfg.compression) {
        if (spec.method == compress::Method::none) continue;
        const auto& m = ws.compressed(spec);
        std::printf("%-18s %s  %s\n", spec.label().c_str(), m.fingerprint().substr(0, 16).c_str(),
                    ws.compressed_path(spec).string().c_str());
      }
    } else if (prompt_cmd->parsed()) {
      for (const auto& spec : cfg.compression) {
        const auto& tp = ws.trained_prompt(spec, cfg.prompt_training.k);
        const auto& best = tp.history.points.at(tp.history.best);
        std::printf("%-18s k=%zu best step %zu val ppl %.6g  %s\n", spec.label().c_str(), tp.prompt.k(), best.step,
                    best.validation_ppl, ws.prompt_path(spec, cfg.prompt_training.k).string().c_str());
      }
    } else if (eval_cmd->parsed()) {
      finish(run_pipeline(ws), out);
    } else if (transfer_cmd->parsed()) {
      finish(transfer_matrix(ws), out / "transfer");
    } else if (ablate_cmd->parsed()) {
      finish(ablation_prompt_size(ws), out / "ablate-k");
    } else if (profile_cmd->parsed()) {
      std::vector<eval::LatencyProfile> profiles;
      const ReportTable t = latency_table(ws, &profiles);
      for (const auto& p : profiles) {
        std::printf("k=%-4zu first token %.3f ms  per token %.4f ms  %.1f tok/s  overhead x%.4f\n", p.k,
                    p.first_token_ms, p.per_token_ms, p.tokens_per_second, p.overhead_ratio);
      }
      finish(t, out / "profile");
    } else if (report_cmd->parsed()) {
      // Latency is machine-dependent, so it stays out of the combined report.
      ReportTable t = run_pipeline(ws);
      if (cfg.ablation) t.append(ablation_prompt_size(ws));
      if (cfg.transfer) t.append(transfer_matrix(ws));
      finish(t, out);
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
