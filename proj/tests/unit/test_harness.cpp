#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cprompt/pipeline.hpp"
#include "support.hpp"

using namespace cprompt;
using namespace cprompt::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cprompt_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c = default_config();
  c.model = testing_support::tiny_config(16, 2, 2, 32, 256, 64);
  c.base_training.steps = 20;
  c.base_training.seq_len = 32;
  c.base_training.batch = 4;
  for (auto& corpus : c.corpora) corpus.length = 20000;
  compress::CompressionSpec rtn;
  rtn.method = compress::Method::rtn_quant;
  rtn.bits = 2;
  rtn.group_size = 16;
  compress::CompressionSpec obs = rtn;
  obs.method = compress::Method::obs_quant;
  obs.bits = 3;
  obs.calib = {4, 32, ""};
  c.compression = {rtn, obs};
  c.prompt_training.k = 4;
  c.prompt_training.seq_len = 24;
  c.prompt_training.total_steps = 10;
  c.prompt_training.eval_every = 5;
  c.prompt_training.batch_size = 2;
  c.eval_seq_len = 32;
  c.apply_seed(4);
  c.validate();
  return c;
}

void expect_same_weights(const model::ModelWeights& a, const model::ModelWeights& b) {
  std::vector<std::pair<std::string, Tensor>> ta, tb;
  a.for_each([&](const std::string& n, const Tensor& t) { ta.push_back({n, t}); });
  b.for_each([&](const std::string& n, const Tensor& t) { tb.push_back({n, t}); });
  EXPECT_EQ(ta, tb);
  EXPECT_EQ(a.config, b.config);
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny_experiment();
  c.ablation = AblationConfig{c.compression[1], {0, 4, 8}};
  c.transfer = TransferConfig{{c.compression[0]}, {c.compression[1]}};
  c.zero_shot = MCConfig{"beta", 10, 8, 4, 2};
  c.latency = eval::LatencySettings{{0, 12}, 16, 24, 5, 1, 9};
  const json j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
  EXPECT_EQ(json_digest(to_json(config_from_json(j))), json_digest(j));

  const fs::path dir = scratch_dir("config");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << j.dump(2);
  EXPECT_EQ(to_json(load_config(dir / "c.json")), j);
  EXPECT_THROW(load_config(dir / "missing.json"), FilesystemError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
}

TEST(Config, RejectsUnknownKeysAndReferences) {
  const json good = to_json(tiny_experiment());
  json top = good;
  top["learning_rate"] = 1;
  EXPECT_THROW(config_from_json(top), ConfigError);
  json nested = good;
  nested["prompt_training"]["stepz"] = 10;
  EXPECT_THROW(config_from_json(nested), ConfigError);
  json spec = good;
  spec["compression"][0]["bitz"] = 3;
  EXPECT_THROW(config_from_json(spec), ConfigError);
  json wrong_type = good;
  wrong_type["eval_seq_len"] = "long";
  EXPECT_THROW(config_from_json(wrong_type), ConfigError);

  ExperimentConfig c = tiny_experiment();
  c.eval_corpora.push_back("gamma");
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_experiment();
  c.compression[0].bits = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, SeedPropagates) {
  ExperimentConfig c = tiny_experiment();
  c.apply_seed(77);
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(c.model.seed, 77u);
  const auto base_seed = c.base_training.seed;
  EXPECT_NE(base_seed, c.prompt_training.seed);
  c.apply_seed(78);
  EXPECT_NE(c.base_training.seed, base_seed);
  c.apply_seed(77);
  EXPECT_EQ(c.base_training.seed, base_seed);
}

TEST(Checkpoint, ContainerRoundTrip) {
  Container c;
  c.metadata = {{"kind", "test"}, {"n", 3}};
  c.tensors.push_back(TensorRecord::from_tensor("a", testing_support::random_tensor({3, 5}, 1)));
  c.tensors.push_back(TensorRecord::from_tensor("scalar", Tensor::scalar(2.5f)));
  const auto bytes = encode_container(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CPLM");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  const Container d = decode_container(bytes);
  EXPECT_EQ(d.metadata, c.metadata);
  ASSERT_EQ(d.tensors.size(), 2u);
  EXPECT_EQ(d.find("a").to_tensor(), c.tensors[0].to_tensor());
  EXPECT_EQ(d.find("scalar").to_tensor()[0], 2.5f);
  EXPECT_EQ(encode_container(d), bytes);
  EXPECT_THROW(d.find("b"), DataError);
}

TEST(Checkpoint, CorruptionIsDetected) {
  Container c;
  c.metadata = {{"kind", "test"}};
  c.tensors.push_back(TensorRecord::from_tensor("w", testing_support::random_tensor({4, 4}, 2)));
  const auto bytes = encode_container(c);

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_container(magic), BadMagicError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(decode_container(version), BadVersionError);
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_container(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut))),
                 CorruptionError)
        << cut;
  }
  EXPECT_THROW(decode_container(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 40)), TruncatedError);
  auto flipped = bytes;
  flipped[bytes.size() - 40] ^= 0x01;
  EXPECT_THROW(decode_container(flipped), DigestMismatchError);
  auto tail = bytes;
  tail.back() ^= 0x80;
  EXPECT_THROW(decode_container(tail), DigestMismatchError);
}

TEST(Checkpoint, ModelRoundTripsBitwise) {
  const auto w = testing_support::perturbed_model(testing_support::tiny_config(), 3);
  const fs::path dir = scratch_dir("ckpt_model");
  save_model(dir / "m.ckpt", w, {{"note", "x"}});
  json extra;
  expect_same_weights(load_model(dir / "m.ckpt", &extra), w);
  EXPECT_EQ(extra.at("note"), "x");
  EXPECT_EQ(checkpoint_kind(dir / "m.ckpt"), "model");
  const auto first = read_bytes(dir / "m.ckpt");
  save_model(dir / "m.ckpt", load_model(dir / "m.ckpt"), {{"note", "x"}});
  EXPECT_EQ(read_bytes(dir / "m.ckpt"), first);
  EXPECT_THROW(load_prompt(dir / "m.ckpt"), CompatibilityError);
  EXPECT_THROW(load_model(dir / "nope.ckpt"), FilesystemError);
}

TEST(Checkpoint, CompressedModelRoundTrips) {
  const auto w = testing_support::perturbed_model(testing_support::tiny_config(16, 2, 2, 32, 256, 48), 4, 0.2f);
  const auto corpus = data::synth_corpus(data::named_synth_spec("alpha", 20000));
  const fs::path dir = scratch_dir("ckpt_compressed");
  for (const auto method : {compress::Method::rtn_quant, compress::Method::obs_prune, compress::Method::joint}) {
    compress::CompressionSpec spec;
    spec.method = method;
    spec.bits = method == compress::Method::obs_prune ? 0 : 3;
    spec.sparsity = method == compress::Method::rtn_quant ? 0.0 : 0.5;
    spec.group_size = 16;
    spec.calib = {4, 32, "alpha"};
    const auto m = compress::compress_model(w, spec, corpus);
    save_compressed(dir / "c.ckpt", m);
    const auto r = load_compressed(dir / "c.ckpt");
    EXPECT_EQ(r.fingerprint(), m.fingerprint());
    EXPECT_EQ(r.content_digest(), m.content_digest());
    EXPECT_EQ(r.spec(), m.spec());
    expect_same_weights(r.dense(), m.dense());
    for (const auto& [name, cl] : m.layers()) {
      const auto& rl = r.layers().at(name);
      EXPECT_EQ(rl.quant, cl.quant);
      EXPECT_EQ(rl.mask, cl.mask);
      EXPECT_EQ(rl.values, cl.values);
    }
  }
  EXPECT_EQ(checkpoint_kind(dir / "c.ckpt"), "compressed-model");
}

TEST(Checkpoint, PromptRoundTripsWithHistory) {
  prompt::SoftPrompt p = prompt::init_prompt(5, testing_support::random_tensor({40, 8}, 5), 2);
  p.provenance = {"abc", "3bit", "cid", "dig", prompt::PromptKind::learned};
  prompt::TrainHistory h;
  h.points = {{0, std::nan(""), 3.5}, {10, 1.25, 2.75}};
  h.best = 1;
  const fs::path dir = scratch_dir("ckpt_prompt");
  save_prompt(dir / "p.ckpt", p, &h);
  prompt::TrainHistory back;
  const auto q = load_prompt(dir / "p.ckpt", &back);
  EXPECT_EQ(q.E, p.E);
  EXPECT_EQ(q.provenance, p.provenance);
  ASSERT_EQ(back.points.size(), 2u);
  EXPECT_TRUE(std::isnan(back.points[0].train_nll));
  EXPECT_EQ(back.points[1].validation_ppl, 2.75);
  EXPECT_EQ(back.best, 1u);
  EXPECT_EQ(checkpoint_kind(dir / "p.ckpt"), "prompt");
}

TEST(Report, NumberFormat) {
  EXPECT_EQ(format_number(std::nullopt), "");
  EXPECT_EQ(format_number(1.5), "1.5");
  EXPECT_EQ(format_number(3.14159265), "3.14159");
  EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
  EXPECT_EQ(format_number(0.0), "0");
}

TEST(Report, CsvOracleAndRoundTrip) {
  ReportTable t;
  ReportRow a;
  a.experiment = "pipeline";
  a.corpus = "alpha";
  a.compression = "sparse-50%+4bit";
  a.prompt_source = "none";
  a.ppl = 2.5;
  a.nll = 0.916291;
  t.rows.push_back(a);
  ReportRow b;
  b.experiment = "profile";
  b.compression = "3bit";
  b.prompt_source = "random";
  b.k = 12;
  b.latency_ms = 0.125;
  t.rows.push_back(b);
  const std::string csv = to_csv(t);
  EXPECT_EQ(csv,
            "experiment,corpus,compression,prompt_source,k,ppl,nll,accuracy,latency_ms\n"
            "pipeline,alpha,sparse-50%+4bit,none,0,2.5,0.916291,,\n"
            "profile,,3bit,random,12,,,,0.125\n");
  EXPECT_EQ(parse_csv(csv), t);
  EXPECT_NE(t.find("pipeline", "alpha", "sparse-50%+4bit", "none"), nullptr);
  EXPECT_EQ(t.find("pipeline", "beta", "sparse-50%+4bit", "none"), nullptr);
  EXPECT_THROW(parse_csv("a,b\n"), DataError);

  const fs::path dir = scratch_dir("report");
  emit_report(t, dir);
  const auto first = read_text(dir / "report.csv");
  emit_report(t, dir);
  EXPECT_EQ(read_text(dir / "report.csv"), first);
  EXPECT_EQ(first, csv);
  EXPECT_TRUE(fs::exists(dir / "report.md"));
}

TEST(Pipeline, DegenerateRunMatchesUncompressedModel) {
  ExperimentConfig c = tiny_experiment();
  c.compression = {compress::CompressionSpec{}};
  c.prompt_training.k = 0;
  c.prompt_training.total_steps = 0;
  c.prompt_training.eval_every = 1;
  const ReportTable t = run_pipeline(c, {scratch_dir("degenerate")});
  ASSERT_EQ(t.rows.size(), 4u);
  for (const char* corpus : {"alpha", "beta"}) {
    const ReportRow* base = t.find("pipeline", corpus, "full", "none");
    const ReportRow* prompted = t.find("pipeline", corpus, "full", "full");
    ASSERT_TRUE(base && prompted);
    EXPECT_EQ(base->ppl, prompted->ppl);
    EXPECT_EQ(prompted->k, 0u);
  }
}

TEST(Pipeline, AblationWithOnlyZeroIsNoPromptRow) {
  ExperimentConfig c = tiny_experiment();
  c.ablation = AblationConfig{c.compression[0], {0}};
  Workspace ws(c, {scratch_dir("ablate0")});
  const ReportTable t = ablation_prompt_size(ws);
  const ReportTable p = run_pipeline(ws);
  for (const char* corpus : {"alpha", "beta"}) {
    const ReportRow* a = t.find("ablate-k", corpus, "rtn-2bit", "none", 0);
    ASSERT_NE(a, nullptr);
    EXPECT_EQ(a->ppl, p.find("pipeline", corpus, "rtn-2bit", "none")->ppl);
  }
  EXPECT_NE(t.find("ablate-k", "alpha:validation", "rtn-2bit", "none", 0), nullptr);
}

TEST(Pipeline, SingleCellTransferEqualsDirectPrompt) {
  ExperimentConfig c = tiny_experiment();
  c.transfer = TransferConfig{{c.compression[1]}, {c.compression[1]}};
  Workspace ws(c, {scratch_dir("transfer1")});
  const ReportTable t = transfer_matrix(ws);
  const ReportTable p = run_pipeline(ws);
  for (const char* corpus : {"alpha", "beta"}) {
    EXPECT_EQ(t.find("transfer", corpus, "3bit", "3bit")->ppl, p.find("pipeline", corpus, "3bit", "3bit")->ppl);
    EXPECT_EQ(t.find("transfer", corpus, "3bit", "none")->ppl, p.find("pipeline", corpus, "3bit", "none")->ppl);
  }
}

TEST(Pipeline, DeterministicAndResumable) {
  const ExperimentConfig c = tiny_experiment();
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const ReportTable ta = run_pipeline(c, {a});
  emit_report(ta, a);
  const ReportTable tb = run_pipeline(c, {b});
  emit_report(tb, b);
  EXPECT_EQ(read_bytes(a / "report.csv"), read_bytes(b / "report.csv"));
  EXPECT_EQ(read_bytes(a / "base.ckpt"), read_bytes(b / "base.ckpt"));
  // rows: 2 full + 2 specs x (2 plain + 2 prompted)
  EXPECT_EQ(ta.rows.size(), 10u);

  // Interrupted run: only the base model and one compressed model exist.
  const fs::path r = scratch_dir("det_resume");
  {
    Workspace ws(c, {r});
    ws.compressed(c.compression[0]);
  }
  const auto base_bytes = read_bytes(r / "base.ckpt");
  const auto stamp = fs::last_write_time(r / "base.ckpt");
  const ReportTable tr = run_pipeline(c, {r, true});
  EXPECT_EQ(tr, ta);
  EXPECT_EQ(fs::last_write_time(r / "base.ckpt"), stamp);
  EXPECT_EQ(read_bytes(r / "base.ckpt"), base_bytes);

  // A changed config invalidates the cached artifacts instead of reusing them.
  ExperimentConfig changed = c;
  changed.base_training.steps = 21;
  const ReportTable tc = run_pipeline(changed, {r, true});
  EXPECT_NE(tc.rows[0].ppl, ta.rows[0].ppl);
}

TEST(Pipeline, FailuresNameTheStage) {
  ExperimentConfig c = tiny_experiment();
  CorpusConfig missing;
  missing.name = "disk";
  missing.kind = "file";
  missing.path = "/nonexistent/corpus.txt";
  c.corpora.push_back(missing);
  c.eval_corpora.push_back("disk");
  try {
    run_pipeline(c, {scratch_dir("stage_err")});
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "corpus:disk");
    EXPECT_EQ(std::string(e.what()).rfind("[corpus:disk] ", 0), 0u);
  }
}
