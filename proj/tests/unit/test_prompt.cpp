#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cprompt/prompt.hpp"
#include "support.hpp"

using namespace cprompt;
using namespace cprompt::prompt;
using testing_support::Matrix;

namespace {

model::ModelWeights small_model(std::uint64_t seed = 5) {
  return testing_support::perturbed_model(testing_support::tiny_config(16, 2, 2, 32, 256, 64), seed, 0.2f);
}

const data::Corpus& alpha() {
  static const data::Corpus c = data::synth_corpus(data::named_synth_spec("alpha", 20000));
  return c;
}

PromptTrainConfig quick_config() {
  PromptTrainConfig c;
  c.k = 4;
  c.seq_len = 24;
  c.batch_size = 2;
  c.total_steps = 20;
  c.eval_every = 10;
  c.optimizer.lr = 0.05f;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(InitPrompt, RowsComeFromTheEmbedding) {
  const Tensor w = testing_support::random_tensor({32, 8}, 1);
  EXPECT_EQ(init_prompt(0, w, 1).k(), 0u);
  const SoftPrompt p = init_prompt(500, w, 2);
  ASSERT_EQ(p.E.shape(), (Shape{500, 8}));
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < 500; ++i) {
    bool found = false;
    for (std::size_t r = 0; r < 32 && !found; ++r) {
      if (std::equal(w.row(r).begin(), w.row(r).end(), p.E.row(i).begin())) {
        seen.insert(r);
        found = true;
      }
    }
    ASSERT_TRUE(found) << i;
  }
  // 500 draws cover all 32 rows except with probability < 32 * (31/32)^500.
  EXPECT_EQ(seen.size(), 32u);
  EXPECT_EQ(init_prompt(16, w, 9).E, init_prompt(16, w, 9).E);
  EXPECT_NE(init_prompt(16, w, 9).E, init_prompt(16, w, 10).E);
}

TEST(HardPrompt, SingleToken) {
  const Tensor w = testing_support::random_tensor({256, 8}, 2);
  const SoftPrompt p = hard_prompt("A", data::TokenizerSpec::byte_level(), w);
  ASSERT_EQ(p.k(), 1u);
  EXPECT_TRUE(std::equal(w.row(65).begin(), w.row(65).end(), p.E.row(0).begin()));
  EXPECT_EQ(p.provenance.kind, PromptKind::hard);
  EXPECT_THROW(hard_prompt("", data::TokenizerSpec::byte_level(), w), DataError);
  EXPECT_EQ(hard_prompt(kRepairInstruction, data::TokenizerSpec::byte_level(), w).k(), kRepairInstruction.size());
}

TEST(HardPrompt, EquivalentToPrependedTokens) {
  const auto w = small_model();
  const std::string text = "fix the weights";
  const SoftPrompt p = hard_prompt(text, data::TokenizerSpec::byte_level(), w.token_embedding);
  const auto tokens = testing_support::random_tokens(20, 256, 3);
  data::TokenIds joined = data::tokenize(text, data::TokenizerSpec::byte_level());
  joined.insert(joined.end(), tokens.begin(), tokens.end());
  const Tensor full = model::forward_logits(w, joined);
  const Tensor prompted = model::forward_logits(w, tokens, &p.E);
  ASSERT_EQ(prompted.rows(), tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t j = 0; j < 256; ++j) ASSERT_EQ(prompted.at(i, j), full.at(text.size() + i, j));
}

TEST(PromptNll, EmptyPromptIsTheModelNll) {
  const auto w = small_model();
  const auto model = compress::uncompressed_model(w);
  const std::vector<data::TokenIds> batch{testing_support::random_tokens(30, 256, 4),
                                          testing_support::random_tokens(30, 256, 5)};
  const SoftPrompt empty = init_prompt(0, w.token_embedding, 1);
  const double expect = (testing_support::reference_nll(w, batch[0]) + testing_support::reference_nll(w, batch[1])) / 2;
  EXPECT_NEAR(prompt_nll(model, empty, batch), expect, 1e-5);
  EXPECT_EQ(prompt_nll(model, empty, batch),
            (model::sequence_nll(w, batch[0]) + model::sequence_nll(w, batch[1])) / 2);

  const SoftPrompt p = init_prompt(5, w.token_embedding, 2);
  const Matrix pm = testing_support::to_matrix(p.E);
  const double with_prompt =
      (testing_support::reference_nll(w, batch[0], &pm) + testing_support::reference_nll(w, batch[1], &pm)) / 2;
  EXPECT_NEAR(prompt_nll(model, p, batch), with_prompt, 1e-5);
}

TEST(PromptNll, UniformModelGivesLogVocab) {
  auto w = model::init_model(testing_support::tiny_config(8, 1, 2, 16, 64, 32));
  w.for_each([](const std::string&, Tensor& t) { t.fill(0.0f); });
  const auto model = compress::uncompressed_model(w);
  const SoftPrompt p = init_prompt(3, testing_support::random_tensor({64, 8}, 6), 1);
  const std::vector<data::TokenIds> batch{testing_support::random_tokens(12, 64, 7)};
  EXPECT_NEAR(prompt_nll(model, p, batch), std::log(64.0), 1e-6);
  EXPECT_THROW(prompt_nll(model, p, {}), ContractError);
}

TEST(PromptNllGrad, MatchesDoublePrecisionFiniteDifferences) {
  const auto w = small_model(8);
  const std::vector<data::TokenIds> batch{testing_support::random_tokens(14, 256, 9),
                                          testing_support::random_tokens(14, 256, 10)};
  const SoftPrompt p = init_prompt(13, w.token_embedding, 3);
  const PromptLoss loss = prompt_nll_grad(w, p.E, batch);
  ASSERT_EQ(loss.grad.shape(), p.E.shape());
  const Matrix base = testing_support::to_matrix(p.E);
  const auto f = [&](const Matrix& e) {
    return (testing_support::reference_nll(w, batch[0], &e) + testing_support::reference_nll(w, batch[1], &e)) / 2;
  };
  EXPECT_NEAR(loss.nll, f(base), 1e-5);
  const double h = 1e-5;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t i = rng() % 13, j = rng() % 16;
    Matrix plus = base, minus = base;
    plus[i][j] += h;
    minus[i][j] -= h;
    const double fd = (f(plus) - f(minus)) / (2 * h);
    const double g = loss.grad.at(i, j);
    ASSERT_LE(std::abs(g - fd) / std::max(std::abs(fd), 1e-3), 1e-3) << i << "," << j << " fd " << fd << " g " << g;
  }
}

TEST(TrainPrompt, ZeroStepsReturnsInitialisation) {
  const auto model = compress::uncompressed_model(small_model());
  PromptTrainConfig c = quick_config();
  c.total_steps = 0;
  const TrainedPrompt t = train_prompt(model, alpha(), c);
  EXPECT_EQ(t.prompt.E, init_prompt(c.k, model.dense().token_embedding, c.seed).E);
  ASSERT_EQ(t.history.points.size(), 1u);
  EXPECT_EQ(t.history.best, 0u);
  EXPECT_EQ(t.prompt.provenance.source_fingerprint, model.fingerprint());
  EXPECT_EQ(t.prompt.provenance.corpus_id, alpha().id);
}

TEST(TrainPrompt, OnlyThePromptMoves) {
  const auto w = small_model();
  const auto model = compress::uncompressed_model(w);
  const std::string before = model.content_digest();
  std::size_t calls = 0;
  Tensor last;
  const TrainedPrompt t = train_prompt(model, alpha(), quick_config(), [&](std::size_t step, const Tensor& E) {
    EXPECT_EQ(step, ++calls);
    last = E;
  });
  EXPECT_EQ(calls, 20u);
  EXPECT_EQ(model.content_digest(), before);
  EXPECT_EQ(model.dense().token_embedding, w.token_embedding);
  EXPECT_NE(last, init_prompt(4, w.token_embedding, 3).E);
}

TEST(TrainPrompt, BestSnapshotAndHistory) {
  const auto model = compress::uncompressed_model(small_model());
  const PromptTrainConfig c = quick_config();
  const TrainedPrompt t = train_prompt(model, alpha(), c);
  ASSERT_EQ(t.history.points.size(), 3u);
  EXPECT_TRUE(std::isnan(t.history.points[0].train_nll));
  std::size_t argmin = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(t.history.points[i].step, i * 10);
    if (t.history.points[i].validation_ppl < t.history.points[argmin].validation_ppl) argmin = i;
  }
  EXPECT_EQ(t.history.best, argmin);
  EXPECT_EQ(validation_ppl(model.dense(), &t.prompt.E, alpha(), c.seq_len),
            t.history.points[argmin].validation_ppl);
  EXPECT_LT(t.history.points[argmin].validation_ppl, t.history.points[0].validation_ppl);
  // Deterministic under a fixed seed.
  EXPECT_EQ(train_prompt(model, alpha(), c).prompt.E, t.prompt.E);
}

TEST(TrainPrompt, DetectsWeightMutation) {
  const auto model = compress::uncompressed_model(small_model());
  EXPECT_THROW(train_prompt(model, alpha(), quick_config(),
                            [&](std::size_t step, const Tensor&) {
                              if (step == 3) const_cast<Tensor&>(model.dense().layers[0].wq)[0] += 1.0f;
                            }),
               FrozenWeightViolation);
}

TEST(TrainPrompt, NonFiniteLossRaises) {
  auto w = small_model();
  w.layers[1].w_down[0] = std::nanf("");
  EXPECT_THROW(train_prompt(compress::uncompressed_model(w), alpha(), quick_config()), DivergenceError);
}

TEST(TrainPrompt, RejectsBadConfigs) {
  const auto model = compress::uncompressed_model(small_model());
  PromptTrainConfig c = quick_config();
  c.eval_every = 7;
  EXPECT_THROW(train_prompt(model, alpha(), c), ConfigError);
  c = quick_config();
  c.k = 50;
  EXPECT_THROW(train_prompt(model, alpha(), c), LengthError);
  c = quick_config();
  c.optimizer.lr = 0.0f;
  EXPECT_THROW(train_prompt(model, alpha(), c), ConfigError);
  EXPECT_NE(quick_config().digest(), c.digest());
}

TEST(Stitch, NotesForeignPrompts) {
  const auto w = small_model();
  const auto corpus = alpha();
  const auto full = compress::uncompressed_model(w);
  compress::CompressionSpec spec;
  spec.method = compress::Method::rtn_quant;
  spec.bits = 2;
  spec.group_size = 16;
  const auto q = compress::compress_model(w, spec, corpus);

  PromptTrainConfig c = quick_config();
  c.total_steps = 0;
  const SoftPrompt own = train_prompt(q, corpus, c).prompt;
  const PromptedModel same = stitch(own, q);
  EXPECT_FALSE(same.note.has_value());
  EXPECT_EQ(same.embeddings(), &own.E);
  const PromptedModel moved = stitch(own, full);
  ASSERT_TRUE(moved.note.has_value());
  EXPECT_NE(moved.note->find("rtn-2bit"), std::string::npos);
  EXPECT_NE(moved.note->find("full"), std::string::npos);

  const SoftPrompt wide = init_prompt(3, testing_support::random_tensor({10, 24}, 1), 1);
  EXPECT_THROW(stitch(wide, q), CompatibilityError);
  EXPECT_NO_THROW(stitch(init_prompt(0, testing_support::random_tensor({10, 24}, 1), 1), q));
}
