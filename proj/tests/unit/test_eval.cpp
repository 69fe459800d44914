#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cprompt/eval.hpp"
#include "support.hpp"

using namespace cprompt;
using namespace cprompt::eval;

namespace {

const data::Corpus& alpha() {
  static const data::Corpus c = data::synth_corpus(data::named_synth_spec("alpha", 40000));
  return c;
}

model::ModelWeights small_model(std::uint64_t seed = 5) {
  return testing_support::perturbed_model(testing_support::tiny_config(16, 2, 2, 32, 256, 64), seed, 0.2f);
}

}  // namespace

TEST(Perplexity, UniformModel) {
  auto w = model::init_model(testing_support::tiny_config(8, 1, 2, 16, 64, 32));
  w.for_each([](const std::string&, Tensor& t) { t.fill(0.0f); });
  const auto corpus = data::make_corpus("u", testing_support::random_tokens(4000, 64, 1),
                                        data::TokenizerSpec{}, data::SplitFractions{0.5, 0.25});
  const EvalReport r = perplexity(compress::uncompressed_model(w), nullptr, corpus, 16);
  EXPECT_NEAR(r.ppl, 64.0, 1e-3);
  EXPECT_EQ(r.prompt_id, "none");
  EXPECT_EQ(r.compression, "full");
}

TEST(Perplexity, AgreesWithReferenceNll) {
  const auto w = small_model();
  const auto model = compress::uncompressed_model(w);
  const EvalReport r = perplexity(model, nullptr, alpha(), 32, data::SplitKind::validation);
  const auto windows = data::pack(alpha().split(data::SplitKind::validation), 32);
  EXPECT_EQ(r.token_count, windows.size() * 31);
  double total = 0.0;
  for (const auto& win : windows) total += testing_support::reference_nll(w, win);
  EXPECT_NEAR(r.mean_nll, total / static_cast<double>(windows.size()), 1e-5);
  EXPECT_DOUBLE_EQ(r.ppl, std::exp(r.mean_nll));
  EXPECT_EQ(r.corpus_id, alpha().id);
  EXPECT_THROW(perplexity(model, nullptr, alpha(), 100000), DataError);
}

TEST(Perplexity, EmptyPromptEqualsNoPrompt) {
  const auto model = compress::uncompressed_model(small_model());
  const auto empty = prompt::init_prompt(0, model.dense().token_embedding, 1);
  const EvalReport a = perplexity(model, nullptr, alpha(), 32);
  const EvalReport b = perplexity(model, &empty, alpha(), 32);
  EXPECT_EQ(a.ppl, b.ppl);
  EXPECT_EQ(a.mean_nll, b.mean_nll);
  const auto p = prompt::init_prompt(4, model.dense().token_embedding, 2);
  EXPECT_NE(perplexity(model, &p, alpha(), 32).ppl, a.ppl);
}

TEST(ChoiceLogprob, MatchesReferenceLogSoftmax) {
  const auto w = small_model(7);
  const auto p = prompt::init_prompt(3, w.token_embedding, 4);
  const data::TokenIds context = testing_support::random_tokens(6, 256, 8);
  const data::TokenIds choice = testing_support::random_tokens(4, 256, 9);
  data::TokenIds seq = context;
  seq.insert(seq.end(), choice.begin(), choice.end());
  const testing_support::Matrix pm = testing_support::to_matrix(p.E);
  const auto logits = testing_support::reference_logits(w, seq, &pm);
  double expect = 0.0;
  for (std::size_t j = 0; j < choice.size(); ++j) {
    const auto& row = logits[context.size() - 1 + j];
    double mx = -1e300, z = 0.0;
    for (double v : row) mx = std::max(mx, v);
    for (double v : row) z += std::exp(v - mx);
    expect += row[static_cast<std::size_t>(choice[j])] - mx - std::log(z);
  }
  EXPECT_NEAR(choice_logprob(w, &p.E, context, choice), expect, 1e-4);
  EXPECT_THROW(choice_logprob(w, nullptr, {}, choice), ContractError);
  EXPECT_THROW(choice_logprob(w, nullptr, context, testing_support::random_tokens(70, 256, 1)), LengthError);
}

TEST(McAccuracy, SingleChoiceAlwaysRight) {
  const auto model = compress::uncompressed_model(small_model());
  const std::vector<MCTask> tasks{{{1, 2, 3}, {{4, 5}}, 0}, {{9}, {{8}}, 0}};
  const MCResult r = mc_accuracy(model, nullptr, tasks);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.standard_error, 0.0);
  EXPECT_THROW(mc_accuracy(model, nullptr, {}), ContractError);
  EXPECT_THROW(mc_accuracy(model, nullptr, {{{1}, {{2}}, 1}}), ContractError);
}

TEST(McAccuracy, NormalisationRule) {
  const auto model = compress::uncompressed_model(small_model(6));
  const auto& w = model.dense();
  std::vector<MCTask> tasks;
  for (std::uint64_t s = 0; s < 30; ++s) {
    MCTask t;
    t.context = testing_support::random_tokens(5, 256, 100 + s);
    t.choices = {testing_support::random_tokens(2, 256, 200 + s), testing_support::random_tokens(7, 256, 300 + s),
                 testing_support::random_tokens(4, 256, 400 + s)};
    t.gold = s % 3;
    tasks.push_back(t);
  }
  for (bool normalize : {true, false}) {
    const MCResult r = mc_accuracy(model, nullptr, tasks, normalize);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      std::size_t best = 0;
      double best_score = -INFINITY;
      for (std::size_t c = 0; c < 3; ++c) {
        double s = choice_logprob(w, nullptr, tasks[i].context, tasks[i].choices[c]);
        if (normalize) s /= static_cast<double>(tasks[i].choices[c].size());
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      EXPECT_EQ(r.predictions[i], best);
      correct += best == tasks[i].gold;
    }
    EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / 30.0);
  }
}

TEST(ContinuationTasks, GoldIsTheRealContinuation) {
  const auto tasks = continuation_tasks(alpha(), data::SplitKind::test, 50, 12, 6, 3);
  ASSERT_EQ(tasks.size(), 50u);
  const auto split = alpha().split(data::SplitKind::test);
  std::size_t gold_first = 0;
  for (const auto& t : tasks) {
    ASSERT_EQ(t.choices.size(), 2u);
    EXPECT_NE(t.choices[0], t.choices[1]);
    data::TokenIds seq = t.context;
    seq.insert(seq.end(), t.choices[t.gold].begin(), t.choices[t.gold].end());
    EXPECT_NE(std::search(split.begin(), split.end(), seq.begin(), seq.end()), split.end());
    gold_first += t.gold == 0;
  }
  EXPECT_GT(gold_first, 10u);
  EXPECT_LT(gold_first, 40u);
  EXPECT_EQ(continuation_tasks(alpha(), data::SplitKind::test, 50, 12, 6, 3)[7].choices, tasks[7].choices);
  const auto tiny = data::make_corpus("t", testing_support::random_tokens(400, 256, 1), data::TokenizerSpec{});
  EXPECT_THROW(continuation_tasks(tiny, data::SplitKind::test, 5, 12, 6, 1), DataError);
}

TEST(McAccuracy, MemorisedContinuations) {
  // Each task's context is followed by its gold choice in the training data;
  // the distractor is the gold choice of another task.
  std::vector<MCTask> tasks;
  data::TokenIds tokens;
  std::mt19937_64 rng(12);
  for (std::uint64_t i = 0; i < 100; ++i) {
    MCTask t;
    t.context = testing_support::random_tokens(6, 256, 1000 + i);
    t.choices = {testing_support::random_tokens(4, 256, 2000 + i), testing_support::random_tokens(4, 256, 2000 + (i + 1) % 100)};
    if (rng() & 1) {
      std::swap(t.choices[0], t.choices[1]);
      t.gold = 1;
    }
    tasks.push_back(t);
  }
  for (int rep = 0; rep < 40; ++rep) {
    std::vector<std::size_t> order(100);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      tokens.insert(tokens.end(), tasks[i].context.begin(), tasks[i].context.end());
      const auto& g = tasks[i].choices[tasks[i].gold];
      tokens.insert(tokens.end(), g.begin(), g.end());
    }
  }
  const auto corpus = data::make_corpus("mc", tokens, data::TokenizerSpec::byte_level(), {0.98, 0.01});
  model::BaseTrainConfig c;
  c.steps = 600;
  c.seq_len = 40;
  const auto w = model::train_base(model::init_model(testing_support::tiny_config(32, 2, 2, 64, 256, 64)), corpus, c);
  const MCResult r = mc_accuracy(compress::uncompressed_model(w), nullptr, tasks);
  EXPECT_GE(r.accuracy, 0.9);
}

TEST(McAccuracy, EqualLengthChoicesIgnoreNormalisation) {
  const auto model = compress::uncompressed_model(small_model(4));
  std::vector<MCTask> tasks;
  for (std::uint64_t s = 0; s < 40; ++s) {
    tasks.push_back({testing_support::random_tokens(5, 256, 500 + s),
                     {testing_support::random_tokens(3, 256, 600 + s), testing_support::random_tokens(3, 256, 700 + s)},
                     0});
  }
  EXPECT_EQ(mc_accuracy(model, nullptr, tasks, true).predictions, mc_accuracy(model, nullptr, tasks, false).predictions);
}

TEST(Latency, ReferenceRowAndErrors) {
  const auto model = compress::uncompressed_model(small_model());
  LatencySettings s;
  s.ks = {6, 0};
  s.prefix_len = 8;
  s.steps = 8;
  s.repeats = 5;
  s.warmup = 1;
  const auto rows = profile_latency(model, s);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].k, 0u);
  EXPECT_EQ(rows[0].overhead_ratio, 1.0);
  EXPECT_EQ(rows[1].k, 6u);
  for (const auto& r : rows) {
    EXPECT_GT(r.per_token_ms, 0.0);
    EXPECT_NEAR(r.tokens_per_second, 1000.0 / r.per_token_ms, 1e-9);
    EXPECT_NEAR(r.overhead_ratio, r.per_token_ms / rows[0].per_token_ms, 1e-12);
  }
  s.repeats = 4;
  EXPECT_THROW(profile_latency(model, s), ConfigError);
  s.repeats = 5;
  s.ks = {60};
  EXPECT_THROW(profile_latency(model, s), LengthError);
}
