#include "cprompt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>

#include "cprompt/core.hpp"
#include "cprompt/digest.hpp"

namespace cprompt::data {

namespace {

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

// Weights drawn from a flat Dirichlet, normalised to sum to 1.
std::vector<double> dirichlet_weights(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> w(n);
  double total = 0.0;
  for (double& x : w) {
    x = -std::log(1.0 - uniform01(rng));
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<std::size_t> distinct_indices(std::mt19937_64& rng, std::size_t universe,
                                          std::size_t count) {
  std::vector<std::size_t> pool(universe);
  for (std::size_t i = 0; i < universe; ++i) pool[i] = i;
  count = std::min(count, universe);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, universe - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

std::size_t sample(std::mt19937_64& rng, std::span<const double> weights) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return weights.size() - 1;
}

std::string corpus_digest(const TokenIds& tokens, const std::string& tokenizer_id) {
  Sha256 h;
  h.update(tokenizer_id);
  h.update_u64(tokens.size());
  h.update(tokens.data(), tokens.size() * sizeof(std::int32_t));
  const Digest d = h.finish();
  return to_hex(std::span<const std::uint8_t>(d.data(), 8));
}

std::vector<std::string> token_strings(const TokenizerSpec& spec) {
  std::vector<std::string> table(spec.vocab_size());
  for (int b = 0; b < 256; ++b) table[static_cast<std::size_t>(b)] = std::string(1, static_cast<char>(b));
  for (std::size_t i = 0; i < spec.merges.size(); ++i) {
    const auto [a, b] = spec.merges[i];
    table[256 + i] = table[static_cast<std::size_t>(a)] + table[static_cast<std::size_t>(b)];
  }
  return table;
}

void apply_merge(TokenIds& ids, std::pair<std::int32_t, std::int32_t> pair, std::int32_t token) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i + 1 < ids.size() && ids[i] == pair.first && ids[i + 1] == pair.second) {
      ids[out++] = token;
      ++i;
    } else {
      ids[out++] = ids[i];
    }
  }
  ids.resize(out);
}

}  // namespace

std::string TokenizerSpec::id() const {
  if (kind == TokenizerKind::byte) return "byte";
  Sha256 h;
  for (const auto& [a, b] : merges) {
    h.update_u64(static_cast<std::uint64_t>(a));
    h.update_u64(static_cast<std::uint64_t>(b));
  }
  const Digest d = h.finish();
  return "bpe" + std::to_string(vocab_size()) + "-" +
         to_hex(std::span<const std::uint8_t>(d.data(), 8));
}

TokenizerSpec train_bpe(std::string_view text, std::size_t target_vocab) {
  TokenizerSpec spec;
  spec.kind = TokenizerKind::bpe;
  TokenIds ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<std::uint8_t>(c));
  while (spec.vocab_size() < target_vocab) {
    std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> counts;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) ++counts[{ids[i], ids[i + 1]}];
    std::pair<std::int32_t, std::int32_t> best{};
    std::size_t best_count = 1;
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      }
    }
    if (best_count < 2) break;
    const auto token = static_cast<std::int32_t>(spec.vocab_size());
    spec.merges.push_back(best);
    apply_merge(ids, best, token);
  }
  return spec;
}

TokenIds tokenize(std::string_view text, const TokenizerSpec& spec) {
  TokenIds ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<std::uint8_t>(c));
  for (std::size_t i = 0; i < spec.merges.size(); ++i) {
    apply_merge(ids, spec.merges[i], static_cast<std::int32_t>(256 + i));
  }
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids, const TokenizerSpec& spec) {
  const std::size_t v = spec.vocab_size();
  std::string out;
  if (spec.kind == TokenizerKind::byte) {
    out.reserve(ids.size());
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= v) {
        throw DataError("detokenize: id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(v));
      }
      out.push_back(static_cast<char>(id));
    }
    return out;
  }
  const auto table = token_strings(spec);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DataError("detokenize: id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(v));
    }
    out += table[static_cast<std::size_t>(id)];
  }
  return out;
}

std::span<const std::int32_t> Corpus::split(SplitKind kind) const {
  const SplitRange r = kind == SplitKind::train        ? train
                       : kind == SplitKind::validation ? validation
                                                       : test;
  return std::span<const std::int32_t>(tokens).subspan(r.begin, r.size());
}

Corpus make_corpus(std::string name, TokenIds tokens, const TokenizerSpec& tokenizer,
                   SplitFractions fractions) {
  if (fractions.train < 0 || fractions.validation < 0 ||
      fractions.train + fractions.validation > 1.0) {
    throw ConfigError("make_corpus: invalid split fractions");
  }
  const std::size_t v = tokenizer.vocab_size();
  for (auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DataError("make_corpus: token " + std::to_string(id) + " outside vocabulary");
    }
  }
  Corpus c;
  c.name = std::move(name);
  c.tokenizer_id = tokenizer.id();
  c.vocab_size = v;
  const std::size_t n = tokens.size();
  const auto train_end = static_cast<std::size_t>(std::floor(fractions.train * static_cast<double>(n)));
  const auto val_end = static_cast<std::size_t>(
      std::floor((fractions.train + fractions.validation) * static_cast<double>(n)));
  c.train = {0, train_end};
  c.validation = {train_end, val_end};
  c.test = {val_end, n};
  c.tokens = std::move(tokens);
  c.id = corpus_digest(c.tokens, c.tokenizer_id);
  if (c.name.empty()) c.name = c.id;
  return c;
}

Corpus load_corpus_file(const std::filesystem::path& path, const TokenizerSpec& tokenizer,
                        std::string name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FilesystemError("cannot read corpus file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (name.empty()) name = path.stem().string();
  return make_corpus(std::move(name), tokenize(text, tokenizer), tokenizer);
}

Corpus mix_corpora(std::string name, std::span<const Corpus* const> members) {
  if (members.empty()) throw DataError("mix_corpora: no member corpora");
  Corpus c;
  c.name = std::move(name);
  c.tokenizer_id = members.front()->tokenizer_id;
  c.vocab_size = members.front()->vocab_size;
  for (const Corpus* m : members) {
    if (m->tokenizer_id != c.tokenizer_id) {
      throw DataError("mix_corpora: member " + m->name + " uses a different tokenizer");
    }
  }
  SplitRange* ranges[] = {&c.train, &c.validation, &c.test};
  const SplitKind kinds[] = {SplitKind::train, SplitKind::validation, SplitKind::test};
  for (int s = 0; s < 3; ++s) {
    ranges[s]->begin = c.tokens.size();
    for (const Corpus* m : members) {
      const auto part = m->split(kinds[s]);
      c.tokens.insert(c.tokens.end(), part.begin(), part.end());
    }
    ranges[s]->end = c.tokens.size();
  }
  c.id = corpus_digest(c.tokens, c.tokenizer_id);
  return c;
}

std::vector<TokenIds> pack(std::span<const std::int32_t> split, std::size_t seq_len) {
  if (seq_len < 2) throw ContractError("pack: seq_len must be at least 2");
  std::vector<TokenIds> windows;
  for (std::size_t start = 0; start + seq_len <= split.size(); start += seq_len) {
    windows.emplace_back(split.begin() + static_cast<std::ptrdiff_t>(start),
                         split.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
  }
  return windows;
}

// ---- synthetic generators ---------------------------------------------------

MarkovChain MarkovChain::from_spec(const MarkovSpec& spec) {
  if (spec.alphabet_size < 2 || spec.alphabet_size > 94) {
    throw ConfigError("markov: alphabet size must be in [2, 94]");
  }
  if (spec.order < 1 || spec.branching < 1) throw ConfigError("markov: order and branching must be >= 1");
  MarkovChain chain;
  chain.alphabet_size = spec.alphabet_size;
  chain.order = spec.order;
  std::size_t contexts = 1;
  for (std::size_t i = 0; i < spec.order; ++i) contexts *= spec.alphabet_size;
  std::mt19937_64 rng(spec.transition_seed);
  chain.transition.assign(contexts, std::vector<double>(spec.alphabet_size, 0.0));
  for (auto& row : chain.transition) {
    const auto successors = distinct_indices(rng, spec.alphabet_size, spec.branching);
    const auto weights = dirichlet_weights(rng, successors.size());
    for (std::size_t i = 0; i < successors.size(); ++i) row[successors[i]] = weights[i];
  }
  return chain;
}

std::int32_t MarkovChain::symbol_byte(std::size_t symbol) const {
  if (symbol < 26) return static_cast<std::int32_t>('a' + symbol);
  if (symbol < 52) return static_cast<std::int32_t>('A' + (symbol - 26));
  return static_cast<std::int32_t>(33 + (symbol - 52));
}

namespace {

std::string markov_text(const MarkovSpec& spec, std::size_t length, std::uint64_t seed) {
  const MarkovChain chain = MarkovChain::from_spec(spec);
  std::mt19937_64 rng(seed);
  std::string out;
  out.reserve(length);
  std::size_t context = uniform_index(rng, chain.transition.size());
  std::size_t modulus = chain.transition.size() / chain.alphabet_size;
  while (out.size() < length) {
    const std::size_t next = sample(rng, chain.transition[context]);
    out.push_back(static_cast<char>(chain.symbol_byte(next)));
    context = (context % modulus) * chain.alphabet_size + next;
  }
  return out;
}

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

std::vector<std::string> template_lexicon_impl(const TemplateSpec& spec) {
  std::mt19937_64 rng(spec.lexicon_seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::string> words;
  std::set<std::string> seen;
  std::size_t attempts = 0;
  while (words.size() < spec.lexicon_size) {
    if (++attempts > spec.lexicon_size * 1000) {
      throw ConfigError("template grammar: cannot build a lexicon of " +
                        std::to_string(spec.lexicon_size) + " distinct words");
    }
    const std::size_t syllables = 1 + uniform_index(rng, 3);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w.push_back(kConsonants[uniform_index(rng, kConsonants.size())]);
      w.push_back(kVowels[uniform_index(rng, kVowels.size())]);
      if (uniform01(rng) < 0.3) w.push_back(kConsonants[uniform_index(rng, kConsonants.size())]);
    }
    if (!seen.insert(w).second) continue;
    words.push_back(std::move(w));
  }
  return words;
}

// Word-to-word rules: for every word, `branching` distinct successors drawn
// with popularity proportional to 1/(index+1)^zipf. Pairs listed in `banned`
// are never drawn.
struct Rules {
  std::vector<std::vector<std::size_t>> successors;
  std::vector<std::vector<double>> weights;
  std::vector<std::size_t> starters;
  std::vector<double> starter_weights;
  std::vector<bool> ends;  // sentence may end after this word
};

Rules build_rules(const TemplateSpec& spec, std::uint64_t rule_seed, const Rules* banned) {
  const std::size_t n = spec.lexicon_size;
  const std::size_t branching = std::min(spec.branching, n);
  if (banned && 2 * branching > n) {
    throw ConfigError("template grammar: lexicon too small for two disjoint rule tables");
  }
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf);
    cdf[i] = acc;
  }
  std::mt19937_64 rng(rule_seed);
  const auto draw = [&] {
    const double u = uniform01(rng) * acc;
    return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
  };
  const auto pick = [&](const std::vector<std::size_t>* avoid) {
    std::vector<std::size_t> out;
    std::size_t tries = 0;
    while (out.size() < branching) {
      std::size_t c = std::min(draw(), n - 1);
      // Fall back to a uniform draw when a heavy skew keeps hitting taken words.
      if (++tries > 64 * branching) c = uniform_index(rng, n);
      if (std::find(out.begin(), out.end(), c) != out.end()) continue;
      if (avoid && std::find(avoid->begin(), avoid->end(), c) != avoid->end()) continue;
      out.push_back(c);
    }
    return out;
  };
  Rules r;
  r.successors.resize(n);
  r.weights.resize(n);
  r.ends.resize(n);
  for (std::size_t w = 0; w < n; ++w) {
    r.successors[w] = pick(banned ? &banned->successors[w] : nullptr);
    r.ends[w] = uniform01(rng) < 0.25;
    r.weights[w] = dirichlet_weights(rng, branching + (r.ends[w] ? 1 : 0));
  }
  r.starters = pick(banned ? &banned->starters : nullptr);
  r.starter_weights = dirichlet_weights(rng, r.starters.size());
  return r;
}

std::string template_text(const TemplateSpec& spec, std::size_t length, std::uint64_t seed) {
  const auto words = template_lexicon(spec);
  std::optional<Rules> banned;
  if (spec.exclude_rule_seed) banned = build_rules(spec, *spec.exclude_rule_seed, nullptr);
  const Rules rules = build_rules(spec, spec.rule_seed, banned ? &*banned : nullptr);

  std::mt19937_64 rng(seed);
  std::string out;
  out.reserve(length + 32);
  std::size_t current = rules.starters[sample(rng, rules.starter_weights)];
  std::size_t sentence_words = 0;
  while (out.size() < length) {
    out += words[current];
    ++sentence_words;
    const std::size_t pick = sample(rng, rules.weights[current]);
    // Sentences are capped so every chain eventually reaches a boundary.
    if (pick == rules.successors[current].size() || sentence_words >= 12) {
      out += ". ";
      sentence_words = 0;
      current = rules.starters[sample(rng, rules.starter_weights)];
    } else {
      out += ' ';
      current = rules.successors[current][pick];
    }
  }
  out.resize(length);
  return out;
}

}  // namespace

std::vector<std::string> template_lexicon(const TemplateSpec& spec) { return template_lexicon_impl(spec); }

std::string synth_text(const SynthSpec& spec) {
  return std::visit(
      [&](const auto& g) -> std::string {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, MarkovSpec>) {
          return markov_text(g, spec.length, spec.seed);
        } else {
          return template_text(g, spec.length, spec.seed);
        }
      },
      spec.generator);
}

Corpus synth_corpus(const SynthSpec& spec) {
  const auto tokenizer = TokenizerSpec::byte_level();
  return make_corpus(spec.name, tokenize(synth_text(spec), tokenizer), tokenizer);
}

SynthSpec named_synth_spec(std::string_view name, std::size_t length) {
  SynthSpec spec;
  spec.name = std::string(name);
  spec.length = length;
  if (name == "alpha") {
    spec.generator = kAlphaGrammar;
    spec.seed = 1001;
  } else if (name == "beta") {
    spec.generator = kBetaGrammar;
    spec.seed = 2002;
  } else {
    throw ConfigError("unknown named corpus '" + std::string(name) + "'");
  }
  return spec;
}

}  // namespace cprompt::data
