#pragma once

// Tokenisation, corpora with positional train/validation/test splits,
// fixed-length packing, and deterministic synthetic corpora.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace cprompt::data {

using TokenIds = std::vector<std::int32_t>;

enum class TokenizerKind { byte, bpe };

struct TokenizerSpec {
  TokenizerKind kind = TokenizerKind::byte;
  // Merge table for the BPE kind, in priority order. Merge i creates token 256 + i.
  std::vector<std::pair<std::int32_t, std::int32_t>> merges;

  static TokenizerSpec byte_level() { return {}; }
  std::size_t vocab_size() const { return 256 + merges.size(); }
  std::string id() const;
};

// Learns byte-pair merges on `text` until the vocabulary reaches
// `target_vocab` or no pair occurs twice. Ties in pair frequency go to the
// lexicographically smallest pair.
TokenizerSpec train_bpe(std::string_view text, std::size_t target_vocab);

TokenIds tokenize(std::string_view text, const TokenizerSpec& spec);
std::string detokenize(std::span<const std::int32_t> ids, const TokenizerSpec& spec);

enum class SplitKind { train, validation, test };

struct SplitRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct Corpus {
  std::string name;
  std::string id;  // digest of content and tokenizer id
  TokenIds tokens;
  SplitRange train;
  SplitRange validation;
  SplitRange test;
  std::string tokenizer_id;
  std::size_t vocab_size = 256;

  std::span<const std::int32_t> split(SplitKind kind) const;
};

struct SplitFractions {
  double train = 0.90;
  double validation = 0.05;
};

Corpus make_corpus(std::string name, TokenIds tokens, const TokenizerSpec& tokenizer,
                   SplitFractions fractions = {});
Corpus load_corpus_file(const std::filesystem::path& path, const TokenizerSpec& tokenizer,
                        std::string name = {});

// Concatenates the splits of several corpora split-by-split, so the mixture's
// train split is the union of the members' train splits and so on.
Corpus mix_corpora(std::string name, std::span<const Corpus* const> members);

// Consecutive non-overlapping windows; a trailing remainder is dropped.
std::vector<TokenIds> pack(std::span<const std::int32_t> split, std::size_t seq_len);

// ---- Synthetic corpora ------------------------------------------------------

// Token-level Markov chain over `alphabet_size` symbols. Every context of
// `order` previous symbols has `branching` possible successors with random
// weights.
struct MarkovSpec {
  std::size_t order = 1;
  std::uint64_t transition_seed = 1;
  std::size_t alphabet_size = 16;
  std::size_t branching = 4;
};

// Word-level grammar: a seeded lexicon of pronounceable words, a sparse
// word-to-word transition table and sentence boundaries. With
// `exclude_rule_seed`, no word pair (or sentence starter) permitted by the
// rule table of that seed is used, so two grammars over one lexicon can have
// disjoint transition structure.
struct TemplateSpec {
  std::uint64_t lexicon_seed = 1;
  std::uint64_t rule_seed = 1;
  std::size_t lexicon_size = 64;
  std::size_t branching = 3;
  double zipf = 0.0;  // successor popularity skew, 0 = uniform
  std::optional<std::uint64_t> exclude_rule_seed;
};

struct SynthSpec {
  std::string name;
  std::variant<MarkovSpec, TemplateSpec> generator;
  std::size_t length = 100000;
  std::uint64_t seed = 1;
};

// Explicit transition structure of a token-level chain (order 1 only exposes
// a square matrix; higher orders index contexts base-`alphabet_size`).
struct MarkovChain {
  std::size_t alphabet_size = 0;
  std::size_t order = 1;
  // transition[context][next]; rows sum to 1
  std::vector<std::vector<double>> transition;

  static MarkovChain from_spec(const MarkovSpec& spec);
  std::int32_t symbol_byte(std::size_t symbol) const;
};

std::vector<std::string> template_lexicon(const TemplateSpec& spec);

std::string synth_text(const SynthSpec& spec);
Corpus synth_corpus(const SynthSpec& spec);

// The two shipped corpora used for cross-dataset experiments. "alpha" and
// "beta" draw from one lexicon but no word pair allowed in one is allowed in
// the other.
inline const TemplateSpec kAlphaGrammar{
    .lexicon_seed = 7, .rule_seed = 101, .lexicon_size = 512, .branching = 4, .zipf = 1.0,
    .exclude_rule_seed = std::nullopt};
inline const TemplateSpec kBetaGrammar{
    .lexicon_seed = 7, .rule_seed = 202, .lexicon_size = 512, .branching = 4, .zipf = 1.0,
    .exclude_rule_seed = 101};
SynthSpec named_synth_spec(std::string_view name, std::size_t length);

}  // namespace cprompt::data
