#pragma once

// Knowledge-enhanced selective MLM example synthesis: mask one OKR
// adjective per sentence, offer it next to a dissimilar-cluster alternative,
// and ask the model for the correct word.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "upt/data_model.hpp"
#include "upt/okr.hpp"
#include "upt/pov_engine.hpp"
#include "upt/rng.hpp"

namespace upt {

inline constexpr std::string_view kKsmlmSource = "__ksmlm__";
// Fixed option expression for synthesized examples.
inline constexpr std::string_view kKsmlmOptions = "Is it <x1> or <x2>?";
// Fixed prompt appended in MaskMode::appended.
inline constexpr std::string_view kKsmlmPrompt = "It is [MASK].";

enum class MaskMode {
  in_situ,   // the adjective occurrence is replaced by [MASK]
  appended,  // the occurrence is deleted and "It is [MASK]." is appended
};

enum class AlternativeSource {
  okr,      // uniform member of the dissimilar cluster
  uniform,  // uniform over all other repository words (no-OKR ablation)
};

struct KsmlmProvenance {
  std::int64_t sentence_id = 0;
  std::size_t masked_position = 0;  // token position within the tagged sentence
  std::string true_word;
  std::string alternative_word;
  bool operator==(const KsmlmProvenance&) const = default;
};

struct KsmlmExample {
  AugmentedSample sample;
  KsmlmProvenance provenance;

  nlohmann::ordered_json to_json() const;
  bool operator==(const KsmlmExample&) const = default;
};

// Positions of adjectives present in the repository, in sentence order.
std::vector<std::size_t> select_maskable(const TaggedSentence& sentence, const OkrRepository& repo);

enum class SkipReason { no_adjective, oov, no_alternative };

struct SynthesisOutcome {
  std::optional<KsmlmExample> example;
  std::optional<SkipReason> skipped;
};

// Positions whose word occurs more than once in the sentence are not masked,
// since the copy left behind would reveal the answer.
SynthesisOutcome synthesize(const TaggedSentence& sentence, const OkrRepository& repo,
                            const Vocabulary& vocab, MaskMode mode, Rng& rng,
                            AlternativeSource source = AlternativeSource::okr);

struct SynthesisCounts {
  std::size_t synthesized = 0;
  std::size_t skipped_no_adjective = 0;
  std::size_t skipped_oov = 0;
  std::size_t skipped_no_alternative = 0;
  std::size_t duplicate_sentences = 0;

  nlohmann::ordered_json to_json() const;
};

struct SynthesisResult {
  std::vector<KsmlmExample> examples;
  SynthesisCounts counts;
};

// Iterates sentences in order (exact duplicates dropped), each with its own
// rng stream derived from (seed, sentence_id), until `budget` examples exist.
SynthesisResult synthesize_corpus(std::span<const TaggedSentence> sentences,
                                  const OkrRepository& repo, const Vocabulary& vocab,
                                  MaskMode mode, std::uint64_t seed, std::size_t budget,
                                  AlternativeSource source = AlternativeSource::okr);

std::string serialize_ksmlm(std::span<const KsmlmExample> examples);

}  // namespace upt
