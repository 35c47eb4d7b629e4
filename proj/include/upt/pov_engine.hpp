#pragma once

// Prompt / options / verbalizer parsing, binding and compilation into
// single-mask cloze instances.

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "upt/data_model.hpp"
#include "upt/rng.hpp"

namespace upt {

struct Literal {
  std::vector<std::string> tokens;
  bool operator==(const Literal&) const = default;
};

struct SentenceSlot {
  int index = 1;  // 1 or 2
  bool operator==(const SentenceSlot&) const = default;
};

struct MaskSlot {
  bool operator==(const MaskSlot&) const = default;
};

struct WordSlot {
  int index = 1;  // 1..N
  bool operator==(const WordSlot&) const = default;
};

// A prompt template: literal runs, [<s1>]/[<s2>] sentence slots and exactly
// one [MASK]. Adjacent literal text between placeholders forms one Literal.
struct TemplateAst {
  using Segment = std::variant<Literal, SentenceSlot, MaskSlot>;
  std::vector<Segment> segments;

  bool uses_sentence(int index) const;
  bool operator==(const TemplateAst&) const = default;
};

// An option expression such as "Is it <x1> or <x2>?".
struct OptionExpr {
  using Segment = std::variant<Literal, WordSlot>;
  std::vector<Segment> segments;
  std::size_t arity = 0;

  bool operator==(const OptionExpr&) const = default;
};

TemplateAst parse_template(std::string_view text);
OptionExpr parse_options(std::string_view text, std::size_t n);

// Bijection between class labels and single-token (lowercased) label words.
class Verbalizer {
 public:
  Verbalizer(const std::map<std::string, std::string>& mapping,
             std::span<const std::string> class_labels);

  const std::string& word_for(std::string_view label) const;
  const std::string& word_at(std::size_t class_index) const { return words_.at(class_index); }
  const std::string* label_for(std::string_view word) const;
  // Label words in class-label order.
  std::span<const std::string> words() const { return words_; }

 private:
  std::vector<std::string> labels_;
  std::vector<std::string> words_;
  std::map<std::string, std::size_t, std::less<>> forward_;
  std::map<std::string, std::size_t, std::less<>> inverse_;
};

// Parsed form of every template, option expression and verbalizer of a task.
struct ParsedPov {
  std::vector<TemplateAst> templates;
  std::vector<OptionExpr> options;
  std::vector<Verbalizer> verbalizers;
};

ParsedPov parse_pov(const TaskConfig& config);

// A compiled single-mask cloze instance.
struct AugmentedSample {
  std::vector<TokenId> token_ids;
  std::size_t mask_index = 0;
  // Length N, in class-label order (or option order for KSMLM instances).
  std::vector<TokenId> candidate_word_ids;
  TokenId target_word_id = 0;
  std::size_t gold_label_index = 0;
  std::string source_dataset;
  double weight = 1.0;

  nlohmann::ordered_json to_json() const;
  static AugmentedSample from_json(const nlohmann::json& j);

  bool operator==(const AugmentedSample&) const = default;
};

// Throws ValidationError if the mask/target/weight invariants do not hold
// or an id is outside [0, vocab_size).
void check_sample(const AugmentedSample& sample, TokenId mask_id, std::size_t vocab_size);

// Space-joined token strings of the sample, specials included.
std::string render_sample(const AugmentedSample& sample, const Vocabulary& vocab);

// Sequence = BOS + rendered template + rendered options + EOS.
AugmentedSample compile_sample(const RawSample& sample, const TemplateAst& tmpl,
                               const OptionExpr& options, const Verbalizer& verbalizer,
                               const TaskConfig& config, const Vocabulary& vocab, double weight);

// Same binding without the option expression (prompt-only ablation).
AugmentedSample compile_sample_without_options(const RawSample& sample, const TemplateAst& tmpl,
                                               const Verbalizer& verbalizer,
                                               const TaskConfig& config, const Vocabulary& vocab,
                                               double weight);

// One instance per template; option expression and verbalizer drawn
// uniformly per template from `rng`.
std::vector<AugmentedSample> compile_ensemble(const RawSample& sample, const TaskConfig& config,
                                              const ParsedPov& pov, const Vocabulary& vocab,
                                              double weight, Rng& rng, bool with_options = true);

// "<sentence> a . w1 ; b . w2 ; ... it is [MASK] ." with letter candidates.
AugmentedSample render_multiple_choice(const RawSample& sample, const TaskConfig& config,
                                       const Verbalizer& verbalizer, const Vocabulary& vocab);

// Index of the most probable candidate; ties go to the lowest index.
std::size_t classify(std::span<const double> distribution, std::span<const TokenId> candidates);

// Compiled-sample JSON-lines files.
std::vector<AugmentedSample> parse_compiled(std::string_view contents);
std::vector<AugmentedSample> read_compiled(const std::filesystem::path& path);
std::string serialize_compiled(std::span<const AugmentedSample> samples);

}  // namespace upt
