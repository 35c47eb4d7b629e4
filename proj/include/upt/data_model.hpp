#pragma once

// Datasets, task configurations, vocabulary and their on-disk formats.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace upt {

using TokenId = std::int32_t;

inline constexpr std::string_view kMaskToken = "[MASK]";

// Lowercases, splits on whitespace and detaches every ASCII punctuation
// character as its own token. The literal "[MASK]" (any case) survives as a
// single token spelled "[MASK]".
std::vector<std::string> tokenize(std::string_view text);

// Joins tokens with single spaces.
std::string join_tokens(std::span<const std::string> tokens);

struct RawSample {
  std::string text_a;
  std::optional<std::string> text_b;
  std::string label;

  bool operator==(const RawSample&) const = default;
};

// One task's prompt templates, option expressions and verbalizers, before
// they are parsed and bound to samples.
struct TaskConfig {
  std::string task_name;
  std::vector<std::string> class_labels;
  std::vector<std::string> templates;
  std::vector<std::string> options;
  // Each verbalizer maps every class label to a label word.
  std::vector<std::map<std::string, std::string>> verbalizers;

  std::size_t num_classes() const { return class_labels.size(); }
  std::optional<std::size_t> label_index(std::string_view label) const;

  // Throws ValidationError naming the first broken invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static TaskConfig from_json(const nlohmann::json& j);

  bool operator==(const TaskConfig&) const = default;
};

TaskConfig load_task_config(const std::filesystem::path& path);
void save_task_config(const TaskConfig& config, const std::filesystem::path& path);

// Reads a JSON-lines dataset, checking each label against the config.
// Blank lines are ignored; line numbers in errors are 1-based file lines.
std::vector<RawSample> load_task_dataset(const std::filesystem::path& path,
                                         const TaskConfig& config);
std::vector<RawSample> parse_task_dataset(std::string_view contents, const TaskConfig& config);
void save_task_dataset(std::span<const RawSample> samples, const std::filesystem::path& path);

enum class DatasetRole { source, target };

struct DatasetEntry {
  std::string task_name;
  TaskConfig config;
  std::vector<RawSample> samples;
  DatasetRole role = DatasetRole::source;
};

class DatasetRegistry {
 public:
  void add(DatasetEntry entry);

  // At most one target; every source non-empty. Throws ValidationError.
  void validate() const;

  const std::vector<DatasetEntry>& entries() const { return entries_; }
  std::vector<const DatasetEntry*> sources() const;
  const DatasetEntry* target() const;
  std::size_t num_sources() const;

  // Union of the source sample sentences (text_a and text_b), first
  // occurrence order, exact-string duplicates removed.
  std::vector<std::string> source_texts() const;

 private:
  std::vector<DatasetEntry> entries_;
};

// A word with a coarse part-of-speech tag, as produced by an external tagger.
struct TaggedToken {
  std::string surface;
  std::string pos;
};

struct TaggedSentence {
  std::int64_t sentence_id = 0;
  std::vector<TaggedToken> tokens;
};

struct SpecialTokens {
  std::string pad = "[PAD]";
  std::string unk = "[UNK]";
  std::string bos = "[BOS]";
  std::string eos = "[EOS]";
  std::string mask = std::string(kMaskToken);

  bool operator==(const SpecialTokens&) const = default;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  // Specials must appear in `tokens`; tokens must be unique.
  Vocabulary(std::vector<std::string> tokens, SpecialTokens specials);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const SpecialTokens& specials() const { return specials_; }

  std::optional<TokenId> find(std::string_view token) const;
  TokenId id_or_unk(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool is_special(TokenId id) const;

  TokenId pad_id() const { return pad_; }
  TokenId unk_id() const { return unk_; }
  TokenId bos_id() const { return bos_; }
  TokenId eos_id() const { return eos_; }
  TokenId mask_id() const { return mask_; }

  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  // SHA-256 over the canonical serialization; identifies the id assignment.
  std::string hash() const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && specials_ == other.specials_;
  }

 private:
  std::vector<std::string> tokens_;
  SpecialTokens specials_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_ = 0, unk_ = 0, bos_ = 0, eos_ = 0, mask_ = 0;
};

// Vocabulary = specials + tokens with corpus+dataset count >= min_count +
// template/option literal tokens + verbalizer label words + extra_tokens.
// Non-special ids are ordered by descending count, then lexicographically.
Vocabulary build_vocabulary(const DatasetRegistry& registry, std::span<const TaskConfig> configs,
                            std::span<const TaggedSentence> corpus, int min_count,
                            std::span<const std::string> extra_tokens = {});

// Literal text of a template or option expression with every placeholder
// ([<sK>], [MASK], <xK>) blanked out.
std::string strip_placeholders(std::string_view pattern);

// Reads a text file fully. Throws ValidationError naming the path.
std::string read_file(const std::filesystem::path& path);
// Writes atomically enough for our purposes (truncate + write). Throws RuntimeError.
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace upt
