#include "upt/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "upt/digest.hpp"
#include "upt/error.hpp"

namespace upt {

using nlohmann::json;

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
char to_lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

bool starts_with_mask(std::string_view text, std::size_t pos) {
  if (text.size() - pos < kMaskToken.size()) return false;
  for (std::size_t i = 0; i < kMaskToken.size(); ++i) {
    if (to_lower(text[pos + i]) != to_lower(kMaskToken[i])) return false;
  }
  return true;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

// Positions of <xK> placeholders, in order of appearance.
std::vector<int> option_slot_indices(std::string_view pattern) {
  std::vector<int> out;
  for (std::size_t i = 0; i + 2 < pattern.size(); ++i) {
    if (pattern[i] != '<' || pattern[i + 1] != 'x') continue;
    std::size_t j = i + 2;
    int value = 0;
    while (j < pattern.size() && std::isdigit(static_cast<unsigned char>(pattern[j]))) {
      value = value * 10 + (pattern[j] - '0');
      ++j;
    }
    if (j > i + 2 && j < pattern.size() && pattern[j] == '>') out.push_back(value);
  }
  return out;
}

template <typename T>
T json_get(const json& j, const char* key, std::string_view what) {
  if (!j.is_object() || !j.contains(key)) {
    throw ValidationError(fmt::format("{}: missing key '{}'", what, key));
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: bad value for '{}': {}", what, key, e.what()));
  }
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const char c = text[i];
    if (c == '[' && starts_with_mask(text, i)) {
      flush();
      out.emplace_back(kMaskToken);
      i += kMaskToken.size();
    } else if (is_space(c)) {
      flush();
      ++i;
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
      ++i;
    } else {
      current += to_lower(c);
      ++i;
    }
  }
  flush();
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::string strip_placeholders(std::string_view pattern) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size();) {
    if (starts_with_mask(pattern, i)) {
      out += ' ';
      i += kMaskToken.size();
      continue;
    }
    if (pattern.substr(i, 3) == "[<s") {
      const auto close = pattern.find(">]", i);
      if (close != std::string_view::npos) {
        out += ' ';
        i = close + 2;
        continue;
      }
    }
    if (pattern.substr(i, 2) == "<x") {
      const auto close = pattern.find('>', i);
      if (close != std::string_view::npos) {
        out += ' ';
        i = close + 1;
        continue;
      }
    }
    out += pattern[i++];
  }
  return out;
}

std::optional<std::size_t> TaskConfig::label_index(std::string_view label) const {
  const auto it = std::find(class_labels.begin(), class_labels.end(), label);
  if (it == class_labels.end()) return std::nullopt;
  return static_cast<std::size_t>(it - class_labels.begin());
}

void TaskConfig::validate() const {
  const auto where = fmt::format("task '{}'", task_name);
  if (task_name.empty()) throw ValidationError("task config: empty task_name");
  if (class_labels.size() < 2) throw ValidationError(where + ": needs at least 2 class labels");
  if (std::set<std::string>(class_labels.begin(), class_labels.end()).size() != class_labels.size()) {
    throw ValidationError(where + ": duplicate class label");
  }
  if (templates.empty()) throw ValidationError(where + ": no templates");
  if (options.empty()) throw ValidationError(where + ": no option expressions");
  if (verbalizers.empty()) throw ValidationError(where + ": no verbalizers");

  for (std::size_t v = 0; v < verbalizers.size(); ++v) {
    const auto& verb = verbalizers[v];
    if (verb.size() != class_labels.size()) {
      throw ValidationError(fmt::format("{}: verbalizer {} must map exactly the {} class labels",
                                        where, v + 1, class_labels.size()));
    }
    std::set<std::string> words;
    for (const auto& label : class_labels) {
      const auto it = verb.find(label);
      if (it == verb.end()) {
        throw ValidationError(
            fmt::format("{}: verbalizer {} has no word for label '{}'", where, v + 1, label));
      }
      const auto word = join_tokens(tokenize(it->second));
      if (word.empty()) {
        throw ValidationError(fmt::format("{}: verbalizer {} has an empty word", where, v + 1));
      }
      if (!words.insert(word).second) {
        throw ValidationError(
            fmt::format("{}: verbalizer {} repeats label word '{}'", where, v + 1, word));
      }
    }
  }

  const int n = static_cast<int>(class_labels.size());
  for (std::size_t o = 0; o < options.size(); ++o) {
    auto slots = option_slot_indices(options[o]);
    std::sort(slots.begin(), slots.end());
    std::vector<int> expected(n);
    for (int k = 0; k < n; ++k) expected[k] = k + 1;
    if (slots != expected) {
      throw ValidationError(fmt::format(
          "{}: option expression {} must contain each of <x1>..<x{}> exactly once", where, o + 1, n));
    }
  }
}

json TaskConfig::to_json() const {
  json verbs = json::array();
  for (const auto& v : verbalizers) verbs.push_back(v);
  return json{{"task_name", task_name},
              {"class_labels", class_labels},
              {"templates", templates},
              {"options", options},
              {"verbalizers", verbs}};
}

TaskConfig TaskConfig::from_json(const json& j) {
  constexpr std::string_view what = "task config";
  TaskConfig c;
  c.task_name = json_get<std::string>(j, "task_name", what);
  c.class_labels = json_get<std::vector<std::string>>(j, "class_labels", what);
  c.templates = json_get<std::vector<std::string>>(j, "templates", what);
  c.options = json_get<std::vector<std::string>>(j, "options", what);
  c.verbalizers = json_get<std::vector<std::map<std::string, std::string>>>(j, "verbalizers", what);
  c.validate();
  return c;
}

TaskConfig load_task_config(const std::filesystem::path& path) {
  const auto text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
  }
  try {
    return TaskConfig::from_json(j);
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void save_task_config(const TaskConfig& config, const std::filesystem::path& path) {
  write_file(path, config.to_json().dump(2) + "\n");
}

std::vector<RawSample> parse_task_dataset(std::string_view contents, const TaskConfig& config) {
  std::vector<RawSample> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    const auto line = trim(contents.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;

    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(fmt::format("line {}: malformed JSON: {}", line_no, e.what()));
    }
    const auto what = fmt::format("line {}", line_no);
    if (!j.is_object()) throw ValidationError(what + ": expected a JSON object");
    RawSample s;
    s.text_a = json_get<std::string>(j, "text_a", what);
    if (trim(s.text_a).empty()) throw ValidationError(what + ": empty text_a");
    if (j.contains("text_b") && !j["text_b"].is_null()) {
      s.text_b = json_get<std::string>(j, "text_b", what);
    }
    s.label = json_get<std::string>(j, "label", what);
    if (!config.label_index(s.label)) {
      throw ValidationError(
          fmt::format("{}: unknown label '{}' for task '{}'", what, s.label, config.task_name));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<RawSample> load_task_dataset(const std::filesystem::path& path,
                                         const TaskConfig& config) {
  try {
    return parse_task_dataset(read_file(path), config);
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void save_task_dataset(std::span<const RawSample> samples, const std::filesystem::path& path) {
  std::string out;
  for (const auto& s : samples) {
    json j{{"text_a", s.text_a}};
    if (s.text_b) j["text_b"] = *s.text_b;
    j["label"] = s.label;
    out += j.dump() + "\n";
  }
  write_file(path, out);
}

void DatasetRegistry::add(DatasetEntry entry) { entries_.push_back(std::move(entry)); }

void DatasetRegistry::validate() const {
  std::size_t targets = 0;
  std::set<std::string> names;
  for (const auto& e : entries_) {
    if (!names.insert(e.task_name).second) {
      throw ValidationError(fmt::format("registry: duplicate task '{}'", e.task_name));
    }
    e.config.validate();
    if (e.role == DatasetRole::target) {
      ++targets;
    } else if (e.samples.empty()) {
      throw ValidationError(fmt::format("registry: source task '{}' has no samples", e.task_name));
    }
    for (const auto& s : e.samples) {
      if (!e.config.label_index(s.label)) {
        throw ValidationError(
            fmt::format("registry: task '{}' has unknown label '{}'", e.task_name, s.label));
      }
    }
  }
  if (targets > 1) throw ValidationError("registry: more than one target task");
}

std::vector<const DatasetEntry*> DatasetRegistry::sources() const {
  std::vector<const DatasetEntry*> out;
  for (const auto& e : entries_) {
    if (e.role == DatasetRole::source) out.push_back(&e);
  }
  return out;
}

const DatasetEntry* DatasetRegistry::target() const {
  for (const auto& e : entries_) {
    if (e.role == DatasetRole::target) return &e;
  }
  return nullptr;
}

std::size_t DatasetRegistry::num_sources() const { return sources().size(); }

std::vector<std::string> DatasetRegistry::source_texts() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  auto push = [&](const std::string& s) {
    if (seen.insert(s).second) out.push_back(s);
  };
  for (const auto* e : sources()) {
    for (const auto& s : e->samples) {
      push(s.text_a);
      if (s.text_b) push(*s.text_b);
    }
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, SpecialTokens specials)
    : tokens_(std::move(tokens)), specials_(std::move(specials)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw ValidationError("vocabulary: empty token");
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ValidationError(fmt::format("vocabulary: duplicate token '{}'", tokens_[i]));
    }
  }
  auto special = [&](const std::string& t, const char* name) {
    const auto it = index_.find(t);
    if (it == index_.end()) {
      throw ValidationError(fmt::format("vocabulary: special token {} '{}' missing", name, t));
    }
    return it->second;
  };
  pad_ = special(specials_.pad, "pad");
  unk_ = special(specials_.unk, "unk");
  bos_ = special(specials_.bos, "bos");
  eos_ = special(specials_.eos, "eos");
  mask_ = special(specials_.mask, "mask");
  if (std::set<TokenId>{pad_, unk_, bos_, eos_, mask_}.size() != 5) {
    throw ValidationError("vocabulary: special tokens must be distinct");
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(std::string_view token) const { return find(token).value_or(unk_); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError(fmt::format("vocabulary: id {} out of range", id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::is_special(TokenId id) const {
  return id == pad_ || id == unk_ || id == bos_ || id == eos_ || id == mask_;
}

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_or_unk(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (const auto id : ids) out.push_back(token(id));
  return out;
}

std::string Vocabulary::hash() const { return sha256_hex(to_json().dump()); }

json Vocabulary::to_json() const {
  return json{{"tokens", tokens_},
              {"specials",
               {{"pad", specials_.pad},
                {"unk", specials_.unk},
                {"bos", specials_.bos},
                {"eos", specials_.eos},
                {"mask", specials_.mask}}}};
}

Vocabulary Vocabulary::from_json(const json& j) {
  constexpr std::string_view what = "vocabulary";
  auto tokens = json_get<std::vector<std::string>>(j, "tokens", what);
  const auto sp = json_get<json>(j, "specials", what);
  SpecialTokens specials;
  specials.pad = json_get<std::string>(sp, "pad", what);
  specials.unk = json_get<std::string>(sp, "unk", what);
  specials.bos = json_get<std::string>(sp, "bos", what);
  specials.eos = json_get<std::string>(sp, "eos", what);
  specials.mask = json_get<std::string>(sp, "mask", what);
  return Vocabulary(std::move(tokens), std::move(specials));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  write_file(path, to_json().dump(1) + "\n");
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

Vocabulary build_vocabulary(const DatasetRegistry& registry, std::span<const TaskConfig> configs,
                            std::span<const TaggedSentence> corpus, int min_count,
                            std::span<const std::string> extra_tokens) {
  if (min_count < 1) throw ValidationError("build_vocabulary: min_count must be >= 1");

  const SpecialTokens specials;
  const std::set<std::string> special_set{specials.pad, specials.unk, specials.bos, specials.eos,
                                          specials.mask};

  std::map<std::string, std::int64_t> counts;
  auto count_text = [&](std::string_view text) {
    for (auto& t : tokenize(text)) ++counts[t];
  };
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence.tokens) count_text(tok.surface);
  }
  for (const auto& e : registry.entries()) {
    for (const auto& s : e.samples) {
      count_text(s.text_a);
      if (s.text_b) count_text(*s.text_b);
    }
  }

  std::set<std::string> keep;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count) keep.insert(tok);
  }

  std::vector<const TaskConfig*> all_configs;
  for (const auto& e : registry.entries()) all_configs.push_back(&e.config);
  for (const auto& c : configs) all_configs.push_back(&c);
  for (const auto* c : all_configs) {
    for (const auto& t : c->templates) {
      for (auto& tok : tokenize(strip_placeholders(t))) keep.insert(tok);
    }
    for (const auto& o : c->options) {
      for (auto& tok : tokenize(strip_placeholders(o))) keep.insert(tok);
    }
    for (const auto& verb : c->verbalizers) {
      for (const auto& [label, word] : verb) {
        const auto toks = tokenize(word);
        if (toks.size() != 1) {
          throw ValidationError(fmt::format(
              "task '{}': label word '{}' for '{}' is not a single token (multi-token label "
              "words are unsupported)",
              c->task_name, word, label));
        }
        keep.insert(toks.front());
      }
    }
  }
  for (const auto& t : extra_tokens) {
    for (auto& tok : tokenize(t)) keep.insert(tok);
  }

  std::vector<std::string> words;
  for (const auto& t : keep) {
    if (!special_set.contains(t)) words.push_back(t);
  }
  std::stable_sort(words.begin(), words.end(), [&](const std::string& a, const std::string& b) {
    const auto ca = counts.contains(a) ? counts.at(a) : 0;
    const auto cb = counts.contains(b) ? counts.at(b) : 0;
    if (ca != cb) return ca > cb;
    return a < b;
  });

  std::vector<std::string> tokens{specials.pad, specials.unk, specials.bos, specials.eos,
                                  specials.mask};
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocabulary(std::move(tokens), specials);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError(fmt::format("cannot write '{}'", path.string()));
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw RuntimeError(fmt::format("write failed for '{}'", path.string()));
}

}  // namespace upt
