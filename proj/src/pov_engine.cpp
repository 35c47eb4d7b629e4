#include "upt/pov_engine.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <fmt/format.h>

#include "upt/error.hpp"

namespace upt {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads the decimal digits starting at `pos`; returns the value and the
// position after the last digit (pos itself when there are none).
std::pair<int, std::size_t> read_number(std::string_view s, std::size_t pos) {
  int value = 0;
  std::size_t j = pos;
  while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) {
    value = value * 10 + (s[j] - '0');
    ++j;
  }
  return {value, j};
}

template <typename SegmentVec>
void flush_literal(std::string& pending, SegmentVec& segments) {
  auto toks = tokenize(pending);
  pending.clear();
  if (toks.empty()) return;
  segments.emplace_back(Literal{std::move(toks)});
}

void append_tokens(std::vector<TokenId>& ids, std::span<const std::string> tokens,
                   const Vocabulary& vocab) {
  for (const auto& t : tokens) ids.push_back(vocab.id_or_unk(t));
}

TokenId require_word(const Vocabulary& vocab, const std::string& word, std::string_view task) {
  const auto id = vocab.find(word);
  if (!id) {
    throw ValidationError(
        fmt::format("task '{}': label word '{}' is not in the vocabulary", task, word));
  }
  return *id;
}

std::size_t locate_single_mask(const std::vector<TokenId>& ids, TokenId mask_id) {
  const auto count = std::count(ids.begin(), ids.end(), mask_id);
  if (count != 1) {
    throw ValidationError(fmt::format(
        "compiled sequence has {} [MASK] tokens; input text must not contain [MASK]", count));
  }
  return static_cast<std::size_t>(std::find(ids.begin(), ids.end(), mask_id) - ids.begin());
}

AugmentedSample compile_impl(const RawSample& sample, const TemplateAst& tmpl,
                             const OptionExpr* options, const Verbalizer& verbalizer,
                             const TaskConfig& config, const Vocabulary& vocab, double weight) {
  if (!(weight > 0.0 && weight <= 1.0)) {
    throw ValidationError(fmt::format("sample weight {} outside (0, 1]", weight));
  }
  const auto gold = config.label_index(sample.label);
  if (!gold) {
    throw ValidationError(
        fmt::format("task '{}': unknown label '{}'", config.task_name, sample.label));
  }

  AugmentedSample out;
  out.source_dataset = config.task_name;
  out.weight = weight;
  out.gold_label_index = *gold;
  for (std::size_t c = 0; c < config.num_classes(); ++c) {
    out.candidate_word_ids.push_back(require_word(vocab, verbalizer.word_at(c), config.task_name));
  }
  out.target_word_id = out.candidate_word_ids[*gold];

  auto& ids = out.token_ids;
  ids.push_back(vocab.bos_id());
  for (const auto& seg : tmpl.segments) {
    if (const auto* lit = std::get_if<Literal>(&seg)) {
      append_tokens(ids, lit->tokens, vocab);
    } else if (const auto* slot = std::get_if<SentenceSlot>(&seg)) {
      if (slot->index == 1) {
        append_tokens(ids, tokenize(sample.text_a), vocab);
      } else {
        if (!sample.text_b) {
          throw ValidationError(fmt::format(
              "task '{}': template uses [<s2>] but the sample has no text_b", config.task_name));
        }
        append_tokens(ids, tokenize(*sample.text_b), vocab);
      }
    } else {
      ids.push_back(vocab.mask_id());
    }
  }
  if (options != nullptr) {
    if (options->arity != config.num_classes()) {
      throw ValidationError(fmt::format("task '{}': option expression has {} slots, task has {}",
                                        config.task_name, options->arity, config.num_classes()));
    }
    for (const auto& seg : options->segments) {
      if (const auto* lit = std::get_if<Literal>(&seg)) {
        append_tokens(ids, lit->tokens, vocab);
      } else {
        const auto& slot = std::get<WordSlot>(seg);
        ids.push_back(out.candidate_word_ids[static_cast<std::size_t>(slot.index - 1)]);
      }
    }
  }
  ids.push_back(vocab.eos_id());
  out.mask_index = locate_single_mask(ids, vocab.mask_id());
  return out;
}

}  // namespace

bool TemplateAst::uses_sentence(int index) const {
  return std::any_of(segments.begin(), segments.end(), [&](const Segment& s) {
    const auto* slot = std::get_if<SentenceSlot>(&s);
    return slot != nullptr && slot->index == index;
  });
}

TemplateAst parse_template(std::string_view text) {
  TemplateAst ast;
  std::string pending;
  int masks = 0;
  for (std::size_t i = 0; i < text.size();) {
    const char c = text[i];
    if (c == ']') {
      throw ValidationError(fmt::format("template '{}': unbalanced bracket at {}", text, i));
    }
    if (c != '[') {
      pending += c;
      ++i;
      continue;
    }
    if (text.substr(i, kMaskToken.size()) == kMaskToken) {
      flush_literal(pending, ast.segments);
      ast.segments.emplace_back(MaskSlot{});
      ++masks;
      i += kMaskToken.size();
      continue;
    }
    const auto close = text.find(']', i + 1);
    if (close == std::string_view::npos) {
      throw ValidationError(fmt::format("template '{}': unbalanced bracket at {}", text, i));
    }
    const auto inner = text.substr(i + 1, close - i - 1);
    if (inner.find('[') != std::string_view::npos) {
      throw ValidationError(fmt::format("template '{}': unbalanced bracket at {}", text, i));
    }
    if (inner.starts_with("<s")) {
      const auto [index, end] = read_number(inner, 2);
      if (end > 2 && end + 1 == inner.size() && inner[end] == '>' && (index == 1 || index == 2)) {
        flush_literal(pending, ast.segments);
        ast.segments.emplace_back(SentenceSlot{index});
        i = close + 1;
        continue;
      }
    }
    throw ValidationError(fmt::format("template '{}': unknown placeholder '[{}]'", text, inner));
  }
  flush_literal(pending, ast.segments);
  if (masks == 0) throw ValidationError(fmt::format("template '{}': no [MASK]", text));
  if (masks > 1) throw ValidationError(fmt::format("template '{}': multiple [MASK]", text));
  return ast;
}

OptionExpr parse_options(std::string_view text, std::size_t n) {
  if (n < 2) throw ValidationError("option expression: class count must be >= 2");
  OptionExpr expr;
  expr.arity = n;
  std::string pending;
  std::set<int> seen;
  for (std::size_t i = 0; i < text.size();) {
    if (text[i] == '<' && i + 1 < text.size() && text[i + 1] == 'x') {
      const auto [index, end] = read_number(text, i + 2);
      if (end == i + 2 || end >= text.size() || text[end] != '>') {
        throw ValidationError(fmt::format("option expression '{}': malformed slot at {}", text, i));
      }
      if (index < 1 || static_cast<std::size_t>(index) > n) {
        throw ValidationError(fmt::format(
            "option expression '{}': slot <x{}> out of range for {} classes", text, index, n));
      }
      if (!seen.insert(index).second) {
        throw ValidationError(fmt::format("option expression '{}': duplicated <x{}>", text, index));
      }
      flush_literal(pending, expr.segments);
      expr.segments.emplace_back(WordSlot{index});
      i = end + 1;
      continue;
    }
    pending += text[i++];
  }
  flush_literal(pending, expr.segments);
  for (std::size_t k = 1; k <= n; ++k) {
    if (!seen.contains(static_cast<int>(k))) {
      throw ValidationError(fmt::format("option expression '{}': missing <x{}>", text, k));
    }
  }
  return expr;
}

Verbalizer::Verbalizer(const std::map<std::string, std::string>& mapping,
                       std::span<const std::string> class_labels) {
  if (mapping.size() != class_labels.size()) {
    throw ValidationError("verbalizer must map exactly the task's class labels");
  }
  for (std::size_t c = 0; c < class_labels.size(); ++c) {
    const auto& label = class_labels[c];
    const auto it = mapping.find(label);
    if (it == mapping.end()) {
      throw ValidationError(fmt::format("verbalizer has no word for label '{}'", label));
    }
    auto toks = tokenize(it->second);
    if (toks.size() != 1) {
      throw ValidationError(fmt::format("label word '{}' is not a single token", it->second));
    }
    if (!inverse_.emplace(toks.front(), c).second) {
      throw ValidationError(fmt::format("label word '{}' used for two labels", toks.front()));
    }
    forward_.emplace(label, c);
    labels_.push_back(label);
    words_.push_back(std::move(toks.front()));
  }
}

const std::string& Verbalizer::word_for(std::string_view label) const {
  const auto it = forward_.find(label);
  if (it == forward_.end()) {
    throw ValidationError(fmt::format("verbalizer has no word for label '{}'", label));
  }
  return words_[it->second];
}

const std::string* Verbalizer::label_for(std::string_view word) const {
  const auto it = inverse_.find(word);
  return it == inverse_.end() ? nullptr : &labels_[it->second];
}

ParsedPov parse_pov(const TaskConfig& config) {
  config.validate();
  ParsedPov pov;
  for (const auto& t : config.templates) pov.templates.push_back(parse_template(t));
  for (const auto& o : config.options) pov.options.push_back(parse_options(o, config.num_classes()));
  for (const auto& v : config.verbalizers) pov.verbalizers.emplace_back(v, config.class_labels);
  return pov;
}

ordered_json AugmentedSample::to_json() const {
  return ordered_json{{"token_ids", token_ids},
                      {"mask_index", mask_index},
                      {"candidate_word_ids", candidate_word_ids},
                      {"target_word_id", target_word_id},
                      {"gold_label_index", gold_label_index},
                      {"source_dataset", source_dataset},
                      {"weight", weight}};
}

AugmentedSample AugmentedSample::from_json(const json& j) {
  AugmentedSample s;
  try {
    s.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
    s.mask_index = j.at("mask_index").get<std::size_t>();
    s.candidate_word_ids = j.at("candidate_word_ids").get<std::vector<TokenId>>();
    s.target_word_id = j.at("target_word_id").get<TokenId>();
    s.gold_label_index = j.at("gold_label_index").get<std::size_t>();
    s.source_dataset = j.at("source_dataset").get<std::string>();
    s.weight = j.at("weight").get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("compiled sample: {}", e.what()));
  }
  return s;
}

void check_sample(const AugmentedSample& s, TokenId mask_id, std::size_t vocab_size) {
  for (const auto id : s.token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw ValidationError(fmt::format("compiled sample: token id {} outside vocabulary", id));
    }
  }
  if (std::count(s.token_ids.begin(), s.token_ids.end(), mask_id) != 1 ||
      s.mask_index >= s.token_ids.size() || s.token_ids[s.mask_index] != mask_id) {
    throw ValidationError("compiled sample: mask_index must point at the single [MASK]");
  }
  if (s.gold_label_index >= s.candidate_word_ids.size() ||
      s.candidate_word_ids[s.gold_label_index] != s.target_word_id) {
    throw ValidationError("compiled sample: target is not the gold candidate");
  }
  if (!(s.weight > 0.0 && s.weight <= 1.0)) {
    throw ValidationError("compiled sample: weight outside (0, 1]");
  }
}

std::string render_sample(const AugmentedSample& sample, const Vocabulary& vocab) {
  return join_tokens(vocab.decode(sample.token_ids));
}

AugmentedSample compile_sample(const RawSample& sample, const TemplateAst& tmpl,
                               const OptionExpr& options, const Verbalizer& verbalizer,
                               const TaskConfig& config, const Vocabulary& vocab, double weight) {
  return compile_impl(sample, tmpl, &options, verbalizer, config, vocab, weight);
}

AugmentedSample compile_sample_without_options(const RawSample& sample, const TemplateAst& tmpl,
                                               const Verbalizer& verbalizer,
                                               const TaskConfig& config, const Vocabulary& vocab,
                                               double weight) {
  return compile_impl(sample, tmpl, nullptr, verbalizer, config, vocab, weight);
}

std::vector<AugmentedSample> compile_ensemble(const RawSample& sample, const TaskConfig& config,
                                              const ParsedPov& pov, const Vocabulary& vocab,
                                              double weight, Rng& rng, bool with_options) {
  if (pov.templates.empty()) throw ValidationError("ensemble: task has no templates");
  std::vector<AugmentedSample> out;
  out.reserve(pov.templates.size());
  for (const auto& tmpl : pov.templates) {
    const auto o = rng.uniform_index(pov.options.size());
    const auto v = rng.uniform_index(pov.verbalizers.size());
    out.push_back(compile_impl(sample, tmpl, with_options ? &pov.options[o] : nullptr,
                               pov.verbalizers[v], config, vocab, weight));
  }
  return out;
}

AugmentedSample render_multiple_choice(const RawSample& sample, const TaskConfig& config,
                                       const Verbalizer& verbalizer, const Vocabulary& vocab) {
  const auto n = config.num_classes();
  if (n > 26) {
    throw ValidationError(fmt::format("multiple choice supports at most 26 classes, got {}", n));
  }
  const auto gold = config.label_index(sample.label);
  if (!gold) {
    throw ValidationError(
        fmt::format("task '{}': unknown label '{}'", config.task_name, sample.label));
  }

  AugmentedSample out;
  out.source_dataset = config.task_name;
  out.gold_label_index = *gold;
  auto& ids = out.token_ids;
  ids.push_back(vocab.bos_id());
  append_tokens(ids, tokenize(sample.text_a), vocab);
  if (sample.text_b) append_tokens(ids, tokenize(*sample.text_b), vocab);
  for (std::size_t c = 0; c < n; ++c) {
    const std::string letter(1, static_cast<char>('a' + c));
    const auto letter_id = vocab.find(letter);
    if (!letter_id) {
      throw ValidationError(fmt::format("multiple choice: letter '{}' is not in the vocabulary", letter));
    }
    out.candidate_word_ids.push_back(*letter_id);
    ids.push_back(*letter_id);
    ids.push_back(vocab.id_or_unk("."));
    ids.push_back(require_word(vocab, verbalizer.word_at(c), config.task_name));
    ids.push_back(vocab.id_or_unk(";"));
  }
  for (const char* t : {"it", "is"}) ids.push_back(vocab.id_or_unk(t));
  ids.push_back(vocab.mask_id());
  ids.push_back(vocab.id_or_unk("."));
  ids.push_back(vocab.eos_id());
  out.target_word_id = out.candidate_word_ids[*gold];
  out.mask_index = locate_single_mask(ids, vocab.mask_id());
  return out;
}

std::size_t classify(std::span<const double> distribution, std::span<const TokenId> candidates) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c) {
    if (distribution[static_cast<std::size_t>(candidates[c])] >
        distribution[static_cast<std::size_t>(candidates[best])]) {
      best = c;
    }
  }
  return best;
}

std::vector<AugmentedSample> parse_compiled(std::string_view contents) {
  std::vector<AugmentedSample> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    const auto line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(AugmentedSample::from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ValidationError(fmt::format("line {}: malformed JSON: {}", line_no, e.what()));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  return out;
}

std::vector<AugmentedSample> read_compiled(const std::filesystem::path& path) {
  try {
    return parse_compiled(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string serialize_compiled(std::span<const AugmentedSample> samples) {
  std::string out;
  for (const auto& s : samples) out += s.to_json().dump() + "\n";
  return out;
}

}  // namespace upt
