#include "upt/ksmlm.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "upt/error.hpp"

namespace upt {

using nlohmann::ordered_json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_punct_token(const std::string& t) {
  return t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0])) != 0;
}

const OptionExpr& fixed_options() {
  static const OptionExpr expr = parse_options(kKsmlmOptions, 2);
  return expr;
}

const std::vector<std::string>& fixed_prompt() {
  static const std::vector<std::string> toks = tokenize(kKsmlmPrompt);
  return toks;
}

}  // namespace

ordered_json KsmlmExample::to_json() const {
  auto j = sample.to_json();
  j["provenance"] = ordered_json{{"sentence_id", provenance.sentence_id},
                                 {"masked_position", provenance.masked_position},
                                 {"true_word", provenance.true_word},
                                 {"alternative_word", provenance.alternative_word}};
  return j;
}

ordered_json SynthesisCounts::to_json() const {
  return ordered_json{{"synthesized", synthesized},
                      {"skipped_no_adjective", skipped_no_adjective},
                      {"skipped_oov", skipped_oov},
                      {"skipped_no_alternative", skipped_no_alternative},
                      {"duplicate_sentences", duplicate_sentences}};
}

std::vector<std::size_t> select_maskable(const TaggedSentence& sentence, const OkrRepository& repo) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
    const auto& t = sentence.tokens[i];
    if (is_adjective_tag(t.pos) && repo.contains(lower(t.surface))) out.push_back(i);
  }
  return out;
}

SynthesisOutcome synthesize(const TaggedSentence& sentence, const OkrRepository& repo,
                            const Vocabulary& vocab, MaskMode mode, Rng& rng,
                            AlternativeSource source) {
  std::vector<std::vector<std::string>> pieces;
  pieces.reserve(sentence.tokens.size());
  for (const auto& t : sentence.tokens) pieces.push_back(tokenize(t.surface));

  std::vector<std::size_t> eligible;
  for (const auto pos : select_maskable(sentence, repo)) {
    const auto word = lower(sentence.tokens[pos].surface);
    std::size_t occurrences = 0;
    for (const auto& p : pieces) occurrences += std::count(p.begin(), p.end(), word);
    if (occurrences == 1 && pieces[pos].size() == 1) eligible.push_back(pos);
  }
  if (eligible.empty()) return {std::nullopt, SkipReason::no_adjective};

  const auto pos = eligible[rng.uniform_index(eligible.size())];
  const auto true_word = lower(sentence.tokens[pos].surface);

  std::string alternative;
  if (source == AlternativeSource::okr) {
    try {
      alternative = sample_alternative(repo, true_word, rng);
    } catch (const ValidationError&) {
      return {std::nullopt, SkipReason::no_alternative};
    }
  } else {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < repo.entries().size(); ++i) {
      if (repo.entries()[i].word != true_word) pool.push_back(i);
    }
    if (pool.empty()) return {std::nullopt, SkipReason::no_alternative};
    alternative = repo.entries()[pool[rng.uniform_index(pool.size())]].word;
  }

  const auto true_id = vocab.find(true_word);
  const auto alt_id = vocab.find(alternative);
  if (!true_id || !alt_id) return {std::nullopt, SkipReason::oov};

  const bool true_first = rng.uniform_index(2) == 0;

  KsmlmExample ex;
  auto& s = ex.sample;
  s.source_dataset = std::string(kKsmlmSource);
  s.weight = 1.0;
  s.candidate_word_ids = true_first ? std::vector<TokenId>{*true_id, *alt_id}
                                    : std::vector<TokenId>{*alt_id, *true_id};
  s.gold_label_index = true_first ? 0 : 1;
  s.target_word_id = *true_id;

  auto& ids = s.token_ids;
  ids.push_back(vocab.bos_id());
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (i == pos) {
      if (mode == MaskMode::in_situ) ids.push_back(vocab.mask_id());
      continue;
    }
    for (const auto& t : pieces[i]) ids.push_back(vocab.id_or_unk(t));
  }
  if (mode == MaskMode::in_situ) {
    const auto last = std::find_if(pieces.rbegin(), pieces.rend(),
                                   [](const auto& p) { return !p.empty(); });
    const bool ends_with_punct = last != pieces.rend() && is_punct_token(last->back()) &&
                                 static_cast<std::size_t>(pieces.rend() - last - 1) != pos;
    if (!ends_with_punct) ids.push_back(vocab.id_or_unk("."));
  } else {
    for (const auto& t : fixed_prompt()) {
      ids.push_back(t == kMaskToken ? vocab.mask_id() : vocab.id_or_unk(t));
    }
  }
  for (const auto& seg : fixed_options().segments) {
    if (const auto* lit = std::get_if<Literal>(&seg)) {
      for (const auto& t : lit->tokens) ids.push_back(vocab.id_or_unk(t));
    } else {
      ids.push_back(s.candidate_word_ids[static_cast<std::size_t>(std::get<WordSlot>(seg).index - 1)]);
    }
  }
  ids.push_back(vocab.eos_id());
  s.mask_index = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), vocab.mask_id()) -
                                          ids.begin());

  ex.provenance = {sentence.sentence_id, pos, true_word, alternative};
  return {std::move(ex), std::nullopt};
}

SynthesisResult synthesize_corpus(std::span<const TaggedSentence> sentences,
                                  const OkrRepository& repo, const Vocabulary& vocab,
                                  MaskMode mode, std::uint64_t seed, std::size_t budget,
                                  AlternativeSource source) {
  SynthesisResult r;
  if (budget == 0) return r;
  std::set<std::string> seen;
  for (const auto& sentence : sentences) {
    std::string key;
    for (const auto& t : sentence.tokens) {
      key += lower(t.surface);
      key += ' ';
    }
    if (!seen.insert(key).second) {
      ++r.counts.duplicate_sentences;
      continue;
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(sentence.sentence_id)));
    auto outcome = synthesize(sentence, repo, vocab, mode, rng, source);
    if (outcome.example) {
      r.examples.push_back(std::move(*outcome.example));
      ++r.counts.synthesized;
      if (r.examples.size() >= budget) break;
    } else {
      switch (*outcome.skipped) {
        case SkipReason::no_adjective: ++r.counts.skipped_no_adjective; break;
        case SkipReason::oov: ++r.counts.skipped_oov; break;
        case SkipReason::no_alternative: ++r.counts.skipped_no_alternative; break;
      }
    }
  }
  return r;
}

std::string serialize_ksmlm(std::span<const KsmlmExample> examples) {
  std::string out;
  for (const auto& e : examples) out += e.to_json().dump() + "\n";
  return out;
}

}  // namespace upt
