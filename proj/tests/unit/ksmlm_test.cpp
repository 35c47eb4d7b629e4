#include "upt/ksmlm.hpp"

#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "upt/error.hpp"

using namespace upt;

namespace {

TaggedSentence vitamin() {
  return {7,
          {{"vitamin", "NOUN"},
           {"supplementation", "NOUN"},
           {"is", "VERB"},
           {"effective", "ADJ"},
           {"for", "ADP"},
           {"patients", "NOUN"}}};
}

OkrRepository polar_repo() {
  std::vector<OkrEntry> entries{{"effective", {1, 0}, 0},
                                {"useful", {0.9, 0.1}, 0},
                                {"ineffective", {-1, 0}, 1},
                                {"useless", {-0.9, -0.1}, 1}};
  return OkrRepository(entries, {{1, 0}, {-1, 0}}, false, 0);
}

Vocabulary vocab_with(std::vector<std::string> words) {
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"};
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocabulary(tokens, SpecialTokens{});
}

Vocabulary full_vocab() {
  return vocab_with({"vitamin", "supplementation", "is", "for", "patients", "effective", "ineffective",
                     "useful", "useless", "it", "or", "?", ".", "the", "film", "was", "and"});
}

// Finds a seed whose draw puts (alternative, true) in the given order.
std::string render_with_order(MaskMode mode, bool true_first) {
  const auto repo = polar_repo();
  const auto vocab = full_vocab();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto out = synthesize(vitamin(), repo, vocab, mode, rng);
    if (!out.example) continue;
    const auto& s = out.example->sample;
    if ((s.gold_label_index == 0) == true_first) return render_sample(s, vocab);
  }
  return "";
}

}  // namespace

TEST(SelectMaskable, Examples) {
  const auto repo = polar_repo();
  EXPECT_EQ(select_maskable(vitamin(), repo), (std::vector<std::size_t>{3}));
  TaggedSentence two{1, {{"useful", "ADJ"}, {"and", "CCONJ"}, {"Useless", "JJ"}}};
  EXPECT_EQ(select_maskable(two, repo), (std::vector<std::size_t>{0, 2}));
  TaggedSentence absent{1, {{"green", "ADJ"}, {"useful", "NOUN"}}};
  EXPECT_TRUE(select_maskable(absent, repo).empty());
}

TEST(Synthesize, AppendedWorkedExample) {
  const auto text = render_with_order(MaskMode::appended, true);
  // Alternatives come from the dissimilar cluster {ineffective, useless}.
  EXPECT_TRUE(text == "[BOS] vitamin supplementation is for patients it is [MASK] . is it effective or ineffective ? [EOS]" ||
              text == "[BOS] vitamin supplementation is for patients it is [MASK] . is it effective or useless ? [EOS]")
      << text;
}

TEST(Synthesize, InSituWorkedExample) {
  const auto text = render_with_order(MaskMode::in_situ, false);
  EXPECT_TRUE(text == "[BOS] vitamin supplementation is [MASK] for patients . is it ineffective or effective ? [EOS]" ||
              text == "[BOS] vitamin supplementation is [MASK] for patients . is it useless or effective ? [EOS]")
      << text;
}

TEST(Synthesize, SingleAlternativeClusterGivesPaperPair) {
  std::vector<OkrEntry> entries{{"effective", {1, 0}, 0}, {"ineffective", {-1, 0}, 1}};
  const OkrRepository repo(entries, {{1, 0}, {-1, 0}}, false, 0);
  Rng rng(3);
  const auto out = synthesize(vitamin(), repo, full_vocab(), MaskMode::in_situ, rng);
  ASSERT_TRUE(out.example);
  EXPECT_EQ(out.example->provenance.true_word, "effective");
  EXPECT_EQ(out.example->provenance.alternative_word, "ineffective");
  EXPECT_EQ(out.example->provenance.sentence_id, 7);
  EXPECT_EQ(out.example->provenance.masked_position, 3u);
  const auto vocab = full_vocab();
  EXPECT_EQ(out.example->sample.target_word_id, *vocab.find("effective"));
  EXPECT_EQ(out.example->sample.source_dataset, "__ksmlm__");
}

TEST(Synthesize, SkipReasons) {
  const auto repo = polar_repo();
  Rng rng(1);
  TaggedSentence verbs{1, {{"run", "VERB"}, {"walk", "VERB"}}};
  auto out = synthesize(verbs, repo, full_vocab(), MaskMode::in_situ, rng);
  EXPECT_FALSE(out.example);
  EXPECT_EQ(out.skipped, SkipReason::no_adjective);

  out = synthesize(vitamin(), repo, vocab_with({"vitamin"}), MaskMode::in_situ, rng);
  EXPECT_EQ(out.skipped, SkipReason::oov);

  TaggedSentence repeated{2, {{"effective", "ADJ"}, {"and", "CCONJ"}, {"effective", "ADJ"}}};
  out = synthesize(repeated, repo, full_vocab(), MaskMode::in_situ, rng);
  EXPECT_EQ(out.skipped, SkipReason::no_adjective);
}

TEST(SynthesizeCorpus, BudgetAndDeterminism) {
  const auto repo = polar_repo();
  const auto vocab = full_vocab();
  std::vector<TaggedSentence> corpus;
  for (int i = 0; i < 30; ++i) {
    auto s = vitamin();
    s.sentence_id = i;
    s.tokens.push_back({"x" + std::to_string(i), "NOUN"});
    corpus.push_back(s);
  }
  const auto none = synthesize_corpus(corpus, repo, vocab, MaskMode::in_situ, 1, 0);
  EXPECT_TRUE(none.examples.empty());
  EXPECT_EQ(none.counts.synthesized, 0u);
  const auto ten = synthesize_corpus(corpus, repo, vocab, MaskMode::in_situ, 1, 10);
  EXPECT_EQ(ten.examples.size(), 10u);
  const auto again = synthesize_corpus(corpus, repo, vocab, MaskMode::in_situ, 1, 10);
  EXPECT_EQ(serialize_ksmlm(ten.examples), serialize_ksmlm(again.examples));
  corpus.push_back(corpus.front());
  const auto dup = synthesize_corpus(corpus, repo, vocab, MaskMode::in_situ, 1, 100);
  EXPECT_EQ(dup.counts.duplicate_sentences, 1u);
  EXPECT_EQ(dup.counts.synthesized, 30u);
}

TEST(SynthesizeCorpus, UniformSourceDrawsAnyOtherWord) {
  const auto repo = polar_repo();
  const auto vocab = full_vocab();
  std::set<std::string> alts;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto out = synthesize(vitamin(), repo, vocab, MaskMode::in_situ, rng, AlternativeSource::uniform);
    ASSERT_TRUE(out.example);
    alts.insert(out.example->provenance.alternative_word);
  }
  EXPECT_EQ(alts, (std::set<std::string>{"useful", "ineffective", "useless"}));
}

TEST(KsmlmExample, JsonCarriesProvenance) {
  Rng rng(2);
  const auto out = synthesize(vitamin(), polar_repo(), full_vocab(), MaskMode::in_situ, rng);
  ASSERT_TRUE(out.example);
  const auto j = out.example->to_json();
  EXPECT_EQ(j["source_dataset"], "__ksmlm__");
  EXPECT_EQ(j["provenance"]["true_word"], "effective");
  EXPECT_EQ(parse_compiled(serialize_ksmlm(std::vector<KsmlmExample>{*out.example}))[0],
            out.example->sample);
}
