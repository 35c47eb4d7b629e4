#include "upt/data_model.hpp"

#include <filesystem>

#include <gtest/gtest.h>

#include "upt/error.hpp"
#include "upt/rng.hpp"

using namespace upt;
using Tokens = std::vector<std::string>;

namespace {

TaskConfig sst2() {
  TaskConfig c;
  c.task_name = "SST-2";
  c.class_labels = {"Negative", "Positive"};
  c.templates = {"[<s1>]. It was [MASK]."};
  c.options = {"Is <x1> or <x2>?"};
  c.verbalizers = {{{"Negative", "Bad"}, {"Positive", "Wonderful"}}};
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("upt_dm_" + name);
}

}  // namespace

TEST(Tokenize, Examples) {
  EXPECT_EQ(tokenize("It was [MASK]."), (Tokens{"it", "was", "[MASK]", "."}));
  EXPECT_EQ(tokenize("A gorgeous film"), (Tokens{"a", "gorgeous", "film"}));
  EXPECT_EQ(tokenize("Is it effective or ineffective?"),
            (Tokens{"is", "it", "effective", "or", "ineffective", "?"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_TRUE(tokenize("   \t\n").empty());
  EXPECT_EQ(tokenize("it was [mask]!"), (Tokens{"it", "was", "[MASK]", "!"}));
  EXPECT_EQ(tokenize("[<s1>]"), (Tokens{"[", "<", "s1", ">", "]"}));
}

TEST(Tokenize, IdempotentOnJoinedOutput) {
  Rng rng(17);
  const std::string alphabet = "abcXYZ .,!?'[]()-MASK\t";
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    const auto len = rng.uniform_index(40);
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng.uniform_index(alphabet.size())];
    if (rng.uniform_index(4) == 0) s += " [MASK] ";
    const auto once = tokenize(s);
    EXPECT_EQ(tokenize(join_tokens(once)), once) << s;
  }
}

TEST(TaskConfig, ValidationCatchesBrokenInvariants) {
  EXPECT_NO_THROW(sst2().validate());
  auto c = sst2();
  c.class_labels = {"Only"};
  c.verbalizers = {{{"Only", "x"}}};
  EXPECT_THROW(c.validate(), ValidationError);
  c = sst2();
  c.verbalizers = {{{"Negative", "good"}, {"Positive", "good"}}};
  EXPECT_THROW(c.validate(), ValidationError);
  c = sst2();
  c.verbalizers = {{{"Negative", "bad"}}};
  EXPECT_THROW(c.validate(), ValidationError);
  c = sst2();
  c.options = {"Is it <x1>?"};
  EXPECT_THROW(c.validate(), ValidationError);
  c = sst2();
  c.templates.clear();
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(TaskConfig, RoundTrip) {
  const auto path = temp_path("cfg.json");
  save_task_config(sst2(), path);
  EXPECT_EQ(load_task_config(path), sst2());
  std::filesystem::remove(path);
}

TEST(TaskConfig, PaperConfigsLoad) {
  for (const auto* name : {"sst2", "mr", "cr", "mnli", "snli", "qnli", "rte", "mrpc", "qqp"}) {
    const auto path = std::filesystem::path(UPT_SOURCE_DIR) / "configs" / (std::string(name) + ".json");
    EXPECT_NO_THROW(load_task_config(path)) << name;
  }
}

TEST(Dataset, LoadPreservesOrder) {
  const auto rows = parse_task_dataset(
      "{\"text_a\": \"a gorgeous film\", \"label\": \"Positive\"}\n"
      "\n"
      "{\"text_a\": \"dull\", \"text_b\": null, \"label\": \"Negative\"}\n",
      sst2());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].text_a, "a gorgeous film");
  EXPECT_EQ(rows[1].label, "Negative");
  EXPECT_FALSE(rows[1].text_b.has_value());
}

TEST(Dataset, UnknownLabelAndMalformedLines) {
  try {
    parse_task_dataset("{\"text_a\": \"x\", \"label\": \"positve\"}\n", sst2());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown label"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("positve"), std::string::npos);
  }
  try {
    parse_task_dataset("{\"text_a\": \"x\", \"label\": \"Positive\"}\n{oops\n", sst2());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_TRUE(parse_task_dataset("", sst2()).empty());
}

TEST(Dataset, SaveLoadRoundTrip) {
  const std::vector<RawSample> rows{{"a b", std::nullopt, "Positive"}, {"c", "d e", "Negative"}};
  const auto path = temp_path("data.jsonl");
  save_task_dataset(rows, path);
  EXPECT_EQ(load_task_dataset(path, sst2()), rows);
  std::filesystem::remove(path);
}

TEST(Dataset, LabelsAlwaysMembersOfConfig) {
  Rng rng(3);
  const auto cfg = sst2();
  for (int trial = 0; trial < 50; ++trial) {
    std::string text;
    std::vector<std::string> expected;
    for (int i = 0; i < 10; ++i) {
      const auto& label = cfg.class_labels[rng.uniform_index(2)];
      text += "{\"text_a\": \"s\", \"label\": \"" + label + "\"}\n";
      expected.push_back(label);
    }
    const auto rows = parse_task_dataset(text, cfg);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EXPECT_TRUE(cfg.label_index(rows[i].label).has_value());
      EXPECT_EQ(rows[i].label, expected[i]);
    }
  }
}

TEST(Registry, Validation) {
  DatasetRegistry reg;
  reg.add({"SST-2", sst2(), {{"good film", std::nullopt, "Positive"}}, DatasetRole::source});
  reg.add({"MR", sst2(), {{"good film", std::nullopt, "Positive"}, {"bad", "x", "Negative"}},
           DatasetRole::source});
  EXPECT_NO_THROW(reg.validate());
  EXPECT_EQ(reg.num_sources(), 2u);
  EXPECT_EQ(reg.source_texts(), (Tokens{"good film", "bad", "x"}));
  reg.add({"CR", sst2(), {}, DatasetRole::target});
  EXPECT_NO_THROW(reg.validate());
  reg.add({"T2", sst2(), {}, DatasetRole::target});
  EXPECT_THROW(reg.validate(), ValidationError);
  DatasetRegistry empty_source;
  empty_source.add({"A", sst2(), {}, DatasetRole::source});
  EXPECT_THROW(empty_source.validate(), ValidationError);
}

TEST(Vocabulary, FrequencyThreshold) {
  const std::vector<TaggedSentence> corpus{
      {1, {{"good", "ADJ"}, {"good", "ADJ"}, {"bad", "ADJ"}}}};
  const auto v = build_vocabulary(DatasetRegistry{}, {}, corpus, 2);
  EXPECT_TRUE(v.find("good").has_value());
  EXPECT_FALSE(v.find("bad").has_value());
  EXPECT_EQ(v.size(), 6u);
  for (const auto* s : {"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"}) EXPECT_TRUE(v.find(s));
}

TEST(Vocabulary, LabelWordsBypassThreshold) {
  const std::vector<TaskConfig> cfgs{sst2()};
  const auto v = build_vocabulary(DatasetRegistry{}, cfgs, {}, 5);
  EXPECT_TRUE(v.find("bad"));
  EXPECT_TRUE(v.find("wonderful"));
  EXPECT_TRUE(v.find("it"));
  EXPECT_TRUE(v.find("?"));
  EXPECT_FALSE(v.find("<"));
  EXPECT_FALSE(v.find("x1"));
}

TEST(Vocabulary, MultiTokenLabelWordRejected) {
  auto c = sst2();
  c.verbalizers = {{{"Negative", "not good"}, {"Positive", "good"}}};
  const std::vector<TaskConfig> cfgs{c};
  EXPECT_THROW(build_vocabulary(DatasetRegistry{}, cfgs, {}, 1), ValidationError);
}

TEST(Vocabulary, OrderingAndRoundTrip) {
  DatasetRegistry reg;
  reg.add({"SST-2", sst2(),
           {{"b a a c", std::nullopt, "Positive"}, {"c a", std::nullopt, "Negative"}},
           DatasetRole::source});
  const auto v = build_vocabulary(reg, {}, {}, 1);
  // Specials, then a (3), c (2), b (1), then the config's literal tokens
  // and label words (count 0) lexicographically.
  EXPECT_EQ(v.tokens(), (Tokens{"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]", "a", "c", "b", ".",
                                "?", "bad", "is", "it", "or", "was", "wonderful"}));
  const auto path = temp_path("vocab.json");
  v.save(path);
  const auto loaded = Vocabulary::load(path);
  EXPECT_EQ(loaded, v);
  EXPECT_EQ(loaded.hash(), v.hash());
  EXPECT_EQ(v.id_or_unk("zzz"), v.unk_id());
  EXPECT_EQ(v.decode(v.encode(Tokens{"a", "b"})), (Tokens{"a", "b"}));
  std::filesystem::remove(path);
}

TEST(Files, MissingFileNamesPath) {
  try {
    read_file("/nonexistent/dir/file.txt");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/file.txt"), std::string::npos);
  }
}
