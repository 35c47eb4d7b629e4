#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <unistd.h>

#include "upt/digest.hpp"
#include "upt/error.hpp"
#include "upt/pipeline.hpp"
#include "upt/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace upt {
namespace {

const fs::path kSource = UPT_SOURCE_DIR;

class PipelineCli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / fmt::format("upt_pipeline_test_{}", ::getpid());
    fs::remove_all(dir_);
    save_synthetic_suite(generate_synthetic_suite(3, SyntheticSizes{{120, 80, 60}, 80, 40}), dir_ / "suite");
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& rel) { return (dir_ / rel).string(); }
  static std::string s(const std::string& rel) { return (dir_ / "suite" / rel).string(); }

  static int run(std::vector<std::string> args) { return run_cli(args); }

  static json load_json(const std::string& path) {
    std::ifstream in(path);
    return json::parse(in);
  }

  // Compiled source pools sharing the suite vocabulary.
  static void compile_sources() {
    for (const std::string t : {"reviews", "service", "products"}) {
      ASSERT_EQ(run({"compile", "--vocab", s("vocab.json"), "--task", s(t + ".json"), "--data",
                     s(t + ".jsonl"), "--out", p(t + ".c.jsonl")}),
                0);
    }
  }

  static inline fs::path dir_;
};

TEST(ReportRowTest, ConstantAccuraciesHaveZeroSpread) {
  const ReportRow row{"t", "UPT", {0.8, 0.8, 0.8, 0.8, 0.8}};
  EXPECT_NEAR(row.mean(), 0.8, 1e-15);
  EXPECT_EQ(row.stddev(), 0.0);
}

TEST(ReportRowTest, PopulationStd) {
  const ReportRow row{"t", "UPT", {0.6, 0.8}};
  EXPECT_NEAR(row.stddev(), 0.1, 1e-15);
}

TEST(ReportRowTest, SingleSeedFlagged) {
  const std::vector<ReportRow> rows{{"t", "zero-shot", {0.7}}, {"t", "UPT", {0.7, 0.9}}};
  EXPECT_EQ(rows[0].stddev(), 0.0);
  const auto table = report_table(rows);
  EXPECT_NE(table.find("zero-shot"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
  EXPECT_NE(table.find("(n=1)"), std::string::npos);
  const auto second_row = table.substr(table.find("UPT  "));
  EXPECT_EQ(second_row.find("(n=1)"), std::string::npos);
  EXPECT_EQ(report_csv(rows),
            "task,mode,n,mean,std,acc_1,acc_2\n"
            "t,zero-shot,1,0.700000,0.000000,0.700000,\n"
            "t,UPT,2,0.800000,0.100000,0.700000,0.900000\n");
}

TEST(ManifestTest, TimestampsStripped) {
  RunManifest m("x");
  m.set_seed("a", 3);
  auto j = json::parse(m.to_json().dump());
  EXPECT_TRUE(j.contains("started_at"));
  j = strip_timestamps(j);
  EXPECT_FALSE(j.contains("started_at"));
  EXPECT_FALSE(j.contains("finished_at"));
  EXPECT_EQ(j["seeds"]["a"], 3);
  EXPECT_EQ(j["tool_version"], std::string(kToolVersion));
}

TEST(CompileDatasetTest, ErrorNamesSampleIndex) {
  const auto config = load_task_config(kSource / "configs/sst2.json");
  const auto vocab = Vocabulary::load(kSource / "tests/data/sst2_vocab.json");
  std::vector<RawSample> samples{{"a gorgeous film", std::nullopt, "Positive"},
                                 {"a gorgeous film", std::nullopt, "Positive"}};
  samples[1].text_b = "stray";
  // Single-sentence template with a second sentence present is fine; an
  // unknown label is not.
  samples[1].label = "Neutral";
  try {
    compile_dataset(samples, config, vocab, CompileSpec{});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos) << e.what();
  }
}

TEST(CompileDatasetTest, OutOfRangeTemplate) {
  const auto config = load_task_config(kSource / "configs/sst2.json");
  const auto vocab = Vocabulary::load(kSource / "tests/data/sst2_vocab.json");
  const std::vector<RawSample> samples{{"a gorgeous film", std::nullopt, "Positive"}};
  EXPECT_THROW(compile_dataset(samples, config, vocab, CompileSpec{.template_index = 5}), ValidationError);
}

TEST_F(PipelineCli, SupervisedCompileOneLinePerInput) {
  ASSERT_EQ(run({"compile", "--vocab", s("vocab.json"), "--task", s("reviews.json"), "--data",
                 s("reviews.jsonl"), "--out", p("sup.jsonl")}),
            0);
  EXPECT_EQ(read_compiled(p("sup.jsonl")).size(), 120u);
  EXPECT_EQ(read_compiled_set(p("sup.jsonl")).vocab_hash, Vocabulary::load(s("vocab.json")).hash());
}

TEST_F(PipelineCli, EnsembleFiveLinesPerInput) {
  const auto vocab_path = (kSource / "tests/data/sst2_vocab.json").string();
  const auto data = (kSource / "tests/data/sst2_fixture.jsonl").string();
  ASSERT_EQ(run({"compile", "--mode", "ensemble", "--vocab", vocab_path, "--task",
                 (kSource / "configs/sst2.json").string(), "--data", data, "--out", p("ens.jsonl")}),
            0);
  const auto out = read_compiled(p("ens.jsonl"));
  ASSERT_EQ(out.size(), 15u);
  const auto vocab = Vocabulary::load(vocab_path);
  // Every group of five shares the input sentence and uses five distinct templates.
  for (std::size_t g = 0; g < 3; ++g) {
    std::set<std::string> rendered;
    for (std::size_t i = 0; i < 5; ++i) rendered.insert(render_sample(out[5 * g + i], vocab));
    EXPECT_EQ(rendered.size(), 5u);
  }
}

TEST_F(PipelineCli, UnknownModeIsUsageError) {
  EXPECT_EQ(run({"compile", "--mode", "bogus", "--vocab", s("vocab.json"), "--out", p("x.jsonl")}), 2);
}

TEST_F(PipelineCli, MissingSubcommandIsUsageError) { EXPECT_EQ(run({}), 2); }

TEST_F(PipelineCli, MissingEmbeddingFileNamesPath) {
  const auto missing = p("nowhere/embeddings.txt");
  ::testing::internal::CaptureStderr();
  const int code = run({"build-okr", "--corpus", s("corpus.jsonl"), "--embeddings", missing, "--out",
                        p("okr.json"), "--clusters", "2", "--min-freq", "1"});
  const auto err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, 2);
  EXPECT_NE(err.find(missing), std::string::npos) << err;
}

TEST_F(PipelineCli, TooManyClustersIsValidationError) {
  EXPECT_EQ(run({"build-okr", "--corpus", s("corpus.jsonl"), "--embeddings", s("embeddings.txt"),
                 "--out", p("okr_big.json"), "--clusters", "500", "--min-freq", "1"}),
            2);
}

TEST_F(PipelineCli, BuildOkrWritesRepositoryAndManifest) {
  ASSERT_EQ(run({"build-okr", "--corpus", s("corpus.jsonl"), "--embeddings", s("embeddings.txt"),
                 "--out", p("okr.json"), "--clusters", "2", "--min-freq", "1", "--seed", "4"}),
            0);
  const auto repo = OkrRepository::load(p("okr.json"));
  EXPECT_EQ(repo.k(), 2u);
  const auto m = load_json(p("okr.json.manifest.json"));
  EXPECT_EQ(m["command"], "build-okr");
  EXPECT_EQ(m["seeds"]["kmeans"], 4);
  EXPECT_EQ(m["config"]["clusters"], "2");
  EXPECT_EQ(m["outputs"][p("okr.json")], file_sha256_hex(p("okr.json")));
}

TEST_F(PipelineCli, LambdaZeroGivesZeroKsmlmColumnAndRecordsWeights) {
  compile_sources();
  ASSERT_EQ(run({"build-okr", "--corpus", s("corpus.jsonl"), "--embeddings", s("embeddings.txt"),
                 "--out", p("okr2.json"), "--clusters", "2", "--min-freq", "1"}),
            0);
  ASSERT_EQ(run({"compile", "--mode", "ksmlm", "--vocab", s("vocab.json"), "--corpus", s("corpus.jsonl"),
                 "--okr", p("okr2.json"), "--out", p("ks.jsonl")}),
            0);
  ASSERT_EQ(run({"train-multitask", "--vocab", s("vocab.json"), "--source", p("reviews.c.jsonl"), "--source",
                 p("service.c.jsonl"), "--ksmlm", p("ks.jsonl"), "--lambda", "0", "--steps", "5",
                 "--batch-size", "4", "--dim", "16", "--max-len", "64", "--out", p("l0.ckpt")}),
            0);
  std::ifstream curve(p("l0.ckpt.loss.csv"));
  std::string line;
  std::getline(curve, line);
  EXPECT_EQ(line, "step,L_supervised,L_KSMLM,L_total");
  std::size_t rows = 0;
  while (std::getline(curve, line)) {
    ++rows;
    const auto first = line.find(',');
    const auto second = line.find(',', first + 1);
    const auto third = line.find(',', second + 1);
    EXPECT_EQ(std::stod(line.substr(second + 1, third - second - 1)), 0.0) << line;
    EXPECT_EQ(line.substr(first + 1, second - first - 1), line.substr(third + 1)) << line;
  }
  EXPECT_EQ(rows, 5u);

  const auto m = load_json(p("l0.ckpt.manifest.json"));
  const std::vector<std::size_t> sizes{120, 80};
  const auto expected = dataset_weights(sizes, 0.001);
  ASSERT_EQ(m["results"]["weights"].size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_DOUBLE_EQ(m["results"]["weights"][k].get<double>(), expected[k]);
  }
  EXPECT_EQ(m["results"]["datasets"][0], "reviews");
}

TEST_F(PipelineCli, IdenticalSeedsGiveIdenticalCheckpoints) {
  compile_sources();
  for (const std::string name : {"a.ckpt", "b.ckpt"}) {
    ASSERT_EQ(run({"train-multitask", "--vocab", s("vocab.json"), "--source", p("reviews.c.jsonl"), "--source",
                   p("products.c.jsonl"), "--steps", "3", "--batch-size", "4", "--dim", "16", "--max-len",
                   "64", "--seed", "9", "--out", p(name)}),
              0);
  }
  EXPECT_EQ(read_file(p("a.ckpt")), read_file(p("b.ckpt")));
}

TEST_F(PipelineCli, FinetuneRecordsSplitSizesAndOneCheckpointPerSeed) {
  compile_sources();
  ASSERT_EQ(run({"train-multitask", "--vocab", s("vocab.json"), "--source", p("reviews.c.jsonl"), "--steps",
                 "2", "--batch-size", "4", "--dim", "16", "--max-len", "64", "--out", p("mt.ckpt")}),
            0);
  ASSERT_EQ(run({"finetune", "--task", s("target.json"), "--data", s("target_pool.jsonl"), "--vocab",
                 s("vocab.json"), "--from-checkpoint", p("mt.ckpt"), "--seed", "1", "--seed", "2",
                 "--steps", "2", "--eval-every", "1", "--out-dir", p("ft")}),
            0);
  const auto m = load_json(p("ft/finetune.manifest.json"));
  ASSERT_EQ(m["results"]["runs"].size(), 2u);
  for (const auto& r : m["results"]["runs"]) {
    EXPECT_EQ(r["train_size"], 32);
    EXPECT_EQ(r["dev_size"], 32);
  }
  EXPECT_TRUE(fs::exists(p("ft/seed_1.ckpt.json")));
  EXPECT_TRUE(fs::exists(p("ft/seed_2.ckpt.json")));
  EXPECT_EQ(m["results"]["initial_digest"], load_checkpoint(p("mt.ckpt")).model.digest());
  EXPECT_EQ(m["results"]["mode"], "UPT");
}

TEST_F(PipelineCli, FinetuneWithTooFewSamplesPerClass) {
  EXPECT_EQ(run({"finetune", "--task", s("target.json"), "--data", s("target_test.jsonl"), "--vocab",
                 s("vocab.json"), "--k-shots", "16", "--steps", "1", "--dim", "16", "--max-len", "64",
                 "--out-dir", p("ft_small")}),
            2);
}

TEST_F(PipelineCli, EvaluateRejectsForeignVocabulary) {
  compile_sources();
  ASSERT_EQ(run({"compile", "--vocab", (kSource / "tests/data/sst2_vocab.json").string(), "--task",
                 (kSource / "configs/sst2.json").string(), "--data",
                 (kSource / "tests/data/sst2_fixture.jsonl").string(), "--out", p("sst2.c.jsonl")}),
            0);
  ASSERT_EQ(run({"train-multitask", "--vocab", s("vocab.json"), "--source", p("reviews.c.jsonl"), "--steps",
                 "1", "--batch-size", "2", "--dim", "16", "--max-len", "64", "--out", p("foreign.ckpt")}),
            0);
  EXPECT_EQ(run({"evaluate", "--checkpoint", p("foreign.ckpt"), "--data", p("sst2.c.jsonl"), "--csv",
                 p("foreign.csv")}),
            2);
  EXPECT_FALSE(fs::exists(p("foreign.csv")));
}

TEST_F(PipelineCli, TrainRejectsForeignVocabulary) {
  ASSERT_EQ(run({"compile", "--vocab", (kSource / "tests/data/sst2_vocab.json").string(), "--task",
                 (kSource / "configs/sst2.json").string(), "--data",
                 (kSource / "tests/data/sst2_fixture.jsonl").string(), "--out", p("sst2b.c.jsonl")}),
            0);
  EXPECT_EQ(run({"train-multitask", "--vocab", s("vocab.json"), "--source", p("sst2b.c.jsonl"), "--steps",
                 "1", "--out", p("never.ckpt")}),
            2);
}

TEST_F(PipelineCli, EvaluateSingleCheckpointIsFlagged) {
  compile_sources();
  ASSERT_EQ(run({"train-multitask", "--vocab", s("vocab.json"), "--source", p("reviews.c.jsonl"), "--steps",
                 "1", "--batch-size", "2", "--dim", "16", "--max-len", "64", "--out", p("one.ckpt")}),
            0);
  ASSERT_EQ(run({"evaluate", "--checkpoint", p("one.ckpt"), "--data", p("service.c.jsonl"), "--zero-shot",
                 "--csv", p("one.csv"), "--table", p("one.txt")}),
            0);
  EXPECT_NE(read_file(p("one.txt")).find("(n=1)"), std::string::npos);
  const auto m = load_json(p("one.csv.manifest.json"));
  EXPECT_EQ(m["results"]["std"], 0.0);
  EXPECT_NE(read_file(p("one.csv")).find("service,zero-shot,1,"), std::string::npos);
}

TEST_F(PipelineCli, ConfigFileValuesAreOverriddenByFlags) {
  const auto cfg = p("gc.json");
  write_file(cfg, R"({"dim": 8, "layers": 1, "heads": 2, "vocab_size": 20, "subset": 50, "seed": 5, "out": ")" +
                      p("gc_from_file.json") + "\"}");
  ASSERT_EQ(run({"gradcheck", "--config", cfg, "--seed", "6", "--out", p("gc_flag.json")}), 0);
  EXPECT_FALSE(fs::exists(p("gc_from_file.json")));
  const auto m = load_json(p("gc_flag.json.manifest.json"));
  EXPECT_EQ(m["config"]["dim"], "8");
  EXPECT_EQ(m["config"]["vocab-size"], "20");
  EXPECT_EQ(m["config"]["seed"], "6");
  EXPECT_EQ(m["config"]["subset"], "50");
  EXPECT_GE(m["results"]["checked"].get<int>(), 50);
}

TEST_F(PipelineCli, GradcheckDetectsInjectedFault) {
  EXPECT_EQ(run({"gradcheck", "--dim", "8", "--layers", "1", "--vocab-size", "20", "--full",
                 "--fault-index", "3", "--out", p("gc_fault.json")}),
            1);
  EXPECT_GT(load_json(p("gc_fault.json"))["max_rel_error"].get<double>(), 0.1);
}

TEST_F(PipelineCli, SingleSeedBenchmarkHasZeroSpread) {
  BenchmarkOptions o;
  o.seeds = 1;
  o.sizes = SyntheticSizes{{60, 40, 30}, 40, 20};
  o.model.dim = 8;
  o.model.layers = 1;
  o.multitask_steps = 2;
  o.finetune_steps = 2;
  o.k_shot = 4;
  o.eval_every = 1;
  const auto report = run_synthetic_benchmark(o);
  std::vector<std::string> modes;
  for (const auto& r : report.rows) {
    modes.push_back(r.mode);
    EXPECT_EQ(r.accuracies.size(), 1u);
    EXPECT_EQ(r.stddev(), 0.0);
  }
  EXPECT_EQ(modes, (std::vector<std::string>{"UPT", "UPT-Single", "w/o POV", "w/o KSMLM", "w/o OKR",
                                             "random", "zero-shot"}));
  EXPECT_EQ(report.chance, 0.5);
}

TEST(SyntheticSuiteTest, TargetLabelWordsOnlyInSourceText) {
  const auto suite = generate_synthetic_suite(0);
  auto has_word = [](const std::string& text, const std::string& w) {
    const auto toks = tokenize(text);
    return std::find(toks.begin(), toks.end(), w) != toks.end();
  };
  bool in_source = false;
  for (const auto& pool : suite.source_data) {
    for (const auto& sample : pool) {
      in_source |= has_word(sample.text_a, "brilliant") || has_word(sample.text_a, "dull");
      for (const std::string w : {"bad", "good", "poor", "great", "awful", "nice"}) {
        EXPECT_FALSE(has_word(sample.text_a, w)) << sample.text_a;
      }
    }
  }
  EXPECT_TRUE(in_source);
  for (const auto* set : {&suite.target_pool, &suite.target_test}) {
    for (const auto& sample : *set) {
      EXPECT_FALSE(has_word(sample.text_a, "brilliant") || has_word(sample.text_a, "dull")) << sample.text_a;
    }
  }
  const auto pos = std::count_if(suite.target_test.begin(), suite.target_test.end(),
                                 [](const RawSample& r) { return r.label == "Positive"; });
  EXPECT_EQ(static_cast<std::size_t>(pos) * 2, suite.target_test.size());
}

TEST(SyntheticSuiteTest, DeterministicPerSeed) {
  const auto a = generate_synthetic_suite(5);
  const auto b = generate_synthetic_suite(5);
  const auto c = generate_synthetic_suite(6);
  EXPECT_EQ(a.source_data, b.source_data);
  EXPECT_EQ(a.vocab, b.vocab);
  EXPECT_NE(a.source_data, c.source_data);
}

}  // namespace
}  // namespace upt
