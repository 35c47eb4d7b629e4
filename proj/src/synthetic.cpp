#include "upt/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "upt/error.hpp"
#include "upt/rng.hpp"

namespace upt {

namespace {

const std::vector<std::string> kPositive = {
    "good",    "great",    "nice",      "brilliant", "excellent", "superb",  "lovely", "wonderful",
    "fine",    "pleasant", "charming",  "delightful", "gorgeous", "solid",   "clever", "fresh",
    "vivid",   "warm",     "elegant",   "smart",     "sharp",     "bright",  "neat",   "sweet"};
const std::vector<std::string> kNegative = {
    "bad",    "poor",  "awful",  "dull",   "terrible", "boring", "weak",     "ugly",
    "bland",  "clumsy", "messy", "sloppy", "stale",    "flat",   "tedious",  "cheap",
    "shoddy", "lame",  "dreadful", "noisy", "rude",    "slow",   "broken",   "grim"};

const std::vector<std::string> kVerbs = {"was", "seemed", "felt", "looked"};
const std::vector<std::string> kFillers = {"to be fair ,", "as expected ,", "this time ,",
                                           "in the end ,", "frankly ,"};

struct Family {
  std::string name;
  std::string tmpl;
  std::string option;
  std::string negative_word;
  std::string positive_word;
  std::vector<std::string> nouns;
};

const std::array<Family, 3> kSources = {{
    {"reviews", "[<s1>]. It was [MASK].", "Is it <x1> or <x2>?", "bad", "good",
     {"film", "plot", "cast", "script", "ending", "music"}},
    {"service", "[<s1>]. Overall it was [MASK].", "<x1> or <x2>?", "poor", "great",
     {"staff", "waiter", "room", "food", "desk", "lobby"}},
    {"products", "[<s1>]. The quality is [MASK].", "Was it <x1> or <x2>?", "awful", "nice",
     {"battery", "screen", "case", "charger", "design", "keyboard"}},
}};

const Family kTarget = {"target", "[<s1>]. All in all it was [MASK].", "Is it <x1> or <x2>?", "dull",
                        "brilliant", {"book", "chapter", "story", "author", "prose", "cover"}};

const std::vector<std::string> kLabels = {"Negative", "Positive"};

bool is_source_label_word(const std::string& w) {
  return std::any_of(kSources.begin(), kSources.end(), [&](const Family& f) {
    return f.negative_word == w || f.positive_word == w;
  });
}

TaskConfig config_for(const Family& f) {
  TaskConfig c;
  c.task_name = f.name;
  c.class_labels = kLabels;
  c.templates = {f.tmpl};
  c.options = {f.option};
  c.verbalizers = {{{"Negative", f.negative_word}, {"Positive", f.positive_word}}};
  c.validate();
  return c;
}

// Content adjectives of one polarity. The target's label words are excluded
// from target sentences only.
std::vector<std::string> content_words(bool positive, bool for_target) {
  std::vector<std::string> out;
  for (const auto& w : positive ? kPositive : kNegative) {
    if (is_source_label_word(w)) continue;
    if (for_target && (w == kTarget.negative_word || w == kTarget.positive_word)) continue;
    out.push_back(w);
  }
  return out;
}

template <typename T>
std::vector<T> pick_distinct(const std::vector<T>& from, std::size_t n, Rng& rng) {
  auto copy = from;
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(copy[i], copy[i + rng.uniform_index(copy.size() - i)]);
  }
  copy.resize(n);
  return copy;
}

struct Generated {
  RawSample sample;
  TaggedSentence tagged;
};

Generated make_sentence(const Family& f, bool positive, bool for_target, Rng& rng) {
  const auto adjectives = content_words(positive, for_target);
  const std::size_t n = 2 + rng.uniform_index(2);
  const auto adjs = pick_distinct(adjectives, n, rng);
  const auto nouns = pick_distinct(f.nouns, n, rng);

  Generated g;
  std::vector<TaggedToken> toks;
  if (rng.uniform01() < 0.3) {
    for (auto& w : tokenize(kFillers[rng.uniform_index(kFillers.size())])) {
      toks.push_back({w, w == "," ? "PUNCT" : "X"});
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) toks.push_back({"and", "CCONJ"});
    toks.push_back({"the", "DET"});
    toks.push_back({nouns[i], "NOUN"});
    toks.push_back({kVerbs[rng.uniform_index(kVerbs.size())], "VERB"});
    toks.push_back({adjs[i], "ADJ"});
  }
  std::vector<std::string> words;
  for (const auto& t : toks) words.push_back(t.surface);
  g.sample.text_a = join_tokens(words);
  g.sample.label = kLabels[positive ? 1 : 0];
  g.tagged.tokens = std::move(toks);
  return g;
}

std::vector<RawSample> balanced_set(const Family& f, std::size_t n, Rng& rng) {
  std::vector<RawSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_sentence(f, i % 2 == 1, true, rng).sample);
  rng.shuffle(out.begin(), out.end());
  return out;
}

std::vector<AugmentedSample> ksmlm_samples(const SyntheticSuite& suite, const OkrRepository& repo,
                                           AlternativeSource source, std::uint64_t seed) {
  auto result = synthesize_corpus(suite.corpus, repo, suite.vocab, MaskMode::appended, seed,
                                  suite.corpus.size(), source);
  std::vector<AugmentedSample> out;
  out.reserve(result.examples.size());
  for (auto& e : result.examples) out.push_back(std::move(e.sample));
  return out;
}

}  // namespace

std::vector<std::string> ksmlm_literal_tokens() {
  auto toks = tokenize(strip_placeholders(kKsmlmOptions));
  for (auto& t : tokenize(strip_placeholders(kKsmlmPrompt))) toks.push_back(std::move(t));
  return toks;
}

SyntheticSuite generate_synthetic_suite(std::uint64_t seed, const SyntheticSizes& sizes) {
  if (sizes.sources.size() != kSources.size()) {
    throw ValidationError(fmt::format("synthetic suite has {} source families", kSources.size()));
  }
  SyntheticSuite suite;
  Rng rng(derive_seed(seed, 11));
  std::int64_t next_id = 0;
  for (std::size_t k = 0; k < kSources.size(); ++k) {
    suite.source_configs.push_back(config_for(kSources[k]));
    std::vector<RawSample> data;
    for (std::size_t i = 0; i < sizes.sources[k]; ++i) {
      auto g = make_sentence(kSources[k], rng.uniform_index(2) == 1, false, rng);
      g.tagged.sentence_id = next_id++;
      suite.corpus.push_back(std::move(g.tagged));
      data.push_back(std::move(g.sample));
    }
    suite.source_data.push_back(std::move(data));
  }
  suite.target_config = config_for(kTarget);
  suite.target_pool = balanced_set(kTarget, sizes.target_pool, rng);
  suite.target_test = balanced_set(kTarget, sizes.target_test, rng);

  Rng emb_rng(derive_seed(seed, 12));
  suite.embeddings = EmbeddingTable(8);
  for (const bool positive : {false, true}) {
    for (const auto& w : positive ? kPositive : kNegative) {
      std::vector<double> v(8);
      v[0] = positive ? 1.0 : -1.0;
      for (std::size_t i = 1; i < v.size(); ++i) v[i] = emb_rng.normal(0.0, 0.3);
      suite.embeddings.add(w, std::move(v));
    }
  }

  DatasetRegistry registry;
  for (std::size_t k = 0; k < kSources.size(); ++k) {
    registry.add({suite.source_configs[k].task_name, suite.source_configs[k], suite.source_data[k],
                  DatasetRole::source});
  }
  auto target_all = suite.target_pool;
  target_all.insert(target_all.end(), suite.target_test.begin(), suite.target_test.end());
  registry.add({suite.target_config.task_name, suite.target_config, target_all, DatasetRole::target});
  registry.validate();
  const auto extra = ksmlm_literal_tokens();
  suite.vocab = build_vocabulary(registry, {}, suite.corpus, 1, extra);
  return suite;
}

void save_synthetic_suite(const SyntheticSuite& suite, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < suite.source_configs.size(); ++k) {
    const auto& name = suite.source_configs[k].task_name;
    save_task_config(suite.source_configs[k], dir / (name + ".json"));
    save_task_dataset(suite.source_data[k], dir / (name + ".jsonl"));
  }
  save_task_config(suite.target_config, dir / "target.json");
  save_task_dataset(suite.target_pool, dir / "target_pool.jsonl");
  save_task_dataset(suite.target_test, dir / "target_test.jsonl");
  write_file(dir / "corpus.jsonl", serialize_tagged_corpus(suite.corpus));
  suite.embeddings.save(dir / "embeddings.txt");
  suite.vocab.save(dir / "vocab.json");
}

const ReportRow& BenchmarkReport::row(std::string_view mode) const {
  for (const auto& r : rows) {
    if (r.mode == mode) return r;
  }
  throw ValidationError(fmt::format("benchmark report has no '{}' row", mode));
}

BenchmarkReport run_synthetic_benchmark(const BenchmarkOptions& options, std::ostream* log) {
  if (options.seeds < 1) throw ValidationError("synthetic-benchmark: --seeds must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  auto say = [&](const std::string& line) {
    if (log) fmt::print(*log, "{}\n", line);
  };

  const auto suite = generate_synthetic_suite(options.seed, options.sizes);
  if (options.out_dir) save_synthetic_suite(suite, *options.out_dir / "data");

  auto model_config = options.model;
  model_config.vocab_size = suite.vocab.size();
  model_config.validate();

  const auto candidates = extract_candidates(suite.corpus, 5);
  std::vector<std::string> words;
  for (const auto& c : candidates) words.push_back(c.word);
  const auto repo = build_okr(words, suite.embeddings,
                              OkrBuildOptions{.k = options.okr_clusters, .seed = derive_seed(options.seed, 21)});

  auto compile_all = [&](bool with_options) {
    std::vector<std::vector<AugmentedSample>> pools;
    for (std::size_t k = 0; k < suite.source_configs.size(); ++k) {
      pools.push_back(compile_dataset(suite.source_data[k], suite.source_configs[k], suite.vocab,
                                      CompileSpec{.with_options = with_options}));
    }
    return pools;
  };
  const auto pools_pov = compile_all(true);
  const auto pools_plain = compile_all(false);
  const auto ks_okr = ksmlm_samples(suite, repo, AlternativeSource::okr, derive_seed(options.seed, 22));
  const auto ks_uniform = ksmlm_samples(suite, repo, AlternativeSource::uniform, derive_seed(options.seed, 22));

  const auto test_pov = compile_dataset(suite.target_test, suite.target_config, suite.vocab,
                                        CompileSpec{.with_options = true});
  const auto test_plain = compile_dataset(suite.target_test, suite.target_config, suite.vocab,
                                          CompileSpec{.with_options = false});

  TrainConfig mt;
  mt.lambda = options.lambda;
  mt.learning_rate = options.multitask_lr;
  mt.steps = options.multitask_steps;
  mt.batch_size = options.multitask_batch;
  mt.seed = derive_seed(options.seed, 31);
  const auto init_seed = derive_seed(options.seed, 32);

  struct Variant {
    std::string mode;
    const std::vector<std::vector<AugmentedSample>>* pools;
    const std::vector<AugmentedSample>* ksmlm;
    double lambda;
    bool with_options;
  };
  const std::vector<Variant> variants = {
      {"UPT", &pools_pov, &ks_okr, options.lambda, true},
      {"w/o POV", &pools_plain, &ks_okr, options.lambda, false},
      {"w/o KSMLM", &pools_pov, &ks_okr, 0.0, true},
      {"w/o OKR", &pools_pov, &ks_uniform, options.lambda, true},
  };

  auto finetune_seeds = [&](const TinyMlm& initial, bool with_options, std::size_t salt,
                            std::string_view mode) {
    std::vector<double> acc;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      FinetuneSpec spec;
      spec.k_shot = options.k_shot;
      spec.seed = derive_seed(options.seed, 1000 + s);
      spec.compile.with_options = with_options;
      spec.train.lambda = 0.0;
      spec.train.learning_rate = options.finetune_lr;
      spec.train.steps = options.finetune_steps;
      spec.train.batch_size = options.finetune_batch;
      spec.eval_every = options.eval_every;
      const auto* start = &initial;
      std::optional<TinyMlm> fresh;
      if (salt != 0) {
        fresh = TinyMlm::init(initial.config(), derive_seed(options.seed, salt + s));
        start = &*fresh;
      }
      const auto r = finetune(*start, suite.target_pool, suite.target_config, suite.vocab, spec);
      acc.push_back(evaluate(r.model, with_options ? test_pov : test_plain).accuracy);
      say(fmt::format("  {} seed {}: best dev {:.3f} at step {}, test {:.3f}", mode, s + 1,
                      r.best_dev_accuracy, r.best_step, acc.back()));
    }
    return acc;
  };

  BenchmarkReport report;
  const std::string task = suite.target_config.task_name;
  std::optional<TinyMlm> upt_multitask;
  for (const auto& v : variants) {
    auto cfg = mt;
    cfg.lambda = v.lambda;
    say(fmt::format("{}: multi-task training ({} steps)", v.mode, cfg.steps));
    auto mtr = train_multitask(*v.pools, *v.ksmlm, model_config, init_seed, cfg, options.gamma,
                               MixMode::stratified);
    if (options.out_dir) {
      std::string slug;
      for (const char c : v.mode) slug += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
      write_file(*options.out_dir / fmt::format("loss_{}.csv", slug),
                 loss_curve_csv(mtr.curve));
    }
    report.rows.push_back({task, v.mode, finetune_seeds(mtr.model, v.with_options, 0, v.mode)});
    if (v.mode == "UPT") upt_multitask = std::move(mtr.model);
    if (v.mode == "UPT") {
      say("UPT-Single: fine-tuning from fresh initializations");
      const auto blank = TinyMlm::init(model_config, init_seed);
      report.rows.push_back({task, "UPT-Single", finetune_seeds(blank, true, 2000, "UPT-Single")});
    }
  }

  std::vector<double> random_acc;
  for (std::size_t s = 0; s < options.seeds; ++s) {
    const auto m = TinyMlm::init(model_config, derive_seed(options.seed, 3000 + s));
    random_acc.push_back(evaluate(m, test_pov).accuracy);
  }
  report.rows.push_back({task, "random", random_acc});
  report.rows.push_back({task, "zero-shot", {evaluate(*upt_multitask, test_pov).accuracy}});

  report.chance = 1.0 / static_cast<double>(suite.target_config.num_classes());
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (options.out_dir) {
    write_file(*options.out_dir / "report.csv", report_csv(report.rows));
    write_file(*options.out_dir / "report.txt", report_table(report.rows));
  }
  return report;
}

}  // namespace upt
