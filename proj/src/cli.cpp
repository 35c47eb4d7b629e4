// upt-forge command-line front end.

#include <cstdlib>
#include <iostream>
#include <set>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "CLI11.hpp"
#include "upt/error.hpp"
#include "upt/pipeline.hpp"
#include "upt/synthetic.hpp"

namespace upt {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::uint64_t env_seed() {
  const char* v = std::getenv("UPT_FORGE_SEED");
  if (!v || !*v) return 0;
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ValidationError(fmt::format("UPT_FORGE_SEED='{}' is not an unsigned integer", v));
  }
}

void apply_env_threads() {
  const char* v = std::getenv("UPT_FORGE_THREADS");
  if (!v || !*v) return;
  try {
    const auto n = std::stoull(v);
    if (n < 1) throw std::invalid_argument("zero");
    set_thread_count(n);
  } catch (const std::exception&) {
    throw ValidationError(fmt::format("UPT_FORGE_THREADS='{}' must be a positive integer", v));
  }
}

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
  for (const auto& a : args) {
    if (a == flag || a.starts_with(flag + "=")) return true;
  }
  return false;
}

// Turns `--config file.json` into ordinary flags appended after the given
// ones; flags already on the command line win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ValidationError("--config needs a file");
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!path) return args;
  json file;
  try {
    file = json::parse(read_file(*path));
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: invalid JSON: {}", *path, e.what()));
  }
  if (!file.is_object()) throw ValidationError(fmt::format("{}: expected a JSON object", *path));

  const auto original = args;
  auto scalar = [&](const json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw ValidationError(fmt::format("{}: key '{}' must be a string, number, bool or array", *path, key));
  };
  for (const auto& [key, value] : file.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (has_flag(original, flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& item : value) {
        args.push_back(flag);
        args.push_back(scalar(item, key));
      }
    } else {
      args.push_back(flag);
      args.push_back(scalar(value, key));
    }
  }
  return args;
}

// Every option of a subcommand with its resolved value.
ordered_json resolved_options(const CLI::App& sub) {
  ordered_json out = ordered_json::object();
  for (const auto* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
    const auto& name = opt->get_lnames().front();
    const auto& res = opt->results();
    if (opt->get_type_size() == 0) {
      out[name] = opt->count() > 0;
    } else if (opt->get_expected_max() > 1) {
      out[name] = res;
    } else if (!res.empty()) {
      out[name] = res.back();
    } else {
      out[name] = opt->get_default_str();
    }
  }
  return out;
}

void require_same_vocab(const std::string& what, const std::string& got, const std::string& want) {
  if (got != want) {
    throw ValidationError(fmt::format(
        "{} was built against vocabulary {} but the current vocabulary is {}; rebuild it",
        what, got.substr(0, 12), want.substr(0, 12)));
  }
}

std::size_t one_based(int value, std::string_view what) {
  if (value < 1) throw ValidationError(fmt::format("--{} is 1-based", what));
  return static_cast<std::size_t>(value - 1);
}

// ---------------------------------------------------------------- build-vocab

struct VocabArgs {
  std::vector<std::string> tasks, data, extra;
  std::string corpus, out;
  int min_count = 2;
  bool multiple_choice = false;
};

void cmd_build_vocab(const VocabArgs& a, const CLI::App& sub) {
  if (a.tasks.size() != a.data.size()) {
    throw ValidationError("build-vocab: --task and --data must be given the same number of times");
  }
  RunManifest manifest("build-vocab");
  manifest.set_config(resolved_options(sub));
  DatasetRegistry registry;
  for (std::size_t i = 0; i < a.tasks.size(); ++i) {
    auto config = load_task_config(a.tasks[i]);
    auto samples = load_task_dataset(a.data[i], config);
    manifest.add_input(a.tasks[i]);
    manifest.add_input(a.data[i]);
    registry.add({config.task_name, config, std::move(samples), DatasetRole::source});
  }
  std::vector<TaggedSentence> corpus;
  if (!a.corpus.empty()) {
    corpus = read_tagged_corpus(a.corpus);
    manifest.add_input(a.corpus);
  }
  auto extra = a.extra;
  for (auto& t : ksmlm_literal_tokens()) extra.push_back(std::move(t));
  if (a.multiple_choice) {
    for (char c = 'a'; c <= 'z'; ++c) extra.emplace_back(1, c);
    for (const char* t : {";", ".", "it", "is"}) extra.emplace_back(t);
  }
  const auto vocab = build_vocabulary(registry, {}, corpus, a.min_count, extra);
  vocab.save(a.out);
  manifest.add_output(a.out);
  manifest.results()["vocab_hash"] = vocab.hash();
  manifest.results()["size"] = vocab.size();
  manifest.write(manifest_path_for(a.out));
  fmt::print("vocabulary: {} tokens, hash {}\n", vocab.size(), vocab.hash());
}

// ------------------------------------------------------------------ build-okr

struct OkrArgs {
  std::string corpus, embeddings, out;
  std::size_t clusters = 64;
  int min_freq = 10;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-9;
  bool no_normalize = false;
};

void cmd_build_okr(const OkrArgs& a, const CLI::App& sub) {
  RunManifest manifest("build-okr");
  manifest.set_config(resolved_options(sub));
  manifest.set_seed("kmeans", a.seed);
  const auto corpus = read_tagged_corpus(a.corpus);
  const auto embeddings = EmbeddingTable::load(a.embeddings);
  manifest.add_input(a.corpus);
  manifest.add_input(a.embeddings);

  const auto candidates = extract_candidates(corpus, a.min_freq);
  std::vector<std::string> words;
  for (const auto& c : candidates) words.push_back(c.word);
  OkrBuildReport report;
  const auto repo = build_okr(words, embeddings,
                              OkrBuildOptions{a.clusters, a.seed, a.max_iters, a.tol, !a.no_normalize},
                              &report);
  repo.save(a.out);
  manifest.add_output(a.out);

  std::vector<std::size_t> sizes;
  for (std::size_t c = 0; c < repo.k(); ++c) sizes.push_back(repo.members(c).size());
  auto& r = manifest.results();
  r["candidates"] = words.size();
  r["dropped_no_embedding"] = report.dropped_no_embedding;
  r["dropped_zero_vector"] = report.dropped_zero_vector;
  r["iterations"] = report.kmeans.iterations;
  r["converged"] = report.kmeans.converged;
  r["cluster_sizes"] = sizes;
  manifest.write(manifest_path_for(a.out));

  fmt::print("{} adjectives in {} clusters ({} without embedding, {} zero vectors)\n", repo.entries().size(),
             repo.k(), report.dropped_no_embedding, report.dropped_zero_vector);
  const auto widest = sizes.empty() ? 1 : *std::max_element(sizes.begin(), sizes.end());
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    const auto bar = widest == 0 ? 0 : (sizes[c] * 40 + widest - 1) / widest;
    fmt::print("  cluster {:>3} {:>5} {}\n", c, sizes[c], std::string(bar, '#'));
  }
}

// -------------------------------------------------------------------- compile

struct CompileArgs {
  std::string mode = "supervised";
  std::string vocab, task, data, out;
  int template_number = 1, option_number = 1, verbalizer_number = 1;
  bool no_options = false;
  double weight = 1.0;
  std::uint64_t seed = 0;
  // ksmlm
  std::string corpus, okr, ksmlm_mode = "in-situ";
  std::size_t budget = 0;
  bool no_okr = false;
};

void cmd_compile(const CompileArgs& a, const CLI::App& sub) {
  RunManifest manifest("compile");
  manifest.set_config(resolved_options(sub));
  manifest.set_seed("compile", a.seed);
  const auto vocab = Vocabulary::load(a.vocab);
  manifest.add_input(a.vocab);
  const auto mode = parse_compile_mode(a.mode);

  if (mode == CompileMode::ksmlm) {
    if (a.corpus.empty() || a.okr.empty()) throw ValidationError("compile --mode ksmlm needs --corpus and --okr");
    MaskMode mask_mode;
    if (a.ksmlm_mode == "in-situ") {
      mask_mode = MaskMode::in_situ;
    } else if (a.ksmlm_mode == "appended") {
      mask_mode = MaskMode::appended;
    } else {
      throw ValidationError(fmt::format("unknown --ksmlm-mode '{}' (in-situ or appended)", a.ksmlm_mode));
    }
    const auto corpus = read_tagged_corpus(a.corpus);
    const auto repo = OkrRepository::load(a.okr);
    manifest.add_input(a.corpus);
    manifest.add_input(a.okr);
    const auto result = synthesize_corpus(corpus, repo, vocab, mask_mode, a.seed,
                                          a.budget ? a.budget : corpus.size(),
                                          a.no_okr ? AlternativeSource::uniform : AlternativeSource::okr);
    manifest.results()["counts"] = result.counts.to_json();
    write_compiled(a.out, serialize_ksmlm(result.examples), manifest, vocab.hash());
    fmt::print("{} KSMLM examples ({} sentences without a usable adjective, {} OOV, {} without alternative)\n",
               result.counts.synthesized, result.counts.skipped_no_adjective, result.counts.skipped_oov,
               result.counts.skipped_no_alternative);
    return;
  }

  if (a.task.empty() || a.data.empty()) throw ValidationError("compile needs --task and --data");
  const auto config = load_task_config(a.task);
  const auto samples = load_task_dataset(a.data, config);
  manifest.add_input(a.task);
  manifest.add_input(a.data);
  CompileSpec spec;
  spec.mode = mode;
  spec.template_index = one_based(a.template_number, "template");
  spec.option_index = one_based(a.option_number, "option");
  spec.verbalizer_index = one_based(a.verbalizer_number, "verbalizer");
  spec.with_options = !a.no_options;
  spec.weight = a.weight;
  spec.seed = a.seed;
  const auto compiled = compile_dataset(samples, config, vocab, spec);
  manifest.results()["samples_in"] = samples.size();
  manifest.results()["samples_out"] = compiled.size();
  write_compiled(a.out, serialize_compiled(compiled), manifest, vocab.hash());
  fmt::print("{} samples -> {} compiled instances\n", samples.size(), compiled.size());
}

// ------------------------------------------------------------ train-multitask

struct TrainArgs {
  std::vector<std::string> sources;
  std::string ksmlm, vocab, out, loss_curve;
  double lambda = 0.1, gamma = 0.001, lr = 1e-3;
  std::string mix_mode = "stratified", ksmlm_mix = "loss-multiplier";
  std::size_t steps = 200, batch_size = 16;
  std::optional<double> grad_clip;
  std::uint64_t seed = 0;
  std::size_t dim = 32, layers = 2, heads = 2, max_len = 128;
};

MixMode parse_mix_mode(const std::string& s) {
  if (s == "stratified") return MixMode::stratified;
  if (s == "loss-weighted") return MixMode::loss_weighted;
  throw ValidationError(fmt::format("unknown --mix-mode '{}' (stratified or loss-weighted)", s));
}

KsmlmMix parse_ksmlm_mix(const std::string& s) {
  if (s == "loss-multiplier") return KsmlmMix::loss_multiplier;
  if (s == "sub-batch-share") return KsmlmMix::sub_batch_share;
  throw ValidationError(fmt::format("unknown --ksmlm-mix '{}' (loss-multiplier or sub-batch-share)", s));
}

void cmd_train_multitask(const TrainArgs& a, const CLI::App& sub) {
  RunManifest manifest("train-multitask");
  manifest.set_config(resolved_options(sub));
  manifest.set_seed("init", a.seed);
  manifest.set_seed("batches", derive_seed(a.seed, 1));
  const auto vocab = Vocabulary::load(a.vocab);
  manifest.add_input(a.vocab);

  std::vector<std::vector<AugmentedSample>> pools;
  for (const auto& path : a.sources) {
    auto set = read_compiled_set(path);
    require_same_vocab(path, set.vocab_hash, vocab.hash());
    manifest.add_input(path);
    pools.push_back(std::move(set.samples));
  }
  std::vector<AugmentedSample> ksmlm;
  if (!a.ksmlm.empty()) {
    auto set = read_compiled_set(a.ksmlm);
    require_same_vocab(a.ksmlm, set.vocab_hash, vocab.hash());
    manifest.add_input(a.ksmlm);
    ksmlm = std::move(set.samples);
  }

  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.dim = a.dim;
  mc.layers = a.layers;
  mc.heads = a.heads;
  mc.max_len = a.max_len;
  TrainConfig tc;
  tc.lambda = a.lambda;
  tc.learning_rate = a.lr;
  tc.steps = a.steps;
  tc.batch_size = a.batch_size;
  tc.seed = derive_seed(a.seed, 1);
  tc.grad_clip = a.grad_clip;
  tc.ksmlm_mix = parse_ksmlm_mix(a.ksmlm_mix);

  auto result = train_multitask(pools, ksmlm, mc, a.seed, tc, a.gamma, parse_mix_mode(a.mix_mode));
  save_checkpoint(result.model, vocab.hash(), a.out);
  manifest.add_output(a.out);
  const std::string curve_path = a.loss_curve.empty() ? a.out + ".loss.csv" : a.loss_curve;
  write_file(curve_path, loss_curve_csv(result.curve));
  manifest.add_output(curve_path);

  auto& r = manifest.results();
  r["model"] = mc.to_json();
  r["train"] = tc.to_json();
  r["datasets"] = result.plan.dataset_names;
  r["sizes"] = result.plan.sizes;
  r["weights"] = result.plan.weights;
  r["vocab_hash"] = vocab.hash();
  r["parameter_digest"] = result.model.digest();
  if (!result.curve.empty()) {
    const auto& last = result.curve.back();
    r["final_loss"] = ordered_json{{"supervised", last.supervised}, {"ksmlm", last.ksmlm}, {"total", last.total}};
  }
  manifest.write(manifest_path_for(a.out));
  fmt::print("trained {} steps over {} sources; weights", tc.steps, pools.size());
  for (std::size_t k = 0; k < result.plan.weights.size(); ++k) {
    fmt::print(" {}={:.4f}", result.plan.dataset_names[k], result.plan.weights[k]);
  }
  fmt::print("\n");
}

// ------------------------------------------------------------------- finetune

struct FinetuneArgs {
  std::string task, data, vocab, from_checkpoint, out_dir;
  std::size_t k_shots = 16;
  std::vector<std::uint64_t> seeds;
  std::size_t steps = 100, batch_size = 8, eval_every = 10;
  double lr = 1e-3;
  std::optional<double> grad_clip;
  int template_number = 1, option_number = 1, verbalizer_number = 1;
  bool no_options = false;
  std::size_t dim = 32, layers = 2, heads = 2, max_len = 128;
};

void cmd_finetune(const FinetuneArgs& a, const CLI::App& sub) {
  RunManifest manifest("finetune");
  manifest.set_config(resolved_options(sub));
  const auto config = load_task_config(a.task);
  const auto dataset = load_task_dataset(a.data, config);
  const auto vocab = Vocabulary::load(a.vocab);
  manifest.add_input(a.task);
  manifest.add_input(a.data);
  manifest.add_input(a.vocab);

  const auto seeds = a.seeds.empty() ? std::vector<std::uint64_t>{env_seed()} : a.seeds;
  std::optional<TinyMlm> initial;
  if (!a.from_checkpoint.empty()) {
    auto ckpt = load_checkpoint(a.from_checkpoint);
    require_same_vocab(a.from_checkpoint, ckpt.vocab_hash, vocab.hash());
    manifest.add_input(a.from_checkpoint);
    manifest.results()["initial_digest"] = ckpt.model.digest();
    initial = std::move(ckpt.model);
  }

  FinetuneSpec spec;
  spec.k_shot = a.k_shots;
  spec.eval_every = a.eval_every;
  spec.compile.template_index = one_based(a.template_number, "template");
  spec.compile.option_index = one_based(a.option_number, "option");
  spec.compile.verbalizer_index = one_based(a.verbalizer_number, "verbalizer");
  spec.compile.with_options = !a.no_options;
  spec.train.lambda = 0.0;
  spec.train.learning_rate = a.lr;
  spec.train.steps = a.steps;
  spec.train.batch_size = a.batch_size;
  spec.train.grad_clip = a.grad_clip;

  std::filesystem::create_directories(a.out_dir);
  auto runs = ordered_json::array();
  for (const auto seed : seeds) {
    manifest.set_seed(fmt::format("seed_{}", seed), seed);
    spec.seed = seed;
    TinyMlm start = initial ? *initial : [&] {
      ModelConfig mc;
      mc.vocab_size = vocab.size();
      mc.dim = a.dim;
      mc.layers = a.layers;
      mc.heads = a.heads;
      mc.max_len = a.max_len;
      return TinyMlm::init(mc, derive_seed(seed, 2));
    }();
    const auto r = finetune(start, dataset, config, vocab, spec);
    const auto path = std::filesystem::path(a.out_dir) / fmt::format("seed_{}.ckpt.json", seed);
    save_checkpoint(r.model, vocab.hash(), path);
    manifest.add_output(path);
    runs.push_back(ordered_json{{"seed", seed},
                                {"train_size", r.train_size},
                                {"dev_size", r.dev_size},
                                {"best_step", r.best_step},
                                {"best_dev_accuracy", r.best_dev_accuracy},
                                {"checkpoint", path.string()},
                                {"parameter_digest", r.model.digest()}});
    fmt::print("seed {}: {} train / {} dev, best dev accuracy {:.4f} at step {}\n", seed, r.train_size,
               r.dev_size, r.best_dev_accuracy, r.best_step);
  }
  manifest.results()["mode"] = initial ? "UPT" : "UPT-Single";
  manifest.results()["runs"] = runs;
  manifest.results()["vocab_hash"] = vocab.hash();
  manifest.write(std::filesystem::path(a.out_dir) / "finetune.manifest.json");
}

// ------------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::vector<std::string> checkpoints;
  std::string data, task_name, mode, csv, table;
  bool zero_shot = false;
};

void cmd_evaluate(const EvaluateArgs& a, const CLI::App& sub) {
  RunManifest manifest("evaluate");
  manifest.set_config(resolved_options(sub));
  const auto set = read_compiled_set(a.data);
  manifest.add_input(a.data);
  if (set.samples.empty()) throw ValidationError(fmt::format("{}: no samples", a.data));

  ReportRow row;
  row.task_name = a.task_name.empty() ? set.samples.front().source_dataset : a.task_name;
  row.mode = !a.mode.empty() ? a.mode : (a.zero_shot ? "zero-shot" : "UPT");
  auto per = ordered_json::array();
  for (const auto& path : a.checkpoints) {
    const auto ckpt = load_checkpoint(path);
    require_same_vocab(path, ckpt.vocab_hash, set.vocab_hash);
    manifest.add_input(path);
    const auto r = evaluate(ckpt.model, set.samples);
    row.accuracies.push_back(r.accuracy);
    per.push_back(ordered_json{{"checkpoint", path}, {"accuracy", r.accuracy}, {"correct", r.correct},
                               {"total", r.total}});
  }
  const std::vector<ReportRow> rows{row};
  write_file(a.csv, report_csv(rows));
  manifest.add_output(a.csv);
  const auto table = report_table(rows);
  if (!a.table.empty()) {
    write_file(a.table, table);
    manifest.add_output(a.table);
  }
  manifest.results()["per_checkpoint"] = per;
  manifest.results()["mean"] = row.mean();
  manifest.results()["std"] = row.stddev();
  manifest.write(manifest_path_for(a.csv));
  fmt::print("{}", table);
}

// ------------------------------------------------------------------ gradcheck

struct GradcheckArgs {
  std::size_t dim = 32, layers = 2, heads = 2, vocab_size = 60, batch = 4, max_len = 16;
  std::size_t subset = 3000;
  bool full = false;
  double epsilon = 1e-5, tolerance = 1e-4, lambda = 0.1;
  std::uint64_t seed = 0;
  std::optional<std::size_t> fault_index;
  double fault_scale = 2.0;
  std::string out = "gradcheck.json";
};

std::vector<AugmentedSample> random_cloze_batch(Rng& rng, std::size_t n, std::size_t vocab_size,
                                                std::size_t max_len, std::string_view source) {
  constexpr TokenId kFirstWord = 5, kMask = 4;
  std::vector<AugmentedSample> out;
  const auto words = static_cast<TokenId>(vocab_size) - kFirstWord;
  for (std::size_t i = 0; i < n; ++i) {
    AugmentedSample s;
    const auto len = 4 + rng.uniform_index(max_len - 3);
    for (std::size_t t = 0; t < len; ++t) {
      s.token_ids.push_back(kFirstWord + static_cast<TokenId>(rng.uniform_index(words)));
    }
    s.mask_index = rng.uniform_index(len);
    s.token_ids[s.mask_index] = kMask;
    const auto a = kFirstWord + static_cast<TokenId>(rng.uniform_index(words));
    auto b = kFirstWord + static_cast<TokenId>(rng.uniform_index(words - 1));
    if (b >= a) ++b;
    s.candidate_word_ids = {a, b};
    s.gold_label_index = rng.uniform_index(2);
    s.target_word_id = s.candidate_word_ids[s.gold_label_index];
    s.source_dataset = std::string(source);
    s.weight = 0.25 + rng.uniform01();
    out.push_back(std::move(s));
  }
  return out;
}

int cmd_gradcheck(const GradcheckArgs& a, const CLI::App& sub) {
  if (a.vocab_size < 8) throw ValidationError("gradcheck: --vocab-size must be >= 8");
  if (a.max_len < 4) throw ValidationError("gradcheck: --max-len must be >= 4");
  RunManifest manifest("gradcheck");
  manifest.set_config(resolved_options(sub));
  manifest.set_seed("gradcheck", a.seed);
  ModelConfig mc;
  mc.vocab_size = a.vocab_size;
  mc.dim = a.dim;
  mc.layers = a.layers;
  mc.heads = a.heads;
  mc.max_len = a.max_len;
  auto model = TinyMlm::init(mc, a.seed);
  // Spread the weights out so every nonlinearity works away from zero.
  Rng rng(derive_seed(a.seed, 1));
  for (auto& p : model.params()) p += rng.normal(0.0, 0.3);
  const auto sup = random_cloze_batch(rng, a.batch, a.vocab_size, a.max_len, "random");
  const auto ks = random_cloze_batch(rng, a.batch, a.vocab_size, a.max_len, kKsmlmSource);

  GradCheckOptions opts;
  opts.epsilon = a.epsilon;
  if (!a.full) opts.subset = a.subset;
  opts.seed = derive_seed(a.seed, 2);
  opts.lambda = a.lambda;
  if (a.fault_index) opts.fault = std::make_pair(*a.fault_index, a.fault_scale);
  const auto r = grad_check(model, sup, ks, opts);
  const bool ok = r.max_rel_error < a.tolerance;

  manifest.results() = ordered_json{{"parameters", model.num_params()},
                                    {"checked", r.checked},
                                    {"max_rel_error", r.max_rel_error},
                                    {"worst_index", r.worst_index},
                                    {"worst_block", r.worst_block},
                                    {"passed", ok}};
  write_file(a.out, manifest.results().dump(2) + "\n");
  manifest.add_output(a.out);
  manifest.write(manifest_path_for(a.out));
  fmt::print("checked {} of {} parameters: max relative error {:.3e} at {} ({}) -> {}\n", r.checked,
             model.num_params(), r.max_rel_error, r.worst_index, r.worst_block, ok ? "ok" : "FAILED");
  return ok ? 0 : 1;
}

// -------------------------------------------------------- synthetic-benchmark

struct BenchArgs {
  BenchmarkOptions opts;
  std::string out_dir = "synthetic-benchmark";
  bool quiet = false;
};

void cmd_synthetic_benchmark(BenchArgs a, const CLI::App& sub) {
  RunManifest manifest("synthetic-benchmark");
  manifest.set_config(resolved_options(sub));
  manifest.set_seed("benchmark", a.opts.seed);
  a.opts.out_dir = a.out_dir;
  const auto report = run_synthetic_benchmark(a.opts, a.quiet ? nullptr : &std::cout);
  const std::filesystem::path csv = std::filesystem::path(a.out_dir) / "report.csv";
  manifest.add_output(csv);
  manifest.add_output(std::filesystem::path(a.out_dir) / "report.txt");
  for (const auto& row : report.rows) {
    manifest.results()[row.mode] = ordered_json{{"mean", row.mean()}, {"std", row.stddev()}, {"accuracies", row.accuracies}};
  }
  manifest.write(manifest_path_for(csv));
  fmt::print("{}", report_table(report.rows));
  fmt::print("chance {:.2f}%\n", 100.0 * report.chance);
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args) {
  try {
    apply_env_threads();
    const auto args = expand_config(raw_args);
    const auto default_seed = env_seed();

    CLI::App app{"Unified prompt tuning toolkit: OKR building, POV compilation, multi-task and few-shot training",
                 "upt-forge"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.set_version_flag("--version", std::string(kToolVersion));

    VocabArgs va;
    auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a vocabulary from task data and a tagged corpus");
    vocab_cmd->add_option("--task", va.tasks, "Task config (repeatable, paired with --data)")->required();
    vocab_cmd->add_option("--data", va.data, "Dataset JSONL (repeatable)")->required();
    vocab_cmd->add_option("--corpus", va.corpus, "Tagged corpus JSONL");
    vocab_cmd->add_option("--min-count", va.min_count, "Minimum token count");
    vocab_cmd->add_option("--extra", va.extra, "Extra tokens");
    vocab_cmd->add_flag("--multiple-choice", va.multiple_choice, "Add multiple-choice letters and separators");
    vocab_cmd->add_option("--out", va.out, "Output vocabulary JSON")->required();

    OkrArgs oa;
    oa.seed = default_seed;
    auto* okr_cmd = app.add_subcommand("build-okr", "Mine adjectives and cluster them into an OKR");
    okr_cmd->add_option("--corpus", oa.corpus, "Tagged corpus JSONL")->required();
    okr_cmd->add_option("--embeddings", oa.embeddings, "Word vectors, one 'word f1 .. fd' per line")->required();
    okr_cmd->add_option("--out", oa.out, "Output repository JSON")->required();
    okr_cmd->add_option("--clusters", oa.clusters, "Number of clusters");
    okr_cmd->add_option("--min-freq", oa.min_freq, "Minimum adjective frequency");
    okr_cmd->add_option("--seed", oa.seed);
    okr_cmd->add_option("--max-iters", oa.max_iters);
    okr_cmd->add_option("--tol", oa.tol);
    okr_cmd->add_flag("--no-normalize", oa.no_normalize, "Cluster raw vectors instead of unit vectors");

    CompileArgs ca;
    ca.seed = default_seed;
    auto* compile_cmd = app.add_subcommand("compile", "Compile a dataset into cloze instances");
    compile_cmd->add_option("--mode", ca.mode, "supervised, ksmlm, ensemble or multiple-choice");
    compile_cmd->add_option("--vocab", ca.vocab)->required();
    compile_cmd->add_option("--task", ca.task, "Task config");
    compile_cmd->add_option("--data", ca.data, "Dataset JSONL");
    compile_cmd->add_option("--template", ca.template_number, "Template number (1-based)");
    compile_cmd->add_option("--option", ca.option_number, "Option expression number (1-based)");
    compile_cmd->add_option("--verbalizer", ca.verbalizer_number, "Verbalizer number (1-based)");
    compile_cmd->add_flag("--no-options", ca.no_options, "Leave out the option expression");
    compile_cmd->add_option("--weight", ca.weight, "Sample weight");
    compile_cmd->add_option("--seed", ca.seed);
    compile_cmd->add_option("--corpus", ca.corpus, "Tagged corpus (ksmlm)");
    compile_cmd->add_option("--okr", ca.okr, "OKR repository (ksmlm)");
    compile_cmd->add_option("--ksmlm-mode", ca.ksmlm_mode, "in-situ or appended");
    compile_cmd->add_option("--budget", ca.budget, "Maximum KSMLM examples (0 = one pass)");
    compile_cmd->add_flag("--no-okr", ca.no_okr, "Draw alternatives uniformly instead of from the OKR");
    compile_cmd->add_option("--out", ca.out)->required();

    TrainArgs ta;
    ta.seed = default_seed;
    auto* train_cmd = app.add_subcommand("train-multitask", "Multi-task prompt training over source tasks");
    train_cmd->add_option("--source", ta.sources, "Compiled source pool (repeatable)")->required();
    train_cmd->add_option("--ksmlm", ta.ksmlm, "Compiled KSMLM pool");
    train_cmd->add_option("--vocab", ta.vocab)->required();
    train_cmd->add_option("--lambda", ta.lambda);
    train_cmd->add_option("--gamma", ta.gamma);
    train_cmd->add_option("--mix-mode", ta.mix_mode, "stratified or loss-weighted");
    train_cmd->add_option("--ksmlm-mix", ta.ksmlm_mix, "loss-multiplier or sub-batch-share");
    train_cmd->add_option("--steps", ta.steps);
    train_cmd->add_option("--batch-size", ta.batch_size);
    train_cmd->add_option("--lr", ta.lr);
    train_cmd->add_option("--grad-clip", ta.grad_clip, "Global gradient-norm cap");
    train_cmd->add_option("--seed", ta.seed);
    train_cmd->add_option("--dim", ta.dim);
    train_cmd->add_option("--layers", ta.layers);
    train_cmd->add_option("--heads", ta.heads);
    train_cmd->add_option("--max-len", ta.max_len);
    train_cmd->add_option("--loss-curve", ta.loss_curve, "Loss-curve CSV (default <out>.loss.csv)");
    train_cmd->add_option("--out", ta.out, "Output checkpoint")->required();

    FinetuneArgs fa;
    auto* ft_cmd = app.add_subcommand("finetune", "Few-shot fine-tuning on a target task");
    ft_cmd->add_option("--task", fa.task)->required();
    ft_cmd->add_option("--data", fa.data)->required();
    ft_cmd->add_option("--vocab", fa.vocab)->required();
    ft_cmd->add_option("--from-checkpoint", fa.from_checkpoint, "Start from a multi-task checkpoint");
    ft_cmd->add_option("--k-shots", fa.k_shots);
    ft_cmd->add_option("--seed", fa.seeds, "Few-shot seed (repeatable)");
    ft_cmd->add_option("--steps", fa.steps);
    ft_cmd->add_option("--batch-size", fa.batch_size);
    ft_cmd->add_option("--lr", fa.lr);
    ft_cmd->add_option("--grad-clip", fa.grad_clip);
    ft_cmd->add_option("--eval-every", fa.eval_every, "Dev evaluation interval in steps");
    ft_cmd->add_option("--template", fa.template_number);
    ft_cmd->add_option("--option", fa.option_number);
    ft_cmd->add_option("--verbalizer", fa.verbalizer_number);
    ft_cmd->add_flag("--no-options", fa.no_options);
    ft_cmd->add_option("--dim", fa.dim, "Model width when starting fresh");
    ft_cmd->add_option("--layers", fa.layers);
    ft_cmd->add_option("--heads", fa.heads);
    ft_cmd->add_option("--max-len", fa.max_len);
    ft_cmd->add_option("--out-dir", fa.out_dir)->required();

    EvaluateArgs ea;
    auto* eval_cmd = app.add_subcommand("evaluate", "Accuracy of checkpoints on a compiled set");
    eval_cmd->add_option("--checkpoint", ea.checkpoints, "Checkpoint (repeatable)")->required();
    eval_cmd->add_option("--data", ea.data, "Compiled evaluation set")->required();
    eval_cmd->add_option("--task-name", ea.task_name);
    eval_cmd->add_option("--mode", ea.mode, "Row label");
    eval_cmd->add_flag("--zero-shot", ea.zero_shot, "Label the row as zero-shot");
    eval_cmd->add_option("--csv", ea.csv)->required();
    eval_cmd->add_option("--table", ea.table);

    GradcheckArgs ga;
    ga.seed = default_seed;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients on a random model");
    gc_cmd->add_option("--dim", ga.dim);
    gc_cmd->add_option("--layers", ga.layers);
    gc_cmd->add_option("--heads", ga.heads);
    gc_cmd->add_option("--vocab-size", ga.vocab_size);
    gc_cmd->add_option("--max-len", ga.max_len);
    gc_cmd->add_option("--batch", ga.batch);
    gc_cmd->add_option("--subset", ga.subset);
    gc_cmd->add_flag("--full", ga.full, "Check every parameter");
    gc_cmd->add_option("--epsilon", ga.epsilon);
    gc_cmd->add_option("--tolerance", ga.tolerance);
    gc_cmd->add_option("--lambda", ga.lambda);
    gc_cmd->add_option("--seed", ga.seed);
    gc_cmd->add_option("--fault-index", ga.fault_index, "Scale this parameter's analytic gradient");
    gc_cmd->add_option("--fault-scale", ga.fault_scale);
    gc_cmd->add_option("--out", ga.out);

    BenchArgs ba;
    ba.opts.seed = default_seed;
    auto* bench_cmd = app.add_subcommand("synthetic-benchmark", "Run every training mode on generated tasks");
    bench_cmd->add_option("--seeds", ba.opts.seeds, "Few-shot seeds per mode");
    bench_cmd->add_option("--seed", ba.opts.seed, "Data and initialization seed");
    bench_cmd->add_option("--steps", ba.opts.multitask_steps, "Multi-task steps");
    bench_cmd->add_option("--batch-size", ba.opts.multitask_batch);
    bench_cmd->add_option("--lr", ba.opts.multitask_lr);
    bench_cmd->add_option("--lambda", ba.opts.lambda);
    bench_cmd->add_option("--gamma", ba.opts.gamma);
    bench_cmd->add_option("--clusters", ba.opts.okr_clusters);
    bench_cmd->add_option("--finetune-steps", ba.opts.finetune_steps);
    bench_cmd->add_option("--finetune-batch-size", ba.opts.finetune_batch);
    bench_cmd->add_option("--finetune-lr", ba.opts.finetune_lr);
    bench_cmd->add_option("--k-shots", ba.opts.k_shot);
    bench_cmd->add_option("--eval-every", ba.opts.eval_every);
    bench_cmd->add_option("--dim", ba.opts.model.dim);
    bench_cmd->add_option("--layers", ba.opts.model.layers);
    bench_cmd->add_option("--heads", ba.opts.model.heads);
    bench_cmd->add_option("--out-dir", ba.out_dir);
    bench_cmd->add_flag("--quiet", ba.quiet, "Only print the final table");

    try {
      std::vector<std::string> reversed(args.rbegin(), args.rend());
      app.parse(reversed);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e);
      return code == 0 ? 0 : 2;
    }

    if (vocab_cmd->parsed()) cmd_build_vocab(va, *vocab_cmd);
    if (okr_cmd->parsed()) cmd_build_okr(oa, *okr_cmd);
    if (compile_cmd->parsed()) cmd_compile(ca, *compile_cmd);
    if (train_cmd->parsed()) cmd_train_multitask(ta, *train_cmd);
    if (ft_cmd->parsed()) cmd_finetune(fa, *ft_cmd);
    if (eval_cmd->parsed()) cmd_evaluate(ea, *eval_cmd);
    if (gc_cmd->parsed()) return cmd_gradcheck(ga, *gc_cmd);
    if (bench_cmd->parsed()) cmd_synthetic_benchmark(ba, *bench_cmd);
    return 0;
  } catch (const ValidationError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const RuntimeError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
}

}  // namespace upt
