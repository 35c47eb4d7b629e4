#include "upt/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "upt/digest.hpp"
#include "upt/error.hpp"

namespace upt {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  return fmt::format("{:%Y-%m-%dT%H:%M:%S}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
}

}  // namespace

RunManifest::RunManifest(std::string command) : command_(std::move(command)), started_at_(utc_now()) {}

void RunManifest::add_input(const std::filesystem::path& path) {
  inputs_[path.string()] = file_sha256_hex(path);
}

void RunManifest::add_output(const std::filesystem::path& path) {
  outputs_[path.string()] = file_sha256_hex(path);
}

ordered_json RunManifest::to_json() const {
  ordered_json seeds = ordered_json::object();
  for (const auto& [k, v] : seeds_) seeds[k] = v;
  return ordered_json{{"command", command_},         {"tool_version", kToolVersion},
                      {"config", config_},           {"inputs", inputs_},
                      {"seeds", seeds},              {"outputs", outputs_},
                      {"results", results_},         {"started_at", started_at_},
                      {"finished_at", finished_at_}};
}

void RunManifest::write(const std::filesystem::path& path) {
  finished_at_ = utc_now();
  write_file(path, to_json().dump(2) + "\n");
}

std::filesystem::path manifest_path_for(const std::filesystem::path& output) {
  auto p = output;
  p += ".manifest.json";
  return p;
}

json strip_timestamps(json manifest) {
  manifest.erase("started_at");
  manifest.erase("finished_at");
  return manifest;
}

CompileMode parse_compile_mode(std::string_view text) {
  if (text == "supervised") return CompileMode::supervised;
  if (text == "ksmlm") return CompileMode::ksmlm;
  if (text == "ensemble") return CompileMode::ensemble;
  if (text == "multiple-choice") return CompileMode::multiple_choice;
  throw ValidationError(fmt::format(
      "unknown compile mode '{}' (expected supervised, ksmlm, ensemble or multiple-choice)", text));
}

std::string_view to_string(CompileMode mode) {
  switch (mode) {
    case CompileMode::supervised: return "supervised";
    case CompileMode::ksmlm: return "ksmlm";
    case CompileMode::ensemble: return "ensemble";
    case CompileMode::multiple_choice: return "multiple-choice";
  }
  return "?";
}

std::vector<AugmentedSample> compile_dataset(std::span<const RawSample> samples,
                                             const TaskConfig& config, const Vocabulary& vocab,
                                             const CompileSpec& spec) {
  if (spec.mode == CompileMode::ksmlm) {
    throw ValidationError("compile_dataset: KSMLM examples are synthesized from a tagged corpus");
  }
  const auto pov = parse_pov(config);
  auto pick = [](std::size_t index, std::size_t n, std::string_view what) {
    if (index >= n) {
      throw ValidationError(fmt::format("{} {} out of range (config has {})", what, index + 1, n));
    }
    return index;
  };
  const auto& tmpl = pov.templates[pick(spec.template_index, pov.templates.size(), "template")];
  const auto& opts = pov.options[pick(spec.option_index, pov.options.size(), "option")];
  const auto& verb = pov.verbalizers[pick(spec.verbalizer_index, pov.verbalizers.size(), "verbalizer")];

  Rng rng(spec.seed);
  std::vector<AugmentedSample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      switch (spec.mode) {
        case CompileMode::supervised:
          out.push_back(spec.with_options
                            ? compile_sample(samples[i], tmpl, opts, verb, config, vocab, spec.weight)
                            : compile_sample_without_options(samples[i], tmpl, verb, config, vocab,
                                                             spec.weight));
          break;
        case CompileMode::ensemble: {
          auto many = compile_ensemble(samples[i], config, pov, vocab, spec.weight, rng, spec.with_options);
          for (auto& s : many) out.push_back(std::move(s));
          break;
        }
        case CompileMode::multiple_choice:
          out.push_back(render_multiple_choice(samples[i], config, verb, vocab));
          break;
        case CompileMode::ksmlm: break;
      }
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("sample {}: {}", i, e.what()));
    }
  }
  return out;
}

void write_compiled(const std::filesystem::path& path, std::string_view contents,
                    RunManifest& manifest, const std::string& vocab_hash) {
  write_file(path, contents);
  manifest.add_output(path);
  manifest.results()["vocab_hash"] = vocab_hash;
  manifest.write(manifest_path_for(path));
}

CompiledSet read_compiled_set(const std::filesystem::path& path) {
  CompiledSet set;
  set.samples = read_compiled(path);
  const auto mpath = manifest_path_for(path);
  if (!std::filesystem::exists(mpath)) {
    throw ValidationError(fmt::format("{}: missing manifest {} (vocabulary hash unknown)",
                                      path.string(), mpath.string()));
  }
  try {
    set.vocab_hash = json::parse(read_file(mpath)).at("results").at("vocab_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: bad manifest: {}", mpath.string(), e.what()));
  }
  return set;
}

MultitaskResult train_multitask(std::span<const std::vector<AugmentedSample>> pools,
                                std::span<const AugmentedSample> ksmlm_pool,
                                const ModelConfig& model_config, std::uint64_t init_seed,
                                const TrainConfig& train_config, double gamma, MixMode mix_mode) {
  if (pools.empty()) throw ValidationError("train-multitask: at least one source pool is required");
  std::vector<std::string> names;
  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < pools.size(); ++k) {
    if (pools[k].empty()) throw ValidationError(fmt::format("train-multitask: source {} is empty", k));
    names.push_back(pools[k].front().source_dataset);
    sizes.push_back(pools[k].size());
  }
  auto plan = SamplerPlan::make(std::move(names), std::move(sizes), gamma, mix_mode);
  auto model = TinyMlm::init(model_config, init_seed);
  auto curve = train(model, pools, ksmlm_pool, plan, train_config);
  return {std::move(model), std::move(curve), std::move(plan)};
}

FinetuneResult finetune(const TinyMlm& initial, std::span<const RawSample> dataset,
                        const TaskConfig& config, const Vocabulary& vocab, const FinetuneSpec& spec) {
  if (spec.eval_every < 1) throw ValidationError("finetune: eval_every must be >= 1");
  const auto split =
      few_shot_split(dataset, config.class_labels, FewShotSpec{config.num_classes(), spec.k_shot, spec.seed});
  const auto train_set = compile_dataset(split.train, config, vocab, spec.compile);
  const auto dev_set = compile_dataset(split.dev, config, vocab, spec.compile);

  FinetuneResult r{initial, train_set.size(), dev_set.size(), 0, 0.0, {}};
  r.best_dev_accuracy = evaluate(initial, dev_set).accuracy;

  const std::vector<std::vector<AugmentedSample>> pools{train_set};
  const auto plan = SamplerPlan::make({config.task_name}, {train_set.size()}, 1.0, MixMode::stratified);
  auto train_config = spec.train;
  train_config.seed = derive_seed(spec.seed, 1);
  auto model = initial;
  r.curve = train(model, pools, {}, plan, train_config, [&](std::size_t step, const TinyMlm& m) {
    if (step % spec.eval_every != 0 && step != train_config.steps) return;
    const double acc = evaluate(m, dev_set).accuracy;
    if (acc > r.best_dev_accuracy) {
      r.best_dev_accuracy = acc;
      r.best_step = step;
      r.model = m;
    }
  });
  return r;
}

double ReportRow::mean() const {
  if (accuracies.empty()) throw ValidationError("report row has no accuracies");
  return std::accumulate(accuracies.begin(), accuracies.end(), 0.0) /
         static_cast<double>(accuracies.size());
}

double ReportRow::stddev() const {
  const double m = mean();
  double ss = 0.0;
  for (const double a : accuracies) ss += (a - m) * (a - m);
  return std::sqrt(ss / static_cast<double>(accuracies.size()));
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.accuracies.size());
  std::string out = "task,mode,n,mean,std";
  for (std::size_t i = 1; i <= width; ++i) out += fmt::format(",acc_{}", i);
  out += "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{:.6f},{:.6f}", r.task_name, r.mode, r.accuracies.size(), r.mean(),
                       r.stddev());
    for (std::size_t i = 0; i < width; ++i) {
      out += i < r.accuracies.size() ? fmt::format(",{:.6f}", r.accuracies[i]) : std::string(",");
    }
    out += "\n";
  }
  return out;
}

std::string report_table(std::span<const ReportRow> rows) {
  std::size_t task_w = 4, mode_w = 4;
  for (const auto& r : rows) {
    task_w = std::max(task_w, r.task_name.size());
    mode_w = std::max(mode_w, r.mode.size());
  }
  std::string out = "accuracy in %, mean and population std over seeds\n";
  out += fmt::format("{:<{}}  {:<{}}  {:>6}  {:>6}  {:>3}\n", "task", task_w, "mode", mode_w, "mean",
                     "std", "n");
  for (const auto& r : rows) {
    out += fmt::format("{:<{}}  {:<{}}  {:>6.2f}  {:>6.2f}  {:>3}{}\n", r.task_name, task_w, r.mode,
                       mode_w, 100.0 * r.mean(), 100.0 * r.stddev(), r.accuracies.size(),
                       r.accuracies.size() == 1 ? "  (n=1)" : "");
  }
  return out;
}

}  // namespace upt
