#pragma once

// End-to-end orchestration shared by the command-line tool and the
// benchmark: compiling datasets, multi-task training, few-shot fine-tuning,
// evaluation, run manifests and seed-averaged reports.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "upt/data_model.hpp"
#include "upt/ksmlm.hpp"
#include "upt/okr.hpp"
#include "upt/pov_engine.hpp"
#include "upt/sampler.hpp"
#include "upt/tiny_mlm.hpp"

namespace upt {

inline constexpr std::string_view kToolVersion = "0.3.0";

// Sidecar metadata written next to every command's primary output.
class RunManifest {
 public:
  explicit RunManifest(std::string command);

  void set_config(nlohmann::ordered_json config) { config_ = std::move(config); }
  // Records the SHA-256 of an input file.
  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  void set_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
  nlohmann::ordered_json& results() { return results_; }

  nlohmann::ordered_json to_json() const;
  // Stamps the finish time and writes the JSON.
  void write(const std::filesystem::path& path);

 private:
  std::string command_;
  std::string started_at_;
  std::string finished_at_;
  nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs_ = nlohmann::ordered_json::object();
  std::map<std::string, std::uint64_t> seeds_;
  nlohmann::ordered_json results_ = nlohmann::ordered_json::object();
};

std::filesystem::path manifest_path_for(const std::filesystem::path& output);

// Keys that legitimately differ between otherwise identical runs.
nlohmann::json strip_timestamps(nlohmann::json manifest);

enum class CompileMode { supervised, ksmlm, ensemble, multiple_choice };

CompileMode parse_compile_mode(std::string_view text);
std::string_view to_string(CompileMode mode);

struct CompileSpec {
  CompileMode mode = CompileMode::supervised;
  // 0-based indices into the task config lists.
  std::size_t template_index = 0;
  std::size_t option_index = 0;
  std::size_t verbalizer_index = 0;
  bool with_options = true;
  double weight = 1.0;
  std::uint64_t seed = 0;  // ensemble draws
};

// Supervised, ensemble or multiple-choice compilation of a labelled
// dataset. Errors name the failing sample index.
std::vector<AugmentedSample> compile_dataset(std::span<const RawSample> samples,
                                             const TaskConfig& config, const Vocabulary& vocab,
                                             const CompileSpec& spec);

// Compiled samples plus the vocabulary hash they were built against.
struct CompiledSet {
  std::vector<AugmentedSample> samples;
  std::string vocab_hash;
};

// Writes `<path>` and its manifest (which carries the vocabulary hash).
void write_compiled(const std::filesystem::path& path, std::string_view contents,
                    RunManifest& manifest, const std::string& vocab_hash);
// Reads a compiled file and the vocabulary hash from its manifest.
CompiledSet read_compiled_set(const std::filesystem::path& path);

struct MultitaskResult {
  TinyMlm model;
  std::vector<LossPoint> curve;
  SamplerPlan plan;
};

// Initializes a model from `seed` and trains it on the source pools.
MultitaskResult train_multitask(std::span<const std::vector<AugmentedSample>> pools,
                                std::span<const AugmentedSample> ksmlm_pool,
                                const ModelConfig& model_config, std::uint64_t init_seed,
                                const TrainConfig& train_config, double gamma, MixMode mix_mode);

struct FinetuneSpec {
  std::size_t k_shot = 16;
  std::uint64_t seed = 0;
  CompileSpec compile;
  TrainConfig train;
  // Dev accuracy is measured before training and every `eval_every` steps.
  std::size_t eval_every = 10;
};

struct FinetuneResult {
  TinyMlm model;  // parameters at the best dev step
  std::size_t train_size = 0;
  std::size_t dev_size = 0;
  std::size_t best_step = 0;
  double best_dev_accuracy = 0.0;
  std::vector<LossPoint> curve;
};

// Few-shot split, POV compilation and training with dev-accuracy model
// selection (ties go to the earlier step).
FinetuneResult finetune(const TinyMlm& initial, std::span<const RawSample> dataset,
                        const TaskConfig& config, const Vocabulary& vocab, const FinetuneSpec& spec);

struct ReportRow {
  std::string task_name;
  std::string mode;
  std::vector<double> accuracies;  // one per seed

  double mean() const;
  // Population standard deviation (divides by n).
  double stddev() const;
};

// CSV with columns task,mode,n,mean,std,acc_1..acc_n.
std::string report_csv(std::span<const ReportRow> rows);
// Aligned table; rows with a single seed are flagged "n=1".
std::string report_table(std::span<const ReportRow> rows);

// Runs the tool with the given arguments (without the program name).
int run_cli(const std::vector<std::string>& args);

}  // namespace upt
