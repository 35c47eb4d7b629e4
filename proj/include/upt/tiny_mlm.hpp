#pragma once

// A small transformer-encoder masked language model with a hand-written
// backward pass, prompt losses, Adam training, evaluation and gradient
// checking. All arithmetic is double precision.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "upt/data_model.hpp"
#include "upt/okr.hpp"
#include "upt/pov_engine.hpp"
#include "upt/sampler.hpp"

namespace upt {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_len = 128;
  bool tie_output = true;
  // Feed-forward hidden width; 0 means 4 * dim.
  std::size_t ffn_dim = 0;

  std::size_t hidden() const { return ffn_dim ? ffn_dim : 4 * dim; }
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && dim == o.dim && layers == o.layers && heads == o.heads &&
           max_len == o.max_len && tie_output == o.tie_output && hidden() == o.hidden();
  }
};

// A named parameter matrix inside the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct LayerParams {
  std::size_t ln1_g, ln1_b;
  // No key bias: it shifts every score of a query row equally, which the
  // softmax ignores, so its gradient is identically zero.
  std::size_t wq, bq, wk, wv, bv, wo, bo;
  std::size_t ln2_g, ln2_b;
  std::size_t w1, b1, w2, b2;
};

// Offsets of every parameter block. Linear weights are stored input-major
// (in x out), so y = x W + b.
struct ParamLayout {
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<LayerParams> layers;
  std::size_t lnf_g = 0, lnf_b = 0;
  std::size_t out_w = 0;  // == tok_emb when tied
  std::size_t out_b = 0;
  std::size_t total = 0;
  std::vector<ParamBlock> blocks;

  static ParamLayout make(const ModelConfig& config);
};

class TinyMlm {
 public:
  TinyMlm(ModelConfig config, std::vector<double> params);

  // Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
  static TinyMlm init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }
  std::size_t num_params() const { return params_.size(); }

  // SHA-256 over the parameter bytes.
  std::string digest() const;

  bool operator==(const TinyMlm& other) const {
    return config_ == other.config_ && params_ == other.params_;
  }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
};

struct PredictionDistribution {
  std::vector<double> scores;  // MLM-head output at the mask position
  std::vector<double> probs;   // softmax(scores)
};

PredictionDistribution forward(const TinyMlm& model, const AugmentedSample& sample);

// Numerically stable softmax (max subtracted).
std::vector<double> softmax(std::span<const double> scores);

// Mean over the batch of -log probs[target] (times the sample weight when
// `weighted`).
double loss_supervised(const TinyMlm& model, std::span<const AugmentedSample> batch, bool weighted);
double loss_ksmlm(const TinyMlm& model, std::span<const AugmentedSample> batch);

struct LossReport {
  double supervised = 0.0;
  double ksmlm = 0.0;
  double total = 0.0;
};

// total = supervised + lambda * ksmlm. An empty KSMLM batch contributes 0.
LossReport total_loss(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                      std::span<const AugmentedSample> ksmlm, double lambda, bool weighted);

// Same value as total_loss; writes d total / d params into `grad`
// (overwritten, size num_params()).
LossReport total_loss_and_grad(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                               std::span<const AugmentedSample> ksmlm, double lambda,
                               bool weighted, std::span<double> grad);

struct GradCheckOptions {
  double epsilon = 1e-5;
  // nullopt checks every parameter; otherwise a seeded subset of this size
  // spread over all parameter blocks. Every block gets at least one entry,
  // so a subset smaller than the block count is exceeded.
  std::optional<std::size_t> subset;
  std::uint64_t seed = 0;
  double lambda = 0.1;
  bool weighted = true;
  // Test hook: multiply the analytic gradient of one parameter.
  std::optional<std::pair<std::size_t, double>> fault;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_block;
  std::size_t checked = 0;
};

GradCheckResult grad_check(const TinyMlm& model, std::span<const AugmentedSample> supervised,
                           std::span<const AugmentedSample> ksmlm, const GradCheckOptions& options);

class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

struct TrainConfig {
  double lambda = 0.1;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip;
  KsmlmMix ksmlm_mix = KsmlmMix::loss_multiplier;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

struct LossPoint {
  std::size_t step = 0;
  double supervised = 0.0;
  double ksmlm = 0.0;
  double total = 0.0;
};

// Called after every optimizer step with the 1-based step index.
using StepCallback = std::function<void(std::size_t step, const TinyMlm& model)>;

// Adam on total_loss over batches from draw_batch. Throws RuntimeError on a
// non-finite loss, naming the step.
std::vector<LossPoint> train(TinyMlm& model, std::span<const std::vector<AugmentedSample>> pools,
                             std::span<const AugmentedSample> ksmlm_pool, const SamplerPlan& plan,
                             const TrainConfig& config, const StepCallback& on_step = {});

std::string loss_curve_csv(std::span<const LossPoint> curve);

struct ClassCount {
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<ClassCount> per_class;  // indexed by gold_label_index
};

EvalResult evaluate(const TinyMlm& model, std::span<const AugmentedSample> eval_set);

// Token-embedding rows of every non-special vocabulary word.
EmbeddingTable export_embeddings(const TinyMlm& model, const Vocabulary& vocab);

struct Checkpoint {
  TinyMlm model;
  std::string vocab_hash;
};

std::string serialize_checkpoint(const TinyMlm& model, const std::string& vocab_hash);
void save_checkpoint(const TinyMlm& model, const std::string& vocab_hash,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Caps the worker threads used for batch gradients (>= 1). Results do not
// depend on the thread count.
void set_thread_count(std::size_t n);
std::size_t thread_count();

}  // namespace upt
