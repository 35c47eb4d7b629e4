#include "upt/sampler.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "upt/error.hpp"

namespace upt {

std::vector<double> dataset_weights(std::span<const std::size_t> sizes, double gamma) {
  if (!(gamma > 0.0)) throw ValidationError("dataset_weights: gamma must be > 0");
  if (sizes.empty()) throw ValidationError("dataset_weights: no datasets");
  std::vector<double> logs;
  logs.reserve(sizes.size());
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (sizes[k] == 0) throw ValidationError(fmt::format("dataset_weights: dataset {} is empty", k));
    logs.push_back(std::log(static_cast<double>(sizes[k])));
  }
  const double denom = static_cast<double>(sizes.size()) * gamma +
                       std::accumulate(logs.begin(), logs.end(), 0.0);
  std::vector<double> w;
  w.reserve(sizes.size());
  for (const double l : logs) w.push_back((l + gamma) / denom);
  return w;
}

SamplerPlan SamplerPlan::make(std::vector<std::string> names, std::vector<std::size_t> sizes,
                              double gamma, MixMode mode) {
  if (names.size() != sizes.size()) throw ValidationError("sampler plan: names/sizes mismatch");
  SamplerPlan p;
  p.weights = dataset_weights(sizes, gamma);
  p.dataset_names = std::move(names);
  p.sizes = std::move(sizes);
  p.gamma = gamma;
  p.mode = mode;
  return p;
}

Batch draw_batch(std::span<const std::vector<AugmentedSample>> pools,
                 std::span<const AugmentedSample> ksmlm_pool, const SamplerPlan& plan,
                 const BatchPolicy& policy, Rng& rng) {
  if (policy.batch_size < 1) throw ValidationError("draw_batch: batch_size must be >= 1");
  if (pools.size() != plan.weights.size()) {
    throw ValidationError("draw_batch: pool count does not match the plan");
  }
  for (std::size_t k = 0; k < pools.size(); ++k) {
    if (pools[k].empty() && plan.weights[k] > 0.0) {
      throw ValidationError(
          fmt::format("draw_batch: pool '{}' is empty but has positive weight",
                      k < plan.dataset_names.size() ? plan.dataset_names[k] : std::to_string(k)));
    }
  }

  Batch b;
  b.supervised.reserve(policy.batch_size);
  if (plan.mode == MixMode::stratified) {
    for (std::size_t slot = 0; slot < policy.batch_size; ++slot) {
      const double u = rng.uniform01();
      std::size_t k = 0;
      double acc = plan.weights[0];
      while (u >= acc && k + 1 < plan.weights.size()) acc += plan.weights[++k];
      auto s = pools[k][rng.uniform_index(pools[k].size())];
      s.weight = 1.0;
      b.supervised.push_back(std::move(s));
    }
  } else {
    std::size_t total = 0;
    for (const auto& p : pools) total += p.size();
    for (std::size_t slot = 0; slot < policy.batch_size; ++slot) {
      auto idx = rng.uniform_index(total);
      std::size_t k = 0;
      while (idx >= pools[k].size()) idx -= pools[k++].size();
      auto s = pools[k][idx];
      s.weight = plan.weights[k];
      b.supervised.push_back(std::move(s));
    }
  }

  if (!ksmlm_pool.empty()) {
    const std::size_t n =
        policy.ksmlm_mix == KsmlmMix::loss_multiplier
            ? policy.batch_size
            : static_cast<std::size_t>(std::llround(policy.lambda * static_cast<double>(policy.batch_size)));
    b.ksmlm.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      b.ksmlm.push_back(ksmlm_pool[rng.uniform_index(ksmlm_pool.size())]);
    }
  }
  return b;
}

FewShotSplit few_shot_split(std::span<const RawSample> dataset,
                            std::span<const std::string> class_labels, const FewShotSpec& spec) {
  if (spec.k_shot < 1) throw ValidationError("few_shot_split: K must be >= 1");
  if (spec.n_way < 2 || spec.n_way != class_labels.size()) {
    throw ValidationError(fmt::format("few_shot_split: N = {} does not match the {} class labels",
                                      spec.n_way, class_labels.size()));
  }
  Rng rng(spec.seed);
  FewShotSplit split;
  for (const auto& label : class_labels) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (dataset[i].label == label) idx.push_back(i);
    }
    if (idx.size() < 2 * spec.k_shot) {
      throw ValidationError(fmt::format(
          "few_shot_split: class '{}' has {} samples, needs at least 2K = {}", label, idx.size(),
          2 * spec.k_shot));
    }
    // Partial Fisher-Yates: the first 2K positions become a uniform draw.
    for (std::size_t i = 0; i < 2 * spec.k_shot; ++i) {
      const auto j = i + rng.uniform_index(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < spec.k_shot; ++i) split.train.push_back(dataset[idx[i]]);
    for (std::size_t i = spec.k_shot; i < 2 * spec.k_shot; ++i) split.dev.push_back(dataset[idx[i]]);
  }
  return split;
}

}  // namespace upt
