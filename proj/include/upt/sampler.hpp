#pragma once

// Dataset mixing weights, multi-task batch drawing and N-way-K-shot splits.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "upt/data_model.hpp"
#include "upt/pov_engine.hpp"
#include "upt/rng.hpp"

namespace upt {

// w_k = (ln|D_k| + gamma) / (M * gamma + sum_k' ln|D_k'|)
std::vector<double> dataset_weights(std::span<const std::size_t> sizes, double gamma);

enum class MixMode {
  stratified,     // weights realized by which dataset a slot is drawn from
  loss_weighted,  // uniform draw over the union; weights carried into the loss
};

enum class KsmlmMix {
  loss_multiplier,  // equal-size KSMLM sub-batch, lambda scales its loss
  sub_batch_share,  // KSMLM sub-batch of round(lambda * batch_size), unscaled loss
};

struct SamplerPlan {
  std::vector<std::string> dataset_names;
  std::vector<std::size_t> sizes;
  double gamma = 0.001;
  std::vector<double> weights;
  MixMode mode = MixMode::stratified;

  static SamplerPlan make(std::vector<std::string> names, std::vector<std::size_t> sizes,
                          double gamma, MixMode mode);
};

struct Batch {
  std::vector<AugmentedSample> supervised;
  std::vector<AugmentedSample> ksmlm;
};

struct BatchPolicy {
  std::size_t batch_size = 16;
  KsmlmMix ksmlm_mix = KsmlmMix::loss_multiplier;
  double lambda = 0.1;
};

// `pools` aligns with plan.dataset_names. `ksmlm_pool` may be empty, in
// which case the KSMLM sub-batch is empty.
Batch draw_batch(std::span<const std::vector<AugmentedSample>> pools,
                 std::span<const AugmentedSample> ksmlm_pool, const SamplerPlan& plan,
                 const BatchPolicy& policy, Rng& rng);

struct FewShotSpec {
  std::size_t n_way = 2;
  std::size_t k_shot = 16;
  std::uint64_t seed = 0;
};

struct FewShotSplit {
  std::vector<RawSample> train;
  std::vector<RawSample> dev;
};

// Per class (in class_labels order): 2K draws without replacement, first K
// to train, next K to dev.
FewShotSplit few_shot_split(std::span<const RawSample> dataset,
                            std::span<const std::string> class_labels, const FewShotSpec& spec);

}  // namespace upt
