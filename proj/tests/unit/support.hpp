#pragma once

#include <vector>

#include "upt/pov_engine.hpp"
#include "upt/rng.hpp"

namespace upt::testing {

// Random well-formed sample over ids [5, vocab_size) with the mask at a
// random position. Ids 0..4 are the specials.
inline AugmentedSample random_sample(Rng& rng, std::size_t vocab_size, std::size_t length,
                                     std::size_t n_candidates = 2, double weight = 1.0) {
  AugmentedSample s;
  const auto draw = [&] { return static_cast<TokenId>(5 + rng.uniform_index(vocab_size - 5)); };
  s.token_ids.resize(length);
  for (auto& id : s.token_ids) id = draw();
  s.mask_index = rng.uniform_index(length);
  s.token_ids[s.mask_index] = 4;
  while (s.candidate_word_ids.size() < n_candidates) {
    const auto c = draw();
    if (std::find(s.candidate_word_ids.begin(), s.candidate_word_ids.end(), c) ==
        s.candidate_word_ids.end()) {
      s.candidate_word_ids.push_back(c);
    }
  }
  s.gold_label_index = rng.uniform_index(n_candidates);
  s.target_word_id = s.candidate_word_ids[s.gold_label_index];
  s.source_dataset = "synthetic";
  s.weight = weight;
  return s;
}

inline std::vector<AugmentedSample> random_batch(Rng& rng, std::size_t n, std::size_t vocab_size,
                                                 std::size_t min_len, std::size_t max_len,
                                                 double weight = 1.0) {
  std::vector<AugmentedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto len = min_len + rng.uniform_index(max_len - min_len + 1);
    out.push_back(random_sample(rng, vocab_size, len, 2, weight));
  }
  return out;
}

}  // namespace upt::testing
