#pragma once

// Self-generated benchmark: three binary source families and one target
// family over a shared polarity lexicon, run end to end for every training
// mode and summarized as seed-averaged rows.
//
// Generator: every sentence talks about 2-3 domain nouns, each with a
// distinct adjective drawn from the lexicon half matching the class. The
// source families use their own label words; the target's label words
// (dull / brilliant) only ever occur as content adjectives in source text,
// so transfer has to go through shared adjective semantics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "upt/pipeline.hpp"

namespace upt {

struct SyntheticSuite {
  std::vector<TaskConfig> source_configs;
  std::vector<std::vector<RawSample>> source_data;
  TaskConfig target_config;
  std::vector<RawSample> target_pool;  // few-shot splits are drawn from here
  std::vector<RawSample> target_test;
  std::vector<TaggedSentence> corpus;  // tagged source sentences
  EmbeddingTable embeddings;           // polarity axis plus noise
  Vocabulary vocab;
};

struct SyntheticSizes {
  std::vector<std::size_t> sources = {600, 400, 300};
  std::size_t target_pool = 200;
  std::size_t target_test = 200;
};

SyntheticSuite generate_synthetic_suite(std::uint64_t seed, const SyntheticSizes& sizes = {});

// Writes configs, datasets, corpus, embeddings and vocabulary under `dir`.
void save_synthetic_suite(const SyntheticSuite& suite, const std::filesystem::path& dir);

// Tokens of the fixed KSMLM prompt and option expression.
std::vector<std::string> ksmlm_literal_tokens();

struct BenchmarkOptions {
  std::size_t seeds = 5;
  std::uint64_t seed = 0;  // data generation and model init
  SyntheticSizes sizes;
  ModelConfig model{.vocab_size = 0, .dim = 32, .layers = 2, .heads = 2, .max_len = 64};
  std::size_t multitask_steps = 800;
  std::size_t multitask_batch = 16;
  double multitask_lr = 1e-3;
  double lambda = 0.1;
  double gamma = 0.001;
  std::size_t okr_clusters = 2;
  std::size_t finetune_steps = 300;
  std::size_t finetune_batch = 8;
  double finetune_lr = 1e-3;
  std::size_t k_shot = 16;
  std::size_t eval_every = 10;
  std::optional<std::filesystem::path> out_dir;
};

struct BenchmarkReport {
  std::vector<ReportRow> rows;  // UPT, UPT-Single, w/o POV, w/o KSMLM, w/o OKR, random, zero-shot
  double chance = 0.5;
  double seconds = 0.0;

  const ReportRow& row(std::string_view mode) const;
};

BenchmarkReport run_synthetic_benchmark(const BenchmarkOptions& options, std::ostream* log = nullptr);

}  // namespace upt
