#pragma once

// Options Knowledge Repository: adjective mining, K-Means clustering of
// word vectors, and the dissimilar-cluster alternative-word query.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "upt/data_model.hpp"
#include "upt/rng.hpp"

namespace upt {

// Tagged-corpus JSON-lines: {"sentence_id": int, "tokens": [{"t": .., "p": ..}]}.
std::vector<TaggedSentence> parse_tagged_corpus(std::string_view contents);
std::vector<TaggedSentence> read_tagged_corpus(const std::filesystem::path& path);
std::string serialize_tagged_corpus(std::span<const TaggedSentence> corpus);

// Universal "ADJ" plus the Penn JJ/JJR/JJS tags.
bool is_adjective_tag(std::string_view pos);

struct WordCount {
  std::string word;
  std::int64_t count = 0;
  bool operator==(const WordCount&) const = default;
};

// Lowercased adjective surfaces with count >= min_freq, by descending count
// then lexicographically.
std::vector<WordCount> extract_candidates(std::span<const TaggedSentence> corpus, int min_freq);

// Word -> vector table; text format "word f1 f2 ... fd" per line.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  // Replaces an existing vector for the same word.
  void add(std::string word, std::vector<double> vec);
  const std::vector<double>* find(std::string_view word) const;

  static EmbeddingTable parse(std::string_view contents);
  static EmbeddingTable load(const std::filesystem::path& path);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> words_;
  std::vector<std::vector<double>> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct OkrEntry {
  std::string word;
  std::vector<double> vector;
  std::size_t cluster = 0;
  bool operator==(const OkrEntry&) const = default;
};

class OkrRepository {
 public:
  OkrRepository() = default;
  OkrRepository(std::vector<OkrEntry> entries, std::vector<std::vector<double>> centroids,
                bool normalized, std::uint64_t build_seed);

  std::size_t k() const { return centroids_.size(); }
  std::size_t dim() const { return dim_; }
  bool normalized() const { return normalized_; }
  std::uint64_t build_seed() const { return build_seed_; }
  const std::vector<OkrEntry>& entries() const { return entries_; }
  const std::vector<std::vector<double>>& centroids() const { return centroids_; }

  const OkrEntry* find(std::string_view word) const;
  bool contains(std::string_view word) const { return find(word) != nullptr; }
  // Entry indices of a cluster, in entry order.
  const std::vector<std::size_t>& members(std::size_t cluster) const { return members_.at(cluster); }

  nlohmann::ordered_json to_json() const;
  static OkrRepository from_json(const nlohmann::json& j);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static OkrRepository load(const std::filesystem::path& path);

  bool operator==(const OkrRepository& other) const {
    return entries_ == other.entries_ && centroids_ == other.centroids_ &&
           normalized_ == other.normalized_ && build_seed_ == other.build_seed_;
  }

 private:
  std::vector<OkrEntry> entries_;
  std::vector<std::vector<double>> centroids_;
  std::size_t dim_ = 0;
  bool normalized_ = false;
  std::uint64_t build_seed_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> members_;
};

struct KMeansOptions {
  std::size_t k = 64;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-9;
};

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignment;
  // Within-cluster SSE after every assignment step.
  std::vector<double> sse_history;
  int iterations = 0;
  bool converged = false;
};

// Lloyd's algorithm with k-means++ seeding and Euclidean distance. Empty
// clusters are re-seeded with the point farthest from its centroid.
KMeansResult kmeans(std::span<const std::vector<double>> points, const KMeansOptions& options);

struct OkrBuildOptions {
  std::size_t k = 64;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-9;
  bool normalize = true;
};

struct OkrBuildReport {
  std::size_t dropped_no_embedding = 0;
  std::size_t dropped_zero_vector = 0;
  KMeansResult kmeans;
};

OkrRepository build_okr(std::span<const std::string> words, const EmbeddingTable& embeddings,
                        const OkrBuildOptions& options, OkrBuildReport* report = nullptr);

// Cosine similarity; 0 when either vector is zero.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Cluster whose centroid has the lowest cosine similarity to the vector;
// ties go to the lowest cluster index.
std::size_t query_dissimilar(const OkrRepository& repo, std::span<const double> vec);
std::size_t query_dissimilar(const OkrRepository& repo, std::string_view word);

// Uniform member of the word's dissimilar cluster, excluding the word.
std::string sample_alternative(const OkrRepository& repo, std::string_view word, Rng& rng);

}  // namespace upt
