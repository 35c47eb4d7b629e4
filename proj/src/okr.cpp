#include "upt/okr.hpp"

#include <algorithm>
#include <cassert>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include <fmt/format.h>

#include "upt/error.hpp"

namespace upt {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::size_t nearest(std::span<const double> p, const std::vector<std::vector<double>>& centroids,
                    double* dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

// Returns whether any assignment changed; writes the SSE.
bool assign(std::span<const std::vector<double>> points,
            const std::vector<std::vector<double>>& centroids, std::vector<std::size_t>& assignment,
            double& sse) {
  bool changed = false;
  sse = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double d = 0.0;
    const auto c = nearest(points[i], centroids, &d);
    sse += d;
    if (c != assignment[i]) {
      assignment[i] = c;
      changed = true;
    }
  }
  return changed;
}

void recompute_means(std::span<const std::vector<double>> points,
                     const std::vector<std::size_t>& assignment,
                     std::vector<std::vector<double>>& centroids, std::vector<std::size_t>& sizes) {
  const auto dim = points.front().size();
  sizes.assign(centroids.size(), 0);
  for (auto& c : centroids) std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& c = centroids[assignment[i]];
    for (std::size_t d = 0; d < dim; ++d) c[d] += points[i][d];
    ++sizes[assignment[i]];
  }
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    if (sizes[c] == 0) continue;
    for (auto& v : centroids[c]) v /= static_cast<double>(sizes[c]);
  }
}

// Moves the point farthest from its centroid (within a cluster of size > 1)
// into each empty cluster.
void fill_empty_clusters(std::span<const std::vector<double>> points,
                         std::vector<std::size_t>& assignment,
                         std::vector<std::vector<double>>& centroids,
                         std::vector<std::size_t>& sizes) {
  for (std::size_t empty = 0; empty < centroids.size(); ++empty) {
    if (sizes[empty] != 0) continue;
    std::size_t far = points.size();
    double far_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (sizes[assignment[i]] < 2) continue;
      const double d = squared_distance(points[i], centroids[assignment[i]]);
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far == points.size()) throw ValidationError("kmeans: cannot fill empty cluster");
    assignment[far] = empty;
    recompute_means(points, assignment, centroids, sizes);
  }
}

}  // namespace

std::vector<TaggedSentence> parse_tagged_corpus(std::string_view contents) {
  std::vector<TaggedSentence> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    const auto line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = json::parse(line);
      TaggedSentence s;
      s.sentence_id = j.at("sentence_id").get<std::int64_t>();
      for (const auto& t : j.at("tokens")) {
        TaggedToken tok{t.at("t").get<std::string>(), t.at("p").get<std::string>()};
        if (tok.surface.empty()) throw ValidationError("empty token surface");
        s.tokens.push_back(std::move(tok));
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ValidationError(fmt::format("line {}: {}", line_no, e.what()));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  return out;
}

std::vector<TaggedSentence> read_tagged_corpus(const std::filesystem::path& path) {
  try {
    return parse_tagged_corpus(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string serialize_tagged_corpus(std::span<const TaggedSentence> corpus) {
  std::string out;
  for (const auto& s : corpus) {
    ordered_json toks = ordered_json::array();
    for (const auto& t : s.tokens) toks.push_back(ordered_json{{"t", t.surface}, {"p", t.pos}});
    out += ordered_json{{"sentence_id", s.sentence_id}, {"tokens", toks}}.dump() + "\n";
  }
  return out;
}

bool is_adjective_tag(std::string_view pos) {
  return pos == "ADJ" || pos == "JJ" || pos == "JJR" || pos == "JJS";
}

std::vector<WordCount> extract_candidates(std::span<const TaggedSentence> corpus, int min_freq) {
  if (min_freq < 1) throw ValidationError("extract_candidates: min_freq must be >= 1");
  std::map<std::string, std::int64_t> counts;
  for (const auto& s : corpus) {
    for (const auto& t : s.tokens) {
      if (is_adjective_tag(t.pos)) ++counts[lower(t.surface)];
    }
  }
  std::vector<WordCount> out;
  for (const auto& [w, n] : counts) {
    if (n >= min_freq) out.push_back({w, n});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const WordCount& a, const WordCount& b) { return a.count > b.count; });
  return out;
}

void EmbeddingTable::add(std::string word, std::vector<double> vec) {
  if (words_.empty() && dim_ == 0) dim_ = vec.size();
  if (vec.size() != dim_ || dim_ == 0) {
    throw ValidationError(fmt::format("embedding for '{}' has dimension {}, expected {}", word,
                                      vec.size(), dim_));
  }
  for (const double v : vec) {
    if (!std::isfinite(v)) throw ValidationError(fmt::format("embedding for '{}' is not finite", word));
  }
  if (const auto it = index_.find(word); it != index_.end()) {
    vectors_[it->second] = std::move(vec);
    return;
  }
  index_.emplace(word, words_.size());
  words_.push_back(std::move(word));
  vectors_.push_back(std::move(vec));
}

const std::vector<double>* EmbeddingTable::find(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? nullptr : &vectors_[it->second];
}

EmbeddingTable EmbeddingTable::parse(std::string_view contents) {
  EmbeddingTable table;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    auto line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(' ') == std::string_view::npos) continue;

    std::vector<std::string_view> fields;
    std::size_t p = 0;
    while (p < line.size()) {
      const auto q = line.find(' ', p);
      const auto field = line.substr(p, q == std::string_view::npos ? line.npos : q - p);
      if (!field.empty()) fields.push_back(field);
      if (q == std::string_view::npos) break;
      p = q + 1;
    }
    if (fields.size() < 2) {
      throw ValidationError(fmt::format("embeddings line {}: expected a word and a vector", line_no));
    }
    std::vector<double> vec;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      double v = 0.0;
      const auto* first = fields[i].data();
      const auto* last = first + fields[i].size();
      const auto [ptr, ec] = std::from_chars(first, last, v);
      if (ec != std::errc{} || ptr != last) {
        throw ValidationError(
            fmt::format("embeddings line {}: bad number '{}'", line_no, fields[i]));
      }
      vec.push_back(v);
    }
    try {
      table.add(std::string(fields[0]), std::move(vec));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("embeddings line {}: {}", line_no, e.what()));
    }
  }
  return table;
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  try {
    return parse(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string EmbeddingTable::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < words_.size(); ++i) {
    out += words_[i];
    for (const double v : vectors_[i]) out += fmt::format(" {}", v);
    out += '\n';
  }
  return out;
}

void EmbeddingTable::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

OkrRepository::OkrRepository(std::vector<OkrEntry> entries,
                             std::vector<std::vector<double>> centroids, bool normalized,
                             std::uint64_t build_seed)
    : entries_(std::move(entries)),
      centroids_(std::move(centroids)),
      normalized_(normalized),
      build_seed_(build_seed) {
  if (centroids_.empty()) throw ValidationError("okr: repository needs at least one centroid");
  dim_ = centroids_.front().size();
  members_.resize(centroids_.size());
  for (const auto& c : centroids_) {
    if (c.size() != dim_) throw ValidationError("okr: centroid dimension mismatch");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.vector.size() != dim_) {
      throw ValidationError(fmt::format("okr: entry '{}' has wrong dimension", e.word));
    }
    if (e.cluster >= centroids_.size()) {
      throw ValidationError(fmt::format("okr: entry '{}' has cluster {} >= k", e.word, e.cluster));
    }
    if (!index_.emplace(e.word, i).second) {
      throw ValidationError(fmt::format("okr: duplicate entry '{}'", e.word));
    }
    members_[e.cluster].push_back(i);
  }
}

const OkrEntry* OkrRepository::find(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

ordered_json OkrRepository::to_json() const {
  ordered_json entries = ordered_json::array();
  for (const auto& e : entries_) {
    entries.push_back(ordered_json{{"word", e.word}, {"vector", e.vector}, {"cluster", e.cluster}});
  }
  return ordered_json{{"k", k()},
                      {"dim", dim_},
                      {"normalized", normalized_},
                      {"build_seed", build_seed_},
                      {"centroids", centroids_},
                      {"entries", entries}};
}

OkrRepository OkrRepository::from_json(const json& j) {
  try {
    std::vector<OkrEntry> entries;
    for (const auto& e : j.at("entries")) {
      entries.push_back({e.at("word").get<std::string>(), e.at("vector").get<std::vector<double>>(),
                         e.at("cluster").get<std::size_t>()});
    }
    auto centroids = j.at("centroids").get<std::vector<std::vector<double>>>();
    if (centroids.size() != j.at("k").get<std::size_t>()) {
      throw ValidationError("okr: 'k' disagrees with the centroid count");
    }
    OkrRepository repo(std::move(entries), std::move(centroids), j.at("normalized").get<bool>(),
                       j.at("build_seed").get<std::uint64_t>());
    if (repo.dim() != j.at("dim").get<std::size_t>()) {
      throw ValidationError("okr: 'dim' disagrees with the centroid dimension");
    }
    return repo;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("okr: {}", e.what()));
  }
}

std::string OkrRepository::serialize() const { return to_json().dump() + "\n"; }

void OkrRepository::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

OkrRepository OkrRepository::load(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

KMeansResult kmeans(std::span<const std::vector<double>> points, const KMeansOptions& options) {
  const auto n = points.size();
  const auto k = options.k;
  if (k < 1) throw ValidationError("kmeans: k must be >= 1");
  if (k > n) throw ValidationError(fmt::format("kmeans: k = {} exceeds the {} usable points", k, n));
  if (!(options.tol > 0.0)) throw ValidationError("kmeans: tol must be > 0");
  {
    std::set<std::vector<double>> distinct(points.begin(), points.end());
    if (distinct.size() < k) {
      throw ValidationError(fmt::format(
          "degenerate clustering input: {} distinct points for k = {}", distinct.size(), k));
    }
  }

  Rng rng(options.seed);
  KMeansResult r;

  // k-means++ seeding.
  r.centroids.push_back(points[rng.uniform_index(n)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], r.centroids[0]);
  while (r.centroids.size() < k) {
    double total = 0.0;
    for (const double d : d2) total += d;
    const double target = rng.uniform01() * total;
    std::size_t pick = n;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      acc += d2[i];
      pick = i;
      if (acc > target) break;
    }
    r.centroids.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], r.centroids.back()));
    }
  }

  r.assignment.assign(n, k);
  double sse = 0.0;
  assign(points, r.centroids, r.assignment, sse);
  r.sse_history.push_back(sse);

  std::vector<std::size_t> sizes;
  std::vector<std::vector<double>> previous;
  for (int iter = 0; iter < options.max_iters; ++iter) {
    previous = r.centroids;
    recompute_means(points, r.assignment, r.centroids, sizes);
    fill_empty_clusters(points, r.assignment, r.centroids, sizes);
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      shift = std::max(shift, std::sqrt(squared_distance(r.centroids[c], previous[c])));
    }
    const bool changed = assign(points, r.centroids, r.assignment, sse);
    assert(sse <= r.sse_history.back() + 1e-9 * std::max(1.0, r.sse_history.back()));
    r.sse_history.push_back(sse);
    r.iterations = iter + 1;
    if (!changed || shift < options.tol) {
      r.converged = true;
      break;
    }
  }
  // Centroids are always the means of the final assignment.
  recompute_means(points, r.assignment, r.centroids, sizes);
  fill_empty_clusters(points, r.assignment, r.centroids, sizes);
  return r;
}

OkrRepository build_okr(std::span<const std::string> words, const EmbeddingTable& embeddings,
                        const OkrBuildOptions& options, OkrBuildReport* report) {
  if (options.k < 2) throw ValidationError("build_okr: k must be >= 2");
  OkrBuildReport local;
  auto& rep = report ? *report : local;
  rep = OkrBuildReport{};

  std::vector<std::string> kept;
  std::vector<std::vector<double>> points;
  std::set<std::string> seen;
  for (const auto& w : words) {
    if (!seen.insert(w).second) continue;
    const auto* vec = embeddings.find(w);
    if (!vec) {
      ++rep.dropped_no_embedding;
      continue;
    }
    auto v = *vec;
    if (options.normalize) {
      double norm = 0.0;
      for (const double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) {
        ++rep.dropped_zero_vector;
        continue;
      }
      for (auto& x : v) x /= norm;
    }
    kept.push_back(w);
    points.push_back(std::move(v));
  }
  if (options.k > points.size()) {
    throw ValidationError(fmt::format("build_okr: k = {} exceeds the {} words with embeddings",
                                      options.k, points.size()));
  }

  rep.kmeans = kmeans(points, {options.k, options.seed, options.max_iters, options.tol});
  std::vector<OkrEntry> entries;
  entries.reserve(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    entries.push_back({kept[i], points[i], rep.kmeans.assignment[i]});
  }
  return OkrRepository(std::move(entries), rep.kmeans.centroids, options.normalize, options.seed);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::size_t query_dissimilar(const OkrRepository& repo, std::span<const double> vec) {
  std::size_t best = 0;
  double best_sim = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < repo.k(); ++c) {
    const double sim = cosine_similarity(vec, repo.centroids()[c]);
    if (sim < best_sim) {
      best_sim = sim;
      best = c;
    }
  }
  return best;
}

std::size_t query_dissimilar(const OkrRepository& repo, std::string_view word) {
  const auto* e = repo.find(word);
  if (!e) throw ValidationError(fmt::format("okr: unknown word '{}'", word));
  return query_dissimilar(repo, e->vector);
}

std::string sample_alternative(const OkrRepository& repo, std::string_view word, Rng& rng) {
  const auto cluster = query_dissimilar(repo, word);
  std::vector<std::size_t> pool;
  for (const auto i : repo.members(cluster)) {
    if (repo.entries()[i].word != word) pool.push_back(i);
  }
  if (pool.empty()) {
    throw ValidationError(fmt::format("okr: no alternative available for '{}'", word));
  }
  return repo.entries()[pool[rng.uniform_index(pool.size())]].word;
}

}  // namespace upt
