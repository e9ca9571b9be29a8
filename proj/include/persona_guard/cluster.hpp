#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "persona_guard/corpus.hpp"
#include "persona_guard/io.hpp"
#include "persona_guard/rng.hpp"
#include "persona_guard/tokenizer.hpp"

namespace persona_guard {

using Matrix = std::vector<std::vector<double>>;

/// Any deterministic sentence -> vector function.
using SentenceEmbedder = std::function<std::vector<double>(const std::string&)>;

struct ClusterMap {
  int k = 0;
  /// cluster id of each point (persona id when clustering a catalog).
  std::vector<int> assignment;
  Matrix centroids;
  double inertia = 0.0;
  /// Inertia after every Lloyd iteration.
  std::vector<double> inertia_trace;
  int iterations = 0;

  int cluster_of(int persona_id) const {
    require(persona_id >= 0 && persona_id < static_cast<int>(assignment.size()), ErrorCode::validation,
            "persona " + std::to_string(persona_id) + " is not covered by the cluster map");
    return assignment[static_cast<std::size_t>(persona_id)];
  }
};

/// L2-normalized hashed bag of words.
inline SentenceEmbedder hashed_bow_embedder(int dim = 256) {
  require(dim > 0, ErrorCode::config, "embedding width must be positive");
  return [dim](const std::string& text) {
    std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
    for (const auto& tok : tokenize(text)) v[fnv1a(tok) % static_cast<std::uint64_t>(dim)] += 1.0;
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm > 0.0)
      for (auto& x : v) x /= std::sqrt(norm);
    return v;
  };
}

inline Matrix persona_embeddings(const PersonaCatalog& catalog, const SentenceEmbedder& embed) {
  Matrix rows;
  rows.reserve(catalog.entries.size());
  for (const auto& text : catalog.entries) rows.push_back(embed(text));
  for (const auto& r : rows)
    require(r.size() == rows.front().size(), ErrorCode::dimension, "embedder returned rows of different widths");
  return rows;
}

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Index of the nearest centroid; ties go to the smaller index.
inline int nearest(const std::vector<double>& x, const Matrix& centroids, double* dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(x, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist != nullptr) *dist = best_d;
  return best;
}

inline double inertia_of(const Matrix& points, const std::vector<int>& assignment, const Matrix& centroids) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    s += sq_dist(points[i], centroids[static_cast<std::size_t>(assignment[i])]);
  return s;
}

inline Matrix kmeanspp_init(const Matrix& points, int k, Rng& rng) {
  Matrix centroids;
  centroids.push_back(points[rng.below(points.size())]);
  std::vector<double> d2(points.size());
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      nearest(points[i], centroids, &d2[i]);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      // Fewer distinct points than k: take the first point not yet chosen.
      pick = centroids.size() % points.size();
    } else {
      pick = rng.categorical(std::span<const double>(d2));
    }
    centroids.push_back(points[pick]);
  }
  return centroids;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its centroid.
inline ClusterMap kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 100) {
  require(k >= 1, ErrorCode::validation, "k must be positive");
  require(k <= static_cast<int>(points.size()), ErrorCode::validation,
          "k=" + std::to_string(k) + " exceeds the number of points (" + std::to_string(points.size()) + ")");
  const std::size_t dim = points.front().size();
  for (const auto& p : points) require(p.size() == dim, ErrorCode::dimension, "points differ in dimension");
  Rng rng(seed);
  ClusterMap map;
  map.k = k;
  map.centroids = detail::kmeanspp_init(points, k, rng);
  map.assignment.assign(points.size(), -1);

  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const int c = detail::nearest(points[i], map.centroids);
      if (c != map.assignment[i]) {
        map.assignment[i] = c;
        changed = true;
      }
    }
    // Re-seed empty clusters from the farthest points.
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (int c : map.assignment) ++counts[static_cast<std::size_t>(c)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (counts[static_cast<std::size_t>(map.assignment[i])] <= 1) continue;
        const double d = detail::sq_dist(points[i], map.centroids[static_cast<std::size_t>(map.assignment[i])]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --counts[static_cast<std::size_t>(map.assignment[far])];
      map.assignment[far] = c;
      ++counts[static_cast<std::size_t>(c)];
      changed = true;
    }
    Matrix next(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t j = 0; j < dim; ++j) next[static_cast<std::size_t>(map.assignment[i])][j] += points[i][j];
    for (int c = 0; c < k; ++c)
      for (auto& v : next[static_cast<std::size_t>(c)]) v /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
    map.centroids = std::move(next);
    map.inertia = detail::inertia_of(points, map.assignment, map.centroids);
    map.inertia_trace.push_back(map.inertia);
    map.iterations = iter + 1;
    if (!changed && iter > 0) break;
  }
  return map;
}

/// Replaces persona ids with cluster ids and the catalog with one entry per
/// cluster. Unlabeled turns stay unlabeled.
inline AlignedCorpus relabel_corpus(const AlignedCorpus& corpus, const ClusterMap& map) {
  AlignedCorpus out = corpus;
  for (auto& conv : out.conversations)
    for (auto& t : conv.turns)
      if (t.labeled()) t.persona_id = map.cluster_of(t.persona_id);
  std::vector<std::vector<std::string>> members(static_cast<std::size_t>(map.k));
  for (std::size_t p = 0; p < map.assignment.size(); ++p) {
    const auto c = static_cast<std::size_t>(map.assignment[p]);
    if (p < corpus.catalog.entries.size()) members[c].push_back(corpus.catalog.entries[p]);
  }
  out.catalog.entries.clear();
  for (int c = 0; c < map.k; ++c) {
    std::string desc = "cluster " + std::to_string(c);
    const auto& m = members[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < m.size(); ++i) desc += (i == 0 ? ": " : " | ") + m[i];
    out.catalog.entries.push_back(desc);
  }
  return out;
}

inline std::string cluster_map_jsonl(const ClusterMap& map) {
  std::vector<json> rows;
  for (std::size_t p = 0; p < map.assignment.size(); ++p)
    rows.push_back({{"persona_id", p}, {"cluster_id", map.assignment[p]}});
  return to_jsonl(rows);
}

/// Reads the persona -> cluster JSONL. Centroids are not stored there.
inline ClusterMap cluster_map_from_jsonl(const std::string& text) {
  std::map<int, int> pairs;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorCode::parse, "cluster map line " + std::to_string(lineno) + ": " + e.what());
    }
    const int p = j.at("persona_id").get<int>();
    require(!pairs.contains(p), ErrorCode::validation, "persona " + std::to_string(p) + " mapped twice");
    pairs[p] = j.at("cluster_id").get<int>();
  }
  require(!pairs.empty(), ErrorCode::empty_corpus, "cluster map is empty");
  ClusterMap map;
  std::set<int> clusters;
  for (const auto& [p, c] : pairs) {
    require(p == static_cast<int>(map.assignment.size()), ErrorCode::validation, "cluster map persona ids are not contiguous");
    map.assignment.push_back(c);
    clusters.insert(c);
  }
  map.k = static_cast<int>(clusters.size());
  require(*clusters.begin() == 0 && *clusters.rbegin() == map.k - 1, ErrorCode::validation,
          "cluster ids are not contiguous from 0");
  return map;
}

}  // namespace persona_guard
