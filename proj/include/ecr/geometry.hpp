#pragma once

// Representation-quality metrics over an embedding set.
//
// Definitions (all Euclidean, centroids are per-manifold means):
//   intra   mean over manifolds of the mean member -> centroid distance
//   inter   mean pairwise distance between manifold centroids
//   ratio   intra / inter
//   spread  mean over manifolds of the mean squared member -> centroid distance
//
// Purity assigns every row to its nearest language prototype (ties go to the
// lexicographically first label). Consistency rates compare selections of
// anchor or manifold ids as exact matches and as mean Jaccard overlap.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ecr/corpus.hpp"
#include "ecr/error.hpp"
#include "ecr/pca.hpp"
#include "ecr/vector_ops.hpp"

namespace ecr {

/// Assignment of every row to one manifold label.
struct ManifoldPartition {
  std::vector<std::string> inventory;   // sorted unique labels
  std::vector<std::size_t> assignment;  // row -> index into inventory
  std::string source = "labels";        // "labels" or "anchors"

  static ManifoldPartition from_labels(std::span<const std::string> labels, std::string source = "labels") {
    ManifoldPartition p;
    p.source = std::move(source);
    p.inventory.assign(labels.begin(), labels.end());
    std::sort(p.inventory.begin(), p.inventory.end());
    p.inventory.erase(std::unique(p.inventory.begin(), p.inventory.end()), p.inventory.end());
    std::unordered_map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < p.inventory.size(); ++i) slot.emplace(p.inventory[i], i);
    p.assignment.reserve(labels.size());
    for (const auto& l : labels) p.assignment.push_back(slot.at(l));
    return p;
  }

  std::size_t manifolds() const { return inventory.size(); }
};

struct ManifoldStats {
  std::string label;
  std::size_t count = 0;
  double mean_distance = 0.0;
  double variance = 0.0;
};

struct GeometryReport {
  double intra = 0.0;
  double inter = 0.0;
  double ratio = 0.0;
  double spread = 0.0;
  std::string partition_source;
  std::vector<ManifoldStats> per_manifold;
};

namespace detail {

inline void check_partition(const EmbeddingMatrix& e, const ManifoldPartition& p) {
  if (p.assignment.size() != e.n) {
    throw DimensionError("geometry", "partition covers " + std::to_string(p.assignment.size()) +
                                         " rows, embeddings have " + std::to_string(e.n));
  }
  for (auto a : p.assignment) {
    if (a >= p.inventory.size()) throw ValidationError("geometry", "partition label out of range");
  }
}

/// Per-manifold centroids (m x d) and member counts.
inline std::vector<double> centroids(const EmbeddingMatrix& e, const ManifoldPartition& p,
                                     std::vector<std::size_t>& counts) {
  check_partition(e, p);
  const auto m = p.manifolds();
  std::vector<double> c(m * e.d, 0.0);
  counts.assign(m, 0);
  for (std::size_t i = 0; i < e.n; ++i) {
    auto row = e.row(i);
    double* dst = c.data() + p.assignment[i] * e.d;
    for (std::size_t j = 0; j < e.d; ++j) dst[j] += row[j];
    ++counts[p.assignment[i]];
  }
  for (std::size_t k = 0; k < m; ++k) {
    if (counts[k] == 0) throw ValidationError("geometry", "empty manifold '" + p.inventory[k] + "'");
    for (std::size_t j = 0; j < e.d; ++j) c[k * e.d + j] /= static_cast<double>(counts[k]);
  }
  return c;
}

inline std::vector<ManifoldStats> manifold_stats(const EmbeddingMatrix& e, const ManifoldPartition& p) {
  std::vector<std::size_t> counts;
  auto c = centroids(e, p, counts);
  std::vector<ManifoldStats> out(p.manifolds());
  for (std::size_t k = 0; k < p.manifolds(); ++k) {
    out[k].label = p.inventory[k];
    out[k].count = counts[k];
  }
  for (std::size_t i = 0; i < e.n; ++i) {
    auto k = p.assignment[i];
    double sq = squared_distance(e.row(i), std::span<const double>(c.data() + k * e.d, e.d));
    out[k].mean_distance += std::sqrt(sq);
    out[k].variance += sq;
  }
  for (auto& s : out) {
    s.mean_distance /= static_cast<double>(s.count);
    s.variance /= static_cast<double>(s.count);
  }
  return out;
}

}  // namespace detail

inline double intra_compactness(const EmbeddingMatrix& e, const ManifoldPartition& p) {
  auto stats = detail::manifold_stats(e, p);
  if (stats.empty()) throw ValidationError("geometry", "no manifolds");
  double acc = 0.0;
  for (const auto& s : stats) acc += s.mean_distance;
  return acc / static_cast<double>(stats.size());
}

inline double inter_separation(const EmbeddingMatrix& e, const ManifoldPartition& p) {
  std::vector<std::size_t> counts;
  auto c = detail::centroids(e, p, counts);
  const auto m = p.manifolds();
  if (m < 2) throw ValidationError("geometry", "inter-manifold separation needs at least 2 manifolds");
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      acc += euclidean_distance(std::span<const double>(c.data() + a * e.d, e.d),
                                std::span<const double>(c.data() + b * e.d, e.d));
      ++pairs;
    }
  }
  return acc / static_cast<double>(pairs);
}

inline double geometry_ratio(double intra, double inter) {
  if (!(inter > 0.0)) throw DomainError("geometry", "ratio undefined for inter-manifold separation <= 0");
  return intra / inter;
}

inline double spread(const EmbeddingMatrix& e, const ManifoldPartition& p) {
  auto stats = detail::manifold_stats(e, p);
  if (stats.empty()) throw ValidationError("geometry", "no manifolds");
  double acc = 0.0;
  for (const auto& s : stats) acc += s.variance;
  return acc / static_cast<double>(stats.size());
}

/// Full report. inter and ratio are 0 when there is a single manifold.
inline GeometryReport geometry_report(const EmbeddingMatrix& e, const ManifoldPartition& p) {
  GeometryReport r;
  r.partition_source = p.source;
  r.per_manifold = detail::manifold_stats(e, p);
  for (const auto& s : r.per_manifold) {
    r.intra += s.mean_distance;
    r.spread += s.variance;
  }
  r.intra /= static_cast<double>(r.per_manifold.size());
  r.spread /= static_cast<double>(r.per_manifold.size());
  if (p.manifolds() >= 2) {
    r.inter = inter_separation(e, p);
    r.ratio = r.inter > 0.0 ? geometry_ratio(r.intra, r.inter) : 0.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Language purity

struct Prototypes {
  std::vector<std::string> labels;  // sorted
  std::size_t d = 0;
  std::vector<double> centers;  // labels.size() x d

  std::span<const double> center(std::size_t i) const { return {centers.data() + i * d, d}; }
};

inline Prototypes language_prototypes(const EmbeddingMatrix& e, std::span<const std::string> labels) {
  if (labels.size() != e.n) throw DimensionError("geometry", "one language label per row required");
  auto part = ManifoldPartition::from_labels(labels);
  if (part.manifolds() == 0) throw ValidationError("geometry", "no languages");
  std::vector<std::size_t> counts;
  Prototypes out;
  out.centers = detail::centroids(e, part, counts);
  out.labels = part.inventory;
  out.d = e.d;
  return out;
}

struct PurityReport {
  std::vector<std::pair<std::string, double>> per_language;  // sorted by label
  double overall = 0.0;
  std::vector<std::string> assigned;  // nearest prototype per row
};

/// Nearest-prototype assignment for one vector; ties go to the first label in
/// sorted order.
template <std::floating_point T>
std::size_t nearest_prototype(const Prototypes& protos, std::span<const T> v) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < protos.labels.size(); ++i) {
    double dd = squared_distance(v, protos.center(i));
    if (dd < best_d) {
      best_d = dd;
      best = i;
    }
  }
  return best;
}

inline PurityReport purity(const EmbeddingMatrix& e, std::span<const std::string> labels) {
  auto protos = language_prototypes(e, labels);
  if (protos.labels.size() < 2) throw ValidationError("geometry", "purity needs at least 2 languages");
  PurityReport r;
  std::vector<std::size_t> hits(protos.labels.size(), 0), totals(protos.labels.size(), 0);
  std::size_t all_hits = 0;
  r.assigned.reserve(e.n);
  for (std::size_t i = 0; i < e.n; ++i) {
    auto a = nearest_prototype(protos, e.row(i));
    r.assigned.push_back(protos.labels[a]);
    auto truth = static_cast<std::size_t>(
        std::lower_bound(protos.labels.begin(), protos.labels.end(), labels[i]) - protos.labels.begin());
    ++totals[truth];
    if (a == truth) {
      ++hits[truth];
      ++all_hits;
    }
  }
  for (std::size_t l = 0; l < protos.labels.size(); ++l) {
    r.per_language.emplace_back(protos.labels[l], static_cast<double>(hits[l]) / static_cast<double>(totals[l]));
  }
  r.overall = static_cast<double>(all_hits) / static_cast<double>(e.n);
  return r;
}

// ---------------------------------------------------------------------------
// Teacher similarity

struct TeacherSimilarity {
  std::vector<std::pair<std::string, double>> per_language;  // sorted by label
  double overall = 0.0;
  std::size_t pairs = 0;
  std::optional<std::size_t> shared_dim;  // set when a PCA map was applied
};

/// Mean cosine between teacher and student rows paired by id, grouped by the
/// language of each id. When dimensions differ, `shared_dim` must be given:
/// each side is reduced by its own PCA to that dimension before comparing.
inline TeacherSimilarity teacher_similarity(const EmbeddingMatrix& teacher, const EmbeddingMatrix& student,
                                            const std::unordered_map<std::string, std::string>& language_of,
                                            std::optional<std::size_t> shared_dim = std::nullopt) {
  const EmbeddingMatrix* t = &teacher;
  const EmbeddingMatrix* s = &student;
  EmbeddingMatrix tr, sr;
  TeacherSimilarity out;
  if (teacher.d != student.d || shared_dim) {
    if (!shared_dim) {
      throw DimensionError("geometry", "teacher d=" + std::to_string(teacher.d) + " and student d=" +
                                           std::to_string(student.d) + " differ and no shared dimension is configured");
    }
    tr = pca_transform(fit_pca(teacher, *shared_dim), teacher);
    sr = pca_transform(fit_pca(student, *shared_dim), student);
    t = &tr;
    s = &sr;
    out.shared_dim = shared_dim;
  }
  auto student_rows = s->id_index();
  std::map<std::string, std::pair<double, std::size_t>> acc;
  double total = 0.0;
  for (std::size_t i = 0; i < t->n; ++i) {
    auto it = student_rows.find(t->ids[i]);
    if (it == student_rows.end()) throw ValidationError("geometry", "teacher id '" + t->ids[i] + "' has no student row");
    auto lang = language_of.find(t->ids[i]);
    if (lang == language_of.end()) throw ValidationError("geometry", "no language for id '" + t->ids[i] + "'");
    double c = cosine(t->row(i), s->row(it->second));
    acc[lang->second].first += c;
    ++acc[lang->second].second;
    total += c;
  }
  if (t->n != s->n) throw ValidationError("geometry", "teacher and student id sets differ");
  for (const auto& [lang, v] : acc) out.per_language.emplace_back(lang, v.first / static_cast<double>(v.second));
  out.pairs = t->n;
  out.overall = t->n ? total / static_cast<double>(t->n) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Selection consistency

struct Selection {
  std::string id;
  std::vector<std::size_t> ranked;  // best first
};

struct ConsistencyRate {
  double exact = 0.0;    // top-1 (retrieval) or full-subset (cross-lingual) agreement
  double jaccard = 0.0;  // mean Jaccard overlap
  std::size_t samples = 0;
};

inline double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (auto x : sa) inter += sb.count(x);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

/// Agreement between teacher and student manifold selections for the same ids.
inline ConsistencyRate retrieval_consistency(std::span<const Selection> teacher, std::span<const Selection> student) {
  if (teacher.size() != student.size()) throw ValidationError("geometry", "selection sets have different sizes");
  if (teacher.empty()) throw ValidationError("geometry", "no selections to compare");
  std::unordered_map<std::string, const Selection*> by_id;
  for (const auto& s : student) by_id.emplace(s.id, &s);
  ConsistencyRate r;
  for (const auto& t : teacher) {
    auto it = by_id.find(t.id);
    if (it == by_id.end()) throw ValidationError("geometry", "id '" + t.id + "' missing from student selections");
    const auto& s = *it->second;
    if (t.ranked.empty() || s.ranked.empty()) throw ValidationError("geometry", "empty selection for id '" + t.id + "'");
    r.exact += t.ranked.front() == s.ranked.front() ? 1.0 : 0.0;
    r.jaccard += jaccard(t.ranked, s.ranked);
  }
  r.samples = teacher.size();
  r.exact /= static_cast<double>(r.samples);
  r.jaccard /= static_cast<double>(r.samples);
  return r;
}

struct TripletSelection {
  std::string id;
  std::array<std::vector<std::size_t>, 3> subsets;  // En, Zh, Hi
};

/// Rate at which the three language variants of a record select the same
/// manifold subset; mean pairwise Jaccard as the partial-overlap statistic.
inline ConsistencyRate crosslingual_consistency(std::span<const TripletSelection> triplets) {
  if (triplets.empty()) throw ValidationError("geometry", "no triplets to compare");
  ConsistencyRate r;
  for (const auto& t : triplets) {
    for (const auto& s : t.subsets) {
      if (s.empty()) throw ValidationError("geometry", "incomplete triplet for id '" + t.id + "'");
    }
    std::array<std::set<std::size_t>, 3> sets;
    for (int l = 0; l < 3; ++l) sets[l] = std::set<std::size_t>(t.subsets[l].begin(), t.subsets[l].end());
    r.exact += (sets[0] == sets[1] && sets[1] == sets[2]) ? 1.0 : 0.0;
    r.jaccard += (jaccard(t.subsets[0], t.subsets[1]) + jaccard(t.subsets[0], t.subsets[2]) +
                  jaccard(t.subsets[1], t.subsets[2])) / 3.0;
  }
  r.samples = triplets.size();
  r.exact /= static_cast<double>(r.samples);
  r.jaccard /= static_cast<double>(r.samples);
  return r;
}

// ---------------------------------------------------------------------------
// Text reports: one "key: value" per line, values printed with %.9g.

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string to_text(const GeometryReport& r) {
  std::ostringstream out;
  out << "partition: " << r.partition_source << "\n";
  out << "manifolds: " << r.per_manifold.size() << "\n";
  out << "intra: " << format_value(r.intra) << "\n";
  out << "inter: " << format_value(r.inter) << "\n";
  out << "ratio: " << format_value(r.ratio) << "\n";
  out << "spread: " << format_value(r.spread) << "\n";
  for (const auto& m : r.per_manifold) {
    out << "manifold." << m.label << ": count=" << m.count << " mean_distance=" << format_value(m.mean_distance)
        << " variance=" << format_value(m.variance) << "\n";
  }
  return out.str();
}

inline std::string to_text(const PurityReport& r) {
  std::ostringstream out;
  for (const auto& [lang, p] : r.per_language) out << "purity." << lang << ": " << format_value(p) << "\n";
  out << "purity.overall: " << format_value(r.overall) << "\n";
  return out.str();
}

}  // namespace ecr
