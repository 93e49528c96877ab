#pragma once

// Anchor coordinate system: per-factor groups of anchor vectors derived once
// from teacher embeddings, either by k-means or as per-label centroids.
//
// Anchor file layout (little-endian), followed by a u64 FNV-1a checksum of
// every preceding byte:
//
//   4       magic "ECRA"
//   u32     version (= 1)
//   u64     d
//   u8      derivation mode (0 = label, 1 = kmeans, 2 = mixed)
//   u64     seed
//   u32     factor count F
//   F times:
//     u8      factor code ('T', 'L', 'E', 'I' or 'P')
//     u64     anchor count k
//     u8      1 if label names follow, else 0
//     [k x (u32 length + UTF-8 name)]
//     k*d     f64 anchor values, row-major

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ecr/corpus.hpp"
#include "ecr/error.hpp"
#include "ecr/io.hpp"
#include "ecr/vector_ops.hpp"

namespace ecr {

/// Semantic factors in canonical prefix order: task, language, emotion,
/// intent, and tone/strategy.
enum class Factor : std::uint8_t { T = 0, L = 1, E = 2, I = 3, P = 4 };

inline constexpr std::array<Factor, 5> kCanonicalFactors{Factor::T, Factor::L, Factor::E,
                                                         Factor::I, Factor::P};

inline char factor_code(Factor f) { return "TLEIP"[static_cast<int>(f)]; }

inline std::optional<Factor> parse_factor(char c) {
  switch (c) {
    case 'T': return Factor::T;
    case 'L': return Factor::L;
    case 'E': return Factor::E;
    case 'I': return Factor::I;
    case 'P': return Factor::P;
    default: return std::nullopt;
  }
}

/// Corpus schema field carrying labels for a factor; empty for P.
inline std::string_view factor_field(Factor f) {
  switch (f) {
    case Factor::T: return "task";
    case Factor::L: return "language";
    case Factor::E: return "emotion";
    case Factor::I: return "intent";
    case Factor::P: return "";
  }
  return "";
}

/// Parses "T,L,E" (commas optional, "" or "none" for the empty selection) into
/// canonical order without duplicates.
inline std::vector<Factor> parse_factor_list(std::string_view text) {
  std::array<bool, 5> chosen{};
  if (text != "none") {
    for (char c : text) {
      if (c == ',' || c == '+' || c == ' ') continue;
      auto f = parse_factor(c);
      if (!f) {
        throw ValidationError("anchors", std::string("unknown factor code '") + c + "'");
      }
      chosen[static_cast<int>(*f)] = true;
    }
  }
  std::vector<Factor> out;
  for (auto f : kCanonicalFactors) {
    if (chosen[static_cast<int>(f)]) out.push_back(f);
  }
  return out;
}

inline std::string factor_list_string(std::span<const Factor> factors) {
  std::string out;
  for (auto f : factors) {
    if (!out.empty()) out += '+';
    out += factor_code(f);
  }
  return out.empty() ? "none" : out;
}

enum class AnchorMode : std::uint8_t { Label = 0, KMeans = 1, Mixed = 2 };

inline std::string_view anchor_mode_name(AnchorMode m) {
  switch (m) {
    case AnchorMode::Label: return "label";
    case AnchorMode::KMeans: return "kmeans";
    case AnchorMode::Mixed: return "mixed";
  }
  return "?";
}

struct FactorGroup {
  Factor factor = Factor::T;
  std::vector<std::string> label_names;  // empty, or one per anchor
  std::size_t count = 0;
  std::vector<double> anchors;  // count x d, row-major

  bool operator==(const FactorGroup&) const = default;
};

struct Provenance {
  AnchorMode mode = AnchorMode::Label;
  std::uint64_t seed = 0;

  bool operator==(const Provenance&) const = default;
};

class AnchorSet;
inline std::string serialize_anchors(const AnchorSet& set);

/// Immutable set of anchors grouped by factor. Construction validates the
/// invariants and caches unit-norm copies used by projection.
class AnchorSet {
 public:
  AnchorSet(std::size_t d, std::vector<FactorGroup> groups, Provenance provenance = {})
      : d_(d), groups_(std::move(groups)), provenance_(provenance) {
    if (d_ == 0) throw DimensionError("anchors", "anchor dimension must be positive");
    if (groups_.empty()) throw ValidationError("anchors", "an anchor set needs at least one factor");
    std::stable_sort(groups_.begin(), groups_.end(),
                     [](const FactorGroup& a, const FactorGroup& b) { return a.factor < b.factor; });
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto& grp = groups_[g];
      if (g > 0 && groups_[g - 1].factor == grp.factor) {
        throw ValidationError("anchors", std::string("duplicate factor ") + factor_code(grp.factor));
      }
      if (grp.count == 0) {
        throw ValidationError("anchors", std::string("factor ") + factor_code(grp.factor) +
                                             " has no anchors");
      }
      if (grp.anchors.size() != grp.count * d_) {
        throw DimensionError("anchors", std::string("factor ") + factor_code(grp.factor) +
                                            " anchor storage does not match count x d");
      }
      if (!grp.label_names.empty() && grp.label_names.size() != grp.count) {
        throw ValidationError("anchors", std::string("factor ") + factor_code(grp.factor) +
                                             " label names do not match anchor count");
      }
      offsets_.push_back(total_);
      total_ += grp.count;
    }
    unit_.resize(total_ * d_);
    owner_.resize(total_);
    for (std::size_t g = 0, k = 0; g < groups_.size(); ++g) {
      for (std::size_t a = 0; a < groups_[g].count; ++a, ++k) {
        std::span<const double> row(groups_[g].anchors.data() + a * d_, d_);
        for (double v : row) {
          if (!std::isfinite(v)) throw ValidationError("anchors", "non-finite anchor value");
        }
        double n = l2_norm(row);
        if (!(n > 0.0)) {
          throw ValidationError("anchors", "anchor " + std::to_string(k) + " has zero norm");
        }
        for (std::size_t j = 0; j < d_; ++j) unit_[k * d_ + j] = row[j] / n;
        owner_[k] = g;
      }
    }
    checksum_ = io::fnv1a(serialize_anchors(*this));
  }

  std::size_t dim() const { return d_; }
  /// Total anchor count K.
  std::size_t size() const { return total_; }
  const std::vector<FactorGroup>& groups() const { return groups_; }
  const Provenance& provenance() const { return provenance_; }

  std::size_t group_offset(std::size_t g) const { return offsets_[g]; }
  std::size_t group_of(std::size_t k) const { return owner_[k]; }
  std::size_t local_index(std::size_t k) const { return k - offsets_[owner_[k]]; }
  Factor factor_of(std::size_t k) const { return groups_[owner_[k]].factor; }

  std::span<const double> anchor(std::size_t k) const {
    const auto& grp = groups_[owner_[k]];
    return {grp.anchors.data() + local_index(k) * d_, d_};
  }
  std::span<const double> unit_anchor(std::size_t k) const { return {unit_.data() + k * d_, d_}; }

  std::optional<std::size_t> find_group(Factor f) const {
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (groups_[g].factor == f) return g;
    }
    return std::nullopt;
  }

  std::vector<Factor> factors() const {
    std::vector<Factor> out;
    for (const auto& g : groups_) out.push_back(g.factor);
    return out;
  }

  /// Copy restricted to `factors` (must all be present).
  AnchorSet select(std::span<const Factor> factors) const {
    if (factors.empty()) throw ValidationError("anchors", "empty factor selection");
    std::vector<FactorGroup> out;
    for (auto f : factors) {
      auto g = find_group(f);
      if (!g) {
        throw ValidationError("anchors", std::string("factor ") + factor_code(f) +
                                             " is not in the anchor set");
      }
      out.push_back(groups_[*g]);
    }
    return AnchorSet(d_, std::move(out), provenance_);
  }

  /// FNV-1a over the serialized form; identifies the set in affinity vectors.
  std::uint64_t checksum() const { return checksum_; }

  bool operator==(const AnchorSet& o) const {
    return d_ == o.d_ && groups_ == o.groups_ && provenance_ == o.provenance_;
  }

 private:
  std::size_t d_;
  std::vector<FactorGroup> groups_;
  Provenance provenance_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> owner_;
  std::size_t total_ = 0;
  std::vector<double> unit_;
  std::uint64_t checksum_ = 0;
};

// ---------------------------------------------------------------------------
// k-means

struct KMeansParams {
  std::size_t k = 8;
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
  double tol = 1e-9;
};

struct KMeansResult {
  std::size_t k = 0;
  std::size_t d = 0;
  std::vector<double> centroids;  // k x d
  std::vector<std::size_t> assignment;
  /// Within-cluster sum of squares after each iteration's centroid update.
  std::vector<double> objective;
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t empty_repairs = 0;
};

namespace detail {

inline double wcss(const EmbeddingMatrix& x, const std::vector<double>& centroids,
                   const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.n; ++i) {
    total += squared_distance(x.row(i), std::span<const double>(centroids.data() + assignment[i] * x.d, x.d));
  }
  return total;
}

/// Distance-weighted seeding: first centre uniform, then each next centre
/// drawn with probability proportional to squared distance to the nearest
/// chosen centre.
inline std::vector<double> seed_centroids(const EmbeddingMatrix& x, std::size_t k,
                                          std::mt19937_64& rng) {
  std::vector<double> centroids(k * x.d);
  std::vector<bool> taken(x.n, false);
  auto copy_row = [&](std::size_t c, std::size_t i) {
    auto r = x.row(i);
    std::copy(r.begin(), r.end(), centroids.begin() + static_cast<std::ptrdiff_t>(c * x.d));
    taken[i] = true;
  };
  std::uniform_int_distribution<std::size_t> pick(0, x.n - 1);
  copy_row(0, pick(rng));
  std::vector<double> nearest(x.n, std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 1; c < k; ++c) {
    std::span<const double> last(centroids.data() + (c - 1) * x.d, x.d);
    double total = 0.0;
    for (std::size_t i = 0; i < x.n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(x.row(i), last));
      total += nearest[i];
    }
    std::size_t chosen = x.n;
    if (total > 0.0) {
      double target = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < x.n; ++i) {
        if (nearest[i] <= 0.0) continue;
        acc += nearest[i];
        chosen = i;
        if (acc >= target) break;
      }
    }
    if (chosen == x.n) {
      // All remaining mass is zero (duplicate rows): take the first unused row.
      for (std::size_t i = 0; i < x.n; ++i) {
        if (!taken[i]) {
          chosen = i;
          break;
        }
      }
    }
    copy_row(c, chosen);
  }
  return centroids;
}

}  // namespace detail

/// Lloyd's algorithm with distance-weighted seeding. Euclidean distance on the
/// raw (unnormalized) rows. An empty cluster takes over the point farthest from
/// its centroid among clusters with at least two members, so K never shrinks
/// and the objective stays non-increasing.
inline KMeansResult kmeans(const EmbeddingMatrix& x, const KMeansParams& params) {
  if (params.k == 0) throw ValidationError("anchors", "k-means needs K >= 1");
  if (params.k > x.n) {
    throw ValidationError("anchors", "k-means K=" + std::to_string(params.k) + " exceeds " +
                                         std::to_string(x.n) + " rows");
  }
  if (x.d == 0) throw DimensionError("anchors", "k-means on zero-dimensional data");

  const std::size_t n = x.n, d = x.d, k = params.k;
  std::mt19937_64 rng(params.seed);
  KMeansResult res;
  res.k = k;
  res.d = d;
  res.centroids = detail::seed_centroids(x, k, rng);
  res.assignment.assign(n, 0);

  std::vector<double> dist(n);
  std::vector<std::size_t> sizes(k);
  std::vector<double> sums(k * d);
  std::vector<std::size_t> previous;
  for (std::size_t iter = 0; iter < params.max_iter; ++iter) {
    previous = res.assignment;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double dd = squared_distance(x.row(i), std::span<const double>(res.centroids.data() + c * d, d));
        if (dd < best) {
          best = dd;
          arg = c;
        }
      }
      res.assignment[i] = arg;
      dist[i] = best;
    }

    std::fill(sizes.begin(), sizes.end(), 0);
    for (auto a : res.assignment) ++sizes[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (sizes[res.assignment[i]] < 2) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      --sizes[res.assignment[far]];
      res.assignment[far] = c;
      dist[far] = 0.0;
      sizes[c] = 1;
      ++res.empty_repairs;
    }

    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = x.row(i);
      double* s = sums.data() + res.assignment[i] * d;
      for (std::size_t j = 0; j < d; ++j) s[j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < d; ++j) {
        res.centroids[c * d + j] = sums[c * d + j] / static_cast<double>(sizes[c]);
      }
    }

    double obj = detail::wcss(x, res.centroids, res.assignment);
    res.objective.push_back(obj);
    res.iterations = iter + 1;
    bool stable = res.assignment == previous && iter > 0;
    if (stable || (res.objective.size() >= 2 &&
                   res.objective[res.objective.size() - 2] - obj < params.tol)) {
      res.converged = true;
      break;
    }
  }
  return res;
}

inline FactorGroup kmeans_group(Factor factor, const EmbeddingMatrix& x, const KMeansParams& params) {
  auto res = kmeans(x, params);
  FactorGroup g;
  g.factor = factor;
  g.count = res.k;
  g.anchors = std::move(res.centroids);
  return g;
}

/// One anchor per distinct label, equal to the mean of that label's rows.
/// Anchor order follows `order` when given (every entry must have rows),
/// otherwise labels sorted lexicographically.
inline FactorGroup label_centroids(Factor factor, const EmbeddingMatrix& x,
                                   std::span<const std::string> labels,
                                   std::span<const std::string> order = {}) {
  if (labels.size() != x.n) {
    throw DimensionError("anchors", "label count " + std::to_string(labels.size()) +
                                        " does not match row count " + std::to_string(x.n));
  }
  std::vector<std::string> names(order.begin(), order.end());
  if (names.empty()) {
    names.assign(labels.begin(), labels.end());
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
  }
  if (names.empty()) throw ValidationError("anchors", "no labels to average");
  std::unordered_map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < names.size(); ++i) slot.emplace(names[i], i);

  FactorGroup g;
  g.factor = factor;
  g.count = names.size();
  g.anchors.assign(g.count * x.d, 0.0);
  std::vector<std::size_t> counts(g.count, 0);
  for (std::size_t i = 0; i < x.n; ++i) {
    auto it = slot.find(labels[i]);
    if (it == slot.end()) {
      throw ValidationError("anchors", "label '" + labels[i] + "' is not in the label order");
    }
    auto r = x.row(i);
    for (std::size_t j = 0; j < x.d; ++j) g.anchors[it->second * x.d + j] += r[j];
    ++counts[it->second];
  }
  for (std::size_t c = 0; c < g.count; ++c) {
    if (counts[c] == 0) {
      throw ValidationError("anchors", "empty label class '" + names[c] + "'");
    }
    for (std::size_t j = 0; j < x.d; ++j) g.anchors[c * x.d + j] /= static_cast<double>(counts[c]);
  }
  g.label_names = std::move(names);
  return g;
}

enum class DeriveMode { Auto, Label, KMeans };

struct AnchorBuildParams {
  DeriveMode mode = DeriveMode::Auto;
  std::size_t k = 8;  // kmeans mode, per factor
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
  double tol = 1e-9;
};

/// Builds one group per selected factor in canonical order. Embedding rows are
/// matched to corpus records by id == dialog_id. Auto mode uses label
/// centroids where the corpus has labels for the factor and k-means otherwise.
inline AnchorSet build_anchor_set(const EmbeddingMatrix& x, const Corpus& corpus,
                                  std::span<const Factor> selection, const AnchorBuildParams& params) {
  std::vector<Factor> factors(selection.begin(), selection.end());
  std::sort(factors.begin(), factors.end());
  factors.erase(std::unique(factors.begin(), factors.end()), factors.end());
  if (factors.empty()) throw ValidationError("anchors", "empty factor selection");

  std::vector<const CorpusRecord*> rows;
  bool need_labels = false;
  for (auto f : factors) {
    bool has = !factor_field(f).empty();
    if (params.mode == DeriveMode::Label && !has) {
      throw ValidationError("anchors", std::string("factor ") + factor_code(f) +
                                           " has no labels in the corpus; use kmeans mode");
    }
    need_labels = need_labels || (has && params.mode != DeriveMode::KMeans);
  }
  if (need_labels) {
    std::unordered_map<std::string, const CorpusRecord*> by_id;
    for (const auto& r : corpus.records) by_id.emplace(r.dialog_id, &r);
    rows.reserve(x.n);
    for (std::size_t i = 0; i < x.n; ++i) {
      auto it = by_id.find(x.ids[i]);
      if (it == by_id.end()) {
        throw ValidationError("anchors", "embedding id '" + x.ids[i] + "' has no corpus record");
      }
      rows.push_back(it->second);
    }
  }

  std::vector<FactorGroup> groups;
  bool used_label = false, used_kmeans = false;
  for (std::size_t fi = 0; fi < factors.size(); ++fi) {
    auto f = factors[fi];
    auto field = factor_field(f);
    bool label_mode = params.mode == DeriveMode::Label ||
                      (params.mode == DeriveMode::Auto && !field.empty());
    if (label_mode) {
      std::vector<std::string> labels;
      labels.reserve(rows.size());
      for (auto* r : rows) labels.push_back(label_of(*r, field));
      const auto& inventory = corpus.labels.field(field);
      groups.push_back(label_centroids(f, x, labels, inventory));
      used_label = true;
    } else {
      KMeansParams kp{params.k, params.seed + fi, params.max_iter, params.tol};
      groups.push_back(kmeans_group(f, x, kp));
      used_kmeans = true;
    }
  }
  Provenance prov;
  prov.mode = used_label && used_kmeans ? AnchorMode::Mixed
              : used_kmeans             ? AnchorMode::KMeans
                                        : AnchorMode::Label;
  prov.seed = params.seed;
  return AnchorSet(x.d, std::move(groups), prov);
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::string_view kAnchorMagic = "ECRA";
inline constexpr std::uint32_t kAnchorVersion = 1;

inline std::string serialize_anchors(const AnchorSet& set) {
  io::ByteWriter w;
  w.put_bytes(kAnchorMagic);
  w.put(kAnchorVersion);
  w.put(static_cast<std::uint64_t>(set.dim()));
  w.put(static_cast<std::uint8_t>(set.provenance().mode));
  w.put(set.provenance().seed);
  w.put(static_cast<std::uint32_t>(set.groups().size()));
  for (const auto& g : set.groups()) {
    w.put(static_cast<std::uint8_t>(factor_code(g.factor)));
    w.put(static_cast<std::uint64_t>(g.count));
    w.put(static_cast<std::uint8_t>(g.label_names.empty() ? 0 : 1));
    for (const auto& name : g.label_names) w.put_string(name);
    for (double v : g.anchors) w.put(v);
  }
  return io::seal(w.take());
}

/// Loads an anchor file. When `expected_dim` is set, a different stored
/// dimension raises DimensionError.
inline AnchorSet parse_anchors(std::string_view bytes, std::optional<std::size_t> expected_dim = {}) {
  if (bytes.size() >= 4 && bytes.substr(0, 4) != kAnchorMagic) {
    throw FormatError("anchors", "not an anchor file (bad magic)");
  }
  io::ByteReader r(io::unseal(bytes, "anchors"), "anchors");
  r.get_bytes(4);
  if (auto v = r.get<std::uint32_t>(); v != kAnchorVersion) {
    throw FormatError("anchors", "unsupported anchor file version " + std::to_string(v));
  }
  auto d = r.get<std::uint64_t>();
  if (expected_dim && *expected_dim != d) {
    throw DimensionError("anchors", "anchor file has d=" + std::to_string(d) + ", expected " +
                                        std::to_string(*expected_dim));
  }
  Provenance prov;
  auto mode = r.get<std::uint8_t>();
  if (mode > 2) throw FormatError("anchors", "unknown derivation mode");
  prov.mode = static_cast<AnchorMode>(mode);
  prov.seed = r.get<std::uint64_t>();
  auto nf = r.get<std::uint32_t>();
  std::vector<FactorGroup> groups;
  for (std::uint32_t i = 0; i < nf; ++i) {
    FactorGroup g;
    auto code = static_cast<char>(r.get<std::uint8_t>());
    auto f = parse_factor(code);
    if (!f) throw FormatError("anchors", std::string("unknown factor code '") + code + "'");
    g.factor = *f;
    g.count = r.get<std::uint64_t>();
    if (g.count * d * 8 > r.remaining()) throw FormatError("anchors", "anchor count exceeds file size");
    if (r.get<std::uint8_t>()) {
      for (std::size_t a = 0; a < g.count; ++a) g.label_names.push_back(r.get_string());
    }
    g.anchors.resize(g.count * d);
    for (auto& v : g.anchors) v = r.get<double>();
    groups.push_back(std::move(g));
  }
  if (r.remaining() != 0) throw FormatError("anchors", "trailing bytes in anchor file");
  return AnchorSet(d, std::move(groups), prov);
}

inline AnchorSet load_anchors(const std::filesystem::path& path,
                              std::optional<std::size_t> expected_dim = {}) {
  return parse_anchors(io::read_file(path, "anchors"), expected_dim);
}

inline void save_anchors(const AnchorSet& set, const std::filesystem::path& path) {
  io::atomic_write(path, serialize_anchors(set), "anchors");
}

}  // namespace ecr
