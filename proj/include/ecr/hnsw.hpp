#pragma once

// Hierarchical navigable small-world graph over unit-normalized vectors, with
// cosine similarity as the score (distance = 1 - cosine).
//
// - Layer 0 holds every node with up to 2M links; upper layers up to M.
// - Levels are drawn as floor(-ln(U) / ln(M)) from a generator seeded at
//   construction, so builds are deterministic for a fixed insertion order.
// - Links are kept symmetric: pruning a node's list also removes the reverse
//   link from every dropped neighbour.
//
// Index file layout (little-endian), followed by a u64 FNV-1a checksum:
//
//   4      magic "ECRH"
//   u32    version (= 1)
//   u64    d, M, ef_construction, seed, n
//   u64    entry point (2^64-1 when empty), u32 max level
//   n*d    f32 unit vectors
//   n      (u32 length + UTF-8 id)
//   n      u32 level
//   per node, per level 0..level: u32 count + count x u32 neighbour

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ecr/corpus.hpp"
#include "ecr/error.hpp"
#include "ecr/io.hpp"
#include "ecr/vector_ops.hpp"

namespace ecr {

struct HnswParams {
  std::size_t M = 24;
  std::size_t ef_construction = 200;
  std::uint64_t seed = 0;
};

struct QueryResult {
  std::vector<std::size_t> labels;  // internal row indices
  std::vector<std::string> ids;
  std::vector<double> scores;  // cosine similarity, non-increasing
  std::size_t visited = 0;     // nodes whose distance was evaluated
};

struct IndexCheck {
  bool ok = true;
  std::vector<std::string> problems;
};

class HnswIndex {
 public:
  static constexpr std::uint64_t kNone = std::numeric_limits<std::uint64_t>::max();

  HnswIndex(std::size_t dim, HnswParams params = {})
      : d_(dim), params_(params), rng_(params.seed),
        level_scale_(1.0 / std::log(static_cast<double>(std::max<std::size_t>(params.M, 2)))) {
    if (d_ == 0) throw DimensionError("retrieval", "index dimension must be positive");
    if (params_.M < 2) throw DomainError("retrieval", "HNSW needs M >= 2");
    if (params_.ef_construction == 0) throw DomainError("retrieval", "ef_construction must be >= 1");
  }

  /// Inserts every row of `x` in row order.
  static HnswIndex build(const EmbeddingMatrix& x, HnswParams params = {}) {
    if (x.n == 0) throw DomainError("retrieval", "cannot build an index from zero vectors");
    HnswIndex index(x.d, params);
    index.reserve(x.n);
    for (std::size_t i = 0; i < x.n; ++i) index.add(x.row(i), x.ids[i]);
    return index;
  }

  void reserve(std::size_t n) {
    vectors_.reserve(n * d_);
    ids_.reserve(n);
    links_.reserve(n);
  }

  template <std::floating_point T>
  std::size_t add(std::span<const T> v, std::string id) {
    if (v.size() != d_) {
      throw DimensionError("retrieval", "vector has d=" + std::to_string(v.size()) + ", index has d=" +
                                            std::to_string(d_));
    }
    auto unit = normalize(v);
    const auto node = static_cast<std::uint32_t>(ids_.size());
    for (auto u : unit) vectors_.push_back(static_cast<float>(u));
    ids_.push_back(std::move(id));
    const int level = draw_level();
    links_.emplace_back(static_cast<std::size_t>(level) + 1);

    if (entry_ == kNone) {
      entry_ = node;
      max_level_ = level;
      return node;
    }

    const float* q = vec(node);
    auto cur = static_cast<std::uint32_t>(entry_);
    float cur_dist = distance(q, cur);
    for (int l = max_level_; l > level; --l) greedy_step(q, cur, cur_dist, l);

    for (int l = std::min(level, max_level_); l >= 0; --l) {
      auto found = search_layer(q, cur, params_.ef_construction, l, nullptr);
      auto chosen = select_neighbors(found, max_links(l));
      auto& mine = links_[node][static_cast<std::size_t>(l)];
      for (const auto& c : chosen) {
        mine.push_back(c.second);
        links_[c.second][static_cast<std::size_t>(l)].push_back(node);
      }
      for (const auto& c : chosen) {
        if (links_[c.second][static_cast<std::size_t>(l)].size() > max_links(l)) shrink(c.second, l);
      }
      cur = found.front().second;
    }
    if (level > max_level_) {
      max_level_ = level;
      entry_ = node;
    }
    return node;
  }

  /// Approximate top-k by cosine. The layer-0 beam is max(ef_search, k).
  template <std::floating_point T>
  QueryResult query(std::span<const T> v, std::size_t k, std::size_t ef_search) const {
    if (k == 0) throw DomainError("retrieval", "k must be >= 1");
    if (entry_ == kNone) throw DomainError("retrieval", "query on an empty index");
    if (v.size() != d_) {
      throw DimensionError("retrieval", "query has d=" + std::to_string(v.size()) + ", index has d=" +
                                            std::to_string(d_));
    }
    auto unit_d = normalize(v);
    std::vector<float> unit(unit_d.begin(), unit_d.end());
    const float* q = unit.data();
    std::size_t visited = 1;
    auto cur = static_cast<std::uint32_t>(entry_);
    float cur_dist = distance(q, cur);
    for (int l = max_level_; l > 0; --l) visited += greedy_step(q, cur, cur_dist, l);
    auto found = search_layer(q, cur, std::max(ef_search, k), 0, &visited);
    std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) {
      return a.first < b.first || (a.first == b.first && a.second < b.second);
    });
    QueryResult res;
    res.visited = visited;
    for (std::size_t i = 0; i < std::min(k, found.size()); ++i) {
      res.labels.push_back(found[i].second);
      res.ids.push_back(ids_[found[i].second]);
      res.scores.push_back(static_cast<double>(dotf(q, vec(found[i].second))));
    }
    return res;
  }

  template <std::floating_point T>
  QueryResult query(const std::vector<T>& v, std::size_t k, std::size_t ef_search) const {
    return query(std::span<const T>(v), k, ef_search);
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return d_; }
  const HnswParams& params() const { return params_; }
  int max_level() const { return max_level_; }
  std::uint64_t entry_point() const { return entry_; }
  int level_of(std::size_t node) const { return static_cast<int>(links_[node].size()) - 1; }
  const std::vector<std::uint32_t>& neighbors(std::size_t node, int level) const {
    return links_[node][static_cast<std::size_t>(level)];
  }
  const std::string& id(std::size_t node) const { return ids_[node]; }
  std::span<const float> vector(std::size_t node) const { return {vec(static_cast<std::uint32_t>(node)), d_}; }
  std::size_t max_links(int level) const { return level == 0 ? 2 * params_.M : params_.M; }

  /// Walks the whole graph and checks the structural invariants.
  IndexCheck check() const {
    IndexCheck out;
    auto fail = [&](std::string msg) {
      out.ok = false;
      if (out.problems.size() < 20) out.problems.push_back(std::move(msg));
    };
    if (size() > 0 && entry_ == kNone) fail("non-empty index without entry point");
    if (entry_ != kNone && level_of(entry_) != max_level_) fail("entry point is not on the top level");
    for (std::size_t u = 0; u < size(); ++u) {
      for (int l = 0; l <= level_of(u); ++l) {
        const auto& nb = neighbors(u, l);
        if (nb.size() > max_links(l)) {
          fail("node " + std::to_string(u) + " exceeds degree cap on layer " + std::to_string(l));
        }
        for (auto v : nb) {
          if (v == u) fail("self loop at node " + std::to_string(u));
          if (v >= size() || level_of(v) < l) {
            fail("edge " + std::to_string(u) + "->" + std::to_string(v) + " leaves layer " + std::to_string(l));
            continue;
          }
          const auto& back = neighbors(v, l);
          if (std::find(back.begin(), back.end(), static_cast<std::uint32_t>(u)) == back.end()) {
            fail("edge " + std::to_string(u) + "->" + std::to_string(v) + " on layer " + std::to_string(l) +
                 " is not bidirectional");
          }
        }
        auto sorted = nb;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
          fail("duplicate edge at node " + std::to_string(u));
        }
      }
    }
    return out;
  }

  std::string serialize() const;
  static HnswIndex parse(std::string_view bytes);

 private:
  using Candidate = std::pair<float, std::uint32_t>;  // (distance, node)

  const float* vec(std::uint32_t node) const { return vectors_.data() + static_cast<std::size_t>(node) * d_; }

  // Eight independent partial sums so the loop vectorizes without fast-math.
  float dotf(const float* a, const float* b) const {
    float acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= d_; i += 8) {
      for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    }
    for (; i < d_; ++i) acc[0] += a[i] * b[i];
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  }

  float distance(const float* q, std::uint32_t node) const { return 1.0f - dotf(q, vec(node)); }

  int draw_level() {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double u = 1.0 - unit(rng_);  // (0, 1]
    return static_cast<int>(std::floor(-std::log(u) * level_scale_));
  }

  /// Greedy hill-climb on one upper layer. Returns the number of distance
  /// evaluations.
  std::size_t greedy_step(const float* q, std::uint32_t& cur, float& cur_dist, int level) const {
    std::size_t evals = 0;
    bool improved = true;
    while (improved) {
      improved = false;
      for (auto nb : links_[cur][static_cast<std::size_t>(level)]) {
        float dd = distance(q, nb);
        ++evals;
        if (dd < cur_dist || (dd == cur_dist && nb < cur)) {
          cur_dist = dd;
          cur = nb;
          improved = true;
        }
      }
    }
    return evals;
  }

  /// Beam search on one layer; returns up to ef closest nodes, closest first.
  std::vector<Candidate> search_layer(const float* q, std::uint32_t entry, std::size_t ef, int level,
                                      std::size_t* visited_count) const {
    thread_local std::vector<std::uint32_t> marks;
    thread_local std::uint32_t epoch = 0;
    if (marks.size() < size()) marks.assign(size() + 1024, 0);
    if (++epoch == 0) {
      std::fill(marks.begin(), marks.end(), 0);
      epoch = 1;
    }

    std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;
    std::priority_queue<Candidate> best;
    float d0 = distance(q, entry);
    marks[entry] = epoch;
    frontier.emplace(d0, entry);
    best.emplace(d0, entry);
    while (!frontier.empty()) {
      auto [dist, node] = frontier.top();
      if (dist > best.top().first && best.size() >= ef) break;
      frontier.pop();
      for (auto nb : links_[node][static_cast<std::size_t>(level)]) {
        if (marks[nb] == epoch) continue;
        marks[nb] = epoch;
        float dd = distance(q, nb);
        if (visited_count) ++*visited_count;
        if (best.size() < ef || dd < best.top().first) {
          frontier.emplace(dd, nb);
          best.emplace(dd, nb);
          if (best.size() > ef) best.pop();
        }
      }
    }
    std::vector<Candidate> out(best.size());
    for (auto i = out.size(); i-- > 0;) {
      out[i] = best.top();
      best.pop();
    }
    return out;
  }

  /// Diversity heuristic: keep a candidate only if it is closer to the base
  /// than to every neighbour already kept. Input must be sorted closest first.
  std::vector<Candidate> select_neighbors(const std::vector<Candidate>& sorted, std::size_t m) const {
    std::vector<Candidate> kept;
    for (const auto& c : sorted) {
      if (kept.size() >= m) break;
      bool good = true;
      for (const auto& k : kept) {
        if (distance(vec(c.second), k.second) < c.first) {
          good = false;
          break;
        }
      }
      if (good) kept.push_back(c);
    }
    return kept;
  }

  void shrink(std::uint32_t node, int level) {
    auto& list = links_[node][static_cast<std::size_t>(level)];
    std::vector<Candidate> cands;
    cands.reserve(list.size());
    const float* base = vec(node);
    for (auto nb : list) cands.emplace_back(distance(base, nb), nb);
    std::sort(cands.begin(), cands.end());
    auto kept = select_neighbors(cands, max_links(level));
    std::vector<std::uint32_t> next;
    next.reserve(kept.size());
    for (const auto& k : kept) next.push_back(k.second);
    for (auto nb : list) {
      if (std::find(next.begin(), next.end(), nb) != next.end()) continue;
      auto& back = links_[nb][static_cast<std::size_t>(level)];
      back.erase(std::remove(back.begin(), back.end(), node), back.end());
    }
    list = std::move(next);
  }

  std::size_t d_;
  HnswParams params_;
  std::mt19937_64 rng_;
  double level_scale_;
  std::vector<float> vectors_;
  std::vector<std::string> ids_;
  std::vector<std::vector<std::vector<std::uint32_t>>> links_;  // node -> level -> neighbours
  std::uint64_t entry_ = kNone;
  int max_level_ = -1;
};

inline constexpr std::string_view kIndexMagic = "ECRH";
inline constexpr std::uint32_t kIndexVersion = 1;

inline std::string HnswIndex::serialize() const {
  io::ByteWriter w;
  w.put_bytes(kIndexMagic);
  w.put(kIndexVersion);
  w.put(static_cast<std::uint64_t>(d_));
  w.put(static_cast<std::uint64_t>(params_.M));
  w.put(static_cast<std::uint64_t>(params_.ef_construction));
  w.put(params_.seed);
  w.put(static_cast<std::uint64_t>(size()));
  w.put(entry_);
  w.put(static_cast<std::uint32_t>(std::max(max_level_, 0)));
  for (float v : vectors_) w.put(v);
  for (const auto& id : ids_) w.put_string(id);
  for (const auto& node : links_) w.put(static_cast<std::uint32_t>(node.size() - 1));
  for (const auto& node : links_) {
    for (const auto& level : node) {
      w.put(static_cast<std::uint32_t>(level.size()));
      for (auto nb : level) w.put(nb);
    }
  }
  return io::seal(w.take());
}

inline HnswIndex HnswIndex::parse(std::string_view bytes) {
  if (bytes.size() >= 4 && bytes.substr(0, 4) != kIndexMagic) {
    throw FormatError("retrieval", "not an index file (bad magic)");
  }
  io::ByteReader r(io::unseal(bytes, "retrieval"), "retrieval");
  r.get_bytes(4);
  if (auto v = r.get<std::uint32_t>(); v != kIndexVersion) {
    throw FormatError("retrieval", "unsupported index version " + std::to_string(v));
  }
  auto d = r.get<std::uint64_t>();
  HnswParams p;
  p.M = r.get<std::uint64_t>();
  p.ef_construction = r.get<std::uint64_t>();
  p.seed = r.get<std::uint64_t>();
  auto n = r.get<std::uint64_t>();
  HnswIndex index(d, p);
  index.entry_ = r.get<std::uint64_t>();
  auto top = r.get<std::uint32_t>();
  index.max_level_ = n ? static_cast<int>(top) : -1;
  if (n * d * 4 > r.remaining()) throw FormatError("retrieval", "index vectors truncated");
  index.vectors_.resize(n * d);
  for (auto& v : index.vectors_) v = r.get<float>();
  for (std::size_t i = 0; i < n; ++i) index.ids_.push_back(r.get_string());
  index.links_.resize(n);
  for (std::size_t i = 0; i < n; ++i) index.links_[i].resize(r.get<std::uint32_t>() + std::size_t{1});
  for (auto& node : index.links_) {
    for (auto& level : node) {
      level.resize(r.get<std::uint32_t>());
      for (auto& nb : level) {
        nb = r.get<std::uint32_t>();
        if (nb >= n) throw FormatError("retrieval", "neighbour id out of range");
      }
    }
  }
  if (r.remaining() != 0) throw FormatError("retrieval", "trailing bytes in index file");
  if (n && index.entry_ >= n) throw FormatError("retrieval", "entry point out of range");
  // Advance the level generator past the stored insertions so further adds
  // continue the same sequence.
  for (std::size_t i = 0; i < n; ++i) index.draw_level();
  return index;
}

inline HnswIndex load_index(const std::filesystem::path& path) {
  return HnswIndex::parse(io::read_file(path, "retrieval"));
}

inline void save_index(const HnswIndex& index, const std::filesystem::path& path) {
  io::atomic_write(path, index.serialize(), "retrieval");
}

/// Exact top-k by cosine over every row, ties to the lower row index. Uses a
/// bounded heap; scores are computed in double on the raw rows.
template <std::floating_point T>
QueryResult brute_force_topk(const EmbeddingMatrix& vectors, std::span<const T> v, std::size_t k) {
  if (v.size() != vectors.d) throw DimensionError("retrieval", "query dimension does not match vectors");
  QueryResult res;
  if (k == 0 || vectors.n == 0) return res;
  using Entry = std::pair<double, std::size_t>;
  // Heap top is the current worst kept entry: lowest score, then highest index.
  auto better = [](const Entry& a, const Entry& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(better)> heap(better);
  double qn = l2_norm(v);
  if (!(qn > 0.0)) throw DomainError("retrieval", "cosine query with a zero vector");
  for (std::size_t i = 0; i < vectors.n; ++i) {
    auto row = vectors.row(i);
    double rn = l2_norm(row);
    double s = rn > 0.0 ? dot(v, row) / (qn * rn) : 0.0;
    Entry e{s, i};
    if (heap.size() < k) {
      heap.push(e);
    } else if (better(e, heap.top())) {
      heap.pop();
      heap.push(e);
    }
    ++res.visited;
  }
  std::vector<Entry> out;
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  for (const auto& [s, i] : out) {
    res.labels.push_back(i);
    res.ids.push_back(vectors.ids[i]);
    res.scores.push_back(s);
  }
  return res;
}

struct LatencyReport {
  std::size_t queries = 0;
  double mean_us = 0.0;
  double p50_us = 0.0;
  double p99_us = 0.0;
  double max_us = 0.0;
  std::size_t visited_total = 0;
};

/// Times individual queries. Cycles through `queries` until at least
/// `min_queries` have run.
inline LatencyReport bench_query_latency(const HnswIndex& index, const EmbeddingMatrix& queries,
                                         std::size_t k, std::size_t ef_search,
                                         std::size_t min_queries = 1000) {
  if (queries.n == 0) throw DomainError("retrieval", "latency bench needs at least one query");
  std::size_t total = std::max(min_queries, queries.n);
  std::vector<double> us;
  us.reserve(total);
  LatencyReport rep;
  // Warm caches with one pass over a few queries.
  for (std::size_t i = 0; i < std::min<std::size_t>(queries.n, 16); ++i) index.query(queries.row(i), k, ef_search);
  for (std::size_t i = 0; i < total; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    auto res = index.query(queries.row(i % queries.n), k, ef_search);
    auto t1 = std::chrono::steady_clock::now();
    us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    rep.visited_total += res.visited;
  }
  rep.queries = total;
  double sum = 0.0;
  for (double u : us) sum += u;
  rep.mean_us = sum / static_cast<double>(total);
  std::sort(us.begin(), us.end());
  auto pct = [&](double p) {
    auto idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(total)));
    return us[std::min(total - 1, idx == 0 ? 0 : idx - 1)];
  };
  rep.p50_us = pct(0.50);
  rep.p99_us = pct(0.99);
  rep.max_us = us.back();
  return rep;
}

}  // namespace ecr
