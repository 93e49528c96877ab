#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "ecr/geometry.hpp"
#include "support.hpp"

using namespace ecr;

namespace {

std::vector<std::string> labels_for(std::size_t n, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = "m" + std::to_string(i < m ? i : rng() % m);
  return out;
}

// Double-loop oracles: centroids by explicit membership scans.
std::vector<std::vector<double>> oracle_centroids(const EmbeddingMatrix& e, const std::vector<std::string>& labels,
                                                  std::vector<std::string>& names) {
  names = labels;
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<std::vector<double>> c;
  for (const auto& name : names) {
    std::vector<double> sum(e.d, 0.0);
    double cnt = 0;
    for (std::size_t i = 0; i < e.n; ++i) {
      if (labels[i] != name) continue;
      for (std::size_t j = 0; j < e.d; ++j) sum[j] += e.row(i)[j];
      cnt += 1;
    }
    for (auto& v : sum) v /= cnt;
    c.push_back(sum);
  }
  return c;
}

double oracle_member_stat(const EmbeddingMatrix& e, const std::vector<std::string>& labels, bool squared) {
  std::vector<std::string> names;
  auto c = oracle_centroids(e, labels, names);
  double acc = 0.0;
  for (std::size_t k = 0; k < names.size(); ++k) {
    double s = 0.0, cnt = 0;
    for (std::size_t i = 0; i < e.n; ++i) {
      if (labels[i] != names[k]) continue;
      double sq = 0.0;
      for (std::size_t j = 0; j < e.d; ++j) sq += (e.row(i)[j] - c[k][j]) * (e.row(i)[j] - c[k][j]);
      s += squared ? sq : std::sqrt(sq);
      cnt += 1;
    }
    acc += s / cnt;
  }
  return acc / static_cast<double>(names.size());
}

double oracle_inter(const EmbeddingMatrix& e, const std::vector<std::string>& labels) {
  std::vector<std::string> names;
  auto c = oracle_centroids(e, labels, names);
  double acc = 0.0, pairs = 0;
  for (std::size_t a = 0; a < c.size(); ++a) {
    for (std::size_t b = 0; b < c.size(); ++b) {
      if (a == b) continue;
      double sq = 0.0;
      for (std::size_t j = 0; j < e.d; ++j) sq += (c[a][j] - c[b][j]) * (c[a][j] - c[b][j]);
      acc += std::sqrt(sq);
      pairs += 1;
    }
  }
  return acc / pairs;
}

EmbeddingMatrix affine(const EmbeddingMatrix& e, double scale, const std::vector<double>& shift) {
  EmbeddingMatrix out = e;
  for (std::size_t i = 0; i < e.n; ++i) {
    for (std::size_t j = 0; j < e.d; ++j) {
      out.mutable_row(i)[j] = static_cast<float>(scale * e.row(i)[j] + shift[j]);
    }
  }
  return out;
}

ManifoldPartition part(const std::vector<std::string>& l) { return ManifoldPartition::from_labels(l); }

}  // namespace

TEST(Geometry, IdenticalPointsAreCompact) {
  EmbeddingMatrix e(5, 3);
  for (auto& v : e.data) v = 2.5f;
  auto p = part({"a", "a", "a", "a", "a"});
  EXPECT_EQ(intra_compactness(e, p), 0.0);
  EXPECT_EQ(spread(e, p), 0.0);
}

TEST(Geometry, TwoPointsAtDistanceTwo) {
  EmbeddingMatrix e(2, 2);
  e.data = {1, 1, 3, 1};
  auto p = part({"a", "a"});
  EXPECT_DOUBLE_EQ(intra_compactness(e, p), 1.0);
  EXPECT_DOUBLE_EQ(spread(e, p), 1.0);
  EXPECT_THROW(inter_separation(e, p), ValidationError);
}

TEST(Geometry, InterAnalytic) {
  EmbeddingMatrix two(2, 2);
  two.data = {0, 0, 3, 4};
  EXPECT_DOUBLE_EQ(inter_separation(two, part({"a", "b"})), 5.0);
  EmbeddingMatrix three(3, 1);
  three.data = {0, 1, 2};
  EXPECT_NEAR(inter_separation(three, part({"a", "b", "c"})), 4.0 / 3.0, 1e-12);
}

TEST(Geometry, RatioExamples) {
  EXPECT_NEAR(geometry_ratio(39.66, 41.91), 0.946, 1e-3);
  EXPECT_NEAR(geometry_ratio(42.51, 43.54), 0.976, 1e-3);
  EXPECT_DOUBLE_EQ(geometry_ratio(3.0, 3.0), 1.0);
  EXPECT_THROW(geometry_ratio(1.0, 0.0), DomainError);
}

TEST(Geometry, MatchesBruteForceOracles) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto e = test::gaussian_matrix(60, 5, seed);
    auto labels = labels_for(60, 3, seed + 100);
    auto p = part(labels);
    EXPECT_NEAR(intra_compactness(e, p), oracle_member_stat(e, labels, false), 1e-9);
    EXPECT_NEAR(spread(e, p), oracle_member_stat(e, labels, true), 1e-9);
    EXPECT_NEAR(inter_separation(e, p), oracle_inter(e, labels), 1e-9);
    auto r = geometry_report(e, p);
    EXPECT_NEAR(r.ratio, r.intra / r.inter, 1e-12);
  }
}

TEST(Geometry, TranslationInvariantScaleEquivariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50, 50);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto e = test::gaussian_matrix(40, 4, seed);
    auto p = part(labels_for(40, 4, seed));
    auto base = geometry_report(e, p);
    std::vector<double> shift(4);
    for (auto& s : shift) s = u(rng);
    auto moved = geometry_report(affine(e, 1.0, shift), p);
    EXPECT_NEAR(moved.intra, base.intra, 1e-4);
    EXPECT_NEAR(moved.inter, base.inter, 1e-4);
    EXPECT_NEAR(moved.spread, base.spread, 1e-4);
    double alpha = -3.0 + 0.25 * static_cast<double>(seed);
    if (alpha == 0.0) continue;
    auto scaled = geometry_report(affine(e, alpha, std::vector<double>(4, 0.0)), p);
    double a = std::abs(alpha);
    EXPECT_NEAR(scaled.intra, a * base.intra, 1e-5 * a * base.intra);
    EXPECT_NEAR(scaled.inter, a * base.inter, 1e-5 * a * base.inter);
    EXPECT_NEAR(scaled.spread, alpha * alpha * base.spread, 1e-5 * alpha * alpha * base.spread);
    EXPECT_NEAR(scaled.ratio, base.ratio, 1e-5);
  }
}

TEST(Geometry, PartitionErrors) {
  auto e = test::gaussian_matrix(4, 2, 1);
  EXPECT_THROW(intra_compactness(e, part({"a", "b"})), DimensionError);
  ManifoldPartition p = part({"a", "a", "b", "b"});
  p.inventory.push_back("z");
  EXPECT_THROW(intra_compactness(e, p), ValidationError);
}

TEST(Prototypes, SingleSampleAndPermutation) {
  auto e = test::gaussian_matrix(3, 4, 2);
  std::vector<std::string> l{"zh", "en", "hi"};
  auto p = language_prototypes(e, l);
  EXPECT_EQ(p.labels, (std::vector<std::string>{"en", "hi", "zh"}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(p.center(0)[j], e.row(1)[j]);

  auto big = test::gaussian_matrix(30, 3, 5);
  auto bl = labels_for(30, 3, 6);
  auto p1 = language_prototypes(big, bl);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(1));
  EmbeddingMatrix shuffled(30, 3);
  std::vector<std::string> sl(30);
  for (std::size_t i = 0; i < 30; ++i) {
    std::copy(big.row(perm[i]).begin(), big.row(perm[i]).end(), shuffled.mutable_row(i).begin());
    sl[i] = bl[perm[i]];
  }
  auto p2 = language_prototypes(shuffled, sl);
  std::vector<std::string> names;
  auto oracle = oracle_centroids(big, bl, names);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(p1.center(k)[j], p2.center(k)[j], 1e-12);
      EXPECT_NEAR(p1.center(k)[j], oracle[k][j], 1e-9);
    }
  }
}

TEST(Purity, SeparatedClusters) {
  EmbeddingMatrix e(6, 2);
  e.data = {0, 0, 0.1f, 0, 10, 10, 10, 10.1f, -10, 5, -10.1f, 5};
  std::vector<std::string> l{"en", "en", "zh", "zh", "hi", "hi"};
  auto r = purity(e, l);
  for (const auto& [lang, v] : r.per_language) EXPECT_EQ(v, 1.0) << lang;
  EXPECT_EQ(r.overall, 1.0);
}

TEST(Purity, HandTracedFourPoints) {
  // A prototype at 2.5, B prototype at 7; the A point at 5 sits nearer B.
  EmbeddingMatrix e(4, 1);
  e.data = {0, 5, 6, 8};
  std::vector<std::string> l{"A", "A", "B", "B"};
  auto r = purity(e, l);
  EXPECT_EQ(r.per_language[0], (std::pair<std::string, double>{"A", 0.5}));
  EXPECT_EQ(r.per_language[1], (std::pair<std::string, double>{"B", 1.0}));
  EXPECT_EQ(r.assigned, (std::vector<std::string>{"A", "B", "B", "B"}));
  EXPECT_DOUBLE_EQ(r.overall, 0.75);
}

TEST(Purity, TieGoesToFirstLabel) {
  // Prototypes a = 0, b = 1.5; 0.75 is equidistant (exact in binary).
  EmbeddingMatrix e(3, 1);
  e.data = {0, 2, 1};
  std::vector<std::string> l{"a", "b", "b"};
  auto p = language_prototypes(e, l);
  std::vector<double> mid{0.75};
  EXPECT_EQ(nearest_prototype(p, std::span<const double>(mid)), 0u);
}

TEST(Purity, MatchesBruteForceAndRigidInvariance) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto e = test::gaussian_matrix(45, 3, seed, 2.0);
    auto l = labels_for(45, 3, seed);
    auto r = purity(e, l);
    // Brute-force nearest-centre scan.
    std::vector<std::string> names;
    auto c = oracle_centroids(e, l, names);
    for (std::size_t i = 0; i < e.n; ++i) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t k = 0; k < c.size(); ++k) {
        double dd = 0.0;
        for (std::size_t j = 0; j < 3; ++j) dd += (e.row(i)[j] - c[k][j]) * (e.row(i)[j] - c[k][j]);
        if (dd < bd) {
          bd = dd;
          best = k;
        }
      }
      EXPECT_EQ(r.assigned[i], names[best]);
    }
    // Random rotation plus translation.
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Eigen::Matrix3d a;
    for (int i = 0; i < 9; ++i) a.data()[i] = g(rng);
    Eigen::Matrix3d q = Eigen::HouseholderQR<Eigen::Matrix3d>(a).householderQ();
    EmbeddingMatrix moved(e.n, 3);
    for (std::size_t i = 0; i < e.n; ++i) {
      Eigen::Vector3d v(e.row(i)[0], e.row(i)[1], e.row(i)[2]);
      Eigen::Vector3d w = q * v + Eigen::Vector3d(3, -7, 1);
      for (int j = 0; j < 3; ++j) moved.mutable_row(i)[j] = static_cast<float>(w(j));
    }
    auto rm = purity(moved, l);
    for (std::size_t k = 0; k < r.per_language.size(); ++k) {
      EXPECT_NEAR(rm.per_language[k].second, r.per_language[k].second, 1.0 / 15 + 1e-12);
    }
    std::size_t same = 0;
    for (std::size_t i = 0; i < e.n; ++i) same += rm.assigned[i] == r.assigned[i];
    // float rounding can flip only near-tied points
    EXPECT_GE(same, e.n - 1);
  }
}

TEST(Purity, NeedsTwoLanguages) {
  auto e = test::gaussian_matrix(3, 2, 1);
  std::vector<std::string> l{"en", "en", "en"};
  EXPECT_THROW(purity(e, l), ValidationError);
}

TEST(TeacherSimilarity, IdentityAndNegation) {
  auto t = test::gaussian_matrix(20, 6, 1);
  std::unordered_map<std::string, std::string> lang;
  for (std::size_t i = 0; i < 20; ++i) lang[t.ids[i]] = i % 2 ? "zh" : "en";
  auto same = teacher_similarity(t, t, lang);
  EXPECT_NEAR(same.overall, 1.0, 1e-12);
  for (const auto& [l, v] : same.per_language) EXPECT_NEAR(v, 1.0, 1e-12);
  auto neg = t;
  for (auto& v : neg.data) v = -v;
  EXPECT_NEAR(teacher_similarity(t, neg, lang).overall, -1.0, 1e-12);
}

TEST(TeacherSimilarity, ScalarOracleAndPairingById) {
  auto t = test::gaussian_matrix(30, 5, 2);
  auto s = test::gaussian_matrix(30, 5, 3);
  std::reverse(s.ids.begin(), s.ids.end());
  std::unordered_map<std::string, std::string> lang;
  for (std::size_t i = 0; i < 30; ++i) lang[t.ids[i]] = i % 3 == 0 ? "hi" : "en";
  auto r = teacher_similarity(t, s, lang);
  double hi = 0, en = 0;
  int nh = 0, ne = 0;
  for (std::size_t i = 0; i < 30; ++i) {
    std::size_t j = 29 - i;
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      ab += double(t.row(i)[k]) * s.row(j)[k];
      aa += double(t.row(i)[k]) * t.row(i)[k];
      bb += double(s.row(j)[k]) * s.row(j)[k];
    }
    double c = ab / std::sqrt(aa * bb);
    (i % 3 == 0 ? hi : en) += c;
    (i % 3 == 0 ? nh : ne) += 1;
  }
  EXPECT_NEAR(r.per_language[0].second, en / ne, 1e-9);
  EXPECT_NEAR(r.per_language[1].second, hi / nh, 1e-9);
}

TEST(TeacherSimilarity, DimensionMismatch) {
  auto t = test::gaussian_matrix(40, 8, 1);
  auto s = test::gaussian_matrix(40, 5, 2);
  std::unordered_map<std::string, std::string> lang;
  for (const auto& id : t.ids) lang[id] = "en";
  EXPECT_THROW(teacher_similarity(t, s, lang), DimensionError);
  auto r = teacher_similarity(t, s, lang, 4);
  EXPECT_EQ(r.shared_dim, 4u);
  EXPECT_LE(std::abs(r.overall), 1.0);
  s.ids[3] = "nope";
  EXPECT_THROW(teacher_similarity(t, s, lang, 4), ValidationError);
}

TEST(Consistency, RetrievalExamples) {
  std::vector<Selection> a, b, c;
  for (int i = 0; i < 10; ++i) {
    std::string id = std::to_string(i);
    a.push_back({id, {static_cast<std::size_t>(i % 3), 7}});
    b.push_back({id, {static_cast<std::size_t>(i % 3 + 10), 17}});
    c.push_back({id, {static_cast<std::size_t>(i < 5 ? i % 3 : 9), 7}});
  }
  auto same = retrieval_consistency(a, a);
  EXPECT_EQ(same.exact, 1.0);
  EXPECT_EQ(same.jaccard, 1.0);
  auto disjoint = retrieval_consistency(a, b);
  EXPECT_EQ(disjoint.exact, 0.0);
  EXPECT_EQ(disjoint.jaccard, 0.0);
  EXPECT_DOUBLE_EQ(retrieval_consistency(a, c).exact, 0.5);
  c.pop_back();
  EXPECT_THROW(retrieval_consistency(a, c), ValidationError);
}

TEST(Consistency, CrosslingualExamples) {
  std::vector<TripletSelection> t;
  for (int i = 0; i < 4; ++i) t.push_back({std::to_string(i), {{{1, 2}, {2, 1}, {1, 2}}}});
  EXPECT_EQ(crosslingual_consistency(t).exact, 1.0);
  t[2].subsets[1] = {1, 3};
  auto r = crosslingual_consistency(t);
  EXPECT_DOUBLE_EQ(r.exact, 0.75);
  // Differing triplet: pairwise Jaccard {1/3, 1, 1/3}.
  EXPECT_NEAR(r.jaccard, (3.0 + (1.0 / 3 + 1.0 + 1.0 / 3) / 3.0) / 4.0, 1e-12);
  EXPECT_THROW(crosslingual_consistency(std::vector<TripletSelection>{}), ValidationError);
  t[0].subsets[2].clear();
  EXPECT_THROW(crosslingual_consistency(t), ValidationError);
}

TEST(Consistency, RatesInUnitInterval) {
  std::mt19937_64 rng(4);
  std::vector<TripletSelection> t;
  std::vector<Selection> a, b;
  for (int i = 0; i < 50; ++i) {
    TripletSelection s{std::to_string(i), {}};
    for (auto& sub : s.subsets) {
      for (int k = 0; k < 3; ++k) sub.push_back(rng() % 6);
    }
    t.push_back(s);
    a.push_back({s.id, s.subsets[0]});
    b.push_back({s.id, s.subsets[1]});
  }
  for (auto r : {crosslingual_consistency(t), retrieval_consistency(a, b)}) {
    EXPECT_GE(r.exact, 0.0);
    EXPECT_LE(r.exact, 1.0);
    EXPECT_GE(r.jaccard, 0.0);
    EXPECT_LE(r.jaccard, 1.0);
  }
  EXPECT_EQ(retrieval_consistency(b, b).exact, 1.0);
}

TEST(Report, TextFormatStable) {
  EmbeddingMatrix e(2, 2);
  e.data = {0, 0, 3, 4};
  auto r = geometry_report(e, part({"a", "b"}));
  EXPECT_EQ(to_text(r),
            "partition: labels\nmanifolds: 2\nintra: 0\ninter: 5\nratio: 0\nspread: 0\n"
            "manifold.a: count=1 mean_distance=0 variance=0\nmanifold.b: count=1 mean_distance=0 variance=0\n");
}
