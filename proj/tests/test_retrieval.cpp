#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "ecr/hnsw.hpp"
#include "ecr/pca.hpp"
#include "support.hpp"

using namespace ecr;

namespace {

// Linear-scan top-k with a full sort; the heap version in the library is checked against it.
std::vector<std::size_t> scan_topk(const EmbeddingMatrix& x, std::span<const float> q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < x.n; ++i) all.emplace_back(-cosine(q, x.row(i)), i);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

double recall_at(const HnswIndex& index, const EmbeddingMatrix& x, const EmbeddingMatrix& q, std::size_t k,
                 std::size_t ef) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < q.n; ++i) {
    auto truth = brute_force_topk(x, q.row(i), k);
    auto got = index.query(q.row(i), k, ef);
    std::set<std::size_t> t(truth.labels.begin(), truth.labels.end());
    for (auto l : got.labels) hit += t.count(l);
  }
  return static_cast<double>(hit) / static_cast<double>(q.n * k);
}

}  // namespace

TEST(Pca, LineYEqualsX) {
  EmbeddingMatrix x(50, 2);
  for (std::size_t i = 0; i < 50; ++i) {
    float t = static_cast<float>(i) - 20.0f;
    x.mutable_row(i)[0] = t;
    x.mutable_row(i)[1] = t;
  }
  auto m = fit_pca(x, 2);
  EXPECT_NEAR(std::abs(m.component(0)[0]), 1.0 / std::sqrt(2.0), 1e-9);
  EXPECT_NEAR(m.component(0)[0], m.component(0)[1], 1e-9);
  EXPECT_NEAR(m.explained_variance[1], 0.0, 1e-9);
}

TEST(Pca, FullRankKeepsTotalVariance) {
  auto x = test::gaussian_matrix(300, 9, 4);
  for (std::size_t i = 0; i < x.n; ++i) x.mutable_row(i)[2] *= 5.0f;
  auto m = fit_pca(x, 9);
  // Trace of the sample covariance, computed directly.
  double total = 0.0;
  for (std::size_t j = 0; j < x.d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.n; ++i) mean += x.row(i)[j];
    mean /= x.n;
    for (std::size_t i = 0; i < x.n; ++i) total += (x.row(i)[j] - mean) * (x.row(i)[j] - mean);
  }
  total /= (x.n - 1);
  double sum = 0.0;
  for (double v : m.explained_variance) sum += v;
  EXPECT_NEAR(sum, total, 1e-6);
}

TEST(Pca, IsotropicVariancesClose) {
  auto x = test::gaussian_matrix(10000, 4, 12);
  auto m = fit_pca(x, 4);
  EXPECT_LT(m.explained_variance.front() / m.explained_variance.back(), 1.1);
}

TEST(Pca, OrthonormalAndSorted) {
  for (auto solver : {PcaSolver::Eigen, PcaSolver::Subspace}) {
    auto x = test::gaussian_matrix(400, 20, 9);
    for (std::size_t i = 0; i < x.n; ++i) {
      for (std::size_t j = 0; j < x.d; ++j) x.mutable_row(i)[j] *= static_cast<float>(1.0 + j);
    }
    auto m = fit_pca(x, 6, solver, 3);
    for (std::size_t a = 0; a < 6; ++a) {
      for (std::size_t b = 0; b < 6; ++b) {
        EXPECT_NEAR(dot(m.component(a), m.component(b)), a == b ? 1.0 : 0.0, 1e-5);
      }
      if (a) {
        EXPECT_LE(m.explained_variance[a], m.explained_variance[a - 1]);
      }
    }
  }
}

TEST(Pca, SolversAgree) {
  auto x = test::gaussian_matrix(500, 16, 2);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t j = 0; j < x.d; ++j) x.mutable_row(i)[j] *= static_cast<float>(16 - j);
  }
  auto a = fit_pca(x, 4, PcaSolver::Eigen);
  auto b = fit_pca(x, 4, PcaSolver::Subspace, 7);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(a.explained_variance[j], b.explained_variance[j], 1e-6 * a.explained_variance[0]);
    EXPECT_NEAR(std::abs(dot(a.component(j), b.component(j))), 1.0, 1e-6);
  }
}

TEST(Pca, ProjectExamples) {
  auto x = test::gaussian_matrix(200, 5, 3);
  auto m = fit_pca(x, 3);
  auto zero = pca_project(m, std::span<const double>(m.mean));
  for (double v : zero) EXPECT_NEAR(v, 0.0, 1e-12);
  std::vector<double> v(m.mean);
  for (std::size_t i = 0; i < 5; ++i) v[i] += m.component(0)[i];
  auto e1 = pca_project(m, std::span<const double>(v));
  EXPECT_NEAR(e1[0], 1.0, 1e-9);
  EXPECT_NEAR(e1[1], 0.0, 1e-9);
  EXPECT_NEAR(e1[2], 0.0, 1e-9);
}

TEST(Pca, ProjectMatchesMatrixMultiply) {
  auto x = test::gaussian_matrix(100, 8, 5);
  auto m = fit_pca(x, 5);
  Eigen::Map<const Eigen::MatrixXd> C(m.components.data(), 8, 5);
  Eigen::Map<const Eigen::VectorXd> mu(m.mean.data(), 8);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd v(8);
    for (int i = 0; i < 8; ++i) v(i) = g(rng);
    Eigen::VectorXd want = C.transpose() * (v - mu);
    auto got = pca_project(m, std::span<const double>(v.data(), 8));
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(got[j], want(j), 1e-9);
  }
}

TEST(Pca, FullRankReconstruction) {
  auto x = test::gaussian_matrix(60, 6, 8);
  auto m = fit_pca(x, 6);
  for (std::size_t i = 0; i < x.n; ++i) {
    auto y = pca_project(m, x.row(i));
    auto back = pca_reconstruct(m, y);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(back[j], x.row(i)[j], 1e-6);
  }
}

TEST(Pca, Errors) {
  auto x = test::gaussian_matrix(10, 4, 1);
  EXPECT_THROW(fit_pca(x, 0), DomainError);
  EXPECT_THROW(fit_pca(x, 5), DomainError);
  EXPECT_THROW(fit_pca(test::gaussian_matrix(1, 4, 1), 1), DomainError);
  auto m = fit_pca(x, 2);
  std::vector<double> wrong(3, 0.0);
  EXPECT_THROW(pca_project(m, std::span<const double>(wrong)), DimensionError);
}

TEST(Pca, DegenerateInput) {
  EmbeddingMatrix x(5, 3);
  for (std::size_t i = 0; i < 5; ++i) x.mutable_row(i)[1] = 2.0f;
  auto m = fit_pca(x, 2);
  EXPECT_TRUE(m.degenerate);
  for (double v : m.explained_variance) EXPECT_EQ(v, 0.0);
}

TEST(Pca, FileRoundTrip) {
  auto m = fit_pca(test::gaussian_matrix(50, 7, 2), 3);
  test::TempDir dir;
  save_pca(m, dir.file("p.ecrp"));
  auto back = load_pca(dir.file("p.ecrp"));
  EXPECT_EQ(serialize_pca(back), serialize_pca(m));
  auto bytes = serialize_pca(m);
  EXPECT_THROW(parse_pca(bytes.substr(0, bytes.size() - 1)), ChecksumError);
}

TEST(Hnsw, SingleVector) {
  EmbeddingMatrix x(1, 4);
  x.data = {1, 2, 3, 4};
  auto index = HnswIndex::build(x);
  EXPECT_EQ(index.entry_point(), 0u);
  std::vector<float> q{4, 3, 2, 1};
  auto r = index.query(q, 5, 10);
  ASSERT_EQ(r.labels.size(), 1u);
  EXPECT_NEAR(r.scores[0], cosine(std::span<const float>(q), x.row(0)), 1e-6);
}

TEST(Hnsw, StructuralInvariants) {
  auto x = test::random_matrix(100, 64, 3);
  for (std::size_t M : {2u, 4u, 16u}) {
    HnswParams p;
    p.M = M;
    auto index = HnswIndex::build(x, p);
    auto chk = index.check();
    EXPECT_TRUE(chk.ok) << (chk.problems.empty() ? "" : chk.problems[0]);
    for (std::size_t u = 0; u < index.size(); ++u) {
      for (int l = 0; l <= index.level_of(u); ++l) EXPECT_LE(index.neighbors(u, l).size(), index.max_links(l));
    }
  }
}

TEST(Hnsw, DuplicatesRetrievable) {
  auto x = test::random_matrix(50, 8, 5);
  std::copy(x.row(7).begin(), x.row(7).end(), x.mutable_row(30).begin());
  auto index = HnswIndex::build(x);
  auto r = index.query(x.row(7), 2, 50);
  std::set<std::size_t> got(r.labels.begin(), r.labels.end());
  EXPECT_TRUE(got.count(7));
  EXPECT_TRUE(got.count(30));
  EXPECT_NE(r.ids[0], r.ids[1]);
}

TEST(Hnsw, SelfQueryRankOne) {
  auto x = test::random_matrix(300, 16, 6);
  auto index = HnswIndex::build(x);
  for (std::size_t i = 0; i < x.n; i += 17) {
    auto r = index.query(x.row(i), 1, x.n);
    EXPECT_EQ(r.labels[0], i);
    EXPECT_NEAR(r.scores[0], 1.0, 1e-6);
  }
}

TEST(Hnsw, ScoresDescendingAndPrefixStable) {
  auto x = test::random_matrix(2000, 32, 7);
  auto index = HnswIndex::build(x);
  auto q = test::random_matrix(30, 32, 8);
  for (std::size_t i = 0; i < q.n; ++i) {
    auto big = index.query(q.row(i), 10, 64);
    for (std::size_t j = 1; j < big.scores.size(); ++j) EXPECT_GE(big.scores[j - 1], big.scores[j]);
    for (std::size_t k = 1; k < 10; ++k) {
      auto small = index.query(q.row(i), k, 64);
      for (auto l : small.labels) {
        EXPECT_NE(std::find(big.labels.begin(), big.labels.end(), l), big.labels.end());
      }
    }
  }
}

TEST(Hnsw, RecallSmallIndex) {
  auto x = test::random_matrix(2000, 64, 11);
  auto q = test::random_matrix(100, 64, 12);
  auto index = HnswIndex::build(x);
  double prev = 0.0;
  for (std::size_t ef : {8u, 16u, 32u, 64u, 128u}) {
    double r = recall_at(index, x, q, 5, ef);
    EXPECT_GE(r, prev - 1e-12) << "ef=" << ef;
    prev = r;
  }
  EXPECT_GE(recall_at(index, x, q, 5, 64), 0.95);
}

TEST(Hnsw, DeterministicVisitedCounts) {
  auto x = test::random_matrix(1000, 16, 2);
  auto q = test::random_matrix(20, 16, 3);
  HnswParams p;
  p.seed = 5;
  auto a = HnswIndex::build(x, p), b = HnswIndex::build(x, p);
  EXPECT_EQ(a.serialize(), b.serialize());
  for (std::size_t i = 0; i < q.n; ++i) {
    auto ra = a.query(q.row(i), 5, 32), rb = b.query(q.row(i), 5, 32);
    EXPECT_EQ(ra.visited, rb.visited);
    EXPECT_EQ(ra.labels, rb.labels);
  }
}

TEST(Hnsw, FileRoundTrip) {
  auto x = test::random_matrix(200, 8, 4);
  auto index = HnswIndex::build(x);
  test::TempDir dir;
  save_index(index, dir.file("i.ecrh"));
  auto back = load_index(dir.file("i.ecrh"));
  EXPECT_EQ(back.serialize(), index.serialize());
  EXPECT_TRUE(back.check().ok);
  auto q = test::random_matrix(5, 8, 9);
  for (std::size_t i = 0; i < q.n; ++i) EXPECT_EQ(back.query(q.row(i), 3, 20).labels, index.query(q.row(i), 3, 20).labels);
  auto bytes = index.serialize();
  bytes[bytes.size() / 2] ^= 1;
  EXPECT_THROW(HnswIndex::parse(bytes), ChecksumError);
}

TEST(Hnsw, Errors) {
  auto x = test::random_matrix(10, 4, 1);
  auto index = HnswIndex::build(x);
  std::vector<float> q(4, 1.0f), wrong(3, 1.0f);
  EXPECT_THROW(index.query(q, 0, 10), DomainError);
  EXPECT_THROW(index.query(wrong, 1, 10), DimensionError);
  HnswIndex empty(4);
  EXPECT_THROW(empty.query(q, 1, 10), DomainError);
  EXPECT_THROW(HnswIndex::build(EmbeddingMatrix{}), DomainError);
  EXPECT_THROW(bench_query_latency(index, EmbeddingMatrix(0, 4), 5, 10), DomainError);
}

TEST(BruteForce, FullSortAndBasis) {
  EmbeddingMatrix e(4, 4);
  for (std::size_t i = 0; i < 4; ++i) e.mutable_row(i)[i] = 1.0f;
  std::vector<float> v{0, 1, 0, 0};
  EXPECT_EQ(brute_force_topk(e, std::span<const float>(v), 1).labels, (std::vector<std::size_t>{1}));
  std::vector<float> w{0.1f, 0.4f, 0.3f, 0.2f};
  EXPECT_EQ(brute_force_topk(e, std::span<const float>(w), 4).labels, (std::vector<std::size_t>{1, 2, 3, 0}));
  // Ties resolve to the lower index.
  std::vector<float> tie{1, 1, 0, 0};
  EXPECT_EQ(brute_force_topk(e, std::span<const float>(tie), 1).labels, (std::vector<std::size_t>{0}));
}

TEST(BruteForce, AgreesWithLinearScan) {
  auto x = test::gaussian_matrix(500, 12, 3);
  auto q = test::gaussian_matrix(50, 12, 4);
  for (std::size_t i = 0; i < q.n; ++i) {
    for (std::size_t k : {1u, 5u, 37u}) EXPECT_EQ(brute_force_topk(x, q.row(i), k).labels, scan_topk(x, q.row(i), k));
  }
}

TEST(Bench, ReportsPercentiles) {
  auto x = test::random_matrix(500, 16, 1);
  auto index = HnswIndex::build(x);
  auto q = test::random_matrix(10, 16, 2);
  auto rep = bench_query_latency(index, q, 5, 32, 1000);
  EXPECT_EQ(rep.queries, 1000u);
  EXPECT_LE(rep.p50_us, rep.p99_us);
  EXPECT_LE(rep.p99_us, rep.max_us);
  EXPECT_GT(rep.visited_total, 0u);
}
