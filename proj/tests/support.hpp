#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "ecr/anchors.hpp"
#include "ecr/corpus.hpp"

namespace ecr::test {

inline EmbeddingMatrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed, float lo = -1.0f,
                                     float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  EmbeddingMatrix m(n, d);
  for (auto& v : m.data) v = u(rng);
  return m;
}

inline EmbeddingMatrix gaussian_matrix(std::size_t n, std::size_t d, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sd);
  EmbeddingMatrix m(n, d);
  for (auto& v : m.data) v = static_cast<float>(g(rng));
  return m;
}

/// Anchor set with Gaussian anchors; `layout` lists (factor, count) pairs.
inline AnchorSet random_anchor_set(std::vector<std::pair<Factor, std::size_t>> layout, std::size_t d,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<FactorGroup> groups;
  for (auto [f, k] : layout) {
    FactorGroup grp;
    grp.factor = f;
    grp.count = k;
    grp.anchors.resize(k * d);
    for (auto& v : grp.anchors) v = g(rng);
    groups.push_back(std::move(grp));
  }
  return AnchorSet(d, std::move(groups), {AnchorMode::KMeans, seed});
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("ecr_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace ecr::test
