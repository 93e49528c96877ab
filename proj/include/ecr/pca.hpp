#pragma once

// Principal component reduction used ahead of the retrieval index (768 -> 64
// in the reference deployment).
//
// PCA model file layout (little-endian), followed by a u64 FNV-1a checksum:
//
//   4      magic "ECRP"
//   u32    version (= 1)
//   u64    d (input dimension)
//   u64    r (output dimension)
//   u8     1 if the input had zero variance
//   d      f64 mean
//   d*r    f64 components, column-major (column j = j-th principal direction)
//   r      f64 explained variance (eigenvalues, non-increasing)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ecr/corpus.hpp"
#include "ecr/error.hpp"
#include "ecr/io.hpp"

namespace ecr {

struct PcaModel {
  std::size_t d = 0;
  std::size_t r = 0;
  std::vector<double> mean;
  std::vector<double> components;  // d x r, column-major
  std::vector<double> explained_variance;
  bool degenerate = false;  // every input row was identical

  std::span<const double> component(std::size_t j) const { return {components.data() + j * d, d}; }

  bool operator==(const PcaModel&) const = default;
};

enum class PcaSolver { Auto, Eigen, Subspace };

/// Dimension above which Auto switches from the dense eigensolver to subspace
/// iteration.
inline constexpr std::size_t kDensePcaLimit = 1024;

namespace detail {

inline Eigen::MatrixXd centered(const EmbeddingMatrix& x, const Eigen::VectorXd& mean) {
  Eigen::MatrixXd c(x.n, x.d);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t j = 0; j < x.d; ++j) c(i, j) = static_cast<double>(x.data[i * x.d + j]) - mean(j);
  }
  return c;
}

/// Flips each column so its largest-magnitude entry is positive.
inline void canonical_signs(Eigen::MatrixXd& v) {
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index arg = 0;
    v.col(j).cwiseAbs().maxCoeff(&arg);
    if (v(arg, j) < 0) v.col(j) *= -1.0;
  }
}

/// Block subspace iteration on the covariance, applied implicitly through the
/// centred data, followed by a Rayleigh-Ritz step.
inline void subspace_eigen(const Eigen::MatrixXd& xc, std::size_t r, std::uint64_t seed,
                           Eigen::MatrixXd& vectors, Eigen::VectorXd& values) {
  const auto d = xc.cols();
  const double scale = 1.0 / static_cast<double>(xc.rows() - 1);
  const auto block = static_cast<Eigen::Index>(std::min<std::size_t>(r + 10, static_cast<std::size_t>(d)));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd q(d, block);
  for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = normal(rng);
  q = Eigen::HouseholderQR<Eigen::MatrixXd>(q).householderQ() * Eigen::MatrixXd::Identity(d, block);
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(block);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> small;
  for (int iter = 0; iter < 500; ++iter) {
    Eigen::MatrixXd z = scale * (xc.transpose() * (xc * q));
    q = Eigen::HouseholderQR<Eigen::MatrixXd>(z).householderQ() * Eigen::MatrixXd::Identity(d, block);
    Eigen::MatrixXd t = scale * (q.transpose() * (xc.transpose() * (xc * q)));
    small.compute(t);
    Eigen::VectorXd ev = small.eigenvalues();
    double change = (ev - prev).cwiseAbs().maxCoeff();
    prev = ev;
    if (iter > 2 && change <= 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff())) break;
  }
  Eigen::MatrixXd ritz = q * small.eigenvectors();
  vectors = ritz.rowwise().reverse().leftCols(static_cast<Eigen::Index>(r));
  values = small.eigenvalues().reverse().head(static_cast<Eigen::Index>(r));
}

}  // namespace detail

/// Top-r principal directions of the centred rows of `x`, with the sample
/// covariance (denominator n - 1) eigenvalues as explained variance.
inline PcaModel fit_pca(const EmbeddingMatrix& x, std::size_t r, PcaSolver solver = PcaSolver::Auto,
                        std::uint64_t seed = 0) {
  if (x.n < 2) throw DomainError("retrieval", "PCA needs at least 2 rows");
  if (r == 0 || r > std::min(x.n, x.d)) {
    throw DomainError("retrieval", "PCA target dimension " + std::to_string(r) + " outside [1, " +
                                       std::to_string(std::min(x.n, x.d)) + "]");
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(x.d));
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t j = 0; j < x.d; ++j) mean(j) += x.data[i * x.d + j];
  }
  mean /= static_cast<double>(x.n);
  Eigen::MatrixXd xc = detail::centered(x, mean);

  PcaModel model;
  model.d = x.d;
  model.r = r;
  model.mean.assign(mean.data(), mean.data() + mean.size());

  if (xc.cwiseAbs().maxCoeff() == 0.0) {
    // Zero variance: any orthonormal basis is principal; use the identity.
    model.degenerate = true;
    model.components.assign(x.d * r, 0.0);
    for (std::size_t j = 0; j < r; ++j) model.components[j * x.d + j] = 1.0;
    model.explained_variance.assign(r, 0.0);
    return model;
  }

  if (solver == PcaSolver::Auto) solver = x.d <= kDensePcaLimit ? PcaSolver::Eigen : PcaSolver::Subspace;
  Eigen::MatrixXd vectors;
  Eigen::VectorXd values;
  if (solver == PcaSolver::Eigen) {
    Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(x.n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw Error("retrieval", "covariance eigendecomposition failed");
    vectors = es.eigenvectors().rowwise().reverse().leftCols(static_cast<Eigen::Index>(r));
    values = es.eigenvalues().reverse().head(static_cast<Eigen::Index>(r));
  } else {
    detail::subspace_eigen(xc, r, seed, vectors, values);
  }
  detail::canonical_signs(vectors);
  model.components.assign(vectors.data(), vectors.data() + vectors.size());
  model.explained_variance.resize(r);
  for (std::size_t j = 0; j < r; ++j) {
    // Round-off can leave tiny negative eigenvalues for rank-deficient data.
    model.explained_variance[j] = std::max(0.0, values(static_cast<Eigen::Index>(j)));
  }
  return model;
}

/// components^T (v - mean).
template <std::floating_point T>
std::vector<double> pca_project(const PcaModel& model, std::span<const T> v) {
  if (v.size() != model.d) {
    throw DimensionError("retrieval", "PCA input has d=" + std::to_string(v.size()) + ", model expects " +
                                          std::to_string(model.d));
  }
  std::vector<double> out(model.r, 0.0);
  for (std::size_t j = 0; j < model.r; ++j) {
    const double* c = model.components.data() + j * model.d;
    double acc = 0.0;
    for (std::size_t i = 0; i < model.d; ++i) acc += c[i] * (static_cast<double>(v[i]) - model.mean[i]);
    out[j] = acc;
  }
  return out;
}

/// mean + components * y.
inline std::vector<double> pca_reconstruct(const PcaModel& model, std::span<const double> y) {
  if (y.size() != model.r) throw DimensionError("retrieval", "reduced vector has wrong dimension");
  std::vector<double> out(model.mean);
  for (std::size_t j = 0; j < model.r; ++j) {
    const double* c = model.components.data() + j * model.d;
    for (std::size_t i = 0; i < model.d; ++i) out[i] += c[i] * y[j];
  }
  return out;
}

/// Reduces every row; ids are carried over.
inline EmbeddingMatrix pca_transform(const PcaModel& model, const EmbeddingMatrix& x) {
  EmbeddingMatrix out(x.n, model.r);
  out.ids = x.ids;
  for (std::size_t i = 0; i < x.n; ++i) {
    auto y = pca_project(model, x.row(i));
    std::copy(y.begin(), y.end(), out.mutable_row(i).begin());
  }
  return out;
}

inline constexpr std::string_view kPcaMagic = "ECRP";
inline constexpr std::uint32_t kPcaVersion = 1;

inline std::string serialize_pca(const PcaModel& m) {
  io::ByteWriter w;
  w.put_bytes(kPcaMagic);
  w.put(kPcaVersion);
  w.put(static_cast<std::uint64_t>(m.d));
  w.put(static_cast<std::uint64_t>(m.r));
  w.put(static_cast<std::uint8_t>(m.degenerate ? 1 : 0));
  for (double v : m.mean) w.put(v);
  for (double v : m.components) w.put(v);
  for (double v : m.explained_variance) w.put(v);
  return io::seal(w.take());
}

inline PcaModel parse_pca(std::string_view bytes) {
  if (bytes.size() >= 4 && bytes.substr(0, 4) != kPcaMagic) {
    throw FormatError("retrieval", "not a PCA model file (bad magic)");
  }
  io::ByteReader r(io::unseal(bytes, "retrieval"), "retrieval");
  r.get_bytes(4);
  if (auto v = r.get<std::uint32_t>(); v != kPcaVersion) {
    throw FormatError("retrieval", "unsupported PCA model version " + std::to_string(v));
  }
  PcaModel m;
  m.d = r.get<std::uint64_t>();
  m.r = r.get<std::uint64_t>();
  m.degenerate = r.get<std::uint8_t>() != 0;
  if ((m.d + m.d * m.r + m.r) * 8 != r.remaining()) throw FormatError("retrieval", "PCA model size mismatch");
  m.mean.resize(m.d);
  for (auto& v : m.mean) v = r.get<double>();
  m.components.resize(m.d * m.r);
  for (auto& v : m.components) v = r.get<double>();
  m.explained_variance.resize(m.r);
  for (auto& v : m.explained_variance) v = r.get<double>();
  return m;
}

inline PcaModel load_pca(const std::filesystem::path& path) {
  return parse_pca(io::read_file(path, "retrieval"));
}

inline void save_pca(const PcaModel& m, const std::filesystem::path& path) {
  io::atomic_write(path, serialize_pca(m), "retrieval");
}

}  // namespace ecr
