#pragma once

// Small dense-vector kernels shared by every module. Accumulation is always in
// double regardless of the element type.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <vector>

#include "ecr/error.hpp"

namespace ecr {

template <std::floating_point A, std::floating_point B>
double dot(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

template <std::floating_point T>
double l2_norm(std::span<const T> v) {
  return std::sqrt(dot(v, v));
}

template <std::floating_point A, std::floating_point B>
double squared_distance(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return acc;
}

template <std::floating_point A, std::floating_point B>
double euclidean_distance(std::span<const A> a, std::span<const B> b) {
  return std::sqrt(squared_distance(a, b));
}

/// Unit vector in the direction of `v`. Throws DomainError for a zero or
/// non-finite norm.
template <std::floating_point T>
std::vector<T> normalize(std::span<const T> v) {
  double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw DomainError("corpus", "cannot normalize a vector with norm " + std::to_string(n));
  }
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<T>(static_cast<double>(v[i]) / n);
  }
  return out;
}

template <std::floating_point T>
std::vector<T> normalize(const std::vector<T>& v) {
  return normalize(std::span<const T>(v));
}

template <std::floating_point A, std::floating_point B>
double cosine(std::span<const A> a, std::span<const B> b) {
  double na = l2_norm(a);
  double nb = l2_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DomainError("corpus", "cosine of a zero vector is undefined");
  }
  return dot(a, b) / (na * nb);
}

}  // namespace ecr
