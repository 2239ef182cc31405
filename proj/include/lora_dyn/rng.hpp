// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include <Eigen/Core>
#include <boost/random/normal_distribution.hpp>

namespace lora_dyn {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator: the n-th output is splitmix64(key + n * golden),
/// a pure function of (key, n). Satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  Rng() = default;
  explicit Rng(std::uint64_t key) : key_(key) {}

  result_type operator()() {
    ++counter_;
    return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }
  /// Jump ahead n draws in O(1).
  void discard(std::uint64_t n) { counter_ += n; }
  std::uint64_t key() const { return key_; }
  /// Number of draws consumed so far.
  std::uint64_t position() const { return counter_; }

  bool operator==(const Rng&) const = default;

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Derives an independent generator from (root seed, stream name, index).
/// Every random draw in the library goes through a named stream so that
/// results depend only on the root seed and never on scheduling.
inline Rng make_stream(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  std::uint64_t s = detail::splitmix64(root);
  s = detail::splitmix64(s ^ detail::fnv1a(name));
  s = detail::splitmix64(s ^ index);
  return Rng(s);
}

inline double standard_normal(Rng& rng) {
  boost::random::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

inline Eigen::VectorXd gaussian_vector(Rng& rng, Eigen::Index d) {
  boost::random::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = n(rng);
  return v;
}

inline void fill_gaussian(Rng& rng, Eigen::Ref<Eigen::VectorXd> v) {
  boost::random::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = n(rng);
}

inline Eigen::VectorXd uniform_sphere(Rng& rng, Eigen::Index d) {
  Eigen::VectorXd v = gaussian_vector(rng, d);
  double n = v.norm();
  while (n == 0.0) {
    v = gaussian_vector(rng, d);
    n = v.norm();
  }
  return v / n;
}

/// Uniform over {+-1/sqrt(k)}^k.
inline Eigen::VectorXd quantized_signs(Rng& rng, Eigen::Index k) {
  const double a = 1.0 / std::sqrt(static_cast<double>(k));
  Eigen::VectorXd c(k);
  for (Eigen::Index i = 0; i < k; ++i) c[i] = (rng() >> 63) ? a : -a;
  return c;
}

}  // namespace lora_dyn
