// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Streaming moments, Wilson intervals, and deterministic block-parallel
// Monte Carlo.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "lora_dyn/rng.hpp"

namespace lora_dyn {

/// Welford mean/variance of vector-valued samples, mergeable (Chan et al.).
class VectorMoments {
 public:
  VectorMoments() = default;
  explicit VectorMoments(Eigen::Index dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}

  void add(const Eigen::VectorXd& x) {
    if (mean_.size() == 0) *this = VectorMoments(x.size());
    ++n_;
    const Eigen::VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_.array() += delta.array() * (x - mean_).array();
  }

  void merge(const VectorMoments& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(n_ + o.n_);
    const Eigen::VectorXd delta = o.mean_ - mean_;
    mean_ += delta * (static_cast<double>(o.n_) / n);
    m2_ += o.m2_ + delta.cwiseProduct(delta) * (static_cast<double>(n_) * static_cast<double>(o.n_) / n);
    n_ += o.n_;
  }

  std::int64_t count() const { return n_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  Eigen::VectorXd variance() const {
    return n_ > 1 ? Eigen::VectorXd(m2_ / static_cast<double>(n_ - 1)) : Eigen::VectorXd::Zero(mean_.size());
  }
  /// Standard error of the mean, per coordinate.
  Eigen::VectorXd std_error() const {
    return n_ > 1 ? Eigen::VectorXd((variance() / static_cast<double>(n_)).cwiseSqrt())
                  : Eigen::VectorXd::Zero(mean_.size());
  }

 private:
  std::int64_t n_ = 0;
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
};

/// Scalar version.
class Moments {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }
  void merge(const Moments& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(n_ + o.n_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * static_cast<double>(o.n_) / n;
    m2_ += o.m2_ + delta * delta * static_cast<double>(n_) * static_cast<double>(o.n_) / n;
    n_ += o.n_;
  }
  std::int64_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double std_error() const { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }

 private:
  std::int64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for a binomial proportion (z = 1.96 is ~95%).
inline Interval wilson_interval(std::int64_t successes, std::int64_t trials, double z = 1.959963984540054) {
  if (trials <= 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

/// Number of worker lanes; LORA_DYN_THREADS overrides the hardware count.
inline unsigned worker_lanes() {
  if (const char* env = std::getenv("LORA_DYN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(block_index, rng, count) over ceil(N / block) blocks, each with
/// its own stream (root, name, block_index), and merges the per-block
/// accumulators in block order. The result does not depend on the lane count.
template <class Acc, class Body>
Acc block_monte_carlo(std::int64_t N, std::uint64_t root, const std::string& name, Body body,
                      std::int64_t block = 4096, unsigned lanes = 0) {
  const std::int64_t blocks = (N + block - 1) / block;
  std::vector<Acc> parts(static_cast<std::size_t>(blocks));
  auto run = [&](std::int64_t b) {
    Rng rng = make_stream(root, name, static_cast<std::uint64_t>(b));
    const std::int64_t count = std::min(block, N - b * block);
    parts[static_cast<std::size_t>(b)] = body(b, rng, count);
  };
  if (lanes == 0) lanes = worker_lanes();
  lanes = static_cast<unsigned>(std::min<std::int64_t>(lanes, std::max<std::int64_t>(blocks, 1)));
  if (lanes <= 1) {
    for (std::int64_t b = 0; b < blocks; ++b) run(b);
  } else {
    std::vector<std::thread> pool;
    for (unsigned l = 0; l < lanes; ++l) {
      pool.emplace_back([&, l] {
        for (std::int64_t b = l; b < blocks; b += lanes) run(b);
      });
    }
    for (auto& t : pool) t.join();
  }
  Acc total;
  for (const Acc& p : parts) total.merge(p);
  return total;
}

}  // namespace lora_dyn
