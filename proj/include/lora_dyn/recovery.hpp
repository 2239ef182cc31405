// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Recovering c and the full teacher from a learned u_hat: second-layer least
// squares on the 2k features sigma(<(w_i +- (xi/sqrt k) u_hat)/sqrt(1+xi^2/k), x>).

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>

#include "lora_dyn/errors.hpp"
#include "lora_dyn/hermite.hpp"
#include "lora_dyn/network.hpp"
#include "lora_dyn/stats.hpp"

namespace lora_dyn {

struct FeatureMap {
  Eigen::MatrixXd directions;  // rows; pair i occupies rows [i*g2, (i+1)*g2)
  Activation activation;
  double xi = 0.0;
  int grid = 0;  // 0: the +-1/sqrt(k) pair; g > 0: levels +-j/g, j = 1..g
  Eigen::Index k = 0;

  Eigen::Index features() const { return directions.rows(); }
  Eigen::Index per_neuron() const { return grid == 0 ? 2 : 2 * grid; }

  void evaluate(const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> out) const {
    const Eigen::VectorXd a = directions * x;
    for (Eigen::Index j = 0; j < a.size(); ++j) out[j] = activation(a[j]);
  }
};

/// 2k feature directions (w_i + (xi/sqrt k) u_hat)/sqrt(1+xi^2/k) and
/// (w_i - (xi/sqrt k) u_hat)/sqrt(1+xi^2/k), in that order per i. With a
/// quantization grid g > 0, levels t in {+-j/g} give (w_i + xi t u_hat)/sqrt(1+xi^2 t^2).
inline FeatureMap build_feature_map(const Eigen::MatrixXd& W, const Eigen::VectorXd& u_hat, double xi,
                                    const Activation& activation, int grid = 0) {
  if (std::abs(u_hat.norm() - 1.0) > 1e-10) throw ConfigError("build_feature_map: u_hat must be unit norm");
  if (grid < 0) throw ConfigError("build_feature_map: grid must be >= 0");
  const Eigen::Index k = W.rows();
  FeatureMap fm{Eigen::MatrixXd(), activation, xi, grid, k};
  std::vector<double> levels;
  if (grid == 0) {
    const double a = 1.0 / std::sqrt(static_cast<double>(k));
    levels = {a, -a};
  } else {
    for (int j = 1; j <= grid; ++j) {
      levels.push_back(static_cast<double>(j) / grid);
      levels.push_back(-static_cast<double>(j) / grid);
    }
  }
  const Eigen::Index L = static_cast<Eigen::Index>(levels.size());
  fm.directions.resize(k * L, W.cols());
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index l = 0; l < L; ++l) {
      const double t = levels[static_cast<std::size_t>(l)];
      fm.directions.row(i * L + l) = (W.row(i) + xi * t * u_hat.transpose()) / std::sqrt(1.0 + xi * xi * t * t);
    }
  }
  return fm;
}

struct SecondLayerFit {
  Eigen::VectorXd lambda_hat;
  double residual_rms = 0.0;
  Eigen::Index rank = 0;
  double ridge_used = 0.0;
};

inline Eigen::MatrixXd feature_matrix(const FeatureMap& fm, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Phi(X.cols(), fm.features());
  Eigen::VectorXd row(fm.features());
  for (Eigen::Index n = 0; n < X.cols(); ++n) {
    fm.evaluate(X.col(n), row);
    Phi.row(n) = row.transpose();
  }
  return Phi;
}

inline constexpr double kDefaultRidge = 1e-8;

/// Least squares of y on the features of the columns of X. ridge = 0 uses a
/// rank-revealing QR of the design; ridge > 0 solves
/// (Phi^T Phi + ridge * tr(Phi^T Phi)/F * I) lambda = Phi^T y.
inline SecondLayerFit fit_second_layer(const FeatureMap& fm, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                       double ridge = kDefaultRidge) {
  const Eigen::Index F = fm.features();
  if (X.cols() != y.size()) throw ConfigError("fit_second_layer: X and y disagree");
  if (X.cols() < F) throw ConfigError("fit_second_layer: need at least as many samples as features");
  if (!(ridge >= 0.0)) throw ConfigError("fit_second_layer: ridge must be >= 0");
  const Eigen::MatrixXd Phi = feature_matrix(fm, X);
  SecondLayerFit fit;
  if (ridge == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Phi);
    fit.rank = qr.rank();
    if (fit.rank < F) {
      throw NumericalError("fit_second_layer: design is rank deficient (rank " + std::to_string(fit.rank) +
                           " < " + std::to_string(F) + ")");
    }
    fit.lambda_hat = qr.solve(y);
  } else {
    Eigen::MatrixXd A = Phi.transpose() * Phi;
    fit.ridge_used = ridge * A.trace() / static_cast<double>(F);
    A.diagonal().array() += fit.ridge_used;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
      throw NumericalError("fit_second_layer: normal system singular beyond ridge");
    }
    fit.lambda_hat = ldlt.solve(Phi.transpose() * y);
    fit.rank = F;
  }
  fit.residual_rms = std::sqrt((Phi * fit.lambda_hat - y).squaredNorm() / static_cast<double>(y.size()));
  return fit;
}

inline double recovered_forward(const FeatureMap& fm, const Eigen::VectorXd& lambda_hat, const Eigen::VectorXd& x) {
  Eigen::VectorXd phi(fm.features());
  fm.evaluate(x, phi);
  return lambda_hat.dot(phi);
}

struct ExtractedSigns {
  Eigen::VectorXd c;               // +-1/sqrt k
  std::vector<Eigen::Index> ambiguous;
};

/// For each i, +1/sqrt k when |lambda_hat_{i,+}| >= |lambda_hat_{i,-}|, else
/// -1/sqrt k; index i is flagged when the masses differ by less than 1e-9.
inline ExtractedSigns extract_c(const Eigen::VectorXd& lambda_hat, double ambiguity_tol = 1e-9) {
  if (lambda_hat.size() % 2 != 0 || lambda_hat.size() == 0) {
    throw ConfigError("extract_c: lambda_hat must hold k (+,-) pairs");
  }
  const Eigen::Index k = lambda_hat.size() / 2;
  const double a = 1.0 / std::sqrt(static_cast<double>(k));
  ExtractedSigns out;
  out.c.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double plus = std::abs(lambda_hat[2 * i]);
    const double minus = std::abs(lambda_hat[2 * i + 1]);
    out.c[i] = plus >= minus ? a : -a;
    if (std::abs(plus - minus) < ambiguity_tol) out.ambiguous.push_back(i);
  }
  return out;
}

/// Number of coordinates where sign(c_est) = sign(c_true).
inline Eigen::Index sign_agreement(const Eigen::VectorXd& c_est, const Eigen::VectorXd& c_true) {
  Eigen::Index n = 0;
  for (Eigen::Index i = 0; i < c_est.size(); ++i) n += (c_est[i] > 0) == (c_true[i] > 0);
  return n;
}

/// Monte Carlo E[(f*(x) - f_rec(x))^2].
inline Moments mc_recovery_error(const TeacherModel& teacher, const FeatureMap& fm, const Eigen::VectorXd& lambda_hat,
                                 std::int64_t N, std::uint64_t seed) {
  const Eigen::Index d = teacher.d();
  auto body = [&](std::int64_t, Rng& rng, std::int64_t count) {
    Moments acc;
    Eigen::VectorXd x(d);
    Eigen::VectorXd phi(fm.features());
    for (std::int64_t n = 0; n < count; ++n) {
      fill_gaussian(rng, x);
      fm.evaluate(x, phi);
      const double r = teacher_forward(teacher, x) - lambda_hat.dot(phi);
      acc.add(r * r);
    }
    return acc;
  };
  return block_monte_carlo<Moments>(N, seed, "recovery-error", body);
}

/// Samples (X, f*(X)) with X columns from the stream (seed, name).
inline void sample_labels(const TeacherModel& teacher, std::int64_t N, std::uint64_t seed, const std::string& name,
                          Eigen::MatrixXd& X, Eigen::VectorXd& y) {
  Rng rng = make_stream(seed, name);
  X.resize(teacher.d(), N);
  y.resize(N);
  for (std::int64_t n = 0; n < N; ++n) {
    fill_gaussian(rng, X.col(n));
    y[n] = teacher_forward(teacher, X.col(n));
  }
}

}  // namespace lora_dyn
