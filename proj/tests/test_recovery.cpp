// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "lora_dyn/recovery.hpp"
#include "test_util.hpp"

using namespace lora_dyn;
using lora_dyn::testing::direction_with_overlap;
using lora_dyn::testing::random_teacher;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST(FeatureMap, SingleNeuronMirror) {
  Rng rng = make_stream(1, "fm");
  const MatrixXd W = make_orthonormal_weights(1, 6, rng);
  VectorXd u = gaussian_vector(rng, 6);
  u -= u.dot(W.row(0).transpose()) * W.row(0).transpose();
  u.normalize();
  const FeatureMap fm = build_feature_map(W, u, 1.5, make_activation("relu"));
  ASSERT_EQ(fm.features(), 2);
  const VectorXd a = fm.directions.row(0).transpose();
  const VectorXd b = fm.directions.row(1).transpose();
  const VectorXd w = W.row(0).transpose();
  // Reflection across w maps one direction onto the other.
  const VectorXd reflected = 2.0 * a.dot(w) * w - a;
  EXPECT_LE((reflected - b).norm(), 1e-14);
  EXPECT_NEAR(a.dot(w), b.dot(w), 1e-15);
}

TEST(FeatureMap, UnitNormsAndZeroScale) {
  const TeacherModel t = random_teacher(6, 24, 2.0, make_activation("tanh"), 2);
  const FeatureMap fm = build_feature_map(t.base.W, t.pert.u, 2.0, t.base.activation);
  for (Eigen::Index j = 0; j < fm.features(); ++j) EXPECT_NEAR(fm.directions.row(j).norm(), 1.0, 1e-12);
  const FeatureMap f0 = build_feature_map(t.base.W, t.pert.u, 0.0, t.base.activation);
  for (Eigen::Index i = 0; i < 6; ++i) {
    EXPECT_EQ(f0.directions.row(2 * i), t.base.W.row(i));
    EXPECT_EQ(f0.directions.row(2 * i + 1), t.base.W.row(i));
  }
  EXPECT_THROW(build_feature_map(t.base.W, 2.0 * t.pert.u, 1.0, t.base.activation), ConfigError);
}

TEST(FeatureMap, QuantizationGrid) {
  const TeacherModel t = random_teacher(3, 12, 1.0, make_activation("relu"), 3);
  const FeatureMap fm = build_feature_map(t.base.W, t.pert.u, 1.0, t.base.activation, 4);
  EXPECT_EQ(fm.features(), 3 * 8);
  for (Eigen::Index j = 0; j < fm.features(); ++j) EXPECT_NEAR(fm.directions.row(j).norm(), 1.0, 1e-12);
}

TEST(FitSecondLayer, RealizableFamilyMember) {
  const Eigen::Index k = 4;
  const TeacherModel t = random_teacher(k, 16, 1.0, make_activation("relu"), 4);
  Rng rng = make_stream(5, "fit");
  const VectorXd uh = direction_with_overlap(t, 0.6, rng);
  const FeatureMap fm = build_feature_map(t.base.W, uh, 1.0, t.base.activation);
  const VectorXd lam = gaussian_vector(rng, 2 * k);
  const Eigen::Index N = 4 * k;
  MatrixXd X(16, N);
  VectorXd y(N);
  for (Eigen::Index n = 0; n < N; ++n) {
    X.col(n) = gaussian_vector(rng, 16);
    y[n] = recovered_forward(fm, lam, X.col(n));
  }
  const SecondLayerFit fit = fit_second_layer(fm, X, y, 0.0);
  EXPECT_LE(fit.residual_rms, 1e-10);
  EXPECT_LE((fit.lambda_hat - lam).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(fit.rank, 2 * k);
}

TEST(FitSecondLayer, RankDeficiencyAndPreconditions) {
  const TeacherModel t = random_teacher(3, 12, 1.0, make_activation("relu"), 6);
  const FeatureMap f0 = build_feature_map(t.base.W, t.pert.u, 0.0, t.base.activation);
  MatrixXd X;
  VectorXd y;
  sample_labels(t, 100, 7, "labels", X, y);
  EXPECT_THROW(fit_second_layer(f0, X, y, 0.0), NumericalError);
  const SecondLayerFit ridge = fit_second_layer(f0, X, y, kDefaultRidge);
  EXPECT_TRUE(ridge.lambda_hat.allFinite());
  EXPECT_THROW(fit_second_layer(f0, X.leftCols(5), y.head(5), 0.0), ConfigError);
}

TEST(ExtractC, Examples) {
  VectorXd lam(4);
  lam << 1.0, 0.0, 0.5, 0.5;
  const ExtractedSigns e = extract_c(lam);
  EXPECT_DOUBLE_EQ(e.c[0], 1.0 / std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(e.c[1], 1.0 / std::sqrt(2.0));  // tie goes to +
  ASSERT_EQ(e.ambiguous.size(), 1u);
  EXPECT_EQ(e.ambiguous[0], 1);
  lam << 0.0, 2.0, 0.3, 0.1;
  const ExtractedSigns f = extract_c(lam);
  EXPECT_LT(f.c[0], 0.0);
  EXPECT_GT(f.c[1], 0.0);
  EXPECT_TRUE(f.ambiguous.empty());
  EXPECT_THROW(extract_c(VectorXd::Ones(3)), ConfigError);
}

TEST(Recovery, ExactDirectionSanity) {
  const Eigen::Index k = 16;
  const TeacherModel t = random_teacher(k, 64, 1.0, make_activation("relu"), 8);
  const FeatureMap fm = build_feature_map(t.base.W, t.pert.u, 1.0, t.base.activation);
  MatrixXd X;
  VectorXd y;
  sample_labels(t, 50000, 9, "labels", X, y);
  const SecondLayerFit fit = fit_second_layer(fm, X, y, 0.0);
  const Moments err = mc_recovery_error(t, fm, fit.lambda_hat, 20000, 10);
  const double scale = y.squaredNorm() / static_cast<double>(y.size());
  EXPECT_LE(err.mean(), 1e-6 * scale);
  const ExtractedSigns e = extract_c(fit.lambda_hat);
  EXPECT_EQ(sign_agreement(e.c, t.pert.c), k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index wrong = t.pert.c[i] > 0 ? 2 * i + 1 : 2 * i;
    EXPECT_LE(std::abs(fit.lambda_hat[wrong]), 1e-3);
  }
}

TEST(Recovery, ErrorShrinksWithOverlap) {
  const Eigen::Index k = 8;
  const TeacherModel t = random_teacher(k, 32, 1.0, make_activation("relu"), 11);
  MatrixXd X;
  VectorXd y;
  sample_labels(t, 20000, 12, "labels", X, y);
  double prev = std::numeric_limits<double>::infinity();
  for (double gap : {0.3, 0.1, 0.03, 0.01, 0.003}) {
    Rng rng = make_stream(13, "direction");  // same orthogonal component each time
    const VectorXd uh = direction_with_overlap(t, 1.0 - gap, rng);
    const FeatureMap fm = build_feature_map(t.base.W, uh, 1.0, t.base.activation);
    const SecondLayerFit fit = fit_second_layer(fm, X, y);
    const double err = mc_recovery_error(t, fm, fit.lambda_hat, 20000, 14).mean();
    EXPECT_LE(err, prev) << gap;
    prev = err;
  }
}
