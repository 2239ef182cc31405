// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "lora_dyn/network.hpp"

using namespace lora_dyn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double max_abs(const MatrixXd& A) { return A.cwiseAbs().maxCoeff(); }

MatrixXd normalized_rows(MatrixXd V) {
  for (Eigen::Index i = 0; i < V.rows(); ++i) V.row(i).normalize();
  return V;
}

}  // namespace

TEST(Orthonormal, Examples) {
  Rng r1 = make_stream(1, "w");
  const MatrixXd W1 = make_orthonormal_weights(1, 1, r1);
  EXPECT_DOUBLE_EQ(std::abs(W1(0, 0)), 1.0);

  Rng a = make_stream(7, "w");
  Rng b = make_stream(7, "w");
  const MatrixXd Wa = make_orthonormal_weights(8, 64, a);
  const MatrixXd Wb = make_orthonormal_weights(8, 64, b);
  EXPECT_LE(max_abs(Wa * Wa.transpose() - MatrixXd::Identity(8, 8)), 1e-12);
  EXPECT_EQ(Wa, Wb);
  EXPECT_THROW(make_orthonormal_weights(5, 4, a), ConfigError);
}

TEST(Separated, Examples) {
  Rng r1 = make_stream(1, "w");
  const SeparatedWeights s2 = make_separated_weights(2, 500, r1);
  EXPECT_LE(s2.max_overlap, 1.0 - std::log(2.0) / std::sqrt(2.0));
  EXPECT_LE(s2.max_overlap, 0.51);

  Rng r3 = make_stream(3, "w");
  const SeparatedWeights s16 = make_separated_weights(16, 256, r3);
  EXPECT_EQ(s16.attempts, 1);
  EXPECT_LE(s16.max_overlap, separation_threshold(16));
  EXPECT_NO_THROW(validate_separated(s16.W));
  for (Eigen::Index i = 0; i < 16; ++i) EXPECT_NEAR(s16.W.row(i).norm(), 1.0, 1e-12);
  // Regression constant for this seed and stream layout.
  EXPECT_NEAR(s16.max_overlap, 0.1617602152706519, 1e-12);

  Rng r50 = make_stream(9, "w");
  MatrixXd W = make_orthonormal_weights(50, 50, r50);
  W.row(7) = W.row(3);
  EXPECT_THROW(validate_separated(W), ConfigError);
  Rng tight = make_stream(2, "w");
  EXPECT_THROW(make_separated_weights(50, 2, tight, 5), ConfigError);
}

TEST(Perturbation, QuantizedAndOrthogonal) {
  Rng rng = make_stream(4, "w");
  const MatrixXd W = make_orthonormal_weights(4, 12, rng);
  const Perturbation p = sample_perturbation(W, 1.0, rng);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(std::abs(p.c[i]), 0.5);
  EXPECT_LE((W * p.u).norm(), 1e-10);
  EXPECT_NEAR(p.u.norm(), 1.0, 1e-14);

  const Perturbation q = sample_perturbation(W, 1.0, rng, CMode::spherical);
  EXPECT_NEAR(q.c.norm(), 1.0, 1e-14);
  EXPECT_LE((W * q.u).norm(), 1e-10);

  const MatrixXd Wsq = make_orthonormal_weights(4, 4, rng);
  EXPECT_THROW(sample_perturbation(Wsq, 1.0, rng), ConfigError);
  EXPECT_NO_THROW(sample_perturbation(Wsq, 1.0, rng, CMode::quantized, false));
}

TEST(Perturbation, SignBalance) {
  Rng rng = make_stream(5, "balance");
  const MatrixXd W = make_orthonormal_weights(10, 12, rng);
  const int draws = 10000;
  VectorXd sums = VectorXd::Zero(10);
  for (int n = 0; n < draws; ++n) sums += sample_perturbation(W, 1.0, rng).c * std::sqrt(10.0);
  for (Eigen::Index i = 0; i < 10; ++i) EXPECT_LE(std::abs(sums[i] / draws), 4.0 / std::sqrt(draws)) << i;
}

TEST(Teacher, NormalizationAndForward) {
  Rng rng = make_stream(6, "teacher");
  const MatrixXd W = make_orthonormal_weights(5, 20, rng);
  BaseModel base{W, VectorXd::Ones(5), make_activation("identity")};
  base.validate();
  const Perturbation p = sample_perturbation(W, 1.7, rng);
  const TeacherModel t(base, p);
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_NEAR((W.row(i) + 1.7 * p.c[i] * p.u.transpose()).norm(), std::sqrt(1.0 + 1.7 * 1.7 / 5.0), 1e-14);
    EXPECT_NEAR(t.V.row(i).norm(), 1.0, 1e-12);
  }
  const VectorXd x = gaussian_vector(rng, 20);
  const VectorXd vsum = t.V.colwise().sum().transpose();
  EXPECT_NEAR(teacher_forward(t, x), vsum.dot(x), 1e-12);

  StudentState s;
  s.u_hat = p.u;
  s.c_hat = p.c;
  for (int n = 0; n < 20; ++n) {
    const VectorXd z = gaussian_vector(rng, 20);
    EXPECT_DOUBLE_EQ(teacher_forward(t, z), student_forward(base, s, 1.7, z));
  }
}

TEST(Teacher, QuadraticHandInstance) {
  // k = 2, d = 3, sigma(z) = z^2, unnormalized neurons.
  BaseModel base{MatrixXd::Zero(2, 3), VectorXd(2), make_activation("quadratic")};
  base.W << 1, 0, 0, 0, 1, 0;
  base.lambda << 2.0, -1.0;
  Perturbation p;
  p.xi = 0.5;
  p.c = VectorXd(2);
  p.c << 1.0, -1.0;
  p.u = VectorXd(3);
  p.u << 0, 0, 1;
  NeuronConvention none;
  none.scaling = NeuronScaling::none;
  const TeacherModel t(base, p, none);
  VectorXd x(3);
  x << 1.0, 2.0, 4.0;
  // v1 = (1,0,0.5), v2 = (0,1,-0.5): 2*(1+2)^2 - (2-2)^2 = 18
  EXPECT_DOUBLE_EQ(teacher_forward(t, x), 18.0);
  // Normalized: scale^2 = 1/(1 + 0.25/2) = 8/9, so 18 * 8/9 = 16.
  const TeacherModel tn(base, p);
  EXPECT_NEAR(teacher_forward(tn, x), 16.0, 1e-13);
  NeuronConvention fig;
  fig.scaling = NeuronScaling::squared;
  fig.output_over_xi = true;
  // (k/(k+xi^2))^2 = (2/2.25)^2, output / xi.
  EXPECT_NEAR(teacher_forward(TeacherModel(base, p, fig), x), 18.0 * std::pow(2.0 / 2.25, 2) / 0.5, 1e-12);
}

TEST(BaseModelValidation, Rejects) {
  BaseModel b{MatrixXd::Ones(2, 2), VectorXd::Ones(2), make_activation("identity")};
  EXPECT_THROW(b.validate(), ConfigError);
  b.W = MatrixXd::Identity(2, 2);
  b.lambda << 1.0, 0.0;
  EXPECT_THROW(b.validate(), ConfigError);
}

TEST(Hardness, ExplicitMatrixK4) {
  const HardnessInstance h = hardness_instance(4);
  EXPECT_EQ(h.d, 12);
  MatrixXd expected(4, 11);
  expected << 1, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0,
           1, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0,
           0, -1, 0, 1, 0, 1, 0, 0, 1, 0, 0,
           0, 0, 1, 0, -1, 1, 0, 0, 0, 1, 0;
  expected *= 0.5;
  EXPECT_EQ(h.W.leftCols(11), expected);
  EXPECT_TRUE(h.W.col(11).isZero(0.0));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(h.c[i], i % 2 == 0 ? -0.5 : 0.5);  // sign (-1)^i, 1-based
  EXPECT_EQ(h.u[11], 1.0);
}

TEST(Hardness, PerturbedGramIsIdentity) {
  for (Eigen::Index k = 2; k <= 12; ++k) {
    const HardnessInstance h = hardness_instance(k);
    EXPECT_EQ(h.d, 2 + k * (k + 1) / 2);
    EXPECT_TRUE((h.W * h.u).isZero(0.0)) << k;
    for (Eigen::Index i = 0; i < k; ++i) EXPECT_NEAR(h.W.row(i).norm(), 1.0, 1e-15);
    const MatrixXd V = normalized_rows(h.W + h.c * h.u.transpose());
    EXPECT_LE(max_abs(V * V.transpose() - MatrixXd::Identity(k, k)), 1e-12) << k;
    // The library's normalized convention yields the same unit neurons.
    BaseModel base{h.W, VectorXd::Ones(k), make_activation("he3")};
    Perturbation p{1.0, std::nullopt, h.c, h.u};
    const TeacherModel t(base, p);
    EXPECT_LE(max_abs(t.V * t.V.transpose() - MatrixXd::Identity(k, k)), 1e-12) << k;
  }
  const HardnessInstance h2 = hardness_instance(2);
  EXPECT_DOUBLE_EQ(h2.W.row(0).dot(h2.W.row(1)), 0.5);
  EXPECT_DOUBLE_EQ(-h2.c[0] * h2.c[1], 0.5);
  EXPECT_THROW(hardness_instance(1), ConfigError);
}

TEST(GlobalOptima, Example) {
  const GlobalOptimaExample ex = global_optima_example();
  EXPECT_DOUBLE_EQ(ex.teacher_a.pert.c.norm(), ex.teacher_b.pert.c.norm());
  Rng rng = make_stream(1, "global-optima");
  for (int n = 0; n < 1000; ++n) {
    const VectorXd x = gaussian_vector(rng, 2);
    const double fa = teacher_forward(ex.teacher_a, x);
    EXPECT_NEAR(fa, teacher_forward(ex.teacher_b, x), 1e-9 * std::max(1.0, std::abs(fa)));
  }
  const MatrixXd& A = ex.teacher_a.V;
  const MatrixXd& B = ex.teacher_b.V;
  const double same = std::max((A.row(0) - B.row(0)).norm(), (A.row(1) - B.row(1)).norm());
  const double swapped = std::max((A.row(0) - B.row(1)).norm(), (A.row(1) - B.row(0)).norm());
  EXPECT_GT(std::min(same, swapped), 0.1);
}

TEST(Projector, RankAndProjection) {
  Rng rng = make_stream(3, "proj");
  MatrixXd W = make_orthonormal_weights(3, 10, rng);
  MatrixXd W4(4, 10);
  W4 << W, W.row(0) + W.row(1);
  const SubspaceProjector P(W4);
  EXPECT_EQ(P.rank(), 3);
  const VectorXd v = gaussian_vector(rng, 10);
  EXPECT_LE((W * P.project_out(v)).norm(), 1e-13);
}
