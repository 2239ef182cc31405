// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "lora_dyn/dynamics.hpp"
#include "test_util.hpp"

using namespace lora_dyn;
using lora_dyn::testing::direction_with_overlap;
using lora_dyn::testing::random_teacher;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double sample_loss(const TeacherModel& t, const StudentState& s, const VectorXd& x) {
  const double r = teacher_forward(t, x) - student_forward(t.base, s, t.pert.xi, x, t.conv);
  return r * r;
}

}  // namespace

TEST(SampleGradient, ZeroAtOptimum) {
  const TeacherModel t = random_teacher(4, 16, 1.0, make_activation("relu"), 1);
  const StudentState s{t.pert.u, t.pert.c, true, 0};
  Rng rng = make_stream(2, "x");
  for (int n = 0; n < 50; ++n) {
    EXPECT_TRUE(sample_spherical_gradient(t, s, gaussian_vector(rng, 16)).isZero(0.0));
  }
}

TEST(SampleGradient, ProjectedOrthogonality) {
  const TeacherModel t = random_teacher(5, 20, 1.5, make_activation("tanh"), 3);
  Rng rng = make_stream(4, "x");
  const StudentState s{direction_with_overlap(t, 0.3, rng), quantized_signs(rng, 5), true, 0};
  for (int n = 0; n < 50; ++n) {
    const VectorXd g = sample_spherical_gradient(t, s, gaussian_vector(rng, 20));
    EXPECT_LE(std::abs(g.dot(s.u_hat)), 1e-10);
    EXPECT_LE((t.base.W * g).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(SampleGradient, FiniteDifference) {
  const TeacherModel t = random_teacher(4, 12, 1.2, make_activation("tanh"), 5);
  Rng rng = make_stream(6, "fd");
  const StudentState s{direction_with_overlap(t, -0.2, rng), quantized_signs(rng, 4), true, 0};
  const GradientEvaluator ev(t, true);
  const SubspaceProjector proj(t.base.W);
  for (int n = 0; n < 10; ++n) {
    const VectorXd x = gaussian_vector(rng, 12);
    SampleGradient g;
    ev.evaluate(s, x, g, true);
    EXPECT_NEAR(g.loss, sample_loss(t, s, x), 1e-13);
    VectorXd e = proj.project_out(gaussian_vector(rng, 12));
    e -= e.dot(s.u_hat) * s.u_hat;
    e.normalize();
    const double h = 1e-6;
    StudentState a = s, b = s;
    a.u_hat = (s.u_hat + h * e).normalized();
    b.u_hat = (s.u_hat - h * e).normalized();
    const double fd = (sample_loss(t, a, x) - sample_loss(t, b, x)) / (2 * h);
    EXPECT_NEAR(g.u_grad.dot(e), fd, 1e-6 * std::max(1.0, std::abs(fd)));

    VectorXd ec = gaussian_vector(rng, 4);
    ec -= ec.dot(s.c_hat) * s.c_hat / s.c_hat.squaredNorm();
    ec.normalize();
    a = s;
    b = s;
    a.c_hat = (s.c_hat + h * ec).normalized();
    b.c_hat = (s.c_hat - h * ec).normalized();
    const double fdc = (sample_loss(t, a, x) - sample_loss(t, b, x)) / (2 * h);
    EXPECT_NEAR(g.c_grad.dot(ec), fdc, 1e-6 * std::max(1.0, std::abs(fdc)));
    EXPECT_LE(std::abs(g.c_grad.dot(s.c_hat)), 1e-12);
  }
}

TEST(SampleGradient, UnbiasedAtRandomDirections) {
  const TeacherModel t = random_teacher(4, 16, 1.0, make_activation("relu"), 7);
  Rng rng = make_stream(8, "dirs");
  int outside = 0;
  int total = 0;
  for (int n = 0; n < 10; ++n) {
    const StudentState s{direction_with_overlap(t, -0.9 + 0.2 * n, rng), quantized_signs(rng, 4), true, 0};
    const PopulationParams p = make_population_params(t, s.c_hat);
    const VectorXd ref = population_gradient(p, t.pert.u, s.u_hat);
    const McGradient g = mc_population_gradient(t, s, 200000, 100 + n);
    for (Eigen::Index j = 0; j < 16; ++j) {
      if (g.std_error[j] == 0.0) continue;
      ++total;
      outside += std::abs(g.mean[j] - ref[j]) > 4.0 * g.std_error[j];
    }
    EXPECT_LE(std::abs(g.dot_u - ref.dot(t.pert.u)), 4.0 * g.dot_u_stderr) << n;
  }
  EXPECT_EQ(outside, 0) << "of " << total;
}

TEST(SgdStep, ZeroStepAndOptimumAreFixed) {
  const TeacherModel t = random_teacher(4, 16, 1.0, make_activation("relu"), 9);
  Rng rng = make_stream(10, "s");
  StudentState s{direction_with_overlap(t, 0.1, rng), quantized_signs(rng, 4), true, 0};
  const VectorXd before = s.u_hat;
  sgd_step(s, t, 0.0, rng);
  EXPECT_EQ(s.u_hat, before);
  EXPECT_EQ(s.t, 1);
  StudentState opt{t.pert.u, t.pert.c, true, 0};
  for (int n = 0; n < 20; ++n) sgd_step(opt, t, 0.5, rng);
  EXPECT_EQ(opt.u_hat, t.pert.u);
}

TEST(SgdStep, Deterministic) {
  const TeacherModel t = random_teacher(4, 16, 1.0, make_activation("sigmoid"), 11);
  Rng init = make_stream(12, "s");
  const StudentState s0{direction_with_overlap(t, 0.1, init), quantized_signs(init, 4), true, 0};
  StudentState a = s0, b = s0;
  Rng ra = make_stream(13, "data"), rb = make_stream(13, "data");
  for (int n = 0; n < 10; ++n) {
    sgd_step(a, t, 0.05, ra);
    sgd_step(b, t, 0.05, rb);
  }
  EXPECT_EQ(a.u_hat, b.u_hat);
}

TEST(SgdStep, NonFiniteStepThrows) {
  const TeacherModel t = random_teacher(4, 16, 1.0, make_activation("relu"), 14);
  Rng rng = make_stream(15, "s");
  StudentState s{direction_with_overlap(t, 0.1, rng), quantized_signs(rng, 4), true, 0};
  EXPECT_THROW(sgd_step(s, t, std::numeric_limits<double>::quiet_NaN(), rng), ConfigError);
  EXPECT_THROW(sgd_step(s, t, -1.0, rng), ConfigError);
}

TEST(SgdStep, RecursionIdentityAndNormalizer) {
  const TeacherModel t = random_teacher(6, 40, 1.0, make_activation("relu"), 16);
  Rng rng = make_stream(17, "s");
  StudentState s{direction_with_overlap(t, 0.05, rng), quantized_signs(rng, 6), true, 0};
  const GradientEvaluator ev(t, true);
  VectorXd x(40);
  SampleGradient g;
  const double eta = 0.02;
  for (int n = 0; n < 2000; ++n) {
    const double m = s.u_hat.dot(t.pert.u);
    const StepInfo info = sgd_step(s, ev, eta, rng, x, g);
    const double m_next = s.u_hat.dot(t.pert.u);
    EXPECT_NEAR(m_next, (m - eta * info.grad_along_u) / info.pi, 1e-12);
    EXPECT_GE(info.pi, 1.0 - 1e-15);
    EXPECT_NEAR(s.u_hat.norm(), 1.0, 1e-12);
    EXPECT_LE(std::abs(m_next), 1.0);
  }
}

TEST(RunOnlineSgd, SubspaceLeakStaysSmall) {
  const TeacherModel t = random_teacher(8, 64, 1.0, make_activation("relu"), 18);
  SGDConfig cfg;
  cfg.eta = 1e-3;
  cfg.T = 100000;
  cfg.seed = 19;
  cfg.log_stride = 10000;
  const TrajectoryRecord rec = run_online_sgd(t, cfg);
  EXPECT_LE(rec.max_span_leak, 1e-8);
  EXPECT_NEAR(rec.u_final.norm(), 1.0, 1e-12);
  EXPECT_GE(rec.min_pi, 1.0 - 1e-15);
  EXPECT_EQ(rec.rows.size(), 11u);
  EXPECT_EQ(rec.rows.back().t, cfg.T - 1);
}

TEST(RunOnlineSgd, ZeroPerturbationHasZeroLoss) {
  const TeacherModel t = random_teacher(4, 16, 0.0, make_activation("relu"), 20);
  SGDConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 500;
  cfg.seed = 21;
  cfg.log_stride = 1;
  const TrajectoryRecord rec = run_online_sgd(t, cfg);
  for (const auto& row : rec.rows) {
    EXPECT_EQ(row.loss_sample, 0.0);
    EXPECT_EQ(row.m, rec.m0);
  }
}

TEST(RunOnlineSgd, StoppingTimesOrdered) {
  const TeacherModel t = random_teacher(4, 32, 1.0, make_activation("relu"), 22);
  SGDConfig cfg;
  cfg.eta = 0.02;
  cfg.T = 20000;
  cfg.seed = 23;
  cfg.log_stride = 100;
  cfg.restart_on_sign = true;
  InitOptions init;
  init.c_hat0 = t.pert.c;  // well-specified: the residual vanishes at m = 1
  const TrajectoryRecord rec = run_online_sgd(t, cfg, init);
  ASSERT_GT(rec.final_m * rec.final_m, 0.9);
  ASSERT_NE(rec.tau_strong, kNever);
  EXPECT_LT(rec.tau_weak, rec.tau_strong);
  EXPECT_LT(rec.tau_strong, cfg.T);
}

TEST(RunOnlineSgd, SameSeedSameRecord) {
  const TeacherModel t = random_teacher(4, 16, 1.0, make_activation("tanh"), 24);
  SGDConfig cfg;
  cfg.eta = 0.05;
  cfg.T = 3000;
  cfg.seed = 25;
  cfg.log_stride = 7;
  const TrajectoryRecord a = run_online_sgd(t, cfg);
  const TrajectoryRecord b = run_online_sgd(t, cfg);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].m, b.rows[i].m);
    EXPECT_EQ(a.rows[i].loss_sample, b.rows[i].loss_sample);
  }
  EXPECT_EQ(a.u_final, b.u_final);
}

TEST(RunJointSgd, OptimumIsStationary) {
  const TeacherModel t = random_teacher(4, 16, 2.0, make_activation("relu"), 26);
  SGDConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 1000;
  cfg.seed = 27;
  InitOptions init;
  init.u0 = t.pert.u;
  init.c_hat0 = t.pert.c;
  const TrajectoryRecord rec = run_joint_sgd(t, cfg, init);
  EXPECT_EQ(rec.u_final, t.pert.u);
  EXPECT_EQ(rec.c_hat_final, t.pert.c);
}

TEST(RunLinearized, IdentityActivationIsExact) {
  const TeacherModel t = random_teacher(4, 16, 2.0, make_activation("identity"), 28);
  SGDConfig cfg;
  cfg.eta = 0.01;
  cfg.T = 2000;
  cfg.seed = 29;
  cfg.log_stride = 10;
  const TrajectoryRecord full = run_joint_sgd(t, cfg);
  const TrajectoryRecord lin = run_linearized(t, cfg);
  ASSERT_EQ(full.rows.size(), lin.rows.size());
  for (std::size_t i = 0; i < full.rows.size(); ++i) {
    EXPECT_NEAR(full.rows[i].loss_sample, lin.rows[i].loss_sample, 1e-10);
  }
}

TEST(RunLinearized, VanishingPerturbationAgrees) {
  const TeacherModel t = random_teacher(4, 16, 1e-3, make_activation("tanh"), 30);
  SGDConfig cfg;
  cfg.eta = 0.05;
  cfg.T = 2000;
  cfg.seed = 31;
  cfg.log_stride = 200;
  cfg.eval_samples = 2000;
  const TrajectoryRecord full = run_joint_sgd(t, cfg);
  const TrajectoryRecord lin = run_linearized(t, cfg);
  for (std::size_t i = 0; i < full.rows.size(); ++i) {
    EXPECT_LE(std::abs(full.rows[i].eval_loss - lin.rows[i].eval_loss), 0.05 * full.rows[i].eval_loss) << i;
  }
}

TEST(Schedule, GenericPlugIn) {
  ScheduleInputs in;
  in.d = 100;
  in.epsilon = 1.0;
  in.V_k = 1.0;
  in.S_k = 1.0;
  ScheduleConstants c;
  c.log_factor_override = 1.0;
  const Schedule s = theorem_schedule(ScheduleSetting::generic, in, c);
  EXPECT_DOUBLE_EQ(s.delta, 0.25);
  EXPECT_DOUBLE_EQ(s.eta, 1.0 / 400.0);
  EXPECT_DOUBLE_EQ(s.alpha, 16.0);
  EXPECT_EQ(s.T, 1600);
  EXPECT_EQ(s.T_weak, s.T);  // equal at epsilon = 1
  in.epsilon = 0.5;
  const Schedule h = theorem_schedule(ScheduleSetting::generic, in, c);
  EXPECT_LT(h.T_weak, h.T);
}

TEST(Schedule, OrthFrobFirstMomentFactor) {
  for (Eigen::Index k : {4, 9, 25}) {
    ScheduleInputs in;
    in.k = k;
    in.d = 1000;
    in.epsilon = 0.5;
    in.xi = std::sqrt(static_cast<double>(k));
    in.mu1_nonzero = true;
    const Schedule a = theorem_schedule(ScheduleSetting::orth_frob, in);
    in.mu1_nonzero = false;
    const Schedule b = theorem_schedule(ScheduleSetting::orth_frob, in);
    ASSERT_LT(b.delta, 1.0);
    EXPECT_NEAR(a.alpha / b.alpha, 1.0 / k, 1e-14 / k);
    EXPECT_NEAR(static_cast<double>(a.T) / b.T, 1.0 / k, 2.0 / a.T);
  }
}

TEST(Schedule, SeparatedLinearInDimension) {
  ScheduleInputs in;
  in.k = 16;
  in.d = 512;
  in.epsilon = 0.5;
  in.xi = 1.0;
  ScheduleConstants c;
  c.log_factor_override = 3.0;
  const Schedule a = theorem_schedule(ScheduleSetting::separated, in, c);
  in.d = 1024;
  const Schedule b = theorem_schedule(ScheduleSetting::separated, in, c);
  EXPECT_EQ(b.eta, a.eta / 2.0);
  EXPECT_EQ(b.alpha, a.alpha);
  EXPECT_LE(std::abs(b.T - 2 * a.T), 1);
  // Without the override the log factor grows with d too.
  const Schedule nat = theorem_schedule(ScheduleSetting::separated, in);
  EXPECT_NEAR(nat.log_factor, std::log(1024.0 * 256.0), 1e-12);
}

TEST(Schedule, Validation) {
  ScheduleInputs in;
  in.epsilon = 0.0;
  EXPECT_THROW(theorem_schedule(ScheduleSetting::orth_xi1, in), ConfigError);
  in.epsilon = 0.1;
  in.lambda_min = 0.0;
  EXPECT_THROW(theorem_schedule(ScheduleSetting::orth_xi1, in), ConfigError);
  in.lambda_min = 1.0;
  EXPECT_THROW(theorem_schedule(ScheduleSetting::generic, in), ConfigError);
}

TEST(ConditionSuite, ZeroPerturbation) {
  const TeacherModel t = random_teacher(4, 16, 0.0, make_activation("relu"), 32);
  Rng rng = make_stream(33, "s");
  const StudentState s{direction_with_overlap(t, 0.1, rng), quantized_signs(rng, 4), true, 0};
  const ConditionReport r = condition_suite(t, s, 10000, 34);
  EXPECT_EQ(r.moment_norm2, 0.0);
  EXPECT_EQ(r.moment_norm4, 0.0);
  EXPECT_EQ(r.moment_u2, 0.0);
  EXPECT_EQ(r.moment_u4, 0.0);
  EXPECT_EQ(r.pop_grad_norm, 0.0);
}

TEST(SgdConfig, Validation) {
  SGDConfig cfg;
  cfg.T = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.T = 10;
  cfg.log_stride = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_train_mode("adam"), ConfigError);
  EXPECT_EQ(parse_train_mode("joint"), TrainMode::joint);
}
