// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Online spherical SGD on u_hat (optionally jointly on c_hat), theorem
// step-size schedules, trajectory records, and gradient moment diagnostics.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lora_dyn/errors.hpp"
#include "lora_dyn/network.hpp"
#include "lora_dyn/population.hpp"
#include "lora_dyn/rng.hpp"
#include "lora_dyn/sample_gradient.hpp"
#include "lora_dyn/stats.hpp"

namespace lora_dyn {

enum class TrainMode { frozen_c, joint, linearized };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::frozen_c: return "frozen_c";
    case TrainMode::joint: return "joint";
    case TrainMode::linearized: return "linearized";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "frozen_c" || s == "frozen") return TrainMode::frozen_c;
  if (s == "joint") return TrainMode::joint;
  if (s == "linearized") return TrainMode::linearized;
  throw ConfigError("unknown mode '" + s + "' (frozen_c | joint | linearized)");
}

struct SGDConfig {
  double eta = 1e-3;
  std::int64_t T = 1000;
  double epsilon = 0.1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::frozen_c;
  bool constrain_subspace = true;
  bool restart_on_sign = false;
  std::int64_t log_stride = 1;
  double eta_c = -1.0;            // c_hat step size; < 0 means eta
  bool linearized_train_c = true;  // linearized mode also trains c_hat
  double weak_threshold = 0.70710678118654752;  // r = 1/sqrt(2)
  std::int64_t eval_samples = 0;   // held-out loss at log points (0 = off)

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("sgd: eta must be finite and >= 0");
    if (T < 1) throw ConfigError("sgd: T must be >= 1");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("sgd: epsilon must lie in (0,1)");
    if (log_stride < 1) throw ConfigError("sgd: log_stride must be >= 1");
    if (!(weak_threshold > 0.0 && weak_threshold < 1.0)) throw ConfigError("sgd: weak threshold in (0,1)");
  }

  bool trains_c() const {
    return mode == TrainMode::joint || (mode == TrainMode::linearized && linearized_train_c);
  }
  ModelForm form() const { return mode == TrainMode::linearized ? ModelForm::linearized : ModelForm::full; }
};

struct TrajectoryRow {
  std::int64_t t = 0;
  double m = 0.0;           // <u_t, u>
  double c_overlap = 0.0;   // <c_hat_t, c>
  double loss_sample = 0.0; // (f*(x_t) - f_hat(x_t))^2 at state t
  double grad_norm = 0.0;   // ||grad L(u_t; x_t)|| (spherical)
  double pi = 1.0;          // ||u_t - eta grad||
  double eval_loss = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr std::int64_t kNever = -1;

struct TrajectoryRecord {
  std::string run_id;
  SGDConfig config;
  std::vector<TrajectoryRow> rows;
  double m0 = 0.0;
  bool restarted = false;
  double h0 = std::numeric_limits<double>::quiet_NaN();
  std::int64_t tau_weak = kNever;    // first t with |m_t| > r
  std::int64_t tau_strong = kNever;  // first t with |m_t| > 1 - eps/6
  double final_m = 0.0;
  double final_c_overlap = 0.0;
  double min_pi = std::numeric_limits<double>::infinity();
  double max_abs_m = 0.0;
  double max_span_leak = 0.0;  // max ||P_span(W) u_t|| over the run
  Eigen::VectorXd u_final;
  Eigen::VectorXd c_hat_final;
  Eigen::VectorXd c_hat_init;

  bool strong(double eps) const { return final_m * final_m >= 1.0 - eps; }
};

// ---------------------------------------------------------------------------
// Single step

struct StepInfo {
  double pi = 1.0;
  double grad_along_u = 0.0;  // <grad, u>
  double grad_norm = 0.0;
  double loss_sample = 0.0;
};

/// u <- (u - eta grad) / ||u - eta grad|| for one fresh x ~ N(0, I_d) drawn
/// from rng before the gradient is evaluated. In constrained mode the iterate
/// is re-projected onto span(W)^perp to remove rounding drift.
inline StepInfo sgd_step(StudentState& s, const GradientEvaluator& ev, double eta, Rng& rng,
                         Eigen::VectorXd& x, SampleGradient& g, bool train_c = false, double eta_c = -1.0) {
  if (!std::isfinite(eta) || eta < 0.0) throw ConfigError("sgd_step: eta must be finite and >= 0");
  fill_gaussian(rng, x);
  ev.evaluate(s, x, g, train_c);
  StepInfo info;
  info.grad_along_u = g.u_grad.dot(ev.teacher().pert.u);
  info.grad_norm = g.u_grad.norm();
  info.loss_sample = g.loss;
  if (eta == 0.0) {
    ++s.t;
    return info;
  }
  // An exactly zero gradient leaves the iterate bit-identical (no renormalization drift).
  if (g.u_grad.isZero(0.0) && (!train_c || g.c_grad.isZero(0.0))) {
    ++s.t;
    return info;
  }
  Eigen::VectorXd next = s.u_hat - eta * g.u_grad;
  info.pi = next.norm();
  if (!(info.pi >= 1e-14) || !std::isfinite(info.pi)) {
    throw NumericalError("sgd_step: degenerate iterate, ||u - eta grad|| = " + std::to_string(info.pi));
  }
  next /= info.pi;
  if (s.constrain_subspace && ev.constrained()) {
    ev.projector().project_out_inplace(next);
    next.normalize();
  }
  s.u_hat = next;
  if (train_c) {
    const double ec = eta_c < 0.0 ? eta : eta_c;
    Eigen::VectorXd c_next = s.c_hat - ec * g.c_grad;
    const double cn = c_next.norm();
    if (!(cn >= 1e-14)) throw NumericalError("sgd_step: degenerate c_hat iterate");
    s.c_hat = c_next / cn;
  }
  ++s.t;
  return info;
}

/// Convenience overload that builds a full-model evaluator.
inline StepInfo sgd_step(StudentState& s, const TeacherModel& teacher, double eta, Rng& rng) {
  const GradientEvaluator ev(teacher, s.constrain_subspace);
  Eigen::VectorXd x(teacher.d());
  SampleGradient g;
  return sgd_step(s, ev, eta, rng, x, g);
}

// ---------------------------------------------------------------------------
// Initialization and runs

struct InitOptions {
  std::optional<Eigen::VectorXd> u0;      // default: uniform on the sphere of span(W)^perp (or S^{d-1})
  std::optional<Eigen::VectorXd> c_hat0;  // default: quantized (frozen) or S^{k-1} (joint)
};

inline Eigen::VectorXd sample_initial_direction(const TeacherModel& t, bool constrained, Rng& rng) {
  if (!constrained) return uniform_sphere(rng, t.d());
  const SubspaceProjector proj(t.base.W);
  Eigen::VectorXd u = proj.project_out(gaussian_vector(rng, t.d()));
  proj.project_out_inplace(u);
  return u.normalized();
}

namespace detail {

inline double held_out_loss(const GradientEvaluator& ev, const StudentState& s, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y) {
  double acc = 0.0;
  for (Eigen::Index n = 0; n < X.cols(); ++n) {
    const double r = y[n] - ev.student_output(s, X.col(n));
    acc += r * r;
  }
  return acc / static_cast<double>(X.cols());
}

}  // namespace detail

/// Online SGD from a fresh initialization. Streams (all under config.seed):
/// "init" for u_0, "c-hat" for c_hat_0, "data" for x_t (the t-th d-vector is
/// x_t), "eval" for the held-out set.
inline TrajectoryRecord run_online_sgd(const TeacherModel& teacher, const SGDConfig& cfg,
                                       const InitOptions& init = {}, const std::string& run_id = "run") {
  cfg.validate();
  const Eigen::Index d = teacher.d();
  const Eigen::Index k = teacher.k();
  TrajectoryRecord rec;
  rec.run_id = run_id;
  rec.config = cfg;

  StudentState s;
  s.constrain_subspace = cfg.constrain_subspace;
  {
    Rng rng = make_stream(cfg.seed, "init");
    s.u_hat = init.u0 ? init.u0->normalized() : sample_initial_direction(teacher, cfg.constrain_subspace, rng);
  }
  {
    Rng rng = make_stream(cfg.seed, "c-hat");
    if (init.c_hat0) {
      s.c_hat = *init.c_hat0;
    } else if (cfg.trains_c()) {
      s.c_hat = uniform_sphere(rng, k);
    } else {
      s.c_hat = quantized_signs(rng, k);
    }
  }
  if (s.u_hat.size() != d || s.c_hat.size() != k) throw ConfigError("sgd: initial state has wrong dimensions");
  rec.c_hat_init = s.c_hat;
  const Eigen::VectorXd& u = teacher.pert.u;
  if (cfg.restart_on_sign || cfg.mode == TrainMode::frozen_c) {
    const PopulationParams pp = make_population_params(teacher, s.c_hat);
    rec.h0 = h_closed(pp, 0.0).value;
    if (cfg.restart_on_sign && s.u_hat.dot(u) * rec.h0 < 0.0) {
      s.u_hat = -s.u_hat;
      rec.restarted = true;
    }
  }
  rec.m0 = s.u_hat.dot(u);

  const GradientEvaluator ev(teacher, cfg.constrain_subspace, cfg.form());
  const SubspaceProjector span_proj(teacher.base.W);
  Eigen::MatrixXd X_eval;
  Eigen::VectorXd y_eval;
  if (cfg.eval_samples > 0) {
    Rng rng = make_stream(cfg.seed, "eval");
    X_eval.resize(d, cfg.eval_samples);
    y_eval.resize(cfg.eval_samples);
    for (Eigen::Index n = 0; n < cfg.eval_samples; ++n) {
      fill_gaussian(rng, X_eval.col(n));
      y_eval[n] = teacher_forward(teacher, X_eval.col(n));
    }
  }

  Rng data = make_stream(cfg.seed, "data");
  Eigen::VectorXd x(d);
  SampleGradient g;
  const double strong_level = 1.0 - cfg.epsilon / 6.0;
  for (std::int64_t t = 0; t < cfg.T; ++t) {
    const double m = s.u_hat.dot(u);
    const double am = std::abs(m);
    rec.max_abs_m = std::max(rec.max_abs_m, am);
    if (rec.tau_weak == kNever && am > cfg.weak_threshold) rec.tau_weak = t;
    if (rec.tau_strong == kNever && am > strong_level) rec.tau_strong = t;
    const double c_ov = s.c_hat.dot(teacher.pert.c);
    const bool log_now = t % cfg.log_stride == 0 || t == cfg.T - 1;
    double eval = std::numeric_limits<double>::quiet_NaN();
    if (log_now && cfg.eval_samples > 0) eval = detail::held_out_loss(ev, s, X_eval, y_eval);

    const StepInfo info = sgd_step(s, ev, cfg.eta, data, x, g, cfg.trains_c(), cfg.eta_c);
    rec.min_pi = std::min(rec.min_pi, info.pi);
    if (cfg.constrain_subspace && (t & 255) == 0) {
      rec.max_span_leak = std::max(rec.max_span_leak, span_proj.in_span_norm(s.u_hat));
    }
    if (log_now) {
      TrajectoryRow row;
      row.t = t;
      row.m = m;
      row.c_overlap = c_ov;
      row.loss_sample = info.loss_sample;
      row.grad_norm = info.grad_norm;
      row.pi = info.pi;
      row.eval_loss = eval;
      rec.rows.push_back(row);
    }
  }
  rec.final_m = s.u_hat.dot(u);
  rec.max_abs_m = std::max(rec.max_abs_m, std::abs(rec.final_m));
  if (rec.tau_weak == kNever && std::abs(rec.final_m) > cfg.weak_threshold) rec.tau_weak = cfg.T;
  if (rec.tau_strong == kNever && std::abs(rec.final_m) > strong_level) rec.tau_strong = cfg.T;
  rec.final_c_overlap = s.c_hat.dot(teacher.pert.c);
  if (cfg.constrain_subspace) rec.max_span_leak = std::max(rec.max_span_leak, span_proj.in_span_norm(s.u_hat));
  rec.u_final = s.u_hat;
  rec.c_hat_final = s.c_hat;
  return rec;
}

inline TrajectoryRecord run_joint_sgd(const TeacherModel& teacher, SGDConfig cfg, const InitOptions& init = {},
                                      const std::string& run_id = "joint") {
  cfg.mode = TrainMode::joint;
  return run_online_sgd(teacher, cfg, init, run_id);
}

inline TrajectoryRecord run_linearized(const TeacherModel& teacher, SGDConfig cfg, const InitOptions& init = {},
                                       const std::string& run_id = "linearized") {
  cfg.mode = TrainMode::linearized;
  return run_online_sgd(teacher, cfg, init, run_id);
}

// ---------------------------------------------------------------------------
// Theorem schedules

enum class ScheduleSetting { orth_xi1, orth_frob, separated, generic };

inline const char* to_string(ScheduleSetting s) {
  switch (s) {
    case ScheduleSetting::orth_xi1: return "orth_xi1";
    case ScheduleSetting::orth_frob: return "orth_frob";
    case ScheduleSetting::separated: return "separated";
    case ScheduleSetting::generic: return "generic";
  }
  return "?";
}

inline ScheduleSetting parse_schedule_setting(const std::string& s) {
  if (s == "orth_xi1") return ScheduleSetting::orth_xi1;
  if (s == "orth_frob") return ScheduleSetting::orth_frob;
  if (s == "separated") return ScheduleSetting::separated;
  if (s == "generic") return ScheduleSetting::generic;
  throw ConfigError("unknown schedule setting '" + s + "'");
}

/// Absolute constants the theorems leave unspecified.
struct ScheduleConstants {
  double C_delta = 0.1;
  double gamma = 0.1;
  double beta = 1.0;
  double mu1_proxy = 1.0;  // the mu_1 in the generic delta
  std::optional<double> log_factor_override;  // replaces log(lambda_max^4 d k^2) / log(d V_k)
};

struct Schedule {
  ScheduleSetting setting = ScheduleSetting::generic;
  double log_factor = 0.0;
  double delta = 0.0;
  double alpha = 0.0;
  double V_k = 0.0;
  double S_k = 0.0;
  double eta = 0.0;
  std::int64_t T = 0;
  std::int64_t T_weak = 0;
};

struct ScheduleInputs {
  Eigen::Index k = 1;
  Eigen::Index d = 1;
  double epsilon = 0.1;
  double lambda_min = 1.0;
  double lambda_max = 1.0;
  double xi = 1.0;          // orth_frob reads xi_bar = xi / sqrt(k)
  bool mu1_nonzero = true;
  double V_k = 1.0;         // generic only
  double S_k = 1.0;         // generic only
};

namespace detail {

inline std::int64_t ceil_to_int(double v) {
  if (!(v < 9.0e18)) throw NumericalError("schedule: iteration count overflows");
  return static_cast<std::int64_t>(std::ceil(v));
}

}  // namespace detail

inline Schedule theorem_schedule(ScheduleSetting setting, const ScheduleInputs& in,
                                 const ScheduleConstants& cst = {}) {
  if (!(in.lambda_min > 0.0)) throw ConfigError("theorem_schedule: lambda_min must be positive");
  if (!(in.lambda_max >= in.lambda_min)) throw ConfigError("theorem_schedule: lambda_max < lambda_min");
  if (in.k < 1 || in.d < 1) throw ConfigError("theorem_schedule: k, d must be positive");
  if (!(in.epsilon > 0.0 && in.epsilon <= 1.0)) throw ConfigError("theorem_schedule: epsilon must lie in (0,1]");
  if (!(in.xi > 0.0)) throw ConfigError("theorem_schedule: xi must be positive");
  const double k = static_cast<double>(in.k);
  const double d = static_cast<double>(in.d);
  const double eps = in.epsilon;
  const double lmin2 = in.lambda_min * in.lambda_min;
  const double lmax4 = std::pow(in.lambda_max, 4);
  const double sk = std::sqrt(k);
  const double g = cst.gamma;
  Schedule s;
  s.setting = setting;
  auto logf = [&](double v) { return cst.log_factor_override ? *cst.log_factor_override : std::log(v); };
  switch (setting) {
    case ScheduleSetting::orth_xi1: {
      const double L = logf(lmax4 * d * k * k);
      s.log_factor = L;
      s.delta = cst.C_delta * g * lmin2 * eps * eps * eps / (L * L) * (in.mu1_nonzero ? 1.0 : 1.0 / sk);
      s.alpha = L / (lmin2 * g * eps * s.delta) * (in.mu1_nonzero ? 1.0 : sk);
      s.V_k = lmax4 * k * k;
      s.S_k = g * lmin2 * (in.mu1_nonzero ? 1.0 : 1.0 / sk) / (1.0 + in.xi * in.xi / k);
      s.eta = s.delta / (lmax4 * d * k * k);
      s.T = detail::ceil_to_int(s.alpha * lmax4 * d * k * k);
      break;
    }
    case ScheduleSetting::orth_frob: {
      const double xb = in.xi / sk;
      const double xb2 = xb * xb;
      const double L = logf(lmax4 * d * k * k);
      s.log_factor = L;
      s.delta = std::min(cst.C_delta * xb2 * sk * g * lmin2 * eps * eps * eps / (L * L) * (in.mu1_nonzero ? sk : 1.0),
                         1.0);
      s.alpha = L / (xb2 * lmin2 * sk * g * eps * s.delta) * (in.mu1_nonzero ? 1.0 / sk : 1.0);
      s.V_k = lmax4 * xb2 * k * k * k * k;
      s.S_k = g * k * lmin2 / 2.0 * (in.mu1_nonzero ? 1.0 : 1.0 / sk);
      s.eta = s.delta / (xb2 * lmax4 * d * k * k * k * k);
      s.T = detail::ceil_to_int(s.alpha * lmax4 * xb2 * d * k * k * k * k);
      break;
    }
    case ScheduleSetting::separated: {
      const double L = logf(lmax4 * d * k * k);
      s.log_factor = L;
      s.delta = cst.C_delta * g * lmin2 * eps * eps * eps / (L * L * sk);
      s.alpha = L * sk / (lmin2 * g * eps * s.delta);
      s.V_k = lmax4 * k * k;
      s.S_k = g * lmin2 / sk;
      s.eta = lmax4 * s.delta / (d * k * k);
      s.T = detail::ceil_to_int(s.alpha * lmax4 * d * k * k);
      break;
    }
    case ScheduleSetting::generic: {
      if (!(in.V_k > 0.0 && in.S_k > 0.0)) throw ConfigError("theorem_schedule: V_k, S_k must be positive");
      const double L = logf(d * in.V_k);
      if (!(L > 0.0)) throw ConfigError("theorem_schedule: log(d V_k) must be positive");
      s.log_factor = L;
      s.V_k = in.V_k;
      s.S_k = in.S_k;
      s.delta = std::min(in.S_k * eps * eps * eps / (4.0 * cst.mu1_proxy * L * L), 1.0);
      s.alpha = 4.0 * L / (eps * s.delta * in.S_k);
      s.eta = s.delta / (d * in.V_k);
      s.T = detail::ceil_to_int(s.alpha * d * in.V_k);
      break;
    }
  }
  s.T_weak = detail::ceil_to_int(4.0 * d * s.V_k / (s.delta * s.S_k));
  return s;
}

// ---------------------------------------------------------------------------
// Gradient moment diagnostics

struct ConditionReport {
  double var_bound = 0.0;        // lambda_max^4 k^3 xi^2 min{k, 4 xi^2} / (k + xi^2)
  double pop_bound = 0.0;        // lambda_max^2 k xi^2 / (1 + xi^2/k)
  double moment_norm2 = 0.0;     // E ||g / sqrt d||^2
  double moment_norm4 = 0.0;     // E ||g / sqrt d||^4
  double moment_u2 = 0.0;        // E <g, u>^2
  double moment_u4 = 0.0;        // E <g, u>^4
  double moment_norm2_stderr = 0.0;
  double pop_grad_norm = 0.0;    // ||grad Phi(u_hat)||
  double ratio_norm2 = 0.0;      // moment_norm2 / var_bound
  double ratio_u2 = 0.0;         // moment_u2 / var_bound
  double ratio_pop = 0.0;        // pop_grad_norm / pop_bound
  std::int64_t samples = 0;
};

namespace detail {

struct MomentAcc {
  Moments n2, n4, u2, u4;
  void merge(const MomentAcc& o) {
    n2.merge(o.n2);
    n4.merge(o.n4);
    u2.merge(o.u2);
    u4.merge(o.u4);
  }
};

}  // namespace detail

inline double variance_bound(double lambda_max, double k, double xi) {
  return std::pow(lambda_max, 4) * k * k * k * xi * xi * std::min(k, 4.0 * xi * xi) / (k + xi * xi);
}

inline double population_gradient_bound(double lambda_max, double k, double xi) {
  return lambda_max * lambda_max * k * xi * xi / (1.0 + xi * xi / k);
}

/// Monte Carlo moments of the sample spherical gradient at the student s.
inline ConditionReport condition_suite(const TeacherModel& teacher, const StudentState& s, std::int64_t N,
                                       std::uint64_t seed) {
  if (N < 10000) throw ConfigError("condition_suite: N must be >= 1e4");
  const Eigen::Index d = teacher.d();
  const double dd = static_cast<double>(d);
  const double k = static_cast<double>(teacher.k());
  const double xi = teacher.pert.xi;
  auto body = [&](std::int64_t, Rng& rng, std::int64_t count) {
    const GradientEvaluator ev(teacher, s.constrain_subspace);
    detail::MomentAcc acc;
    Eigen::VectorXd x(d);
    SampleGradient g;
    for (std::int64_t n = 0; n < count; ++n) {
      fill_gaussian(rng, x);
      ev.evaluate(s, x, g);
      const double a = g.u_grad.squaredNorm() / dd;
      const double b = g.u_grad.dot(teacher.pert.u);
      acc.n2.add(a);
      acc.n4.add(a * a);
      acc.u2.add(b * b);
      acc.u4.add(b * b * b * b);
    }
    return acc;
  };
  const detail::MomentAcc acc = block_monte_carlo<detail::MomentAcc>(N, seed, "condition-suite", body);
  ConditionReport r;
  r.var_bound = variance_bound(teacher.base.lambda_max(), k, xi);
  r.pop_bound = population_gradient_bound(teacher.base.lambda_max(), k, xi);
  r.moment_norm2 = acc.n2.mean();
  r.moment_norm2_stderr = acc.n2.std_error();
  r.moment_norm4 = acc.n4.mean();
  r.moment_u2 = acc.u2.mean();
  r.moment_u4 = acc.u4.mean();
  r.samples = acc.n2.count();
  const PopulationParams pp = make_population_params(teacher, s.c_hat);
  r.pop_grad_norm = population_gradient(pp, teacher.pert.u, s.u_hat).norm();
  if (r.var_bound > 0.0) {
    r.ratio_norm2 = r.moment_norm2 / r.var_bound;
    r.ratio_u2 = r.moment_u2 / r.var_bound;
  }
  if (r.pop_bound > 0.0) r.ratio_pop = r.pop_grad_norm / r.pop_bound;
  return r;
}

}  // namespace lora_dyn
