// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Population quantities: the drift h(m) in closed and series form, moment
// Grams T(l,s), the population spherical gradient and loss, and Monte Carlo
// oracles for each.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lora_dyn/errors.hpp"
#include "lora_dyn/hermite.hpp"
#include "lora_dyn/network.hpp"
#include "lora_dyn/rng.hpp"
#include "lora_dyn/sample_gradient.hpp"
#include "lora_dyn/stats.hpp"

namespace lora_dyn {

struct PopulationParams {
  Eigen::MatrixXd gram;  // G_ij = <w_i, w_j>
  Eigen::VectorXd lambda;
  Eigen::VectorXd c;
  Eigen::VectorXd c_hat;
  double xi = 1.0;
  Eigen::VectorXd mu;  // mu_0..mu_P
  double tail_weighted = 0.0;  // bound on sum_{p>P} p mu_p^2
  double tail_sq = 0.0;        // bound on sum_{p>P} mu_p^2

  Eigen::Index k() const { return gram.rows(); }
  int P() const { return static_cast<int>(mu.size()) - 1; }
  double r() const { return 1.0 / (1.0 + xi * xi / static_cast<double>(k())); }

  bool quantized(double tol = 1e-12) const {
    const double a = 1.0 / std::sqrt(static_cast<double>(k()));
    for (Eigen::Index i = 0; i < k(); ++i) {
      if (std::abs(std::abs(c[i]) - a) > tol || std::abs(std::abs(c_hat[i]) - a) > tol) return false;
    }
    return true;
  }

  void validate(bool require_quantized = false) const {
    const Eigen::Index kk = gram.rows();
    if (kk < 1 || gram.cols() != kk) throw ConfigError("population params: gram must be square");
    if (lambda.size() != kk || c.size() != kk || c_hat.size() != kk) {
      throw ConfigError("population params: lambda, c, c_hat must have k entries");
    }
    if ((gram - gram.transpose()).cwiseAbs().maxCoeff() > 1e-10) {
      throw ConfigError("population params: gram not symmetric");
    }
    if ((gram.diagonal().array() - 1.0).abs().maxCoeff() > 1e-10) {
      throw ConfigError("population params: gram diagonal must be 1");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10) throw ConfigError("population params: gram not PSD");
    if (mu.size() < 2) throw ConfigError("population params: need P >= 1");
    if (require_quantized && !quantized()) {
      throw ConfigError("population params: c, c_hat must be quantized to +-1/sqrt(k)");
    }
  }
};

inline PopulationParams make_population_params(const BaseModel& base, const Eigen::VectorXd& c,
                                               const Eigen::VectorXd& c_hat, double xi) {
  PopulationParams p;
  p.gram = base.gram();
  p.lambda = base.lambda;
  p.c = c;
  p.c_hat = c_hat;
  p.xi = xi;
  p.mu = base.activation.coeffs();
  p.tail_weighted = base.activation.tail_weighted();
  p.tail_sq = base.activation.tail_sq();
  return p;
}

inline PopulationParams make_population_params(const TeacherModel& t, const Eigen::VectorXd& c_hat) {
  return make_population_params(t.base, t.pert.c, c_hat, t.pert.xi);
}

struct HEvalReport {
  double value = 0.0;
  double truncation_bound = 0.0;
  int terms_used = 0;
};

struct MomentGramPair {
  double t_odd = 0.0;   // sum_ij lambda_i lambda_j G_ij^s
  double t_even = 0.0;  // k sum_ij lambda_i lambda_j c_i chat_j G_ij^s
};

namespace detail {

inline Eigen::MatrixXd entrywise_power(const Eigen::MatrixXd& G, int s) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Ones(G.rows(), G.cols());
  for (int j = 0; j < s; ++j) out.array() *= G.array();
  return out;
}

inline double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline void check_m(double m, const char* who) {
  if (!(std::abs(m) <= 1.0)) throw ConfigError(std::string(who) + ": |m| must be <= 1");
}

}  // namespace detail

/// (T_odd, T_even) at order s from entrywise Gram powers.
inline MomentGramPair moment_gram_pair(const PopulationParams& p, int s) {
  if (s < 0) throw ConfigError("moment_gram_pair: s must be >= 0");
  const Eigen::MatrixXd Gs = detail::entrywise_power(p.gram, s);
  MomentGramPair t;
  t.t_odd = p.lambda.dot(Gs * p.lambda);
  t.t_even = static_cast<double>(p.k()) *
             p.lambda.cwiseProduct(p.c).dot(Gs * p.lambda.cwiseProduct(p.c_hat));
  return t;
}

/// h(m) = 2 xi^2 sum_ij lambda_i lambda_j c_i chat_j
///        sum_{p<=P} p mu_p^2 r^p (G_ij + xi^2 c_i chat_j m)^{p-1},  r = 1/(1+xi^2/k).
inline HEvalReport h_closed(const PopulationParams& p, double m) {
  detail::check_m(m, "h_closed");
  const Eigen::Index k = p.k();
  const int P = p.P();
  const double r = p.r();
  const double xi2 = p.xi * p.xi;
  Eigen::VectorXd w(P + 1);  // p mu_p^2 r
  for (int q = 0; q <= P; ++q) w[q] = q * p.mu[q] * p.mu[q] * r;
  double total = 0.0;
  double abs_weight = 0.0;
  double max_rz = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const double coef = p.lambda[i] * p.lambda[j] * p.c[i] * p.c_hat[j];
      if (coef == 0.0) continue;
      const double rz = r * (p.gram(i, j) + xi2 * p.c[i] * p.c_hat[j] * m);
      max_rz = std::max(max_rz, std::abs(rz));
      double pw = 1.0;  // rz^{q-1}
      double s = 0.0;
      for (int q = 1; q <= P; ++q) {
        s += w[q] * pw;
        pw *= rz;
      }
      total += coef * s;
      abs_weight += std::abs(coef);
    }
  }
  HEvalReport rep;
  rep.value = 2.0 * xi2 * total;
  rep.terms_used = P;
  if (p.tail_weighted == 0.0 || abs_weight == 0.0) {
    rep.truncation_bound = 0.0;
  } else if (max_rz <= 1.0 + 1e-12) {
    rep.truncation_bound = 2.0 * xi2 * abs_weight * r * p.tail_weighted;
  } else {
    rep.truncation_bound = std::numeric_limits<double>::infinity();
  }
  return rep;
}

/// h(m) = 2 sum_{l<=L} (xi^2/k)^{l+1} m^l
///        sum_{s<=S} C(l+s,l) (l+s+1) mu_{l+s+1}^2 r^{l+s+1} T(l,s),
/// T(l,s) = T_odd(s) for odd l, T_even(s) for even l. Outside quantized mode
/// T is replaced by its general form k^{l+1} sum lambda lambda (c chat)^{l+1} G^s,
/// which coincides with it under quantization.
inline HEvalReport h_series(const PopulationParams& p, double m, int L, int S) {
  detail::check_m(m, "h_series");
  if (L < 0 || S < 0) throw ConfigError("h_series: L, S must be >= 0");
  const Eigen::Index k = p.k();
  const double kk = static_cast<double>(k);
  const int P = p.P();
  const double r = p.r();
  const double q = p.xi * p.xi / kk;
  const bool quant = p.quantized();
  const int s_max = std::min(S, P - 1);
  const int l_max = std::min(L, P - 1);

  // T(l,s) tables.
  std::vector<MomentGramPair> T;
  std::vector<Eigen::MatrixXd> Gs;
  {
    Eigen::MatrixXd cur = Eigen::MatrixXd::Ones(k, k);
    for (int s = 0; s <= std::max(s_max, 0); ++s) {
      Gs.push_back(cur);
      cur.array() *= p.gram.array();
    }
  }
  if (quant) {
    for (int s = 0; s <= std::max(s_max, 0); ++s) T.push_back(moment_gram_pair(p, s));
  }
  const Eigen::MatrixXd cc = p.c * p.c_hat.transpose();
  const Eigen::MatrixXd ll = p.lambda * p.lambda.transpose();
  auto T_ls = [&](int l, int s) {
    if (quant) return (l % 2 == 1) ? T[s].t_odd : T[s].t_even;
    const Eigen::MatrixXd kc = (kk * cc).array().pow(l + 1).matrix();
    return (ll.array() * kc.array() * Gs[s].array()).sum();
  };

  HEvalReport rep;
  double total = 0.0;
  for (int l = 0; l <= l_max; ++l) {
    const double ml = l == 0 ? 1.0 : std::pow(m, l);
    if (ml == 0.0) continue;
    for (int s = 0; s <= s_max && l + s + 1 <= P; ++s) {
      const int pp = l + s + 1;
      const double mu2 = p.mu[pp] * p.mu[pp];
      if (mu2 == 0.0) continue;
      const double logw = (l + 1) * std::log(q) + detail::log_binomial(l + s, l) + pp * std::log(r);
      total += 2.0 * std::exp(logw) * pp * mu2 * ml * T_ls(l, s);
      ++rep.terms_used;
    }
  }
  rep.value = total;

  // Certified bound on the dropped terms using |T(l,s)| <= Tmax and, for each
  // p, sum_{l+s=p-1} C(p-1,l) q^l |m|^l r^s <= (q|m| + r)^{p-1} <= 1.
  double Tmax = std::max(std::pow(p.lambda.cwiseAbs().sum(), 2),
                         kk * p.lambda.cwiseProduct(p.c).cwiseAbs().sum() *
                             p.lambda.cwiseProduct(p.c_hat).cwiseAbs().sum());
  if (!quant && kk * p.c.cwiseAbs().maxCoeff() * p.c_hat.cwiseAbs().maxCoeff() > 1.0 + 1e-12) {
    Tmax = std::numeric_limits<double>::infinity();
  }
  double bound = 0.0;
  const double am = std::abs(m);
  for (int pp = 1; pp <= P; ++pp) {
    const double mu2 = p.mu[pp] * p.mu[pp];
    if (mu2 == 0.0) continue;
    for (int l = 0; l <= pp - 1; ++l) {
      const int s = pp - 1 - l;
      if (l <= l_max && s <= s_max) continue;
      const double ml = l == 0 ? 1.0 : std::pow(am, l);
      if (ml == 0.0) continue;
      const double logw = (l + 1) * std::log(q) + detail::log_binomial(l + s, l) + pp * std::log(r);
      bound += 2.0 * std::exp(logw) * pp * mu2 * ml * Tmax;
    }
  }
  if (p.tail_weighted > 0.0) bound += 2.0 * q * r * Tmax * p.tail_weighted;
  rep.truncation_bound = bound;
  return rep;
}

/// -h(<u,u_hat>) (u - u_hat <u_hat,u>)
inline Eigen::VectorXd population_gradient(const PopulationParams& p, const Eigen::VectorXd& u,
                                           const Eigen::VectorXd& u_hat) {
  const double m = std::clamp(u.dot(u_hat), -1.0, 1.0);
  const double h = h_closed(p, m).value;
  return -h * (u - u_hat * m);
}

struct LossReport {
  double value = 0.0;
  double truncation_bound = 0.0;
};

namespace detail {

// sum_ij a_i b_j sum_p mu_p^2 M_ij^p, with |M_ij| <= 1.
inline double hermite_gram_sum(const Eigen::VectorXd& mu, const Eigen::VectorXd& a,
                               const Eigen::VectorXd& b, const Eigen::MatrixXd& M) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) {
      double pw = 1.0;
      double s = 0.0;
      for (Eigen::Index q = 0; q < mu.size(); ++q) {
        s += mu[q] * mu[q] * pw;
        pw *= M(i, j);
      }
      total += a[i] * b[j] * s;
    }
  }
  return total;
}

}  // namespace detail

/// E[(f*(x) - f_hat(x))^2] from the three Gram double sums. Both networks
/// must have unit-norm neurons (normalized convention, u and u_hat in
/// span(W)^perp, quantized c and c_hat).
inline LossReport population_loss(const TeacherModel& teacher, const StudentState& student) {
  const double xi = teacher.pert.xi;
  const Eigen::MatrixXd Vhat =
      perturbed_neurons(teacher.base.W, xi, student.c_hat, student.u_hat, teacher.conv);
  for (Eigen::Index i = 0; i < teacher.k(); ++i) {
    if (std::abs(teacher.V.row(i).norm() - 1.0) > 1e-10 || std::abs(Vhat.row(i).norm() - 1.0) > 1e-10) {
      throw ConfigError("population_loss: neurons must be unit norm");
    }
  }
  const Eigen::VectorXd& mu = teacher.base.activation.coeffs();
  const Eigen::VectorXd& lam = teacher.base.lambda;
  const double ss = detail::hermite_gram_sum(mu, lam, lam, Vhat * Vhat.transpose());
  const double tt = detail::hermite_gram_sum(mu, lam, lam, teacher.V * teacher.V.transpose());
  const double ts = detail::hermite_gram_sum(mu, lam, lam, teacher.V * Vhat.transpose());
  const double o = teacher.conv.output_scale(xi);
  LossReport rep;
  rep.value = o * o * (ss + tt - 2.0 * ts);
  rep.truncation_bound = o * o * 4.0 * std::pow(lam.cwiseAbs().sum(), 2) * teacher.base.activation.tail_sq();
  return rep;
}

struct McGradient {
  Eigen::VectorXd mean;
  Eigen::VectorXd std_error;
  double dot_u = 0.0;         // <mean, u>
  double dot_u_stderr = 0.0;  // standard error of <g, u>
  std::int64_t samples = 0;
};

namespace detail {

struct GradAcc {
  VectorMoments grad;
  Moments along_u;
  void merge(const GradAcc& o) {
    grad.merge(o.grad);
    along_u.merge(o.along_u);
  }
};

}  // namespace detail

/// Average of N sample spherical gradients at a fixed student.
inline McGradient mc_population_gradient(const TeacherModel& teacher, const StudentState& student,
                                         std::int64_t N, std::uint64_t seed,
                                         const std::string& stream = "mc-gradient") {
  if (N < 1000) throw ConfigError("mc_population_gradient: N must be >= 1000");
  const Eigen::Index d = teacher.d();
  const SubspaceProjector proj = student.constrain_subspace ? SubspaceProjector(teacher.base.W)
                                                            : SubspaceProjector();
  auto body = [&](std::int64_t, Rng& rng, std::int64_t count) {
    const GradientEvaluator ev(teacher, student.constrain_subspace);
    detail::GradAcc acc;
    acc.grad = VectorMoments(d);
    Eigen::VectorXd x(d);
    SampleGradient g;
    for (std::int64_t n = 0; n < count; ++n) {
      fill_gaussian(rng, x);
      ev.evaluate(student, x, g);
      acc.grad.add(g.u_grad);
      acc.along_u.add(g.u_grad.dot(teacher.pert.u));
    }
    return acc;
  };
  const detail::GradAcc acc = block_monte_carlo<detail::GradAcc>(N, seed, stream, body);
  McGradient out;
  out.mean = acc.grad.mean();
  out.std_error = acc.grad.std_error();
  out.dot_u = acc.along_u.mean();
  out.dot_u_stderr = acc.along_u.std_error();
  out.samples = acc.grad.count();
  return out;
}

/// Monte Carlo estimate of the population loss.
inline Moments mc_population_loss(const TeacherModel& teacher, const StudentState& student,
                                  std::int64_t N, std::uint64_t seed,
                                  const std::string& stream = "mc-loss") {
  const Eigen::Index d = teacher.d();
  auto body = [&](std::int64_t, Rng& rng, std::int64_t count) {
    const GradientEvaluator ev(teacher, student.constrain_subspace);
    Moments acc;
    Eigen::VectorXd x(d);
    for (std::int64_t n = 0; n < count; ++n) {
      fill_gaussian(rng, x);
      const double r = teacher_forward(teacher, x) - ev.student_output(student, x);
      acc.add(r * r);
    }
    return acc;
  };
  return block_monte_carlo<Moments>(N, seed, stream, body);
}

// ---------------------------------------------------------------------------
// Anti-concentration of h(0)

struct AnticoncRow {
  std::string statistic;  // "h0" | "frobenius" | "rank_one"
  double gamma = 0.0;
  double scale = 0.0;
  std::int64_t hits = 0;
  std::int64_t trials = 0;
  double p_hat = 0.0;
  Interval wilson;
};

struct AnticoncTable {
  std::vector<AnticoncRow> rows;

  const AnticoncRow& find(const std::string& statistic, double gamma) const {
    for (const auto& r : rows) {
      if (r.statistic == statistic && r.gamma == gamma) return r;
    }
    throw ConfigError("anticoncentration table: no row for " + statistic);
  }
};

/// Resamples (c, c_hat) uniformly from {+-1/sqrt k}^k per trial and reports the
/// empirical Pr[|stat| <= gamma * scale] for
///   frobenius: sum_i lambda_i^2 c_i chat_i,            scale lambda_min^2 / sqrt k
///   rank_one:  (sum_i lambda_i c_i)(sum_i lambda_i chat_i), scale lambda_min^2
///   h0:        h(0),   scale 2 xi^2 r lambda_min^2 sum_p p mu_p^2 r^{p-1} / sqrt k
inline AnticoncTable h0_anticoncentration(const BaseModel& base, double xi, std::int64_t trials,
                                          const std::vector<double>& gamma_grid, std::uint64_t seed,
                                          bool with_h0 = true) {
  if (trials < 1000) throw ConfigError("h0_anticoncentration: trials must be >= 1000");
  if (gamma_grid.empty()) throw ConfigError("h0_anticoncentration: empty gamma grid");
  const Eigen::Index k = base.k();
  const double kk = static_cast<double>(k);
  const double lmin2 = base.lambda_min() * base.lambda_min();
  const Eigen::VectorXd lam2 = base.lambda.cwiseProduct(base.lambda);
  PopulationParams pp = make_population_params(base, Eigen::VectorXd::Zero(k), Eigen::VectorXd::Zero(k), xi);
  const double r = pp.r();
  double csum = 0.0;
  for (int q = 1; q <= pp.P(); ++q) csum += q * pp.mu[q] * pp.mu[q] * std::pow(r, q - 1);
  const double h0_scale = 2.0 * xi * xi * r * csum * lmin2 / std::sqrt(kk);

  std::vector<std::string> names{"frobenius", "rank_one"};
  std::vector<double> scales{lmin2 / std::sqrt(kk), lmin2};
  if (with_h0) {
    names.push_back("h0");
    scales.push_back(h0_scale);
  }
  const std::size_t G = gamma_grid.size();
  std::vector<std::int64_t> hits(names.size() * G, 0);
  Rng rng = make_stream(seed, "anticoncentration");
  for (std::int64_t t = 0; t < trials; ++t) {
    pp.c = quantized_signs(rng, k);
    pp.c_hat = quantized_signs(rng, k);
    std::vector<double> stat{lam2.dot(pp.c.cwiseProduct(pp.c_hat)),
                             base.lambda.dot(pp.c) * base.lambda.dot(pp.c_hat)};
    if (with_h0) stat.push_back(h_closed(pp, 0.0).value);
    for (std::size_t a = 0; a < names.size(); ++a) {
      for (std::size_t g = 0; g < G; ++g) {
        if (std::abs(stat[a]) <= gamma_grid[g] * scales[a]) ++hits[a * G + g];
      }
    }
  }
  AnticoncTable table;
  for (std::size_t a = 0; a < names.size(); ++a) {
    for (std::size_t g = 0; g < G; ++g) {
      AnticoncRow row;
      row.statistic = names[a];
      row.gamma = gamma_grid[g];
      row.scale = scales[a];
      row.hits = hits[a * G + g];
      row.trials = trials;
      row.p_hat = static_cast<double>(row.hits) / static_cast<double>(trials);
      row.wilson = wilson_interval(row.hits, trials);
      table.rows.push_back(row);
    }
  }
  return table;
}

}  // namespace lora_dyn
