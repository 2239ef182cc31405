// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// lora-dyn-acceptance: runs the acceptance checks and prints one PASS/FAIL
// line per criterion. Exit status is 0 only if every selected check passes.
//
//   lora-dyn-acceptance [--only N]... [--out DIR] [--seed S]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lora_dyn/harness/experiments.hpp"

namespace {

using namespace lora_dyn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---- tolerances and budgets ----
constexpr double kOrthoTol = 1e-10;
constexpr double kSigmas = 4.0;
constexpr double kFiniteHermiteTol = 1e-10;
constexpr double kHardnessFormulaTol = 1e-12;
constexpr double kGramTol = 1e-12;
constexpr double kGlobalOptimaTol = 1e-9;
constexpr double kRecoveryEps = 0.05;
constexpr double kAnticoncLo = 1.4;
constexpr double kAnticoncHi = 2.8;
constexpr double kVarianceBand = 3.0;
constexpr double kFloorFactor = 10.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double tau_value(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

struct Context {
  std::string out;
  std::uint64_t seed = 2026;

  ExperimentConfig config(const std::string& kind) const {
    ExperimentConfig c;
    c.kind = kind;
    c.out_dir = out;
    c.root_seed = seed;
    return c;
  }
};

// ---- 1: Hermite orthonormality and the correlation identity ----

Outcome check_hermite(const Context& ctx) {
  const QuadratureRule r = gauss_hermite_rule(200);
  double worst = 0.0;
  for (int p = 0; p <= 12; ++p) {
    for (int q = 0; q <= 12; ++q) {
      const double e = r.expect([p, q](double a) { return hermite_poly(p, a) * hermite_poly(q, a); });
      worst = std::max(worst, std::abs(e - (p == q ? 1.0 : 0.0)));
    }
  }
  const int d = 16;
  const int P = 5;
  const std::int64_t N = 200000;
  Rng setup = make_stream(ctx.seed, "acceptance-hermite");
  const VectorXd u = uniform_sphere(setup, d);
  const VectorXd v = (u + 0.7 * uniform_sphere(setup, d)).normalized();
  const double rho = u.dot(v);
  std::vector<Moments> acc((P + 1) * (P + 1));
  Rng rng = make_stream(ctx.seed, "acceptance-hermite-samples");
  VectorXd x(d);
  for (std::int64_t n = 0; n < N; ++n) {
    fill_gaussian(rng, x);
    const VectorXd hu = hermite_all(P, u.dot(x));
    const VectorXd hv = hermite_all(P, v.dot(x));
    for (int p = 0; p <= P; ++p) {
      for (int q = 0; q <= P; ++q) acc[p * (P + 1) + q].add(hu[p] * hv[q]);
    }
  }
  double max_z = 0.0;
  for (int p = 0; p <= P; ++p) {
    for (int q = 0; q <= P; ++q) {
      if (p == 0 && q == 0) continue;
      const Moments& m = acc[p * (P + 1) + q];
      const double target = p == q ? std::pow(rho, p) : 0.0;
      max_z = std::max(max_z, std::abs(m.mean() - target) / m.std_error());
    }
  }
  return {worst <= kOrthoTol && max_z <= kSigmas,
          "quadrature max error " + fmt("%.2e", worst) + " (p,q <= 12); MC max |z| " + fmt("%.2f", max_z) +
              " (p,q <= 5, rho " + fmt("%.3f", rho) + ", N 2e5, d 16)"};
}

// ---- 2: sample gradients average to the population gradient ----

Outcome check_gradients(const Context& ctx) {
  ExperimentConfig c = ctx.config("validate-gradients");
  c.instances = 20;
  c.samples = 200000;
  const ExperimentResult r = run_experiment(c);
  return {r.check_ok, std::to_string(r.summary.at("coordinates").get<std::int64_t>()) + " coordinates, " +
                          std::to_string(r.summary.at("outside_4sigma").get<std::int64_t>()) +
                          " outside 4 sigma, max |z| " + fmt("%.2f", r.summary.at("max_abs_z").get<double>())};
}

// ---- 3: closed and series forms of h agree ----

std::vector<double> m_grid() {
  std::vector<double> g;
  for (int i = -10; i <= 10; ++i) g.push_back(0.1 * i);
  return g;
}

Outcome check_forms(const Context& ctx) {
  const std::vector<std::string> names{"relu", "sigmoid", "tanh", "identity", "quadratic", "he3"};
  std::int64_t violations = 0, evaluations = 0;
  double worst_finite = 0.0;
  for (const std::string& name : names) {
    for (int rep = 0; rep < 3; ++rep) {
      InstanceSpec s;
      s.k = 4 + 2 * rep;
      s.d = 24;
      s.activation = name;
      s.xi = rep == 0 ? 0.5 : rep == 1 ? 1.0 : std::sqrt(static_cast<double>(s.k));
      s.weights = rep == 2 ? WeightRegime::sphere : WeightRegime::orthonormal;
      const Instance inst = generate_instance(s, derive_seed(ctx.seed, "forms-" + name, rep));
      Rng rng = make_stream(ctx.seed, "forms-chat-" + name, static_cast<std::uint64_t>(rep));
      const PopulationParams p = make_population_params(inst.teacher, quantized_signs(rng, s.k));
      const bool finite = inst.teacher.base.activation.degree() >= 0;
      for (double m : m_grid()) {
        const HEvalReport a = h_closed(p, m);
        const HEvalReport b = h_series(p, m, p.P(), p.P());
        const double diff = std::abs(a.value - b.value);
        const double tol = finite ? kFiniteHermiteTol : a.truncation_bound + b.truncation_bound;
        if (finite) worst_finite = std::max(worst_finite, diff);
        violations += diff > tol;
        ++evaluations;
      }
    }
  }
  return {violations == 0, std::to_string(evaluations) + " evaluations over " + std::to_string(names.size()) +
                               " activations, " + std::to_string(violations) +
                               " outside bound; finite-Hermite max diff " + fmt("%.2e", worst_finite)};
}

// ---- 4: h on the hardness instance with sigma = He_p ----

Outcome check_hardness_formula(const Context& ctx) {
  double worst = 0.0;
  int cases = 0;
  for (Eigen::Index k : {3, 4, 6, 8}) {
    const HardnessInstance h = hardness_instance(k);
    const MatrixXd G = h.W * h.W.transpose();
    for (int p0 : {2, 3, 4, 5}) {
      BaseModel base{h.W, VectorXd::Ones(k), make_activation("he" + std::to_string(p0))};
      const TeacherModel t(base, Perturbation{1.0, std::nullopt, h.c, h.u});
      Rng rng = make_stream(ctx.seed, "hardness-formula", static_cast<std::uint64_t>(10 * k + p0));
      const VectorXd c_hat = quantized_signs(rng, k);
      const PopulationParams pp = make_population_params(t, c_hat);
      const double kk = static_cast<double>(k);
      for (double m : m_grid()) {
        double ref = 0.0;
        for (Eigen::Index i = 0; i < k; ++i) {
          for (Eigen::Index j = 0; j < k; ++j) {
            ref += h.c[i] * c_hat[j] * std::pow(G(i, j) + h.c[i] * c_hat[j] * m, p0 - 1);
          }
        }
        ref *= 2.0 * p0 * std::pow(kk / (kk + 1.0), p0);
        worst = std::max(worst, std::abs(h_closed(pp, m).value - ref) / std::max(1.0, std::abs(ref)));
        ++cases;
      }
    }
  }
  return {worst <= kHardnessFormulaTol,
          std::to_string(cases) + " points (k in {3,4,6,8}, p in 2..5), max rel. error " + fmt("%.2e", worst)};
}

// ---- 5: hardness geometry and fine-tuning SGD on k = 6 ----

Outcome check_hardness_sgd(const Context& ctx) {
  double worst = 0.0;
  for (Eigen::Index k = 2; k <= 12; ++k) {
    const HardnessInstance h = hardness_instance(k);
    MatrixXd V = h.W + h.c * h.u.transpose();
    for (Eigen::Index i = 0; i < k; ++i) V.row(i) /= V.row(i).norm();
    worst = std::max(worst, (V * V.transpose() - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff());
  }
  ExperimentConfig c = ctx.config("hardness-demo");
  c.instance.k = 6;
  c.instance.activation = "he3";
  c.instance.weights = WeightRegime::hardness;
  c.seeds = 10;
  const ExperimentResult r = run_experiment(c);
  const bool ok = worst <= kGramTol && r.check_ok;
  return {ok, "Gram max deviation " + fmt("%.1e", worst) + " (k 2..12); d " +
                  std::to_string(r.summary.at("d").get<std::int64_t>()) + ", " +
                  std::to_string(r.summary.at("reached_m2_0.9").get<std::int64_t>()) +
                  "/10 seeds reach m^2 >= 0.9 within T = " +
                  fmt("%.0f", r.summary.at("budget_per_d").get<double>()) + " d"};
}

// ---- 6: weak-then-strong recovery in three settings ----

Outcome check_convergence(const Context& ctx) {
  struct Setting {
    std::string name;
    WeightRegime weights;
    std::optional<double> xi_bar;
  };
  const std::vector<Setting> settings{{"orthonormal xi=1", WeightRegime::orthonormal, std::nullopt},
                                      {"orthonormal xi=0.3 sqrt(k)", WeightRegime::orthonormal, 0.3},
                                      {"separated xi=1", WeightRegime::separated, std::nullopt}};
  bool ok = true;
  std::ostringstream detail;
  for (const Setting& st : settings) {
    ExperimentConfig c = ctx.config("run-sgd");
    c.instance.k = 16;
    c.instance.d = 256;
    c.instance.weights = st.weights;
    c.instance.xi = 1.0;
    c.instance.xi_bar = st.xi_bar;
    c.mode = TrainMode::frozen_c;
    c.eta = 3e-5;
    c.T = 1000000;
    c.log_stride = 1000;
    c.seeds = 10;
    const ExperimentResult r = run_experiment(c);
    int good = 0;
    for (const json& s : r.summary.at("cells").at(0).at("seeds")) {
      const double weak = tau_value(s.at("tau_weak"));
      const double strong = tau_value(s.at("tau_strong"));
      good += s.at("final_m2").get<double>() >= 0.9 && weak < strong && strong < static_cast<double>(*c.T);
    }
    ok = ok && good >= 8;
    detail << (detail.tellp() > 0 ? "; " : "") << st.name << " " << good << "/10";
  }
  return {ok, detail.str() + " (need >= 8/10: m_T^2 >= 0.9 and tau_weak < tau_strong < T)"};
}

// ---- 7: two perturbations, one function ----

Outcome check_global_optima(const Context& ctx) {
  const GlobalOptimaExample ex = global_optima_example();
  Rng rng = make_stream(ctx.seed, "acceptance-global-optima");
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const VectorXd x = gaussian_vector(rng, 2);
    worst = std::max(worst, std::abs(teacher_forward(ex.teacher_a, x) - teacher_forward(ex.teacher_b, x)));
  }
  const bool same_norm = ex.teacher_a.pert.c.norm() == ex.teacher_b.pert.c.norm();
  const MatrixXd A = ex.teacher_a.base.W + ex.teacher_a.pert.xi * ex.teacher_a.pert.c * ex.teacher_a.pert.u.transpose();
  const MatrixXd B = ex.teacher_b.base.W + ex.teacher_b.pert.xi * ex.teacher_b.pert.c * ex.teacher_b.pert.u.transpose();
  const double same = std::max((A.row(0) - B.row(0)).norm(), (A.row(1) - B.row(1)).norm());
  const double swapped = std::max((A.row(0) - B.row(1)).norm(), (A.row(1) - B.row(0)).norm());
  const double separation = std::min(same, swapped);
  return {worst <= kGlobalOptimaTol && same_norm && separation > 0.0,
          "max |f_A - f_B| " + fmt("%.1e", worst) + " on 1000 points, |c| equal: " + (same_norm ? "yes" : "no") +
              ", weight-set distance " + fmt("%.3f", separation)};
}

// ---- 8: second-layer recovery of c ----

Outcome check_recovery(const Context& ctx) {
  int exact = 0;
  double worst_err = 0.0;
  double overlap = 0.0;
  for (int n = 0; n < 10; ++n) {
    ExperimentConfig c = ctx.config("recover-c");
    c.root_seed = derive_seed(ctx.seed, "recover-c", static_cast<std::uint64_t>(n));
    c.instance.k = 16;
    c.instance.d = 64;
    c.instance.xi = 1.0;
    c.use_true_u = true;
    c.samples = 50000;
    exact += run_experiment(c).summary.at("exact").get<bool>();

    // 1 - <u, u_hat> at the largest value the bound allows for error eps.
    const Instance inst = generate_instance(c.instance, derive_seed(c.root_seed, "instance-seed", 0));
    const Activation& act = inst.teacher.base.activation;
    const double C_sigma = act.derivative_sq();
    const double k = 16.0, xi = 1.0, lmax = inst.teacher.base.lambda_max();
    const double gap = kRecoveryEps * (k + xi * xi) / (2.0 * C_sigma * lmax * lmax * xi * xi * k * k);
    c.use_true_u = false;
    c.overlap = 1.0 - gap;
    overlap = *c.overlap;
    worst_err = std::max(worst_err, run_experiment(c).summary.at("mc_error").get<double>());
  }
  return {exact == 10 && worst_err <= kRecoveryEps,
          "exact u_hat: " + std::to_string(exact) + "/10 sign-exact; overlap " + fmt("%.5f", overlap) +
              ": max population error " + fmt("%.4f", worst_err) + " (eps 0.05)"};
}

// ---- 9: anti-concentration of sum lambda_i^2 c_i chat_i ----

Outcome check_anticoncentration(const Context& ctx) {
  ExperimentConfig c = ctx.config("anticonc");
  c.instance.k = 64;
  c.instance.d = 128;
  c.trials = 10000;
  c.gamma_grid = {0.1, 0.4, 1.6};
  const ExperimentResult r = run_experiment(c);
  bool ok = true;
  std::ostringstream detail;
  for (const json& q : r.summary.at("ratios")) {
    if (q.at("statistic") != "frobenius") continue;
    const double lo = q.at("ratio_lo").is_null() ? 0.0 : q.at("ratio_lo").get<double>();
    const double hi = q.at("ratio_hi").is_null() ? std::numeric_limits<double>::infinity()
                                                   : q.at("ratio_hi").get<double>();
    ok = ok && hi >= kAnticoncLo && lo <= kAnticoncHi;
    detail << (detail.tellp() > 0 ? "; " : "") << "p(" << q.at("gamma_hi").get<double>() << ")/p("
           << q.at("gamma_lo").get<double>() << ") in [" << fmt("%.2f", lo) << ", " << fmt("%.2f", hi) << "]";
  }
  return {ok, detail.str() + " (target band [1.4, 2.8])"};
}

// ---- 10: second moment of the sample gradient against its bound ----

Outcome check_variance(const Context& ctx) {
  // Adversarial state: c = c_hat = 1/sqrt(k), u_hat = -u keeps every neuron
  // maximally misaligned.
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  std::ostringstream detail;
  for (int k : {4, 8, 16}) {
    for (double xi : {0.5, 1.0, 2.0}) {
      const int d = 256;
      Rng rng = make_stream(ctx.seed, "variance-grid", static_cast<std::uint64_t>(k));
      const MatrixXd W = make_orthonormal_weights(k, d, rng);
      Perturbation p;
      p.xi = xi;
      p.c = VectorXd::Constant(k, 1.0 / std::sqrt(static_cast<double>(k)));
      const SubspaceProjector proj(W);
      VectorXd u = gaussian_vector(rng, d);
      proj.project_out_inplace(u);
      p.u = u.normalized();
      const TeacherModel t(BaseModel{W, VectorXd::Ones(k), make_activation("relu")}, p);
      StudentState s;
      s.u_hat = -p.u;
      s.c_hat = p.c;
      const ConditionReport r = condition_suite(t, s, 100000, derive_seed(ctx.seed, "variance", k));
      lo = std::min(lo, r.ratio_norm2);
      hi = std::max(hi, r.ratio_norm2);
      detail << (detail.tellp() > 0 ? " " : "") << "k" << k << "/xi" << xi << "=" << fmt("%.3f", r.ratio_norm2);
    }
  }
  const double band = hi / lo;
  return {band <= kVarianceBand, "band " + fmt("%.2f", band) + " (limit 3); ratios " + detail.str()};
}

// ---- 11: qualitative figure properties ----

ExperimentConfig figure_base(const Context& ctx) {
  ExperimentConfig c = ctx.config("run-sgd");
  c.instance.k = 25;
  c.instance.d = 500;
  c.instance.weights = WeightRegime::sphere;
  c.instance.c_mode = CMode::spherical;
  c.mode = TrainMode::joint;
  return c;
}

Outcome check_figures(const Context& ctx) {
  std::ostringstream detail;
  const double sk = 5.0;

  // (a) linearized floor vs trained model, quadratic at xi = sqrt(k).
  ExperimentConfig a = figure_base(ctx);
  a.instance.activation = "quadratic";
  a.instance.xi = sk;
  a.eta = 1e-6;
  a.T = 300000;
  a.seeds = 3;
  a.log_stride = 1000;
  a.eval_samples = 2000;
  const json joint = run_experiment(a).summary.at("cells").at(0).at("seeds");
  a.mode = TrainMode::linearized;
  const json lin = run_experiment(a).summary.at("cells").at(0).at("seeds");
  bool ok_a = true;
  double worst_factor = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < joint.size(); ++i) {
    const double floor = lin.at(i).at("min_eval_loss").get<double>();
    const double final_loss = joint.at(i).at("final_eval_loss").get<double>();
    const double factor = final_loss > 0.0 ? floor / final_loss : std::numeric_limits<double>::infinity();
    worst_factor = std::min(worst_factor, factor);
    ok_a = ok_a && floor >= kFloorFactor * final_loss;
  }
  detail << "(a) floor/final >= " << fmt("%.3g", worst_factor) << " " << (ok_a ? "ok" : "FAIL");

  // (b) median weak-recovery time along the xi grid for He3.
  ExperimentConfig b = figure_base(ctx);
  b.kind = "sweep-xi";
  b.instance.activation = "he3";
  b.instance.conv.scaling = NeuronScaling::squared;
  b.instance.conv.output_over_xi = true;
  b.constrain_subspace = false;
  b.xi_grid = {1.0, sk, std::pow(500.0, 0.25) * sk};
  b.eta = 3e-5;
  b.T = 600000;
  b.seeds = 5;
  b.log_stride = 1000;
  const json cells = run_experiment(b).summary.at("cells");
  std::vector<double> med;
  for (const json& cell : cells) med.push_back(tau_value(cell.at("median_tau_weak")));
  bool ok_b = true;
  for (std::size_t i = 1; i < med.size(); ++i) {
    ok_b = ok_b && (med[i] > med[i - 1] || (std::isinf(med[i]) && !std::isinf(med[i - 1])));
  }
  detail << "; (b) median tau_weak";
  for (double m : med) detail << " " << (std::isinf(m) ? std::string("never") : fmt("%.0f", m));
  detail << " " << (ok_b ? "ok" : "FAIL");

  // (c) four activations at xi = 1, step normalized by E[sigma'(g)^2].
  bool ok_c = true;
  detail << "; (c)";
  for (const char* name : {"relu", "sigmoid", "quadratic", "he3"}) {
    ExperimentConfig c = figure_base(ctx);
    c.instance.activation = name;
    c.instance.xi = 1.0;
    c.constrain_subspace = false;
    c.eta = 1e-4 / make_activation(name).derivative_sq();
    c.T = 200000;
    c.seeds = 3;
    c.log_stride = 1000;
    int good = 0;
    const json seeds = run_experiment(c).summary.at("cells").at(0).at("seeds");
    for (const json& s : seeds) {
      good += s.at("final_m2").get<double>() >= 0.8 && tau_value(s.at("tau_weak")) <= 0.5 * static_cast<double>(*c.T);
    }
    ok_c = ok_c && good == static_cast<int>(seeds.size());
    detail << " " << name << " " << good << "/" << seeds.size();
  }
  detail << " " << (ok_c ? "ok" : "FAIL");
  return {ok_a && ok_b && ok_c, detail.str()};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lora-dyn acceptance checks"};
  std::vector<int> only;
  Context ctx;
  ctx.out = "acceptance-runs";
  app.add_option("--only", only, "run only these criteria (1..11)")->check(CLI::Range(1, 11));
  app.add_option("--out", ctx.out, "directory for run outputs");
  app.add_option("--seed", ctx.seed, "root seed");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "hermite foundation", check_hermite},
      {2, "gradient correctness", check_gradients},
      {3, "form equivalence", check_forms},
      {4, "hardness specialization", check_hardness_formula},
      {5, "hardness instance", check_hardness_sgd},
      {6, "convergence", check_convergence},
      {7, "global optima", check_global_optima},
      {8, "c recovery", check_recovery},
      {9, "anti-concentration trend", check_anticoncentration},
      {10, "variance scaling", check_variance},
      {11, "figure properties", check_figures},
  };
  const std::set<int> selected(only.begin(), only.end());
  bool all_ok = true;
  for (const Criterion& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d  %s  %-26s %s [%.1f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(),
                secs);
    std::fflush(stdout);
    all_ok = all_ok && o.pass;
  }
  return all_ok ? 0 : 1;
}
