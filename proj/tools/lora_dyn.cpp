// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// lora-dyn command line: lora-dyn <subcommand> [flags]

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lora_dyn/harness/experiments.hpp"

namespace {

using lora_dyn::ExperimentConfig;

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kCheck = 4 };

struct Flags {
  std::optional<std::string> config, instance;
  // instance generator
  std::optional<long long> k, d;
  std::optional<double> xi, xi_bar, alpha;
  std::optional<std::string> activation, weights, c_mode, neuron_scaling;
  std::optional<int> order;
  bool non_orthogonal_u = false, output_over_xi = false;
  // sgd
  std::optional<double> eta, epsilon, eta_c, weak_threshold;
  std::optional<long long> T, log_stride, eval_samples;
  std::optional<std::string> mode, schedule;
  std::optional<double> c_delta, gamma_const, beta, mu1_proxy, log_factor, V_k, S_k;
  bool no_restart = false, unconstrained = false, weak_half = false;
  // seeds, output
  std::optional<unsigned long long> seed;
  std::optional<long long> seeds;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  // grids and diagnostics
  std::optional<std::vector<double>> xi_grid, alpha_grid, gamma_grid;
  std::optional<std::vector<std::string>> activation_grid;
  std::optional<long long> samples, trials, instances, fit_samples;
  std::optional<double> overlap, ridge, budget_per_d;
  std::optional<int> feature_grid;
  std::optional<std::string> u_hat;
  bool use_true_u = false;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config file (flags override its keys)")->check(CLI::ExistingFile);
  app->add_option("--instance", f.instance, "instance JSON (instead of generating one)")->check(CLI::ExistingFile);
  app->add_option("--k", f.k, "number of neurons");
  app->add_option("--d", f.d, "input dimension");
  app->add_option("--xi", f.xi, "perturbation scale");
  app->add_option("--xi-bar", f.xi_bar, "Frobenius-scaled perturbation (xi = xi_bar sqrt k)");
  app->add_option("--activation", f.activation, "relu | sigmoid | tanh | quadratic | identity | heP | custom:<file>");
  app->add_option("--order", f.order, "Hermite truncation order (0: default)");
  app->add_option("--weights", f.weights, "orthonormal | separated | sphere | hardness");
  app->add_option("--c-mode", f.c_mode, "quantized | spherical");
  app->add_flag("--non-orthogonal-u", f.non_orthogonal_u, "sample u on the full sphere");
  app->add_option("--alpha", f.alpha, "norm of the projection of u onto span(W)");
  app->add_option("--neuron-scaling", f.neuron_scaling, "unit_norm | none | squared");
  app->add_flag("--output-over-xi", f.output_over_xi, "scale the network output by 1/xi");
  app->add_option("--eta", f.eta, "step size");
  app->add_option("--T", f.T, "iterations");
  app->add_option("--mode", f.mode, "frozen_c | joint | linearized");
  app->add_option("--epsilon", f.epsilon, "target accuracy (strong threshold 1 - eps/6)");
  app->add_option("--log-stride", f.log_stride, "trajectory logging stride");
  app->add_option("--eval-samples", f.eval_samples, "held-out samples for loss curves (0: off)");
  app->add_option("--eta-c", f.eta_c, "c_hat step size (default: eta)");
  app->add_option("--weak-threshold", f.weak_threshold, "weak recovery threshold r");
  app->add_flag("--weak-half", f.weak_half, "use r = 1/2 for weak recovery");
  app->add_flag("--no-restart", f.no_restart, "do not flip u_0 to match sign h(0)");
  app->add_flag("--unconstrained", f.unconstrained, "do not project onto span(W)^perp");
  app->add_option("--schedule", f.schedule, "orth_xi1 | orth_frob | separated | generic");
  app->add_option("--C-delta", f.c_delta, "schedule constant");
  app->add_option("--gamma-const", f.gamma_const, "schedule anti-concentration constant");
  app->add_option("--beta", f.beta, "schedule initialization constant");
  app->add_option("--mu1-proxy", f.mu1_proxy, "generic schedule mu_1");
  app->add_option("--log-factor", f.log_factor, "override the schedule log factor");
  app->add_option("--V-k", f.V_k, "generic schedule variance bound");
  app->add_option("--S-k", f.S_k, "generic schedule signal bound");
  app->add_option("--seed", f.seed, "root seed");
  app->add_option("--seeds", f.seeds, "number of seeds");
  app->add_option("--out", f.out, "output root directory");
  app->add_option("--threads", f.threads, "worker lanes (default: hardware)");
  app->add_option("--xi-grid", f.xi_grid, "xi values")->delimiter(',');
  app->add_option("--activation-grid", f.activation_grid, "activations")->delimiter(',');
  app->add_option("--alpha-grid", f.alpha_grid, "alpha values")->delimiter(',');
  app->add_option("--gamma-grid", f.gamma_grid, "small-ball levels")->delimiter(',');
  app->add_option("--samples", f.samples, "Monte Carlo samples");
  app->add_option("--trials", f.trials, "anti-concentration trials");
  app->add_option("--instances", f.instances, "random instances for validate-gradients");
  app->add_option("--overlap", f.overlap, "prescribed <u_hat, u>");
  app->add_option("--u-hat", f.u_hat, "u_hat JSON (array, or object with key u_hat)")->check(CLI::ExistingFile);
  app->add_flag("--use-true-u", f.use_true_u, "recover c with u_hat = u");
  app->add_option("--fit-samples", f.fit_samples, "samples for the second-layer fit");
  app->add_option("--ridge", f.ridge, "ridge for the second-layer fit");
  app->add_option("--feature-grid", f.feature_grid, "feature levels per pair (0: the +-1/sqrt k pair)");
  app->add_option("--budget-per-d", f.budget_per_d, "hardness-demo iteration budget per dimension");
}

void kind_defaults(ExperimentConfig& c) {
  if (c.kind == "hardness-demo") {
    c.instance.k = 6;
    c.instance.activation = "he3";
    c.instance.weights = lora_dyn::WeightRegime::hardness;
  }
}

ExperimentConfig build_config(const std::string& kind, const Flags& f) {
  ExperimentConfig c;
  c.kind = kind;
  kind_defaults(c);
  if (f.config) {
    lora_dyn::json j;
    try {
      j = lora_dyn::json::parse(lora_dyn::read_file(*f.config));
    } catch (const lora_dyn::json::exception& e) {
      throw lora_dyn::ConfigError(std::string("config file: ") + e.what());
    }
    c = lora_dyn::config_from_json(j, c);
    c.kind = kind;
  }
  auto& s = c.instance;
  if (f.instance) c.instance_path = *f.instance;
  if (f.k) s.k = *f.k;
  if (f.d) s.d = *f.d;
  if (f.xi) s.xi = *f.xi, s.xi_bar.reset();
  if (f.xi_bar) s.xi_bar = *f.xi_bar;
  if (f.activation) s.activation = *f.activation;
  if (f.order) s.order = *f.order;
  if (f.weights) s.weights = lora_dyn::parse_weight_regime(*f.weights);
  if (f.c_mode) s.c_mode = lora_dyn::parse_c_mode(*f.c_mode);
  if (f.non_orthogonal_u) s.orthogonal_u = false;
  if (f.alpha) s.alpha = *f.alpha;
  if (f.neuron_scaling) s.conv.scaling = lora_dyn::parse_neuron_scaling(*f.neuron_scaling);
  if (f.output_over_xi) s.conv.output_over_xi = true;
  if (f.eta) c.eta = *f.eta;
  if (f.T) c.T = *f.T;
  if (f.mode) c.mode = lora_dyn::parse_train_mode(*f.mode);
  if (f.epsilon) c.epsilon = *f.epsilon;
  if (f.log_stride) c.log_stride = *f.log_stride;
  if (f.eval_samples) c.eval_samples = *f.eval_samples;
  if (f.eta_c) c.eta_c = *f.eta_c;
  if (f.weak_threshold) c.weak_threshold = *f.weak_threshold;
  if (f.weak_half) c.weak_threshold = 0.5;
  if (f.no_restart) c.restart_on_sign = false;
  if (f.unconstrained) c.constrain_subspace = false;
  if (f.schedule) c.schedule = lora_dyn::parse_schedule_setting(*f.schedule);
  if (f.c_delta) c.constants.C_delta = *f.c_delta;
  if (f.gamma_const) c.constants.gamma = *f.gamma_const;
  if (f.beta) c.constants.beta = *f.beta;
  if (f.mu1_proxy) c.constants.mu1_proxy = *f.mu1_proxy;
  if (f.log_factor) c.constants.log_factor_override = *f.log_factor;
  if (f.V_k) c.V_k = *f.V_k;
  if (f.S_k) c.S_k = *f.S_k;
  if (f.seed) c.root_seed = *f.seed;
  if (f.seeds) c.seeds = *f.seeds;
  if (f.out) c.out_dir = *f.out;
  if (f.xi_grid) c.xi_grid = *f.xi_grid;
  if (f.activation_grid) c.activation_grid = *f.activation_grid;
  if (f.alpha_grid) c.alpha_grid = *f.alpha_grid;
  if (f.gamma_grid) c.gamma_grid = *f.gamma_grid;
  if (f.samples) c.samples = *f.samples;
  if (f.trials) c.trials = *f.trials;
  if (f.instances) c.instances = *f.instances;
  if (f.overlap) c.overlap = *f.overlap;
  if (f.ridge) c.ridge = *f.ridge;
  if (f.budget_per_d) c.budget_per_d = *f.budget_per_d;
  if (f.feature_grid) c.feature_grid = *f.feature_grid;
  if (f.u_hat) c.u_hat_path = *f.u_hat;
  if (f.use_true_u) c.use_true_u = true;
  if (f.fit_samples) c.fit_samples = *f.fit_samples;
  return c;
}

void print_summary(const lora_dyn::ExperimentResult& r) {
  std::cout << r.dir.string() << "\n";
  const auto& s = r.summary;
  if (s.contains("cells")) {
    for (const auto& cell : s.at("cells")) {
      const std::string label = cell.at("label").get<std::string>();
      std::cout << (label.empty() ? "run" : label) << ": median tau_weak=" << cell.at("median_tau_weak").dump()
                << " median final m^2=" << cell.at("median_final_m2").dump() << " reached "
                << cell.at("reached_target").dump() << "/" << cell.at("seeds").size() << "\n";
    }
  }
  if (s.contains("gram_max_offdiag")) {
    std::cout << "perturbed Gram max off-diagonal: " << s.at("gram_max_offdiag").dump() << "\n";
  }
  if (s.contains("max_abs_z")) {
    std::cout << "max |z| = " << s.at("max_abs_z").dump() << ", outside 4 sigma: " << s.at("outside_4sigma").dump()
              << "\n";
  }
  if (s.contains("sign_agreement")) {
    std::cout << "sign agreement: " << s.at("sign_agreement").dump() << ", MC error " << s.at("mc_error").dump()
              << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rank-one fine-tuning dynamics: experiments and diagnostics"};
  app.require_subcommand(1);
  Flags flags;
  std::vector<std::pair<std::string, CLI::App*>> kinds;
  const std::vector<std::pair<const char*, const char*>> kind_help{
      {"run-sgd", "online SGD on one instance, over --seeds seeds"},
      {"sweep-xi", "SGD over --xi-grid (and --activation-grid)"},
      {"sweep-alpha", "SGD over --alpha-grid (u not orthogonal to span W)"},
      {"reproduce-fig", "desk-scale preset for figure 1..5"},
      {"validate-gradients", "Monte Carlo check of the population gradient"},
      {"hardness-demo", "SGD on the CSQ-hard instance"},
      {"recover-c", "second-layer fit for c given u_hat"},
      {"anticonc", "small-ball probabilities of h(0) and friends"},
      {"condition-suite", "gradient moments against their bounds"}};
  for (const auto& [name, help] : kind_help) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, flags);
    kinds.emplace_back(name, sub);
  }
  int figure = 0;
  kinds[3].second->add_option("figure", figure, "figure number 1..5")->required()->check(CLI::Range(1, 5));

  std::string verify_dir;
  CLI::App* verify = app.add_subcommand("verify", "recompute manifest hashes of a run directory");
  verify->add_option("dir", verify_dir)->required()->check(CLI::ExistingDirectory);

  std::string inst_out;
  CLI::App* make_inst = app.add_subcommand("make-instance", "generate an instance JSON");
  add_common(make_inst, flags);
  make_inst->add_option("path", inst_out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (flags.threads) setenv("LORA_DYN_THREADS", std::to_string(*flags.threads).c_str(), 1);
    if (verify->parsed()) {
      const lora_dyn::VerifyResult v = lora_dyn::verify_manifest(verify_dir);
      for (const auto& p : v.problems) std::cerr << "verify: " << p << "\n";
      std::cout << (v.ok ? "manifest OK\n" : "manifest MISMATCH\n");
      return v.ok ? kOk : kCheck;
    }
    if (make_inst->parsed()) {
      ExperimentConfig c = build_config("run-sgd", flags);
      lora_dyn::save_instance(lora_dyn::generate_instance(c.instance, c.root_seed), inst_out);
      std::cout << inst_out << "\n";
      return kOk;
    }
    for (const auto& [name, sub] : kinds) {
      if (!sub->parsed()) continue;
      ExperimentConfig c = build_config(name, flags);
      if (name == "reproduce-fig") c.figure = figure;
      const lora_dyn::ExperimentResult r = lora_dyn::run_experiment(c);
      print_summary(r);
      if (!r.check_ok) {
        std::cerr << "check failed: " << r.check_message << "\n";
        return kCheck;
      }
    }
    return kOk;
  } catch (const lora_dyn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const lora_dyn::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const lora_dyn::CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheck;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
}
