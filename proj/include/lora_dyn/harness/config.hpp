// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: defaults, JSON echo, and validation.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lora_dyn/dynamics.hpp"
#include "lora_dyn/errors.hpp"
#include "lora_dyn/harness/instance.hpp"
#include "lora_dyn/recovery.hpp"

namespace lora_dyn {

inline const std::set<std::string>& experiment_kinds() {
  static const std::set<std::string> kinds{"run-sgd",        "sweep-xi",     "sweep-alpha", "reproduce-fig",
                                           "validate-gradients", "hardness-demo", "recover-c",  "anticonc",
                                           "condition-suite"};
  return kinds;
}

struct ExperimentConfig {
  std::string kind = "run-sgd";

  // Instance: generated from `instance` unless instance_path is set.
  InstanceSpec instance;
  std::optional<std::string> instance_path;

  // SGD. Unset eta/T fall back to the schedule (if any) or the kind's defaults.
  std::optional<double> eta;
  std::optional<std::int64_t> T;
  TrainMode mode = TrainMode::frozen_c;
  double epsilon = 0.1;
  std::int64_t log_stride = 100;
  bool restart_on_sign = true;
  bool constrain_subspace = true;
  std::int64_t eval_samples = 0;
  double eta_c = -1.0;
  double weak_threshold = 1.0 / std::sqrt(2.0);
  std::optional<ScheduleSetting> schedule;
  ScheduleConstants constants;
  double V_k = 0.0;  // generic schedule only
  double S_k = 0.0;

  std::uint64_t root_seed = 0;
  std::int64_t seeds = 1;
  std::string out_dir = "runs";

  // Sweeps.
  std::vector<double> xi_grid;
  std::vector<std::string> activation_grid;
  std::vector<double> alpha_grid;
  int figure = 0;

  // Monte Carlo / diagnostics.
  std::int64_t samples = 200000;
  std::int64_t trials = 10000;
  std::vector<double> gamma_grid{0.1, 0.4, 1.6};
  std::int64_t instances = 20;
  std::optional<double> overlap;  // prescribed <u, u_hat> for diagnostics and recover-c

  // recover-c.
  bool use_true_u = false;
  std::optional<std::string> u_hat_path;
  std::int64_t fit_samples = 0;  // 0: max(100 k, 1e4)
  double ridge = kDefaultRidge;
  int feature_grid = 0;

  // hardness-demo: iteration budget = budget_per_d * d.
  double budget_per_d = 0.0;

  std::int64_t effective_fit_samples() const {
    return fit_samples > 0 ? fit_samples : std::max<std::int64_t>(100 * instance.k, 10000);
  }

  void validate() const {
    if (!experiment_kinds().count(kind)) throw ConfigError("unknown experiment kind '" + kind + "'");
    if (seeds < 1) throw ConfigError("config: seed count must be >= 1");
    if (!instance_path) instance.validate();
    if (eta && (!(*eta >= 0.0) || !std::isfinite(*eta))) throw ConfigError("config: eta must be finite and >= 0");
    if (T && *T < 1) throw ConfigError("config: T must be >= 1");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("config: epsilon must lie in (0,1)");
    if (log_stride < 1) throw ConfigError("config: log_stride must be >= 1");
    if (instance_path && (kind == "sweep-xi" || kind == "sweep-alpha" || kind == "reproduce-fig")) {
      throw ConfigError(kind + ": grids and figures generate their own instances; drop --instance");
    }
    if (kind == "sweep-xi" && xi_grid.empty() && activation_grid.empty()) {
      throw ConfigError("sweep-xi: grid is empty (give xi_grid or activation_grid)");
    }
    if (kind == "sweep-alpha") {
      if (alpha_grid.empty()) throw ConfigError("sweep-alpha: alpha grid is empty");
      for (double a : alpha_grid) {
        if (!(a >= 0.0 && a < 1.0)) throw ConfigError("sweep-alpha: alpha must lie in [0,1)");
      }
    }
    if (kind == "reproduce-fig" && (figure < 1 || figure > 5)) throw ConfigError("reproduce-fig: figure must be 1..5");
    if (kind == "anticonc" && gamma_grid.empty()) throw ConfigError("anticonc: gamma grid is empty");
    if (kind == "recover-c" && !use_true_u && !u_hat_path && !overlap) {
      throw ConfigError("recover-c: give --u-hat, --use-true-u, or --overlap");
    }
    if (overlap && !(std::abs(*overlap) <= 1.0)) throw ConfigError("config: overlap must lie in [-1,1]");
    if (samples < 1000) throw ConfigError("config: samples must be >= 1000");
    if (trials < 1000) throw ConfigError("config: trials must be >= 1000");
    if (instances < 1) throw ConfigError("config: instances must be >= 1");
  }
};

// ---- JSON ----

inline json instance_spec_to_json(const InstanceSpec& s) {
  json j{{"k", s.k},
         {"d", s.d},
         {"xi", s.xi},
         {"activation", s.activation},
         {"order", s.order},
         {"weights", to_string(s.weights)},
         {"c_mode", to_string(s.c_mode)},
         {"orthogonal_u", s.orthogonal_u},
         {"alpha", s.alpha},
         {"neuron_scaling", to_string(s.conv.scaling)},
         {"output_over_xi", s.conv.output_over_xi}};
  j["xi_bar"] = s.xi_bar ? json(*s.xi_bar) : json(nullptr);
  return j;
}

inline InstanceSpec instance_spec_from_json(const json& j, InstanceSpec s = {}) {
  if (j.contains("k")) s.k = j.at("k").get<Eigen::Index>();
  if (j.contains("d")) s.d = j.at("d").get<Eigen::Index>();
  if (j.contains("xi")) s.xi = j.at("xi").get<double>();
  if (j.contains("xi_bar")) s.xi_bar = j.at("xi_bar").is_null() ? std::nullopt : std::optional(j.at("xi_bar").get<double>());
  if (j.contains("activation")) s.activation = j.at("activation").get<std::string>();
  if (j.contains("order")) s.order = j.at("order").get<int>();
  if (j.contains("weights")) s.weights = parse_weight_regime(j.at("weights").get<std::string>());
  if (j.contains("c_mode")) s.c_mode = parse_c_mode(j.at("c_mode").get<std::string>());
  if (j.contains("orthogonal_u")) s.orthogonal_u = j.at("orthogonal_u").get<bool>();
  if (j.contains("alpha")) s.alpha = j.at("alpha").get<double>();
  if (j.contains("neuron_scaling")) s.conv.scaling = parse_neuron_scaling(j.at("neuron_scaling").get<std::string>());
  if (j.contains("output_over_xi")) s.conv.output_over_xi = j.at("output_over_xi").get<bool>();
  return s;
}

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["kind"] = c.kind;
  j["instance"] = instance_spec_to_json(c.instance);
  j["instance_path"] = optional_json(c.instance_path);
  j["eta"] = optional_json(c.eta);
  j["T"] = optional_json(c.T);
  j["mode"] = to_string(c.mode);
  j["epsilon"] = c.epsilon;
  j["log_stride"] = c.log_stride;
  j["restart_on_sign"] = c.restart_on_sign;
  j["constrain_subspace"] = c.constrain_subspace;
  j["eval_samples"] = c.eval_samples;
  j["eta_c"] = c.eta_c;
  j["weak_threshold"] = c.weak_threshold;
  j["schedule"] = c.schedule ? json(to_string(*c.schedule)) : json(nullptr);
  j["schedule_constants"] = {{"C_delta", c.constants.C_delta},
                             {"gamma", c.constants.gamma},
                             {"beta", c.constants.beta},
                             {"mu1_proxy", c.constants.mu1_proxy},
                             {"log_factor_override", optional_json(c.constants.log_factor_override)},
                             {"V_k", c.V_k},
                             {"S_k", c.S_k}};
  j["root_seed"] = c.root_seed;
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  j["xi_grid"] = c.xi_grid;
  j["activation_grid"] = c.activation_grid;
  j["alpha_grid"] = c.alpha_grid;
  j["figure"] = c.figure;
  j["samples"] = c.samples;
  j["trials"] = c.trials;
  j["gamma_grid"] = c.gamma_grid;
  j["instances"] = c.instances;
  j["overlap"] = optional_json(c.overlap);
  j["use_true_u"] = c.use_true_u;
  j["u_hat_path"] = optional_json(c.u_hat_path);
  j["fit_samples"] = c.fit_samples;
  j["ridge"] = c.ridge;
  j["feature_grid"] = c.feature_grid;
  j["budget_per_d"] = c.budget_per_d;
  return j;
}

/// Overlays the keys present in j onto base; unknown keys are an error.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig c = {}) {
  static const std::set<std::string> known{
      "kind",        "instance",   "instance_path", "eta",          "T",          "mode",
      "epsilon",     "log_stride", "restart_on_sign", "constrain_subspace", "eval_samples", "eta_c",
      "weak_threshold", "schedule", "schedule_constants", "root_seed", "seeds",  "out_dir",
      "xi_grid",     "activation_grid", "alpha_grid", "figure",      "samples",    "trials",
      "gamma_grid",  "instances",  "overlap",      "use_true_u",   "u_hat_path", "fit_samples",
      "ridge",       "feature_grid", "budget_per_d"};
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!known.count(it.key())) throw ConfigError("config: unknown key '" + it.key() + "'");
    }
    auto opt_double = [&](const char* key, std::optional<double>& dst) {
      if (j.contains(key)) dst = j.at(key).is_null() ? std::nullopt : std::optional(j.at(key).get<double>());
    };
    auto opt_string = [&](const char* key, std::optional<std::string>& dst) {
      if (j.contains(key)) dst = j.at(key).is_null() ? std::nullopt : std::optional(j.at(key).get<std::string>());
    };
    if (j.contains("kind")) c.kind = j.at("kind").get<std::string>();
    if (j.contains("instance")) c.instance = instance_spec_from_json(j.at("instance"), c.instance);
    opt_string("instance_path", c.instance_path);
    opt_double("eta", c.eta);
    if (j.contains("T")) c.T = j.at("T").is_null() ? std::nullopt : std::optional(j.at("T").get<std::int64_t>());
    if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
    if (j.contains("log_stride")) c.log_stride = j.at("log_stride").get<std::int64_t>();
    if (j.contains("restart_on_sign")) c.restart_on_sign = j.at("restart_on_sign").get<bool>();
    if (j.contains("constrain_subspace")) c.constrain_subspace = j.at("constrain_subspace").get<bool>();
    if (j.contains("eval_samples")) c.eval_samples = j.at("eval_samples").get<std::int64_t>();
    if (j.contains("eta_c")) c.eta_c = j.at("eta_c").get<double>();
    if (j.contains("weak_threshold")) c.weak_threshold = j.at("weak_threshold").get<double>();
    if (j.contains("schedule")) {
      c.schedule = j.at("schedule").is_null() ? std::nullopt
                                               : std::optional(parse_schedule_setting(j.at("schedule").get<std::string>()));
    }
    if (j.contains("schedule_constants")) {
      const json& s = j.at("schedule_constants");
      c.constants.C_delta = s.value("C_delta", c.constants.C_delta);
      c.constants.gamma = s.value("gamma", c.constants.gamma);
      c.constants.beta = s.value("beta", c.constants.beta);
      c.constants.mu1_proxy = s.value("mu1_proxy", c.constants.mu1_proxy);
      if (s.contains("log_factor_override")) {
        c.constants.log_factor_override = s.at("log_factor_override").is_null()
                                              ? std::nullopt
                                              : std::optional(s.at("log_factor_override").get<double>());
      }
      c.V_k = s.value("V_k", c.V_k);
      c.S_k = s.value("S_k", c.S_k);
    }
    if (j.contains("root_seed")) c.root_seed = j.at("root_seed").get<std::uint64_t>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::int64_t>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("xi_grid")) c.xi_grid = j.at("xi_grid").get<std::vector<double>>();
    if (j.contains("activation_grid")) c.activation_grid = j.at("activation_grid").get<std::vector<std::string>>();
    if (j.contains("alpha_grid")) c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
    if (j.contains("figure")) c.figure = j.at("figure").get<int>();
    if (j.contains("samples")) c.samples = j.at("samples").get<std::int64_t>();
    if (j.contains("trials")) c.trials = j.at("trials").get<std::int64_t>();
    if (j.contains("gamma_grid")) c.gamma_grid = j.at("gamma_grid").get<std::vector<double>>();
    if (j.contains("instances")) c.instances = j.at("instances").get<std::int64_t>();
    opt_double("overlap", c.overlap);
    if (j.contains("use_true_u")) c.use_true_u = j.at("use_true_u").get<bool>();
    opt_string("u_hat_path", c.u_hat_path);
    if (j.contains("fit_samples")) c.fit_samples = j.at("fit_samples").get<std::int64_t>();
    if (j.contains("ridge")) c.ridge = j.at("ridge").get<double>();
    if (j.contains("feature_grid")) c.feature_grid = j.at("feature_grid").get<int>();
    if (j.contains("budget_per_d")) c.budget_per_d = j.at("budget_per_d").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace lora_dyn
