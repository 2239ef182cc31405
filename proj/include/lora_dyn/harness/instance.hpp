// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Instance generation and bit-exact JSON (de)serialization.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lora_dyn/errors.hpp"
#include "lora_dyn/hermite.hpp"
#include "lora_dyn/network.hpp"
#include "lora_dyn/rng.hpp"

namespace lora_dyn {

using json = nlohmann::json;

enum class WeightRegime { orthonormal, separated, sphere, hardness };

inline const char* to_string(WeightRegime w) {
  switch (w) {
    case WeightRegime::orthonormal: return "orthonormal";
    case WeightRegime::separated: return "separated";
    case WeightRegime::sphere: return "sphere";
    case WeightRegime::hardness: return "hardness";
  }
  return "?";
}

inline WeightRegime parse_weight_regime(const std::string& s) {
  if (s == "orthonormal") return WeightRegime::orthonormal;
  if (s == "separated") return WeightRegime::separated;
  if (s == "sphere") return WeightRegime::sphere;
  if (s == "hardness") return WeightRegime::hardness;
  throw ConfigError("unknown weight regime '" + s + "'");
}

/// Generator parameters. xi_bar, when set, overrides xi as xi_bar * sqrt(k).
struct InstanceSpec {
  Eigen::Index k = 25;
  Eigen::Index d = 500;
  double xi = 1.0;
  std::optional<double> xi_bar;
  std::string activation = "relu";
  int order = 0;
  WeightRegime weights = WeightRegime::orthonormal;
  CMode c_mode = CMode::quantized;
  bool orthogonal_u = true;
  double alpha = 0.0;  // ||Pi_W u|| for the orthogonality ablation
  NeuronConvention conv{};

  double resolved_xi() const { return xi_bar ? *xi_bar * std::sqrt(static_cast<double>(k)) : xi; }

  void validate() const {
    if (k < 1) throw ConfigError("instance: k must be >= 1");
    if (weights != WeightRegime::hardness && d < k) throw ConfigError("instance: need k <= d");
    if (weights != WeightRegime::hardness && orthogonal_u && alpha == 0.0 && d <= k) {
      throw ConfigError("instance: u orthogonal to span(W) needs d > k");
    }
    if (!(resolved_xi() >= 0.0) || !std::isfinite(resolved_xi())) throw ConfigError("instance: xi must be >= 0");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("instance: alpha must lie in [0,1)");
  }
};

struct Instance {
  InstanceSpec spec;
  std::uint64_t seed = 0;
  TeacherModel teacher;
};

inline Activation activation_from_spec(const std::string& name, int order) {
  if (name.rfind("custom:", 0) == 0) return load_tabulated_activation(name.substr(7), order);
  return make_activation(name, order);
}

/// Pure function of (spec, seed); all draws come from the "instance" stream.
inline Instance generate_instance(const InstanceSpec& spec_in, std::uint64_t seed) {
  InstanceSpec spec = spec_in;
  spec.validate();
  const double xi = spec.resolved_xi();
  const Activation act = activation_from_spec(spec.activation, spec.order);
  Rng rng = make_stream(seed, "instance");
  const Eigen::Index k = spec.k;

  if (spec.weights == WeightRegime::hardness) {
    const HardnessInstance h = hardness_instance(k);
    spec.d = h.d;
    BaseModel base{h.W, Eigen::VectorXd::Ones(k), act};
    Perturbation p;
    p.xi = xi;
    p.c = h.c;
    p.u = h.u;
    return Instance{spec, seed, TeacherModel(base, p, spec.conv)};
  }

  Eigen::MatrixXd W;
  switch (spec.weights) {
    case WeightRegime::orthonormal: W = make_orthonormal_weights(k, spec.d, rng); break;
    case WeightRegime::separated: W = make_separated_weights(k, spec.d, rng).W; break;
    case WeightRegime::sphere:
      W.resize(k, spec.d);
      for (Eigen::Index i = 0; i < k; ++i) W.row(i) = uniform_sphere(rng, spec.d).transpose();
      break;
    case WeightRegime::hardness: break;
  }
  BaseModel base{W, Eigen::VectorXd::Ones(k), act};
  Perturbation p;
  if (spec.alpha > 0.0) {
    p.xi = xi;
    p.c = spec.c_mode == CMode::quantized ? quantized_signs(rng, k) : uniform_sphere(rng, k);
    const SubspaceProjector proj(W);
    const Eigen::VectorXd u1 = (W.transpose() * gaussian_vector(rng, k)).normalized();
    Eigen::VectorXd u2 = proj.project_out(gaussian_vector(rng, spec.d));
    proj.project_out_inplace(u2);
    u2.normalize();
    p.u = (spec.alpha * u1 + std::sqrt(1.0 - spec.alpha * spec.alpha) * u2).normalized();
  } else {
    p = sample_perturbation(W, xi, rng, spec.c_mode, spec.orthogonal_u);
  }
  return Instance{spec, seed, TeacherModel(base, p, spec.conv)};
}

// ---- hex floats ----

/// "0x" followed by the 16 hex digits of the IEEE-754 bit pattern.
inline std::string hex_double(double v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

/// Accepts a hex bit-pattern string or a plain JSON number.
inline double parse_hex_double(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (!j.is_string()) throw ConfigError("expected a hex float string or a number");
  const std::string s = j.get<std::string>();
  if (s.size() != 18 || s[0] != '0' || s[1] != 'x') throw ConfigError("malformed hex float '" + s + "'");
  std::uint64_t bits = 0;
  for (std::size_t i = 2; i < s.size(); ++i) {
    const char c = s[i];
    int v = 0;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else throw ConfigError("malformed hex float '" + s + "'");
    bits = (bits << 4) | static_cast<std::uint64_t>(v);
  }
  return std::bit_cast<double>(bits);
}

inline json hex_array(const double* data, std::size_t n) {
  json a = json::array();
  for (std::size_t i = 0; i < n; ++i) a.push_back(hex_double(data[i]));
  return a;
}

inline json hex_vector(const Eigen::VectorXd& v) { return hex_array(v.data(), static_cast<std::size_t>(v.size())); }

inline Eigen::VectorXd parse_hex_vector(const json& a, Eigen::Index expected, const char* what) {
  if (!a.is_array() || static_cast<Eigen::Index>(a.size()) != expected) {
    throw ConfigError(std::string("instance: '") + what + "' must be an array of length " + std::to_string(expected));
  }
  Eigen::VectorXd v(expected);
  for (Eigen::Index i = 0; i < expected; ++i) v[i] = parse_hex_double(a[static_cast<std::size_t>(i)]);
  return v;
}

// ---- instance JSON ----

inline json activation_to_json(const Activation& act) {
  json j{{"name", act.name()}, {"order", act.order()}};
  if (const ActivationTable* t = act.table()) {
    j["table"] = {{"grid", hex_array(t->grid.data(), t->grid.size())},
                  {"values", hex_array(t->values.data(), t->values.size())}};
  }
  return j;
}

inline Activation activation_from_json(const json& j) {
  const std::string name = j.at("name").get<std::string>();
  const int order = j.value("order", 0);
  if (j.contains("table")) {
    const json& t = j.at("table");
    std::vector<double> grid;
    std::vector<double> values;
    for (const auto& g : t.at("grid")) grid.push_back(parse_hex_double(g));
    for (const auto& v : t.at("values")) values.push_back(parse_hex_double(v));
    return tabulated_activation(std::move(grid), std::move(values), order, name);
  }
  return make_activation(name, order);
}

inline json instance_to_json(const Instance& inst) {
  const TeacherModel& t = inst.teacher;
  const Eigen::Index k = t.k();
  const Eigen::Index d = t.d();
  std::vector<double> w(static_cast<std::size_t>(k * d));
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) w[static_cast<std::size_t>(i * d + j)] = t.base.W(i, j);
  }
  json j;
  j["format"] = "lora-dyn-instance";
  j["version"] = 1;
  j["k"] = k;
  j["d"] = d;
  j["xi"] = hex_double(t.pert.xi);
  j["activation"] = activation_to_json(t.base.activation);
  j["W"] = hex_array(w.data(), w.size());
  j["lambda"] = hex_vector(t.base.lambda);
  j["c"] = hex_vector(t.pert.c);
  j["u"] = hex_vector(t.pert.u);
  j["mode"] = {{"weights", to_string(inst.spec.weights)},
               {"c_mode", to_string(inst.spec.c_mode)},
               {"orthogonal_u", inst.spec.orthogonal_u},
               {"alpha", hex_double(inst.spec.alpha)},
               {"neuron_scaling", to_string(t.conv.scaling)},
               {"output_over_xi", t.conv.output_over_xi}};
  j["seed"] = inst.seed;
  return j;
}

inline Instance instance_from_json(const json& j) {
  try {
    if (j.value("format", std::string("lora-dyn-instance")) != "lora-dyn-instance") {
      throw ConfigError("instance: unexpected format tag");
    }
    const Eigen::Index k = j.at("k").get<Eigen::Index>();
    const Eigen::Index d = j.at("d").get<Eigen::Index>();
    if (k < 1 || d < 1) throw ConfigError("instance: k, d must be positive");
    const json& wj = j.at("W");
    const Eigen::VectorXd wflat = parse_hex_vector(wj, k * d, "W");
    Eigen::MatrixXd W(k, d);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index c = 0; c < d; ++c) W(i, c) = wflat[i * d + c];
    }
    BaseModel base{W, parse_hex_vector(j.at("lambda"), k, "lambda"), activation_from_json(j.at("activation"))};
    Perturbation p;
    p.xi = parse_hex_double(j.at("xi"));
    p.c = parse_hex_vector(j.at("c"), k, "c");
    p.u = parse_hex_vector(j.at("u"), d, "u");
    const json mode = j.value("mode", json::object());
    InstanceSpec s;
    s.k = k;
    s.d = d;
    s.xi = p.xi;
    s.activation = base.activation.name();
    s.order = base.activation.order();
    s.weights = parse_weight_regime(mode.value("weights", std::string("orthonormal")));
    s.c_mode = parse_c_mode(mode.value("c_mode", std::string("quantized")));
    s.orthogonal_u = mode.value("orthogonal_u", true);
    s.alpha = mode.contains("alpha") ? parse_hex_double(mode.at("alpha")) : 0.0;
    s.conv.scaling = parse_neuron_scaling(mode.value("neuron_scaling", std::string("unit_norm")));
    s.conv.output_over_xi = mode.value("output_over_xi", false);
    return Instance{s, j.value("seed", std::uint64_t{0}), TeacherModel(base, p, s.conv)};
  } catch (const json::exception& e) {
    throw ConfigError(std::string("instance: ") + e.what());
  }
}

inline void save_instance(const Instance& inst, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write instance file '" + path + "'");
  out << instance_to_json(inst).dump(1) << '\n';
}

inline Instance load_instance(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open instance file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("instance '" + path + "': " + e.what());
  }
  return instance_from_json(j);
}

}  // namespace lora_dyn
