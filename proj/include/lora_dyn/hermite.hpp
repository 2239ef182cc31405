// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Normalized probabilist's Hermite polynomials, Gaussian quadrature, Hermite
// coefficient extraction, and the activation registry.
//
// h_p(a) = He_p(a) / sqrt(p!) is orthonormal under N(0,1), and every
// activation is carried together with its coefficient vector
// mu_p = E[sigma(g) h_p(g)], p = 0..P.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "lora_dyn/errors.hpp"

namespace lora_dyn {

/// h_p(a) via the normalized three-term recurrence
/// h_{j+1} = (a h_j - sqrt(j) h_{j-1}) / sqrt(j+1).
inline double hermite_poly(int p, double a) {
  if (p < 0) throw ConfigError("hermite_poly: negative degree");
  if (p == 0) return 1.0;
  double prev = 1.0;
  double cur = a;
  for (int j = 1; j < p; ++j) {
    const double next = (a * cur - std::sqrt(static_cast<double>(j)) * prev) /
                        std::sqrt(static_cast<double>(j + 1));
    prev = cur;
    cur = next;
  }
  return cur;
}

/// (h_0(a), ..., h_P(a)).
inline Eigen::VectorXd hermite_all(int P, double a) {
  Eigen::VectorXd h(P + 1);
  h[0] = 1.0;
  if (P >= 1) h[1] = a;
  for (int j = 1; j < P; ++j) {
    h[j + 1] = (a * h[j] - std::sqrt(static_cast<double>(j)) * h[j - 1]) /
               std::sqrt(static_cast<double>(j + 1));
  }
  return h;
}

/// sum_p coeffs[p] h_p(a). Coefficients past the vector end are zero.
inline double hermite_series(const Eigen::VectorXd& coeffs, double a) {
  if (coeffs.size() == 0) return 0.0;
  const Eigen::VectorXd h = hermite_all(static_cast<int>(coeffs.size()) - 1, a);
  return coeffs.dot(h);
}

/// E[h_p(<u,x>) h_q(<v,x>)] for unit u, v with <u,v> = rho.
inline double gaussian_correlation(int p, int q, double rho) {
  return p == q ? std::pow(rho, p) : 0.0;
}

// ---------------------------------------------------------------------------
// Quadrature

/// Nodes and weights for E[f(g)], g ~ N(0,1) (weights sum to 1).
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  template <class F>
  double expect(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
    return s;
  }
};

namespace detail {

// Normalized Hermite recurrence at x carried with a running log scale so that
// large nodes (x ~ 60) neither overflow h_j nor underflow exp(-x^2/2).
struct ScaledHermite {
  double h_n = 0.0;      // h_n(x) * exp(-log_scale)
  double h_nm1 = 0.0;    // h_{n-1}(x) * exp(-log_scale)
  double sum_sq = 0.0;   // sum_{j<n} h_j(x)^2 * exp(-2 log_scale)
  double log_scale = 0.0;
};

inline ScaledHermite scaled_hermite(int n, double x) {
  constexpr double kBig = 1e100;
  const double kLogBig = std::log(kBig);
  ScaledHermite r;
  double prev = 0.0;
  double cur = 1.0;
  double sum = 0.0;
  double log_scale = 0.0;
  for (int j = 0; j < n; ++j) {
    sum += cur * cur;
    const double next = (x * cur - std::sqrt(static_cast<double>(j)) * prev) /
                        std::sqrt(static_cast<double>(j + 1));
    prev = cur;
    cur = next;
    if (std::abs(cur) > kBig) {
      cur /= kBig;
      prev /= kBig;
      sum /= kBig * kBig;
      log_scale += kLogBig;
    }
  }
  r.h_n = cur;
  r.h_nm1 = prev;
  r.sum_sq = sum;
  r.log_scale = log_scale;
  return r;
}

}  // namespace detail

/// n-point Gauss-Hermite rule for the standard normal measure.
///
/// Nodes come from the Golub-Welsch eigenproblem of the probabilist Jacobi
/// matrix (the physicist nodes scaled by sqrt(2)), refined by one Newton step;
/// weights are Christoffel numbers 1 / sum_{j<n} h_j(x)^2.
inline QuadratureRule gauss_hermite_rule(int n) {
  if (n < 1) throw ConfigError("gauss_hermite_rule: n must be positive");
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  if (n == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = 1.0;
    return rule;
  }
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub(n - 1);
  for (int j = 0; j < n - 1; ++j) sub[j] = std::sqrt(static_cast<double>(j + 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double sqrt_n = std::sqrt(static_cast<double>(n));
  for (int i = 0; i < n; ++i) {
    double x = ev[i];
    auto s = detail::scaled_hermite(n, x);
    // h_n' = sqrt(n) h_{n-1}
    x -= s.h_n / (sqrt_n * s.h_nm1);
    s = detail::scaled_hermite(n, x);
    rule.nodes[i] = x;
    rule.weights[i] = std::exp(-2.0 * s.log_scale - std::log(s.sum_sq));
  }
  // Symmetrize to remove eigen-solver asymmetry at the 1e-16 level.
  for (int i = 0; i < n / 2; ++i) {
    const double x = 0.5 * (rule.nodes[n - 1 - i] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[n - 1 - i] + rule.weights[i]);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

/// n-point Gauss-Legendre rule on [-1, 1] (weights sum to 2).
inline QuadratureRule gauss_legendre_rule(int n) {
  if (n < 1) throw ConfigError("gauss_legendre_rule: n must be positive");
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0;
      double p1 = x;
      for (int j = 2; j <= n; ++j) {
        const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    {
      double p0 = 1.0;
      double p1 = x;
      for (int j = 2; j <= n; ++j) {
        const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = rule.weights[n - 1 - i] = w;
  }
  return rule;
}

/// Composite Gauss-Legendre rule for E[f(g)] that puts panel boundaries at the
/// given breakpoints, so that kinks (ReLU at 0, tabulated grids) sit on panel
/// edges. The real line is truncated to [-half_width, half_width].
inline QuadratureRule piecewise_gaussian_rule(int n_per_panel, std::vector<double> breakpoints,
                                              double half_width) {
  std::sort(breakpoints.begin(), breakpoints.end());
  std::vector<double> edges{-half_width};
  for (double b : breakpoints) {
    if (b > edges.back() && b < half_width) edges.push_back(b);
  }
  edges.push_back(half_width);
  const QuadratureRule gl = gauss_legendre_rule(n_per_panel);
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  QuadratureRule rule;
  for (std::size_t e = 0; e + 1 < edges.size(); ++e) {
    const double a = edges[e];
    const double b = edges[e + 1];
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (a + b);
    for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
      const double x = mid + half * gl.nodes[i];
      rule.nodes.push_back(x);
      rule.weights.push_back(half * gl.weights[i] * inv_sqrt_2pi * std::exp(-0.5 * x * x));
    }
  }
  return rule;
}

// ---------------------------------------------------------------------------
// Coefficients

struct CoefficientResult {
  Eigen::VectorXd coeffs;
  int nodes = 0;
  double max_change = 0.0;  // max_p |mu_p(nodes) - mu_p(2 nodes)|
};

struct QuadratureOptions {
  int nodes = 0;            // 0 selects max(200, 4P)
  double tolerance = 1e-10;  // doubled-node agreement
  std::vector<double> breakpoints;  // non-smooth points of sigma
};

namespace detail {

inline double quadrature_half_width(int P) {
  return std::max(14.0, 2.0 * std::sqrt(static_cast<double>(P)) + 14.0);
}

inline QuadratureRule coefficient_rule(int P, int nodes, const std::vector<double>& breakpoints) {
  if (breakpoints.empty()) return gauss_hermite_rule(nodes);
  // Many breakpoints (tabulated activations) need few nodes per panel.
  const std::size_t panels = breakpoints.size() + 1;
  int per_panel = nodes;
  if (panels > 4) per_panel = std::max(2 * P + 2, static_cast<int>(nodes / panels) + 8);
  return piecewise_gaussian_rule(per_panel, breakpoints, quadrature_half_width(P));
}

template <class F>
Eigen::VectorXd project_onto_hermite(F&& sigma, int P, const QuadratureRule& rule) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(P + 1);
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double w = rule.weights[i];
    if (w == 0.0) continue;
    const double fx = sigma(rule.nodes[i]);
    if (fx == 0.0) continue;
    mu += (w * fx) * hermite_all(P, rule.nodes[i]);
  }
  return mu;
}

}  // namespace detail

/// mu_p = E[sigma(g) h_p(g)] for p = 0..P by Gaussian quadrature, accepted only
/// if doubling the node count changes no coefficient by more than the
/// tolerance.
template <class F>
CoefficientResult hermite_coeffs(F&& sigma, int P, QuadratureOptions opts = {}) {
  if (P < 1) throw ConfigError("hermite_coeffs: truncation order must be >= 1");
  const int nodes = opts.nodes > 0 ? opts.nodes : std::max(200, 4 * P);
  if (nodes < 2 * P + 2) throw ConfigError("hermite_coeffs: need nodes >= 2P+2");
  const Eigen::VectorXd mu = detail::project_onto_hermite(
      sigma, P, detail::coefficient_rule(P, nodes, opts.breakpoints));
  const Eigen::VectorXd mu2 = detail::project_onto_hermite(
      sigma, P, detail::coefficient_rule(P, 2 * nodes, opts.breakpoints));
  CoefficientResult r;
  r.coeffs = mu2;
  r.nodes = 2 * nodes;
  r.max_change = (mu - mu2).cwiseAbs().maxCoeff();
  if (!(r.max_change <= opts.tolerance)) {
    std::ostringstream os;
    os << "hermite_coeffs: no convergence at " << nodes << " -> " << 2 * nodes
       << " nodes (max change " << r.max_change << ")";
    throw NumericalError(os.str());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Decay

/// |mu_p| <= C p^{-1-rho}, p >= 1.
struct DecayFit {
  double C = 0.0;
  double rho = 1.0;
};

struct DecayReport {
  bool pass = true;
  int first_violation = -1;  // smallest offending p, -1 on pass
  int violations = 0;
};

inline DecayReport check_decay(const Eigen::VectorXd& coeffs, double C, double rho) {
  DecayReport r;
  for (Eigen::Index p = 1; p < coeffs.size(); ++p) {
    const double bound = C * std::pow(static_cast<double>(p), -1.0 - rho);
    if (std::abs(coeffs[p]) > bound) {
      if (r.pass) r.first_violation = static_cast<int>(p);
      r.pass = false;
      ++r.violations;
    }
  }
  return r;
}

/// Smallest C for which the given rho passes check_decay.
inline DecayFit fit_decay(const Eigen::VectorXd& coeffs, double rho) {
  DecayFit f;
  f.rho = rho;
  for (Eigen::Index p = 1; p < coeffs.size(); ++p) {
    f.C = std::max(f.C, std::abs(coeffs[p]) * std::pow(static_cast<double>(p), 1.0 + rho));
  }
  f.C *= 1.0 + 1e-12;  // absorb pow() rounding in check_decay
  return f;
}

// ---------------------------------------------------------------------------
// Activations

enum class ActivationKind { relu, sigmoid, tanh, identity, quadratic, hermite, custom };

/// Piecewise-linear table behind a custom activation.
struct ActivationTable {
  std::vector<double> grid;
  std::vector<double> values;
};

class Activation;
Activation tabulated_activation(std::vector<double> grid, std::vector<double> values, int order,
                                const std::string& name);

/// A pointwise activation with its Hermite coefficients up to order P.
/// Immutable once built.
class Activation {
 public:
  using Fn = std::function<double(double)>;

  Activation(ActivationKind kind, std::string name, Fn value, Fn derivative,
             Eigen::VectorXd coeffs, int degree, double rho,
             std::vector<double> breakpoints = {}, double norm_sq = -1.0)
      : kind_(kind),
        name_(std::move(name)),
        value_(std::make_shared<Fn>(std::move(value))),
        derivative_(std::make_shared<Fn>(std::move(derivative))),
        coeffs_(std::move(coeffs)),
        degree_(degree),
        breakpoints_(std::move(breakpoints)) {
    decay_ = fit_decay(coeffs_, rho);
    norm_sq_ = norm_sq >= 0.0 ? norm_sq : coeffs_.squaredNorm();
  }

  double operator()(double a) const { return (*value_)(a); }
  double derivative(double a) const { return (*derivative_)(a); }

  ActivationKind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  const Eigen::VectorXd& coeffs() const { return coeffs_; }
  int order() const { return static_cast<int>(coeffs_.size()) - 1; }
  double mu(int p) const { return p >= 0 && p < coeffs_.size() ? coeffs_[p] : 0.0; }
  const DecayFit& decay() const { return decay_; }
  const std::vector<double>& breakpoints() const { return breakpoints_; }
  /// Polynomial degree, or -1 when the Hermite expansion is infinite.
  int degree() const { return degree_; }
  /// E[sigma(g)^2] (quadrature).
  double norm_sq() const { return norm_sq_; }

  /// Certified bound on sum_{p>P} p mu_p^2 from the decay fit.
  double tail_weighted() const {
    if (degree_ >= 0 && degree_ <= order()) return 0.0;
    const double P = order();
    return decay_.C * decay_.C * std::pow(P, -2.0 * decay_.rho) / (2.0 * decay_.rho);
  }
  /// Certified bound on sum_{p>P} mu_p^2 from the decay fit.
  double tail_sq() const {
    if (degree_ >= 0 && degree_ <= order()) return 0.0;
    const double P = order();
    return decay_.C * decay_.C * std::pow(P, -1.0 - 2.0 * decay_.rho) / (1.0 + 2.0 * decay_.rho);
  }
  /// E[sigma'(g)^2]. Exact (sum_p p mu_p^2) for finite Hermite expansions,
  /// quadrature on sigma' otherwise.
  double derivative_sq() const {
    if (degree_ >= 0 && degree_ <= order()) {
      double s = 0.0;
      for (Eigen::Index p = 1; p < coeffs_.size(); ++p) s += static_cast<double>(p) * coeffs_[p] * coeffs_[p];
      return s;
    }
    const int P = std::max(order(), 1);
    const QuadratureRule rule = detail::coefficient_rule(P, std::max(200, 4 * P), breakpoints_);
    return rule.expect([this](double a) {
      const double v = derivative(a);
      return v * v;
    });
  }
  /// Parseval gap E[sigma^2] - sum_{p<=P} mu_p^2.
  double parseval_gap() const { return norm_sq_ - coeffs_.squaredNorm(); }
  /// The (a, sigma) table for custom activations, null otherwise.
  const ActivationTable* table() const { return table_.get(); }

 private:
  friend Activation tabulated_activation(std::vector<double>, std::vector<double>, int, const std::string&);

  ActivationKind kind_;
  std::string name_;
  std::shared_ptr<const Fn> value_;
  std::shared_ptr<const Fn> derivative_;
  Eigen::VectorXd coeffs_;
  int degree_;
  std::vector<double> breakpoints_;
  DecayFit decay_;
  double norm_sq_ = 0.0;
  std::shared_ptr<const ActivationTable> table_;
};

/// Closed-form ReLU coefficients (Gaussian integration by parts):
/// mu_0 = 1/sqrt(2 pi), mu_1 = 1/2, and for even p >= 2
/// mu_p = (-1)^{p/2-1} (p-3)!! / sqrt(2 pi p!), odd p >= 3 vanish.
inline Eigen::VectorXd relu_coeffs_closed_form(int P) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(P + 1);
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  mu[0] = inv_sqrt_2pi;
  if (P >= 1) mu[1] = 0.5;
  // r_p = (p-3)!! / sqrt(p!) via r_{p+2} = r_p (p-1) / sqrt((p+1)(p+2)).
  double r = 1.0 / std::sqrt(2.0);
  double sign = 1.0;
  for (int p = 2; p <= P; p += 2) {
    mu[p] = sign * r * inv_sqrt_2pi;
    r *= (p - 1.0) / std::sqrt((p + 1.0) * (p + 2.0));
    sign = -sign;
  }
  return mu;
}

namespace detail {

inline int parse_hermite_degree(const std::string& name) {
  std::string digits;
  if (name.rfind("hermite", 0) == 0) {
    digits = name.substr(7);
  } else if (name.rfind("he", 0) == 0) {
    digits = name.substr(2);
  } else {
    return -1;
  }
  if (!digits.empty() && (digits[0] == '(' || digits[0] == ':')) digits = digits.substr(1);
  if (!digits.empty() && digits.back() == ')') digits.pop_back();
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) return -1;
  return std::stoi(digits);
}

inline Activation build_numeric(ActivationKind kind, const std::string& name, Activation::Fn f,
                                Activation::Fn df, int P, double rho,
                                std::vector<double> breakpoints) {
  QuadratureOptions opts;
  opts.breakpoints = breakpoints;
  CoefficientResult cr = hermite_coeffs(f, P, opts);
  const int nodes = std::max(200, 4 * P);
  const QuadratureRule rule = coefficient_rule(P, 2 * nodes, breakpoints);
  const double norm_sq = rule.expect([&](double a) {
    const double v = f(a);
    return v * v;
  });
  return Activation(kind, name, std::move(f), std::move(df), std::move(cr.coeffs), -1, rho,
                    std::move(breakpoints), norm_sq);
}

}  // namespace detail

/// Default truncation order for a registry name.
inline int default_order(const std::string& name) {
  if (name == "relu") return 200;
  if (name == "sigmoid" || name == "tanh") return 60;
  if (name == "identity") return 1;
  if (name == "quadratic") return 2;
  const int q = detail::parse_hermite_degree(name);
  if (q >= 0) return std::max(q, 1);
  return 60;
}

/// Registry: relu, sigmoid, tanh, identity, quadratic, he<q> / hermite<q>.
/// order <= 0 selects default_order(name).
inline Activation make_activation(const std::string& name, int order = 0) {
  const int P = order > 0 ? order : default_order(name);
  if (name == "relu") {
    // sigma'(0) := 0
    Activation::Fn f = [](double a) { return a > 0.0 ? a : 0.0; };
    Activation::Fn df = [](double a) { return a > 0.0 ? 1.0 : 0.0; };
    return detail::build_numeric(ActivationKind::relu, name, f, df, P, 0.25, {0.0});
  }
  if (name == "sigmoid") {
    Activation::Fn f = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
    Activation::Fn df = [](double a) {
      const double s = 1.0 / (1.0 + std::exp(-a));
      return s * (1.0 - s);
    };
    return detail::build_numeric(ActivationKind::sigmoid, name, f, df, P, 1.0, {});
  }
  if (name == "tanh") {
    Activation::Fn f = [](double a) { return std::tanh(a); };
    Activation::Fn df = [](double a) {
      const double t = std::tanh(a);
      return 1.0 - t * t;
    };
    return detail::build_numeric(ActivationKind::tanh, name, f, df, P, 1.0, {});
  }
  if (name == "identity") {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(P + 1);
    mu[1] = 1.0;
    return Activation(
        ActivationKind::identity, name, [](double a) { return a; }, [](double) { return 1.0; },
        mu, 1, 1.0, {}, 1.0);
  }
  if (name == "quadratic") {
    if (P < 2) throw ConfigError("quadratic activation needs order >= 2");
    // z^2 = h_0 + sqrt(2) h_2
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(P + 1);
    mu[0] = 1.0;
    mu[2] = std::sqrt(2.0);
    return Activation(
        ActivationKind::quadratic, name, [](double a) { return a * a; },
        [](double a) { return 2.0 * a; }, mu, 2, 1.0, {}, 3.0);
  }
  const int q = detail::parse_hermite_degree(name);
  if (q >= 0) {
    if (P < q) throw ConfigError("hermite activation needs order >= its degree");
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(P + 1);
    mu[q] = 1.0;
    Activation::Fn f = [q](double a) { return hermite_poly(q, a); };
    Activation::Fn df = [q](double a) {
      return q == 0 ? 0.0 : std::sqrt(static_cast<double>(q)) * hermite_poly(q - 1, a);
    };
    return Activation(ActivationKind::hermite, "he" + std::to_string(q), f, df, mu, q, 1.0, {},
                      1.0);
  }
  throw ConfigError("unknown activation '" + name + "'");
}

/// Piecewise-linear activation through (a_i, sigma_i) with a strictly
/// increasing grid, extended linearly past both ends.
inline Activation tabulated_activation(std::vector<double> grid, std::vector<double> values,
                                       int order = 0, const std::string& name = "custom") {
  auto table = std::make_shared<const ActivationTable>(ActivationTable{grid, values});
  if (grid.size() < 2 || grid.size() != values.size()) {
    throw ConfigError("tabulated activation needs >= 2 (a, sigma) pairs");
  }
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw ConfigError("tabulated activation grid must be strictly increasing");
  }
  auto g = std::make_shared<const std::vector<double>>(std::move(grid));
  auto v = std::make_shared<const std::vector<double>>(std::move(values));
  auto segment = [g](double a) -> std::size_t {
    const auto it = std::upper_bound(g->begin(), g->end(), a);
    std::size_t j = static_cast<std::size_t>(it - g->begin());
    if (j == 0) return 0;
    return std::min(j - 1, g->size() - 2);
  };
  Activation::Fn f = [g, v, segment](double a) {
    const std::size_t j = segment(a);
    const double t = (a - (*g)[j]) / ((*g)[j + 1] - (*g)[j]);
    return (*v)[j] + t * ((*v)[j + 1] - (*v)[j]);
  };
  Activation::Fn df = [g, v, segment](double a) {
    const std::size_t j = segment(a);
    return ((*v)[j + 1] - (*v)[j]) / ((*g)[j + 1] - (*g)[j]);
  };
  const int P = order > 0 ? order : default_order(name);
  Activation act = detail::build_numeric(ActivationKind::custom, name, f, df, P, 0.25, *g);
  act.table_ = std::move(table);
  return act;
}

/// Reads "a,sigma" rows (optional header line, '#' comments) into a
/// tabulated activation.
inline Activation load_tabulated_activation(const std::string& path, int order = 0) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open activation table '" + path + "'");
  std::vector<double> a;
  std::vector<double> s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    double x = 0.0;
    double y = 0.0;
    if (!(row >> x >> y)) {
      if (a.empty()) continue;  // header
      throw ConfigError("malformed activation table row: '" + line + "'");
    }
    a.push_back(x);
    s.push_back(y);
  }
  return tabulated_activation(std::move(a), std::move(s), order, "custom:" + path);
}

}  // namespace lora_dyn
