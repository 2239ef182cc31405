// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <gtest/gtest.h>

#include "lora_dyn/hermite.hpp"
#include "lora_dyn/rng.hpp"

using namespace lora_dyn;

namespace {

// He_p from the unnormalized probabilist recurrence, divided by sqrt(p!).
double he_reference(int p, double a) {
  double prev = 1.0, cur = a;
  if (p == 0) return 1.0;
  for (int j = 1; j < p; ++j) {
    const double next = a * cur - j * prev;
    prev = cur;
    cur = next;
  }
  return cur / std::sqrt(std::tgamma(p + 1.0));
}

}  // namespace

TEST(HermitePoly, Examples) {
  EXPECT_DOUBLE_EQ(hermite_poly(0, 3.7), 1.0);
  EXPECT_NEAR(hermite_poly(2, 0.0), -1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(hermite_poly(3, 1.0), -2.0 / std::sqrt(6.0), 1e-15);
  EXPECT_THROW(hermite_poly(-1, 0.0), ConfigError);
}

TEST(HermitePoly, MatchesUnnormalizedRecurrence) {
  for (int p = 0; p <= 15; ++p) {
    for (double a : {-3.1, -0.4, 0.0, 0.7, 2.5}) {
      const double ref = he_reference(p, a);
      EXPECT_NEAR(hermite_poly(p, a), ref, 1e-12 * std::max(1.0, std::abs(ref))) << p << " " << a;
    }
  }
  const Eigen::VectorXd all = hermite_all(10, 1.3);
  for (int p = 0; p <= 10; ++p) EXPECT_DOUBLE_EQ(all[p], hermite_poly(p, 1.3));
}

TEST(Quadrature, GaussHermiteMoments) {
  const QuadratureRule r = gauss_hermite_rule(20);
  // E[g^{2j}] = (2j-1)!!
  double dfact = 1.0;
  for (int j = 0; j <= 8; ++j) {
    if (j > 0) dfact *= 2 * j - 1;
    const double m = r.expect([j](double a) { return std::pow(a, 2 * j); });
    EXPECT_NEAR(m, dfact, 1e-10 * dfact) << j;
    EXPECT_NEAR(r.expect([j](double a) { return std::pow(a, 2 * j + 1); }), 0.0, 1e-10 * dfact);
  }
}

TEST(Quadrature, Orthonormality200Nodes) {
  const QuadratureRule r = gauss_hermite_rule(200);
  for (int p = 0; p <= 12; ++p) {
    for (int q = 0; q <= 12; ++q) {
      const double e = r.expect([p, q](double a) { return hermite_poly(p, a) * hermite_poly(q, a); });
      EXPECT_NEAR(e, p == q ? 1.0 : 0.0, 1e-10) << p << "," << q;
    }
  }
}

TEST(Quadrature, GaussLegendreIntegratesPolynomials) {
  const QuadratureRule r = gauss_legendre_rule(7);
  for (int j = 0; j <= 13; ++j) {
    const double exact = j % 2 == 0 ? 2.0 / (j + 1) : 0.0;
    EXPECT_NEAR(r.expect([j](double a) { return std::pow(a, j); }), exact, 1e-14) << j;
  }
}

TEST(Quadrature, PiecewiseRuleHandlesKink) {
  const QuadratureRule r = piecewise_gaussian_rule(60, {0.0}, 14.0);
  // E[relu(g)] = 1/sqrt(2 pi), E[relu(g)^2] = 1/2
  EXPECT_NEAR(r.expect([](double a) { return a > 0 ? a : 0.0; }), 1.0 / std::sqrt(2 * std::numbers::pi),
              1e-13);
  EXPECT_NEAR(r.expect([](double a) { return a > 0 ? a * a : 0.0; }), 0.5, 1e-13);
}

TEST(GaussianCorrelation, Examples) {
  EXPECT_EQ(gaussian_correlation(2, 3, 0.5), 0.0);
  EXPECT_EQ(gaussian_correlation(3, 3, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(gaussian_correlation(2, 2, -0.5), 0.25);
}

TEST(GaussianCorrelation, MonteCarloIdentity) {
  const int d = 16;
  const int N = 200000;
  Rng setup = make_stream(11, "corr-setup");
  const Eigen::VectorXd u = uniform_sphere(setup, d);
  // Push v toward u so the rho^p terms are not all negligible.
  const Eigen::VectorXd v = (u + 0.8 * uniform_sphere(setup, d)).normalized();
  const double rho = u.dot(v);
  double sum[5][5] = {};
  double sum_sq[5][5] = {};
  Rng rng = make_stream(11, "corr-samples");
  Eigen::VectorXd x(d);
  for (int n = 0; n < N; ++n) {
    fill_gaussian(rng, x);
    const Eigen::VectorXd hu = hermite_all(4, u.dot(x));
    const Eigen::VectorXd hv = hermite_all(4, v.dot(x));
    for (int p = 0; p <= 4; ++p) {
      for (int q = 0; q <= 4; ++q) {
        const double z = hu[p] * hv[q];
        sum[p][q] += z;
        sum_sq[p][q] += z * z;
      }
    }
  }
  for (int p = 0; p <= 4; ++p) {
    for (int q = 0; q <= 4; ++q) {
      const double mean = sum[p][q] / N;
      const double var = (sum_sq[p][q] / N - mean * mean) * N / (N - 1.0);
      const double se = std::sqrt(var / N);
      const double target = gaussian_correlation(p, q, rho);
      if (p == 0 && q == 0) {
        EXPECT_DOUBLE_EQ(mean, 1.0);
        continue;
      }
      EXPECT_LE(std::abs(mean - target), 4.0 * se) << p << "," << q;
    }
  }
}

TEST(Coefficients, IdentityAndHermite3) {
  const Eigen::VectorXd id = hermite_coeffs([](double a) { return a; }, 5).coeffs;
  ASSERT_EQ(id.size(), 6);
  for (int p = 0; p <= 5; ++p) EXPECT_NEAR(id[p], p == 1 ? 1.0 : 0.0, 1e-12);

  const Eigen::VectorXd h3 = hermite_coeffs([](double a) { return hermite_poly(3, a); }, 6).coeffs;
  for (int p = 0; p <= 6; ++p) EXPECT_NEAR(h3[p], p == 3 ? 1.0 : 0.0, 1e-12);

  const Activation he3 = make_activation("hermite(3)", 6);
  for (int p = 0; p <= 6; ++p) EXPECT_EQ(he3.mu(p), p == 3 ? 1.0 : 0.0);
}

TEST(Coefficients, RejectsBadArguments) {
  auto f = [](double a) { return a; };
  EXPECT_THROW(hermite_coeffs(f, 0), ConfigError);
  QuadratureOptions o;
  o.nodes = 10;
  EXPECT_THROW(hermite_coeffs(f, 5, o), ConfigError);
}

TEST(Coefficients, ReportsNonConvergence) {
  // A discontinuous function on Gauss-Hermite nodes converges slowly.
  QuadratureOptions o;
  o.nodes = 20;
  EXPECT_THROW(hermite_coeffs([](double a) { return a > 0.3 ? 1.0 : 0.0; }, 4, o), NumericalError);
}

TEST(Coefficients, ReluGoldenP4) {
  // Hand values: 1/sqrt(2pi), 1/2, 1/sqrt(4pi), 0, -1/sqrt(48pi).
  const double pi = std::numbers::pi;
  const double golden[5] = {0.3989422804014327, 0.5, 0.28209479177387814, 0.0,
                            -0.08143375198381998};
  EXPECT_NEAR(golden[0], 1.0 / std::sqrt(2 * pi), 1e-16);
  EXPECT_NEAR(golden[2], 1.0 / std::sqrt(4 * pi), 1e-16);
  EXPECT_NEAR(golden[4], -1.0 / std::sqrt(48 * pi), 1e-16);
  QuadratureOptions o;
  o.nodes = 400;
  o.breakpoints = {0.0};
  const CoefficientResult r = hermite_coeffs([](double a) { return a > 0 ? a : 0.0; }, 4, o);
  EXPECT_EQ(r.nodes, 800);
  EXPECT_LE(r.max_change, 1e-10);
  for (int p = 0; p <= 4; ++p) EXPECT_NEAR(r.coeffs[p], golden[p], 1e-12) << p;
}

TEST(Coefficients, ReluRegistryMatchesClosedForm) {
  const Activation relu = make_activation("relu");
  EXPECT_EQ(relu.order(), 200);
  const Eigen::VectorXd ref = relu_coeffs_closed_form(200);
  for (int p = 0; p <= 200; ++p) EXPECT_NEAR(relu.mu(p), ref[p], 1e-10) << p;
  EXPECT_NEAR(relu.norm_sq(), 0.5, 1e-12);
  EXPECT_GE(relu.parseval_gap(), 0.0);
  EXPECT_LE(relu.parseval_gap(), relu.tail_sq());
  EXPECT_TRUE(check_decay(relu.coeffs(), relu.decay().C, relu.decay().rho).pass);
  EXPECT_EQ(relu.derivative(0.0), 0.0);
}

TEST(Coefficients, SmoothActivationsParsevalAndDecay) {
  for (const char* name : {"sigmoid", "tanh"}) {
    const Activation s = make_activation(name);
    EXPECT_GE(s.parseval_gap(), -1e-12) << name;
    EXPECT_LE(s.parseval_gap(), s.tail_sq() + 1e-13) << name;
    EXPECT_TRUE(check_decay(s.coeffs(), s.decay().C, s.decay().rho).pass) << name;
    // Odd/even symmetry: sigmoid - 1/2 and tanh are odd.
    for (int p = 2; p <= s.order(); p += 2) EXPECT_NEAR(s.mu(p), 0.0, 1e-12) << name << p;
  }
  EXPECT_NEAR(make_activation("sigmoid").mu(0), 0.5, 1e-12);
}

TEST(Coefficients, DerivativeSquareMatchesQuadrature) {
  // E[sigma'(g)^2] by direct quadrature of the derivative.
  const QuadratureRule r = gauss_hermite_rule(200);
  for (const char* name : {"sigmoid", "tanh", "quadratic", "he3", "identity"}) {
    const Activation s = make_activation(name);
    const double direct = r.expect([&s](double a) { return s.derivative(a) * s.derivative(a); });
    EXPECT_NEAR(s.derivative_sq(), direct, 1e-10) << name;
  }
  EXPECT_DOUBLE_EQ(make_activation("quadratic").derivative_sq(), 4.0);
  EXPECT_DOUBLE_EQ(make_activation("he3").derivative_sq(), 3.0);
  // relu: E[1{g > 0}] = 1/2; the truncated sum of p mu_p^2 falls short.
  EXPECT_NEAR(make_activation("relu").derivative_sq(), 0.5, 1e-10);
}

TEST(Coefficients, PolynomialReconstruction) {
  Rng rng = make_stream(5, "reconstruction");
  std::uniform_real_distribution<double> unif(-3.0, 3.0);
  for (int deg = 1; deg <= 6; ++deg) {
    Eigen::VectorXd poly = Eigen::VectorXd::Zero(deg + 1);
    for (int j = 0; j <= deg; ++j) poly[j] = unif(rng);
    auto sigma = [&poly](double a) {
      double s = 0.0;
      for (Eigen::Index j = poly.size() - 1; j >= 0; --j) s = s * a + poly[j];
      return s;
    };
    const Eigen::VectorXd mu = hermite_coeffs(sigma, deg).coeffs;
    for (int i = 0; i < 100; ++i) {
      const double a = unif(rng);
      EXPECT_NEAR(hermite_series(mu, a), sigma(a), 1e-9) << deg;
    }
  }
}

TEST(Decay, Examples) {
  Eigen::VectorXd he3 = Eigen::VectorXd::Zero(7);
  he3[3] = 1.0;
  EXPECT_FALSE(check_decay(he3, 1.0, 0.5).pass);
  EXPECT_TRUE(check_decay(he3, 6.0, 0.5).pass);

  Eigen::VectorXd ones(5);
  ones << 0, 1, 1, 1, 1;
  const DecayReport r = check_decay(ones, 1.0, 1.0);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.first_violation, 2);
  EXPECT_EQ(r.violations, 3);

  const DecayFit f = fit_decay(relu_coeffs_closed_form(200), 0.25);
  EXPECT_TRUE(check_decay(relu_coeffs_closed_form(200), f.C, 0.25).pass);
  EXPECT_FALSE(check_decay(relu_coeffs_closed_form(200), 0.99 * f.C, 0.25).pass);
}

TEST(Activations, RegistryNamesAndErrors) {
  EXPECT_EQ(make_activation("identity").coeffs().size(), 2);
  EXPECT_EQ(make_activation("quadratic").mu(2), std::sqrt(2.0));
  EXPECT_EQ(make_activation("he3").name(), "he3");
  EXPECT_EQ(make_activation("hermite3").degree(), 3);
  EXPECT_EQ(make_activation("he:4").mu(4), 1.0);
  EXPECT_EQ(make_activation("relu").degree(), -1);
  EXPECT_THROW(make_activation("softplus"), ConfigError);
  EXPECT_THROW(make_activation("he5", 3), ConfigError);
  EXPECT_EQ(make_activation("he3").tail_weighted(), 0.0);
  const Activation q = make_activation("quadratic");
  EXPECT_NEAR(q(1.5), 2.25, 0.0);
  EXPECT_NEAR(q.norm_sq(), q.coeffs().squaredNorm(), 1e-15);
}

TEST(Activations, TabulatedReluMatchesBuiltin) {
  const Activation t = tabulated_activation({-2.0, 0.0, 3.0}, {0.0, 0.0, 3.0}, 40);
  const Eigen::VectorXd ref = relu_coeffs_closed_form(40);
  for (int p = 0; p <= 40; ++p) EXPECT_NEAR(t.mu(p), ref[p], 1e-10) << p;
  EXPECT_DOUBLE_EQ(t(-5.0), 0.0);
  EXPECT_DOUBLE_EQ(t(5.0), 5.0);
  EXPECT_DOUBLE_EQ(t.derivative(1.0), 1.0);
}

TEST(Activations, TabulatedFromCsv) {
  const auto path = std::filesystem::temp_directory_path() / "lora_dyn_act_table.csv";
  {
    std::ofstream out(path);
    out << "a,sigma\n# absolute value\n-1,1\n0,0\n1,1\n";
  }
  const Activation t = load_tabulated_activation(path.string(), 20);
  // |g|: mu_0 = sqrt(2/pi), mu_2 = sqrt(2/pi)/sqrt(2)
  EXPECT_NEAR(t.mu(0), std::sqrt(2.0 / std::numbers::pi), 1e-11);
  EXPECT_NEAR(t.mu(1), 0.0, 1e-11);
  EXPECT_NEAR(t.mu(2), std::sqrt(1.0 / std::numbers::pi), 1e-11);
  std::filesystem::remove(path);

  EXPECT_THROW(load_tabulated_activation("/nonexistent/table.csv"), ConfigError);
  EXPECT_THROW(tabulated_activation({0.0, 0.0}, {1.0, 2.0}), ConfigError);
}
