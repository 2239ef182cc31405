// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Base models, rank-1 perturbations, teachers and students, and the named
// instance constructions (orthonormal, angularly separated, CSQ-hard,
// multiple global optima).

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>

#include <Eigen/Core>
#include <Eigen/QR>

#include "lora_dyn/errors.hpp"
#include "lora_dyn/hermite.hpp"
#include "lora_dyn/rng.hpp"

namespace lora_dyn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Orthonormal basis of the row space of W, for projecting onto span(W)^perp.
class SubspaceProjector {
 public:
  SubspaceProjector() = default;

  explicit SubspaceProjector(const MatrixXd& W, double tol = 1e-12) {
    const Eigen::Index d = W.cols();
    if (W.rows() == 0) {
      basis_ = MatrixXd(d, 0);
      return;
    }
    Eigen::ColPivHouseholderQR<MatrixXd> qr(W.transpose());
    qr.setThreshold(tol);
    const Eigen::Index r = qr.rank();
    basis_ = qr.householderQ() * MatrixXd::Identity(d, r);
  }

  const MatrixXd& basis() const { return basis_; }
  Eigen::Index rank() const { return basis_.cols(); }
  Eigen::Index dim() const { return basis_.rows(); }

  /// v - Q Q^T v
  VectorXd project_out(const VectorXd& v) const { return v - basis_ * (basis_.transpose() * v); }
  void project_out_inplace(Eigen::Ref<VectorXd> v) const { v -= basis_ * (basis_.transpose() * v); }
  /// ||Q^T v||, the norm of the component inside span(W).
  double in_span_norm(const VectorXd& v) const { return (basis_.transpose() * v).norm(); }

 private:
  MatrixXd basis_;
};

/// Neuron scaling convention.
///   unit_norm: v_i = (w_i + xi c_i u) / sqrt(1 + xi^2/k)   (default)
///   none:      v_i = w_i + xi c_i u
///   squared:   v_i = (k/(k + xi^2)) (w_i + xi c_i u)      (figure reproduction)
enum class NeuronScaling { unit_norm, none, squared };

inline const char* to_string(NeuronScaling s) {
  switch (s) {
    case NeuronScaling::unit_norm: return "unit_norm";
    case NeuronScaling::none: return "none";
    case NeuronScaling::squared: return "squared";
  }
  return "?";
}

inline NeuronScaling parse_neuron_scaling(const std::string& s) {
  if (s == "unit_norm") return NeuronScaling::unit_norm;
  if (s == "none") return NeuronScaling::none;
  if (s == "squared") return NeuronScaling::squared;
  throw ConfigError("unknown neuron scaling '" + s + "'");
}

struct NeuronConvention {
  NeuronScaling scaling = NeuronScaling::unit_norm;
  bool output_over_xi = false;  // multiply network outputs by 1/xi

  double neuron_scale(double xi, Eigen::Index k) const {
    const double kk = static_cast<double>(k);
    switch (scaling) {
      case NeuronScaling::unit_norm: return 1.0 / std::sqrt(1.0 + xi * xi / kk);
      case NeuronScaling::none: return 1.0;
      case NeuronScaling::squared: return kk / (kk + xi * xi);
    }
    return 1.0;
  }
  double output_scale(double xi) const { return output_over_xi && xi != 0.0 ? 1.0 / xi : 1.0; }
};

struct BaseModel {
  MatrixXd W;       // k x d, unit rows
  VectorXd lambda;  // k
  Activation activation;

  Eigen::Index k() const { return W.rows(); }
  Eigen::Index d() const { return W.cols(); }
  double lambda_min() const { return lambda.cwiseAbs().minCoeff(); }
  double lambda_max() const { return lambda.cwiseAbs().maxCoeff(); }
  MatrixXd gram() const { return W * W.transpose(); }

  void validate(double tol = 1e-12) const {
    if (W.rows() < 1 || W.cols() < 1) throw ConfigError("base model: empty W");
    if (lambda.size() != W.rows()) throw ConfigError("base model: lambda must have k entries");
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
      if (std::abs(W.row(i).norm() - 1.0) > tol) {
        throw ConfigError("base model: row " + std::to_string(i) + " of W is not unit norm");
      }
    }
    if (!(lambda_min() > 0.0)) throw ConfigError("base model: lambda_min must be positive");
  }

  double forward(const VectorXd& x) const {
    const VectorXd a = W * x;
    double f = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) f += lambda[i] * activation(a[i]);
    return f;
  }
};

struct Perturbation {
  double xi = 1.0;
  std::optional<double> xi_bar;  // xi = xi_bar sqrt(k) when set
  VectorXd c;                    // k
  VectorXd u;                    // d, unit norm
};

enum class CMode { quantized, spherical };

inline const char* to_string(CMode m) { return m == CMode::quantized ? "quantized" : "spherical"; }

inline CMode parse_c_mode(const std::string& s) {
  if (s == "quantized") return CMode::quantized;
  if (s == "spherical") return CMode::spherical;
  throw ConfigError("unknown c mode '" + s + "'");
}

/// Teacher neurons (rows of V) for a given base, perturbation and convention.
inline MatrixXd perturbed_neurons(const MatrixXd& W, double xi, const VectorXd& c, const VectorXd& u,
                                  const NeuronConvention& conv) {
  return conv.neuron_scale(xi, W.rows()) * (W + xi * c * u.transpose());
}

struct TeacherModel {
  BaseModel base;
  Perturbation pert;
  NeuronConvention conv;
  MatrixXd V;  // k x d teacher neurons

  TeacherModel() = default;
  TeacherModel(BaseModel b, Perturbation p, NeuronConvention cv = {})
      : base(std::move(b)), pert(std::move(p)), conv(cv) {
    if (pert.c.size() != base.k()) throw ConfigError("teacher: c must have k entries");
    if (pert.u.size() != base.d()) throw ConfigError("teacher: u must have d entries");
    V = perturbed_neurons(base.W, pert.xi, pert.c, pert.u, conv);
  }

  Eigen::Index k() const { return base.k(); }
  Eigen::Index d() const { return base.d(); }
};

/// Evaluated as sigma(s(<w_i,x> + xi c_i <u,x>)), the same arithmetic as the
/// student, so that a student equal to the teacher has residual exactly 0.
inline double teacher_forward(const TeacherModel& t, const VectorXd& x) {
  const double scale = t.conv.neuron_scale(t.pert.xi, t.k());
  const double ux = t.pert.u.dot(x);
  const VectorXd wx = t.base.W * x;
  double f = 0.0;
  for (Eigen::Index i = 0; i < wx.size(); ++i) {
    f += t.base.lambda[i] * t.base.activation(scale * (wx[i] + t.pert.xi * t.pert.c[i] * ux));
  }
  return t.conv.output_scale(t.pert.xi) * f;
}

struct StudentState {
  VectorXd u_hat;
  VectorXd c_hat;
  bool constrain_subspace = true;
  std::int64_t t = 0;
};

inline double student_forward(const BaseModel& base, const StudentState& s, double xi,
                              const VectorXd& x, const NeuronConvention& conv = {}) {
  const double scale = conv.neuron_scale(xi, base.k());
  const double ux = s.u_hat.dot(x);
  const VectorXd wx = base.W * x;
  double f = 0.0;
  for (Eigen::Index i = 0; i < wx.size(); ++i) {
    f += base.lambda[i] * base.activation(scale * (wx[i] + xi * s.c_hat[i] * ux));
  }
  return conv.output_scale(xi) * f;
}

// ---------------------------------------------------------------------------
// Constructions

/// k orthonormal rows from k i.i.d. Gaussian rows (Householder QR).
inline MatrixXd make_orthonormal_weights(Eigen::Index k, Eigen::Index d, Rng& rng) {
  if (k < 1 || d < 1) throw ConfigError("make_orthonormal_weights: k, d must be positive");
  if (k > d) throw ConfigError("make_orthonormal_weights: k > d");
  MatrixXd G(d, k);
  for (Eigen::Index j = 0; j < k; ++j) fill_gaussian(rng, G.col(j));
  Eigen::HouseholderQR<MatrixXd> qr(G);
  MatrixXd Q = qr.householderQ() * MatrixXd::Identity(d, k);
  // Fix signs so that the map Gaussian -> Q is the Gram-Schmidt one.
  const MatrixXd R = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < k; ++j) {
    if (R(j, j) < 0) Q.col(j) = -Q.col(j);
  }
  return Q.transpose();
}

inline double separation_threshold(Eigen::Index k) {
  const double kk = static_cast<double>(k);
  return 1.0 - std::log(kk) / std::sqrt(kk);
}

inline double max_offdiag_overlap(const MatrixXd& W) {
  const MatrixXd G = W * W.transpose();
  double m = 0.0;
  for (Eigen::Index i = 0; i < G.rows(); ++i) {
    for (Eigen::Index j = 0; j < G.cols(); ++j) {
      if (i != j) m = std::max(m, std::abs(G(i, j)));
    }
  }
  return m;
}

/// Throws ConfigError unless max_{i != j} |<w_i, w_j>| <= 1 - log k / sqrt k.
inline void validate_separated(const MatrixXd& W) {
  const double overlap = max_offdiag_overlap(W);
  const double bound = separation_threshold(W.rows());
  if (overlap > bound) {
    std::ostringstream os;
    os << "weights not angularly separated: max |<w_i,w_j>| = " << overlap << " > " << bound
       << " (k = " << W.rows() << ")";
    throw ConfigError(os.str());
  }
}

struct SeparatedWeights {
  MatrixXd W;
  double max_overlap = 0.0;
  int attempts = 0;
};

inline SeparatedWeights make_separated_weights(Eigen::Index k, Eigen::Index d, Rng& rng,
                                               int max_attempts = 100) {
  if (k < 2 || d < 2) throw ConfigError("make_separated_weights: need k >= 2 and d >= 2");
  const double bound = separation_threshold(k);
  SeparatedWeights out;
  out.W.resize(k, d);
  for (int a = 1; a <= max_attempts; ++a) {
    for (Eigen::Index i = 0; i < k; ++i) out.W.row(i) = uniform_sphere(rng, d).transpose();
    out.max_overlap = max_offdiag_overlap(out.W);
    out.attempts = a;
    if (out.max_overlap <= bound) return out;
  }
  std::ostringstream os;
  os << "make_separated_weights: bound " << bound << " not met after " << max_attempts
     << " attempts (last max overlap " << out.max_overlap << ", k = " << k << ", d = " << d << ")";
  throw ConfigError(os.str());
}

/// c uniform on {+-1/sqrt k}^k (quantized) or S^{k-1} (spherical); u uniform
/// on the unit sphere of span(W)^perp, or of R^d when orthogonal_u is false.
inline Perturbation sample_perturbation(const MatrixXd& W, double xi, Rng& rng,
                                        CMode mode = CMode::quantized, bool orthogonal_u = true) {
  const Eigen::Index k = W.rows();
  const Eigen::Index d = W.cols();
  Perturbation p;
  p.xi = xi;
  p.c = mode == CMode::quantized ? quantized_signs(rng, k) : uniform_sphere(rng, k);
  if (orthogonal_u) {
    if (d <= k) throw ConfigError("sample_perturbation: orthogonal u needs d > k");
    const SubspaceProjector proj(W);
    if (proj.rank() >= d) throw ConfigError("sample_perturbation: span(W) is all of R^d");
    VectorXd u = proj.project_out(gaussian_vector(rng, d));
    proj.project_out_inplace(u);
    p.u = u.normalized();
  } else {
    p.u = uniform_sphere(rng, d);
  }
  return p;
}

struct HardnessInstance {
  MatrixXd W;  // k x d
  VectorXd c;
  VectorXd u;
  Eigen::Index d = 0;
};

/// CSQ-hard base model with orthonormal perturbed neurons.
///
/// Columns: one per pair (i<j) in lexicographic order, then the k
/// "diagonal" columns, then two spare columns; u is the last one. Every
/// nonzero entry has magnitude 1/sqrt k, c_i = (-1)^i / sqrt k (1-based i),
/// and the second row of each pair carries the sign making
/// <w_i, w_j> = -c_i c_j.
inline HardnessInstance hardness_instance(Eigen::Index k) {
  if (k < 2) throw ConfigError("hardness_instance: k must be >= 2");
  HardnessInstance h;
  const Eigen::Index pairs = k * (k - 1) / 2;
  h.d = 2 + k * (k + 1) / 2;
  const double a = 1.0 / std::sqrt(static_cast<double>(k));
  h.c.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) h.c[i] = (i % 2 == 0 ? -a : a);  // i+1 odd -> negative
  h.W = MatrixXd::Zero(k, h.d);
  Eigen::Index col = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j, ++col) {
      h.W(i, col) = a;
      h.W(j, col) = h.c[i] * h.c[j] > 0 ? -a : a;
    }
  }
  for (Eigen::Index i = 0; i < k; ++i) h.W(i, pairs + i) = a;
  h.u = VectorXd::Zero(h.d);
  h.u[h.d - 1] = 1.0;
  return h;
}

/// Two teachers from distinct rank-1 perturbations of the same quadratic base
/// model that compute the same function (unnormalized neurons, lambda = 1).
struct GlobalOptimaExample {
  TeacherModel teacher_a;
  TeacherModel teacher_b;
};

inline GlobalOptimaExample global_optima_example() {
  const double r2 = std::sqrt(2.0);
  const double r3 = std::sqrt(3.0);
  BaseModel base{MatrixXd::Identity(2, 2), VectorXd::Ones(2), make_activation("quadratic")};
  Perturbation pa;
  pa.xi = 1.0;
  pa.c = VectorXd(2);
  pa.c << -(1.0 + r2) * (2.0 + r3), (1.0 + r2) * (r2 + r3);
  pa.u = VectorXd(2);
  pa.u << 1.0 / r2, 1.0 / r2;
  Perturbation pb;
  pb.xi = 1.0;
  pb.c = -pa.c;
  pb.u = VectorXd(2);
  pb.u << 1.0 / r3, std::sqrt(6.0) / 3.0;
  NeuronConvention conv;
  conv.scaling = NeuronScaling::none;
  return {TeacherModel(base, pa, conv), TeacherModel(base, pb, conv)};
}

}  // namespace lora_dyn
