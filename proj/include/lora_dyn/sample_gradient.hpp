// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Per-sample loss (f*(x) - f_hat(x))^2 and its spherical gradients.

#pragma once

#include <Eigen/Core>

#include "lora_dyn/network.hpp"

namespace lora_dyn {

/// full: f_hat = sum_i lambda_i sigma(s(<w_i,x> + xi chat_i <u_hat,x>)).
/// linearized: first order in the perturbation at fixed neuron scale s,
///   f_lin = sum_i lambda_i [sigma(s<w_i,x>) + sigma'(s<w_i,x>) s xi chat_i <u_hat,x>].
enum class ModelForm { full, linearized };

struct SampleGradient {
  Eigen::VectorXd u_grad;  // spherical gradient in u_hat
  Eigen::VectorXd c_grad;  // spherical gradient in c_hat on S^{k-1} (joint mode only)
  double f_teacher = 0.0;
  double f_student = 0.0;
  double loss = 0.0;
};

class GradientEvaluator {
 public:
  GradientEvaluator(const TeacherModel& teacher, bool constrain_subspace,
                    ModelForm form = ModelForm::full)
      : t_(&teacher), constrain_(constrain_subspace), form_(form) {
    if (constrain_) proj_ = SubspaceProjector(teacher.base.W);
    scale_ = teacher.conv.neuron_scale(teacher.pert.xi, teacher.k());
    out_ = teacher.conv.output_scale(teacher.pert.xi);
  }

  const TeacherModel& teacher() const { return *t_; }
  const SubspaceProjector& projector() const { return proj_; }
  bool constrained() const { return constrain_; }
  ModelForm form() const { return form_; }

  double student_output(const StudentState& s, const Eigen::VectorXd& x) const {
    wx_.noalias() = t_->base.W * x;
    return student_from_cache(s, s.u_hat.dot(x), nullptr);
  }

  /// Fills out.u_grad (and out.c_grad when want_c) for the sample x:
  /// raw gradient of the squared residual in u_hat, then the span(W)^perp
  /// projector (constrained mode), then the tangent projector at u_hat.
  void evaluate(const StudentState& s, const Eigen::VectorXd& x, SampleGradient& out,
                bool want_c = false) const {
    const BaseModel& b = t_->base;
    const double xi = t_->pert.xi;
    wx_.noalias() = b.W * x;
    const double ux = t_->pert.u.dot(x);
    const double uhx = s.u_hat.dot(x);

    double ft = 0.0;
    for (Eigen::Index i = 0; i < wx_.size(); ++i) {
      ft += b.lambda[i] * b.activation(scale_ * (wx_[i] + xi * t_->pert.c[i] * ux));
    }
    ft *= out_;
    dsig_.resize(wx_.size());
    const double fs = student_from_cache(s, uhx, &dsig_);
    const double resid = ft - fs;
    out.f_teacher = ft;
    out.f_student = fs;
    out.loss = resid * resid;

    // d f_hat / d u_hat = out * s * xi * sum_i lambda_i chat_i sigma'_i * x
    const double common = -2.0 * resid * out_ * scale_ * xi;
    double g = 0.0;
    for (Eigen::Index i = 0; i < wx_.size(); ++i) g += b.lambda[i] * s.c_hat[i] * dsig_[i];
    g *= common;

    if (constrain_) {
      out.u_grad = proj_.project_out(x);
    } else {
      out.u_grad = x;
    }
    const double along = s.u_hat.dot(out.u_grad);
    out.u_grad -= along * s.u_hat;
    out.u_grad *= g;

    if (want_c) {
      out.c_grad = (common * uhx) * b.lambda.cwiseProduct(dsig_);
      out.c_grad -= s.c_hat.dot(out.c_grad) * s.c_hat;
    }
  }

 private:
  // Uses wx_; writes sigma' at the student pre-activations into dsig.
  double student_from_cache(const StudentState& s, double uhx, Eigen::VectorXd* dsig) const {
    const BaseModel& b = t_->base;
    const double xi = t_->pert.xi;
    double f = 0.0;
    for (Eigen::Index i = 0; i < wx_.size(); ++i) {
      if (form_ == ModelForm::full) {
        const double a = scale_ * (wx_[i] + xi * s.c_hat[i] * uhx);
        f += b.lambda[i] * b.activation(a);
        if (dsig) (*dsig)[i] = b.activation.derivative(a);
      } else {
        const double a = scale_ * wx_[i];
        const double da = b.activation.derivative(a);
        f += b.lambda[i] * (b.activation(a) + da * scale_ * xi * s.c_hat[i] * uhx);
        if (dsig) (*dsig)[i] = da;
      }
    }
    return out_ * f;
  }

  const TeacherModel* t_;
  bool constrain_;
  ModelForm form_;
  SubspaceProjector proj_;
  double scale_ = 1.0;
  double out_ = 1.0;
  // Scratch; an evaluator is used by one thread at a time.
  mutable Eigen::VectorXd wx_;
  mutable Eigen::VectorXd dsig_;
};

/// Spherical sample gradient at a single x (full model).
inline Eigen::VectorXd sample_spherical_gradient(const TeacherModel& teacher,
                                                 const StudentState& student,
                                                 const Eigen::VectorXd& x) {
  const GradientEvaluator ev(teacher, student.constrain_subspace);
  SampleGradient g;
  ev.evaluate(student, x, g);
  return g.u_grad;
}

}  // namespace lora_dyn
