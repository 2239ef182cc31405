// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>

#include "lora_dyn/network.hpp"

namespace lora_dyn::testing {

/// Orthonormal (or separated) base model with a quantized perturbation.
inline TeacherModel random_teacher(Eigen::Index k, Eigen::Index d, double xi, const Activation& act,
                                   std::uint64_t seed, bool separated = false) {
  Rng rng = make_stream(seed, "test-instance");
  Eigen::MatrixXd W = separated ? make_separated_weights(k, d, rng).W : make_orthonormal_weights(k, d, rng);
  BaseModel base{W, Eigen::VectorXd::Ones(k), act};
  Perturbation p = sample_perturbation(W, xi, rng);
  return TeacherModel(base, p);
}

/// Unit u_hat in span(W)^perp with <u, u_hat> = m exactly (up to rounding).
inline Eigen::VectorXd direction_with_overlap(const TeacherModel& t, double m, Rng& rng) {
  const SubspaceProjector proj(t.base.W);
  Eigen::VectorXd v = proj.project_out(gaussian_vector(rng, t.d()));
  v -= v.dot(t.pert.u) * t.pert.u;
  proj.project_out_inplace(v);
  v.normalize();
  return m * t.pert.u + std::sqrt(std::max(0.0, 1.0 - m * m)) * v;
}

}  // namespace lora_dyn::testing
