// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

// Row-wise kernels shared by the tuner forward and backward passes.

#pragma once

#include <cmath>
#include <numbers>

#include "lmort/linalg.hpp"
#include "lmort/tuner.hpp"

namespace lmort::detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Matrix layer_norm_forward(const Matrix& x, ConstMatrixMap gain, ConstMatrixMap bias, double eps,
                                 LayerNormCache* cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index w = x.cols();
  Matrix normalized(n, w);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double mean = x.row(t).mean();
    const double var = (x.row(t).array() - mean).square().sum() / static_cast<double>(w);
    inv_std(t) = 1.0 / std::sqrt(var + eps);
    normalized.row(t) = (x.row(t).array() - mean) * inv_std(t);
  }
  Matrix y = normalized.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

inline Matrix add_bias(Matrix m, ConstMatrixMap bias) {
  m.rowwise() += bias.row(0);
  return m;
}

}  // namespace lmort::detail
