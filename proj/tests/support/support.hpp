// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <openssl/evp.h>
#include <unistd.h>

#include "lmort/hidden_states.hpp"
#include "lmort/linalg.hpp"
#include "lmort/retrieval.hpp"
#include "lmort/rng.hpp"
#include "lmort/space_analysis.hpp"
#include "lmort/tuner.hpp"

namespace lmort::test {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("lmort_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline MatrixF random_matrix_f(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  MatrixF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(scale * rng.normal());
  return m;
}

inline std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t n) {
  std::vector<std::uint8_t> mask(n);
  for (auto& m : mask) m = rng.uniform() < 0.75 ? 1 : 0;
  mask[rng.index(n)] = 1;
  return mask;
}

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double sq = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  for (auto& x : v) x /= std::sqrt(sq);
  return v;
}

inline RepVector unit_rep(std::vector<double> v) { return RepVector{std::move(v), true}; }

inline LayeredStates random_record(Rng& rng, std::string id, std::size_t n, std::size_t d,
                                   std::vector<std::uint32_t> layers) {
  LayeredStates rec;
  rec.sequence_id = std::move(id);
  rec.layer_indices = std::move(layers);
  for (std::size_t i = 0; i < rec.layer_indices.size(); ++i) {
    rec.states.push_back(random_matrix_f(rng, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)));
  }
  rec.attention_mask = random_mask(rng, n);
  return rec;
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
inline Matrix random_orthogonal(Rng& rng, Eigen::Index d) {
  Matrix q = random_matrix(rng, d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    for (Eigen::Index i = 0; i < j; ++i) q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
    q.col(j).normalize();
  }
  return q;
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

inline std::vector<char> file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- oracles ---------------------------------------------------------------

inline double oracle_alignment(const std::vector<std::pair<std::vector<double>, std::vector<double>>>& pairs) {
  double total = 0.0;
  for (const auto& [x, y] : pairs) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
    total += d2;
  }
  return total / static_cast<double>(pairs.size());
}

inline double oracle_uniformity(const std::vector<std::vector<double>>& xs) {
  double total = 0.0;
  for (const auto& x : xs) {
    for (const auto& y : xs) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
      total += std::exp(-2.0 * d2);
    }
  }
  return std::log(total / static_cast<double>(xs.size() * xs.size()));
}

/// Full sort of every stored vector; score desc, id asc.
inline std::vector<std::pair<std::string, double>> oracle_ranking(const std::vector<double>& q,
                                                                  const std::vector<std::string>& ids,
                                                                  const std::vector<std::vector<float>>& rows,
                                                                  SimilarityKind kind, std::size_t k) {
  std::vector<std::pair<std::string, double>> all;
  double qn = 0.0;
  for (double v : q) qn += v * v;
  qn = std::sqrt(qn);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double d = 0.0;
    double rn = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) {
      d += q[c] * static_cast<double>(rows[i][c]);
      rn += static_cast<double>(rows[i][c]) * static_cast<double>(rows[i][c]);
    }
    all.emplace_back(ids[i], kind == SimilarityKind::Dot ? d : d / (qn * std::sqrt(rn)));
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

/// Parameter count by walking the materialized tensors.
inline std::size_t shape_walk_count(const TunerParams& params) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.layout().slots().size(); ++i) {
    const auto t = params.tensor(i);
    total += static_cast<std::size_t>(t.rows() * t.cols());
  }
  return total;
}

struct GradientReport {
  double worst_tensor_rel = 0.0;  // ||a - n|| / max(||a||, ||n||) per tensor
  std::string worst_tensor;
  double worst_element_rel = 0.0;
  std::string worst_element;
  std::size_t checked = 0;
  std::size_t tensor_failures = 0;
  std::size_t element_failures = 0;
  int redraws = 0;
};

inline double relative_error(double diff, double scale, double abs_floor) {
  return diff <= abs_floor ? 0.0 : diff / scale;
}

/// True when no ReLU pre-activation of the reduction MLP lies within one
/// difference step of its kink for either stream.
inline bool reduction_is_smooth(const TunerParams& params, const Matrix& ha, const Matrix& hu, double h) {
  const auto& red = params.layout().reduction();
  if (!red) return true;
  const auto w1 = params.tensor(red->w1);
  const auto b1 = params.tensor(red->b1);
  for (const Matrix* x : {&ha, &hu}) {
    const Matrix pre = ((*x) * w1).rowwise() + b1.row(0);
    for (Eigen::Index t = 0; t < pre.rows(); ++t) {
      const double reach = h * std::max(1.0, x->row(t).cwiseAbs().maxCoeff()) * 1.5;
      if (pre.row(t).cwiseAbs().minCoeff() <= reach) return false;
    }
  }
  return true;
}

/// Compares tuner_backward against central differences of
/// L = sum(W o H_o) + v . pooled, over every parameter. Inputs are redrawn
/// until the loss is smooth on every difference stencil.
inline GradientReport finite_difference_check(const TunerConfig& config, std::size_t d_llm, std::size_t n,
                                              std::uint64_t seed, double h = 1e-3, double rel_tol = 1e-4,
                                              double abs_floor = 1e-8) {
  Rng rng(seed);
  TunerConfig cfg = config;
  cfg.seed = seed;
  TunerParams params = init_params(cfg, d_llm);
  // Move layer-norm gains and biases off their defaults so every path is exercised.
  for (std::size_t i = 0; i < params.layout().slots().size(); ++i) {
    if (params.layout().slot(i).rows != 1) continue;
    auto t = params.tensor(i);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += 0.1 * rng.normal();
  }
  const auto rows = static_cast<Eigen::Index>(n);
  GradientReport report;
  Matrix ha = random_matrix(rng, rows, static_cast<Eigen::Index>(d_llm));
  Matrix hu = random_matrix(rng, rows, static_cast<Eigen::Index>(d_llm));
  while (!reduction_is_smooth(params, ha, hu, h)) {
    ha = random_matrix(rng, rows, static_cast<Eigen::Index>(d_llm));
    hu = random_matrix(rng, rows, static_cast<Eigen::Index>(d_llm));
    ++report.redraws;
  }
  std::vector<std::uint8_t> mask(n, 1);
  if (n > 2) mask[n - 1] = 0;
  const auto w = static_cast<Eigen::Index>(cfg.block_dim());
  const Matrix weight = random_matrix(rng, rows, w);
  std::vector<double> pooled_weight(static_cast<std::size_t>(w));
  for (auto& x : pooled_weight) x = rng.normal();

  const auto loss = [&](const TunerParams& p) {
    const ForwardResult f = tuner_forward(ha, hu, mask, p);
    double total = (weight.array() * f.output.array()).sum();
    const RepVector pooled = pooled_rep(f.output, mask, false);
    for (std::size_t c = 0; c < pooled.values.size(); ++c) total += pooled_weight[c] * pooled.values[c];
    return total;
  };

  const ForwardResult f = tuner_forward(ha, hu, mask, params);
  TunerGradients grads = tuner_backward(f.tape, params, weight);
  const TunerGradients pooled_grads = tuner_backward(f.tape, params, std::span<const double>(pooled_weight));
  for (std::size_t k = 0; k < grads.size(); ++k) grads.values()[k] += pooled_grads.values()[k];

  auto values = params.values();
  for (std::size_t s = 0; s < params.layout().slots().size(); ++s) {
    const auto& slot = params.layout().slot(s);
    double diff_sq = 0.0;
    double analytic_sq = 0.0;
    double numeric_sq = 0.0;
    for (std::size_t k = slot.offset; k < slot.offset + slot.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + h;
      const double up = loss(params);
      values[k] = saved - h;
      const double down = loss(params);
      values[k] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads.values()[k];
      const double diff = std::abs(numeric - analytic);
      diff_sq += diff * diff;
      analytic_sq += analytic * analytic;
      numeric_sq += numeric * numeric;
      const double rel = relative_error(diff, std::max(std::abs(numeric), std::abs(analytic)), abs_floor);
      ++report.checked;
      if (rel >= rel_tol) ++report.element_failures;
      if (rel > report.worst_element_rel) {
        report.worst_element_rel = rel;
        report.worst_element = slot.name + "[" + std::to_string(k - slot.offset) + "]";
      }
    }
    const double rel =
        relative_error(std::sqrt(diff_sq), std::sqrt(std::max(analytic_sq, numeric_sq)), abs_floor);
    if (rel >= rel_tol) ++report.tensor_failures;
    if (rel > report.worst_tensor_rel) {
      report.worst_tensor_rel = rel;
      report.worst_tensor = slot.name;
    }
  }
  return report;
}

/// Five hand-scored queries. Grades and rankings are literal; expected
/// values were worked out by hand from gain 2^g - 1 and discount log2(i + 1).
struct NdcgCase {
  std::string query_id;
  std::vector<std::string> ranking;
  std::map<std::string, int> judgments;
  double expected;
};

inline std::vector<NdcgCase> ndcg_fixture() {
  const double l3 = std::log2(3.0);
  return {
      // relevant at rank 1
      {"q1", {"a", "b", "c"}, {{"a", 1}}, 1.0},
      // relevant at rank 3: (1 / log2 4) / 1
      {"q2", {"x", "y", "a"}, {{"a", 1}}, 0.5},
      // nothing relevant retrieved
      {"q3", {"x", "y", "z"}, {{"a", 1}}, 0.0},
      // grades 2 at rank 2 and 1 at rank 1: DCG = 1 + 3/log2 3, IDCG = 3 + 1/log2 3
      {"q4", {"b", "a"}, {{"a", 2}, {"b", 1}}, (1.0 + 3.0 / l3) / (3.0 + 1.0 / l3)},
      // two grade-1 docs, one at rank 2 and one beyond 10: DCG = 1/log2 3, IDCG = 1 + 1/log2 3
      {"q5",
       {"n1", "a", "n2", "n3", "n4", "n5", "n6", "n7", "n8", "n9", "b"},
       {{"a", 1}, {"b", 1}},
       (1.0 / l3) / (1.0 + 1.0 / l3)},
  };
}

}  // namespace lmort::test
