// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/space_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>

#include "lmort/error.hpp"
#include "lmort/rng.hpp"

namespace lmort {
namespace {

constexpr double kUnitTolerance = 1e-6;

template <typename M>
RepVector pool_impl(const M& states, std::span<const std::uint8_t> mask, bool normalize) {
  if (static_cast<Eigen::Index>(mask.size()) != states.rows()) {
    throw DataError("mask length " + std::to_string(mask.size()) + " does not match " +
                    std::to_string(states.rows()) + " token states");
  }
  RepVector rep;
  rep.values.assign(static_cast<std::size_t>(states.cols()), 0.0);
  std::size_t count = 0;
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    ++count;
    for (Eigen::Index c = 0; c < states.cols(); ++c) {
      rep.values[static_cast<std::size_t>(c)] += static_cast<double>(states(t, c));
    }
  }
  if (count == 0) {
    throw DataError("cannot pool: every token is masked");
  }
  for (double& v : rep.values) v /= static_cast<double>(count);
  if (normalize) {
    double norm = 0.0;
    for (double v : rep.values) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      throw NumericError("cannot normalize a zero pooled vector");
    }
    for (double& v : rep.values) v /= norm;
    rep.normalized = true;
  }
  return rep;
}

void require_unit(const RepVector& v, const char* what) {
  if (!v.normalized) {
    throw ConfigError(std::string(what) + " requires normalized vectors");
  }
  double norm = 0.0;
  for (double x : v.values) norm += x * x;
  if (std::abs(std::sqrt(norm) - 1.0) > kUnitTolerance) {
    throw ConfigError(std::string(what) + " received a vector flagged normalized with norm " +
                      std::to_string(std::sqrt(norm)));
  }
}

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    sum += diff * diff;
  }
  return sum;
}

std::string format_sig9(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

}  // namespace

RepVector pooled_rep(const MatrixF& layer_states, std::span<const std::uint8_t> mask, bool normalize) {
  return pool_impl(layer_states, mask, normalize);
}

RepVector pooled_rep(const Matrix& layer_states, std::span<const std::uint8_t> mask, bool normalize) {
  return pool_impl(layer_states, mask, normalize);
}

double alignment_loss(std::span<const std::pair<RepVector, RepVector>> pairs) {
  if (pairs.empty()) {
    throw DataError("alignment_loss needs at least one positive pair");
  }
  double total = 0.0;
  for (const auto& [x, y] : pairs) {
    require_unit(x, "alignment_loss");
    require_unit(y, "alignment_loss");
    if (x.dim() != y.dim()) {
      throw ConfigError("alignment_loss pair with mismatched dimensions");
    }
    total += squared_distance(x.values, y.values);
  }
  return total / static_cast<double>(pairs.size());
}

PairBudget PairBudget::automatic(std::size_t sample_count) {
  if (sample_count <= 2048) return all();
  return sampled(100'000);
}

double uniformity_loss(std::span<const RepVector> samples, PairBudget budget, std::uint64_t seed) {
  if (samples.empty()) {
    throw DataError("uniformity_loss needs at least one sample");
  }
  const std::size_t dim = samples.front().dim();
  for (const auto& s : samples) {
    require_unit(s, "uniformity_loss");
    if (s.dim() != dim) {
      throw ConfigError("uniformity_loss samples with mismatched dimensions");
    }
  }
  const auto n = static_cast<std::uint64_t>(samples.size());
  double total = 0.0;
  std::uint64_t count = 0;
  if (!budget.pairs || *budget.pairs >= n * n) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (std::size_t j = 0; j < samples.size(); ++j) {
        total += std::exp(-2.0 * squared_distance(samples[i].values, samples[j].values));
      }
    }
    count = n * n;
  } else {
    if (*budget.pairs == 0) {
      throw ConfigError("uniformity pair budget must be positive");
    }
    Rng rng(seed);
    for (std::uint64_t b = 0; b < *budget.pairs; ++b) {
      const auto i = static_cast<std::size_t>(rng.index(n));
      const auto j = static_cast<std::size_t>(rng.index(n));
      total += std::exp(-2.0 * squared_distance(samples[i].values, samples[j].values));
    }
    count = *budget.pairs;
  }
  return std::log(total / static_cast<double>(count));
}

std::uint32_t LayerDiagnostics::worst_a() const {
  if (rows.empty()) throw DataError("empty diagnostics");
  const LayerLoss* worst = &rows.front();
  for (const auto& r : rows) {
    if (r.align_loss > worst->align_loss) worst = &r;
  }
  return worst->layer;
}

std::uint32_t LayerDiagnostics::worst_u() const {
  if (rows.empty()) throw DataError("empty diagnostics");
  const LayerLoss* worst = &rows.front();
  for (const auto& r : rows) {
    if (r.uniform_loss > worst->uniform_loss) worst = &r;
  }
  return worst->layer;
}

void select_layers(LayerDiagnostics& diag) {
  if (diag.rows.empty()) {
    throw DataError("cannot select layers from empty diagnostics");
  }
  std::sort(diag.rows.begin(), diag.rows.end(),
            [](const LayerLoss& a, const LayerLoss& b) { return a.layer < b.layer; });
  // Strict comparison over ascending layers keeps the lowest index on ties.
  const LayerLoss* best_a = &diag.rows.front();
  const LayerLoss* best_u = &diag.rows.front();
  for (const auto& r : diag.rows) {
    if (r.align_loss < best_a->align_loss) best_a = &r;
    if (r.uniform_loss < best_u->uniform_loss) best_u = &r;
  }
  diag.selected_a = best_a->layer;
  diag.selected_u = best_u->layer;
}

LayerDiagnostics sweep_layers(std::span<const LayeredStates> records, std::span<const IdPair> positive_pairs,
                              std::span<const std::uint32_t> layers, const SweepOptions& options) {
  if (layers.empty()) {
    throw ConfigError("sweep_layers needs at least one layer");
  }
  if (records.empty()) {
    throw DataError("sweep_layers needs a non-empty dump");
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!index.emplace(records[i].sequence_id, i).second) {
      throw DataError("duplicate sequence id '" + records[i].sequence_id + "' in dump");
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> pair_rows;
  pair_rows.reserve(positive_pairs.size());
  for (const auto& [q, p] : positive_pairs) {
    const auto qi = index.find(q);
    const auto pi = index.find(p);
    if (qi == index.end() || pi == index.end()) {
      throw DataError("positive pair (" + q + ", " + p + ") references an id missing from the dump");
    }
    pair_rows.emplace_back(qi->second, pi->second);
  }
  if (pair_rows.empty()) {
    throw DataError("sweep_layers needs at least one positive pair");
  }
  for (std::uint32_t layer : layers) {
    for (const auto& rec : records) {
      if (!rec.has_layer(layer)) {
        throw DataError("layer " + std::to_string(layer) + " is missing from the dump (record '" +
                        rec.sequence_id + "')");
      }
    }
  }

  const PairBudget budget = options.uniform_budget.value_or(PairBudget::automatic(records.size()));
  LayerDiagnostics diag;
  std::vector<std::uint32_t> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (std::uint32_t layer : sorted) {
    std::vector<RepVector> reps;
    reps.reserve(records.size());
    for (const auto& rec : records) {
      reps.push_back(pooled_rep(rec.layer(layer), rec.attention_mask, true));
    }
    std::vector<std::pair<RepVector, RepVector>> pairs;
    pairs.reserve(pair_rows.size());
    for (const auto& [qi, pi] : pair_rows) pairs.emplace_back(reps[qi], reps[pi]);

    LayerLoss row;
    row.layer = layer;
    row.align_loss = alignment_loss(pairs);
    row.uniform_loss = uniformity_loss(reps, budget, mix_seed(options.seed, layer));
    row.pair_count = pairs.size();
    row.sample_count = reps.size();
    diag.rows.push_back(row);
  }
  select_layers(diag);
  return diag;
}

void export_heatmap_csv(const LayerDiagnostics& diag, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError("cannot open heatmap CSV for writing: " + path.string());
  }
  out << "layer,align_loss,uniform_loss\n";
  for (const auto& r : diag.rows) {
    out << r.layer << ',' << format_sig9(r.align_loss) << ',' << format_sig9(r.uniform_loss) << '\n';
  }
  out.close();
  if (out.fail()) {
    throw DataError("write failed: " + path.string());
  }
}

LayerDiagnostics import_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open heatmap CSV: " + path.string());
  }
  std::string line;
  if (!std::getline(in, line) || line != "layer,align_loss,uniform_loss") {
    throw FormatError("heatmap CSV lacks header 'layer,align_loss,uniform_loss': " + path.string());
  }
  LayerDiagnostics diag;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string layer, align, uniform;
    if (!std::getline(fields, layer, ',') || !std::getline(fields, align, ',') || !std::getline(fields, uniform)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 3 columns");
    }
    try {
      LayerLoss row;
      row.layer = static_cast<std::uint32_t>(std::stoul(layer));
      row.align_loss = std::stod(align);
      row.uniform_loss = std::stod(uniform);
      diag.rows.push_back(row);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  select_layers(diag);
  return diag;
}

}  // namespace lmort
