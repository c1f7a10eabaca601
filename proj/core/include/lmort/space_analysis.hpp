// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "lmort/hidden_states.hpp"
#include "lmort/linalg.hpp"

namespace lmort {

/// A pooled sequence representation.
struct RepVector {
  std::vector<double> values;
  bool normalized = false;

  std::size_t dim() const { return values.size(); }
};

/// Mean of the unmasked rows of one layer; L2-normalized when `normalize`.
/// Throws DataError if every token is masked or the mask length mismatches.
RepVector pooled_rep(const MatrixF& layer_states, std::span<const std::uint8_t> mask, bool normalize);
RepVector pooled_rep(const Matrix& layer_states, std::span<const std::uint8_t> mask, bool normalize);

/// Mean squared distance between normalized positive pairs, in [0, 4].
double alignment_loss(std::span<const std::pair<RepVector, RepVector>> pairs);

/// How many ordered pairs the uniformity estimate may look at.
/// `std::nullopt` means exhaustive n^2 enumeration. A budget >= n^2 also
/// enumerates exhaustively, so the two estimates coincide exactly there.
struct PairBudget {
  std::optional<std::uint64_t> pairs;

  static PairBudget all() { return {}; }
  static PairBudget sampled(std::uint64_t n) { return {n}; }
  /// Exhaustive up to 2,048 samples, otherwise 100,000 seeded pairs.
  static PairBudget automatic(std::size_t sample_count);
};

/// log of the mean Gaussian potential exp(-2 |x - y|^2) over ordered pairs,
/// self-pairs included. Result is <= 0 and >= -8 for unit vectors.
double uniformity_loss(std::span<const RepVector> samples, PairBudget budget = PairBudget::all(),
                       std::uint64_t seed = 0);

struct LayerLoss {
  std::uint32_t layer = 0;
  double align_loss = 0.0;
  double uniform_loss = 0.0;
  std::uint64_t pair_count = 0;
  std::uint64_t sample_count = 0;
};

struct LayerDiagnostics {
  std::vector<LayerLoss> rows;  // ascending layer index
  std::uint32_t selected_a = 0;  // argmin align_loss, ties -> lowest index
  std::uint32_t selected_u = 0;  // argmin uniform_loss, ties -> lowest index

  /// argmax counterparts, used by the worst-layer ablation.
  std::uint32_t worst_a() const;
  std::uint32_t worst_u() const;
};

/// Fills selected_a / selected_u from `rows` (sorting rows by layer first).
void select_layers(LayerDiagnostics& diag);

struct SweepOptions {
  std::optional<PairBudget> uniform_budget;  // unset -> PairBudget::automatic
  std::uint64_t seed = 0;
};

/// Per-layer alignment (over `positive_pairs`) and uniformity (over every
/// record in `records`, queries and passages pooled into one multiset).
/// Uses mean pooling + L2 normalization. Throws DataError for a layer missing
/// from the dump or a pair naming an unknown id.
LayerDiagnostics sweep_layers(std::span<const LayeredStates> records, std::span<const IdPair> positive_pairs,
                              std::span<const std::uint32_t> layers, const SweepOptions& options = {});

/// CSV "layer,align_loss,uniform_loss" with 9 significant digits.
void export_heatmap_csv(const LayerDiagnostics& diag, const std::filesystem::path& path);
/// Inverse of export_heatmap_csv; pair/sample counts are not stored and read back as 0.
LayerDiagnostics import_heatmap_csv(const std::filesystem::path& path);

}  // namespace lmort
