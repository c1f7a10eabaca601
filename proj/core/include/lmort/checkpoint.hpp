// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lmort/tuner.hpp"

namespace lmort {

/// Which backbone emission points feed the tuner's align / uniform inputs.
struct LayerBinding {
  std::uint32_t align_layer = 0;
  std::uint32_t uniform_layer = 0;

  friend bool operator==(const LayerBinding&, const LayerBinding&) = default;
};

struct Checkpoint {
  TunerParams params;
  LayerBinding layers;
};

/// "LMT1" file: header, serialized TunerConfig + backbone width + layer
/// binding, then every named tensor (u16 name, u32 rows, u32 cols, f32 data).
///
/// Parameters are stored as f32. Training keeps its master weights
/// f32-representable, so a trained checkpoint reloads bit-exactly.
void save_checkpoint(const TunerParams& params, const LayerBinding& layers, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Adam moments and step counter ("OPT1" sidecar, f64).
struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t param_count)
      : first_moment(param_count, 0.0), second_moment(param_count, 0.0) {}

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

void save_optimizer_state(const OptimizerState& state, const std::filesystem::path& path);
OptimizerState load_optimizer_state(const std::filesystem::path& path);

}  // namespace lmort
