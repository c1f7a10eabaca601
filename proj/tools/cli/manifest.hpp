// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lmort/checkpoint.hpp"
#include "lmort/retrieval.hpp"
#include "lmort/synthetic_llm.hpp"
#include "lmort/training.hpp"
#include "lmort/tuner.hpp"

namespace lmort::cli {

/// Command-line values that win over the manifest.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<ConnectionMode> connection;
  std::optional<std::uint32_t> blocks;
  std::optional<std::size_t> k;
  bool deterministic = false;
};

struct AnalysisOptions {
  std::vector<std::uint32_t> layers;  // empty -> every layer stored in the dump
  std::optional<std::uint64_t> uniform_pairs;  // unset -> automatic budget
  std::uint64_t seed = 0;
};

struct SearchOptions {
  std::size_t k = 10;
  SimilarityKind similarity = SimilarityKind::Cosine;
};

/// One TOML file capturing every knob of a run:
///
///   [paths]     file locations (relative to the manifest's directory)
///   [emulator]  EmulatorConfig fields
///   [task]      SyntheticTaskSpec fields
///   [layers]    align = A, uniform = U
///   [tuner]     TunerConfig fields; connection = "a2u" | "u2a",
///               reduction_hidden / reduction_out enable the reduction MLP
///   [train]     TrainConfig fields
///   [analysis]  layers, uniform_pairs, seed
///   [search]    k, similarity
///   [ablate]    names = [...]
struct RunManifest {
  std::filesystem::path base_dir;
  std::map<std::string, std::filesystem::path> paths;
  EmulatorConfig emulator;
  std::vector<std::uint32_t> emulate_layers;  // empty -> all emission points
  SyntheticTaskSpec task;
  std::optional<LayerBinding> layers;
  TunerConfig tuner;
  TrainConfig train;
  AnalysisOptions analysis;
  SearchOptions search;
  std::vector<std::string> ablations;

  bool has_path(const std::string& key) const { return paths.contains(key); }
  /// Throws ConfigError when the key is absent.
  const std::filesystem::path& path(const std::string& key) const;
  /// Throws DataError when a listed input does not exist.
  void require_inputs(std::initializer_list<std::string_view> keys) const;
  /// Throws DataError when an output's parent directory does not exist.
  void require_output_dirs(std::initializer_list<std::string_view> keys) const;
};

RunManifest parse_manifest(std::string_view toml_text, const std::filesystem::path& base_dir,
                           const Overrides& overrides = {});
RunManifest load_manifest(const std::filesystem::path& path, const Overrides& overrides = {});

}  // namespace lmort::cli
