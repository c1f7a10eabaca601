// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmort/hidden_states.hpp"
#include "lmort/retrieval.hpp"
#include "lmort/space_analysis.hpp"
#include "lmort/training.hpp"
#include "manifest.hpp"

namespace lmort::cli {

/// File names written by `emulate` into [paths] out_dir.
inline constexpr std::string_view kDumpFile = "dump.hsd";
inline constexpr std::string_view kQueriesFile = "queries.jsonl";
inline constexpr std::string_view kCorpusFile = "corpus.jsonl";
inline constexpr std::string_view kQrelsFile = "qrels.tsv";
inline constexpr std::string_view kTrainFile = "train.jsonl";
inline constexpr std::string_view kPairsFile = "pairs.tsv";

void cmd_emulate(const RunManifest& manifest, std::ostream& out);
LayerDiagnostics cmd_analyze(const RunManifest& manifest, std::ostream& out);
TrainLoopResult cmd_train(const RunManifest& manifest, std::ostream& out);
VectorSet cmd_encode(const RunManifest& manifest, std::ostream& out);
EvalResult cmd_search_eval(const RunManifest& manifest, std::ostream& out, std::ostream& err);

enum class Ablation { Full, WorstAU, SelfOnlyA, SelfOnlyU, EmbeddingOnly };

std::string_view to_string(Ablation ablation);
/// full, worst_au, self_only_a, self_only_u, embedding_only. Throws ConfigError otherwise.
Ablation parse_ablation(std::string_view name);
std::vector<Ablation> all_ablations();

/// Tuner inputs and cross switch for an ablation, given the layer sweep.
struct AblationSetup {
  LayerBinding layers;
  bool cross_attention = true;
};
AblationSetup ablation_setup(Ablation ablation, const LayerDiagnostics& diag);

struct AblationRow {
  Ablation ablation = Ablation::Full;
  LayerBinding layers;
  bool cross_attention = true;
  double ndcg = 0.0;
};

/// Everything a train-then-evaluate run needs, loaded once.
struct Experiment {
  std::vector<LayeredStates> records;
  std::vector<TrainExample> train_examples;
  std::vector<std::string> query_ids;
  std::vector<std::string> passage_ids;
  Qrels qrels;
};

struct ExperimentResult {
  double untrained_ndcg = 0.0;
  double trained_ndcg = 0.0;
  TrainLoopResult training;
};

/// Trains a fresh tuner on `binding` and scores it like encode + search-eval.
ExperimentResult run_experiment(const Experiment& experiment, const LayerBinding& binding, const TunerConfig& tuner,
                                const TrainConfig& train, const SearchOptions& search, bool score_untrained = false);

/// Mean NDCG@10 of `params` over the experiment's queries and passages.
double score_params(const Experiment& experiment, const StateCache& cache, const TunerParams& params,
                    const SearchOptions& search, std::size_t threads);

std::vector<AblationRow> cmd_ablate(const RunManifest& manifest, std::span<const Ablation> ablations,
                                    std::ostream& out);

/// Parses argv, runs one subcommand and maps errors to exit codes:
/// 0 success, 1 usage/config, 2 data, 3 numeric.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lmort::cli
