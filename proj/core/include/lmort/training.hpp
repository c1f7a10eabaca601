// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmort/checkpoint.hpp"
#include "lmort/hidden_states.hpp"
#include "lmort/retrieval.hpp"
#include "lmort/tuner.hpp"

namespace lmort {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 8;
  double learning_rate = 5e-6;
  std::size_t epochs = 3;
  std::size_t negatives_per_query = 4;  // explicit negatives used per example (a prefix of negative_ids)
  bool use_in_batch_negatives = false;
  SimilarityKind similarity = SimilarityKind::Cosine;
  double temperature = 1.0;
  AdamConfig adam;
  std::optional<double> grad_clip;  // global L2 norm
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

struct ContrastiveLoss {
  double loss = 0.0;
  double grad_positive = 0.0;           // d loss / d sim_pos
  std::vector<double> grad_negatives;   // d loss / d sim_neg[i]
};

/// -log(e^{s+/t} / (e^{s+/t} + sum_i e^{s-_i/t})), log-sum-exp stabilized.
/// Exactly 0 with no negatives. Throws NumericError on non-finite input.
ContrastiveLoss contrastive_loss(double sim_pos, std::span<const double> sim_negs, double temperature = 1.0);

/// Backbone states for every id, converted once to f64 and never modified.
class StateCache {
 public:
  struct Entry {
    Matrix align;
    Matrix uniform;
    std::vector<std::uint8_t> mask;
  };

  StateCache(std::span<const LayeredStates> records, const LayerBinding& layers);

  const LayerBinding& layers() const { return layers_; }
  std::size_t d_llm() const { return d_llm_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& id) const { return entries_.contains(id); }
  /// Throws DataError for an id without cached states.
  const Entry& at(const std::string& id) const;

 private:
  LayerBinding layers_;
  std::size_t d_llm_ = 0;
  std::unordered_map<std::string, Entry> entries_;
};

/// Throws DataError listing the first example id that lacks cached states.
void require_cached(std::span<const TrainExample> examples, const StateCache& cache);

/// One Adam update on the summed contrastive loss of the batch: each query
/// against each of its positives, with its explicit negatives and, when
/// enabled, every other passage in the batch. Returns the summed loss.
/// Parameters stay f32-representable after the update.
double train_step(std::span<const TrainExample> batch, const StateCache& cache, TunerParams& params,
                  OptimizerState& optimizer, const TrainConfig& config);

struct LossRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
};

struct TrainLoopOptions {
  std::filesystem::path checkpoint_dir;  // empty -> no files written
  LayerBinding layers;                   // recorded in checkpoints
  std::optional<OptimizerState> resume;  // continue from this optimizer state
  std::optional<std::uint64_t> stop_after_step;  // simulate an interruption
  bool verbose = false;
};

struct TrainLoopResult {
  TunerParams params;
  OptimizerState optimizer;
  std::vector<LossRecord> loss_log;  // steps run by this call
  bool completed = false;
};

/// Epoch-shuffled mini-batch training. Each epoch's order depends only on
/// (seed, epoch), so resuming from step k reproduces an uninterrupted run.
/// With a checkpoint directory it writes epoch_<e>.lmt/.opt at each epoch end,
/// final.lmt/.opt when done (last.lmt/.opt when stopped early) and appends
/// to loss.csv (step,loss).
TrainLoopResult train_loop(std::span<const TrainExample> examples, const StateCache& cache, TunerParams params,
                           const TrainConfig& config, const TrainLoopOptions& options = {});

/// Encodes every id with the tuner into a VectorSet (rows in `ids` order).
VectorSet encode_ids(std::span<const std::string> ids, const StateCache& cache, const TunerParams& params,
                     std::size_t threads = 1);

/// Hardware thread count, capped by LMORT_THREADS when set.
std::size_t default_thread_count();

}  // namespace lmort
