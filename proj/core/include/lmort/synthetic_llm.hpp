// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmort/hidden_states.hpp"
#include "lmort/linalg.hpp"

namespace lmort {

struct EmulatorConfig {
  std::uint64_t seed = 0;
  std::uint32_t vocab_size = 256;
  std::uint32_t d_model = 64;
  std::uint32_t n_layers = 8;  // transformer blocks; emission points = n_layers + 1
  std::uint32_t n_heads = 4;
  std::uint32_t max_seq_len = 64;

  std::uint32_t emission_points() const { return n_layers + 1; }
  void validate() const;
};

/// A frozen, seeded, pre-layer-norm causal transformer standing in for an LLM.
///
/// Weights are drawn once from N(0, 0.02^2) at construction and are const for
/// the lifetime of the object: there is no mutation API, and the class is not
/// assignable. Every row is computed with row-local arithmetic, so the state
/// of token t depends on tokens 0..t only and is bitwise independent of any
/// later tokens.
class Emulator {
 public:
  explicit Emulator(const EmulatorConfig& config);

  Emulator(const Emulator&) = default;
  Emulator(Emulator&&) = default;
  Emulator& operator=(const Emulator&) = delete;
  Emulator& operator=(Emulator&&) = delete;

  const EmulatorConfig& config() const { return config_; }

  /// Runs the causal stack over `tokens` and keeps the requested emission
  /// points (0 = embedding output, l = output of block l). `layers` may be
  /// given in any order; the result stores them ascending.
  LayeredStates encode_layers(std::string sequence_id, std::span<const std::uint32_t> tokens,
                              std::span<const std::uint32_t> layers) const;

  /// All weights flattened in a fixed order (for determinism checks).
  std::vector<double> flat_weights() const;

 private:
  struct Block {
    RowVector ln1_gain, ln1_bias;
    Matrix w_qkv;  // d x 3d
    RowVector b_qkv;
    Matrix w_o;  // d x d
    RowVector b_o;
    RowVector ln2_gain, ln2_bias;
    Matrix w_in;  // d x 4d
    RowVector b_in;
    Matrix w_out;  // 4d x d
    RowVector b_out;
  };

  const EmulatorConfig config_;
  const Matrix token_embedding_;     // vocab x d
  const Matrix position_embedding_;  // max_seq_len x d
  const std::vector<Block> blocks_;
};

Emulator build_emulator(const EmulatorConfig& config);

/// Byte-level tokenization over UTF-8: one token per byte (vocab 256).
std::vector<std::uint32_t> byte_tokenize(std::string_view text);

struct TokenSequence {
  std::string id;
  std::vector<std::uint32_t> tokens;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct SyntheticTaskSpec {
  std::uint64_t seed = 0;
  std::size_t n_queries = 100;
  std::size_t n_passages = 1000;
  std::size_t positives_per_query = 1;
  std::size_t negatives_per_query = 4;
  double noise_level = 0.15;
  std::size_t sequence_length = 16;
  std::uint32_t vocab_size = 256;
};

/// A toy retrieval task: passages are random token sequences, each query is
/// a noisy copy (per-token substitution at `noise_level`) of its positive.
struct SyntheticTask {
  std::vector<TokenSequence> queries;
  std::vector<TokenSequence> corpus;
  Qrels qrels;
  std::vector<TrainExample> train_examples;

  friend bool operator==(const SyntheticTask&, const SyntheticTask&) = default;
};

/// Positives are distinct passages across all queries, so the corpus must
/// hold n_queries * positives_per_query passages and at least
/// positives_per_query + negatives_per_query. With more than one positive
/// per query, the extra positives are noisy copies of the first.
SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec);

/// Renders token ids as space-separated decimals (the JSONL "text" field).
std::string tokens_to_text(std::span<const std::uint32_t> tokens);
std::vector<std::uint32_t> text_to_tokens(std::string_view text);

}  // namespace lmort
