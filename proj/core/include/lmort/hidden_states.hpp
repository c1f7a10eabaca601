// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmort/linalg.hpp"

namespace lmort {

/// Per-layer token hidden states of one sequence, exported from a frozen backbone.
///
/// Layer index 0 is the backbone's embedding output; index l >= 1 is the
/// output of block l. Only the layers requested at export time are stored.
/// Padding rows are kept but flagged false in `attention_mask`.
struct LayeredStates {
  std::string sequence_id;
  std::vector<std::uint32_t> layer_indices;  // unique, ascending
  std::vector<MatrixF> states;               // parallel to layer_indices; n x d each
  std::vector<std::uint8_t> attention_mask;  // n entries, 1 = real token

  std::size_t token_count() const { return attention_mask.size(); }
  std::size_t d_model() const;
  std::size_t real_token_count() const;

  bool has_layer(std::uint32_t layer) const;
  /// Throws DataError naming the sequence when the layer was not exported.
  const MatrixF& layer(std::uint32_t layer) const;

  /// Throws FormatError describing the first violated invariant.
  void validate() const;

  /// Bitwise equality (floats compared by representation, not value).
  friend bool operator==(const LayeredStates& a, const LayeredStates& b);
};

/// Writes an HSD1 dump. All records must share d_model and layer_indices.
/// Returns the number of bytes written.
std::uint64_t write_dump(std::span<const LayeredStates> records, const std::filesystem::path& path);

/// Reads and validates an HSD1 dump; records come back in file order.
std::vector<LayeredStates> read_dump(const std::filesystem::path& path);

struct DumpHeader {
  std::uint32_t d_model = 0;
  std::vector<std::uint32_t> layer_indices;
  std::uint64_t record_count = 0;
};

/// Parses only the header of an HSD1 dump.
DumpHeader read_dump_header(const std::filesystem::path& path);

/// query_id -> (passage_id -> relevance grade >= 0).
using Qrels = std::map<std::string, std::map<std::string, int>>;

/// Three tab-separated columns: query_id, passage_id, grade. A BEIR-style
/// "query-id corpus-id score" header line is skipped. Duplicate pairs keep the
/// last grade and append a warning (printed to stderr if `warnings` is null).
Qrels read_qrels_tsv(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
void write_qrels_tsv(const Qrels& qrels, const std::filesystem::path& path);

/// One contrastive training unit.
struct TrainExample {
  std::string query_id;
  std::vector<std::string> positive_ids;  // non-empty
  std::vector<std::string> negative_ids;  // disjoint from positive_ids

  void validate() const;
  friend bool operator==(const TrainExample&, const TrainExample&) = default;
};

/// JSON lines: {"query_id": ..., "positive_ids": [...], "negative_ids": [...]}.
std::vector<TrainExample> read_train_jsonl(const std::filesystem::path& path);
void write_train_jsonl(std::span<const TrainExample> examples, const std::filesystem::path& path);

/// JSON lines with fields {id, text}; extra fields are ignored on read.
struct TextRecord {
  std::string id;
  std::string text;
};
std::vector<TextRecord> read_text_jsonl(const std::filesystem::path& path);
void write_text_jsonl(std::span<const TextRecord> records, const std::filesystem::path& path);

/// Two-column TSV of positive pairs (query_id, passage_id).
using IdPair = std::pair<std::string, std::string>;
std::vector<IdPair> read_pairs_tsv(const std::filesystem::path& path);
void write_pairs_tsv(std::span<const IdPair> pairs, const std::filesystem::path& path);

}  // namespace lmort
