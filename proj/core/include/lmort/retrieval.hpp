// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lmort/hidden_states.hpp"
#include "lmort/linalg.hpp"
#include "lmort/space_analysis.hpp"

namespace lmort {

enum class SimilarityKind : std::uint8_t { Dot = 0, Cosine = 1 };

std::string_view to_string(SimilarityKind kind);
/// "dot" or "cosine" (case-insensitive).
SimilarityKind parse_similarity(std::string_view text);

/// Dot product or cosine. Throws ConfigError on a dimension mismatch and
/// NumericError for a zero vector under Cosine.
double similarity(std::span<const double> a, std::span<const double> b, SimilarityKind kind);
double similarity(const RepVector& a, const RepVector& b, SimilarityKind kind);

/// Ids with one f32 row each (the payload of a VEC1 file).
struct VectorSet {
  std::vector<std::string> ids;
  MatrixF rows;  // ids.size() x d

  std::size_t dim() const { return static_cast<std::size_t>(rows.cols()); }
  std::size_t size() const { return ids.size(); }
  friend bool operator==(const VectorSet& a, const VectorSet& b);
};

/// "VEC1": magic, d u32, count u64, id table (u16 length + bytes each), f32 rows.
void write_vectors(const VectorSet& vectors, const std::filesystem::path& path);
VectorSet read_vectors(const std::filesystem::path& path);

/// Immutable exact-search table.
class VectorStore {
 public:
  VectorStore() = default;

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  SimilarityKind kind() const { return kind_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

  /// Similarity of a query against stored row i (f64 arithmetic).
  double score(std::span<const double> query, double query_norm, std::size_t i) const;

 private:
  friend VectorStore build_store(std::vector<std::pair<std::string, std::vector<float>>> entries,
                                 SimilarityKind kind);

  std::size_t dim_ = 0;
  SimilarityKind kind_ = SimilarityKind::Cosine;
  std::vector<std::string> ids_;
  std::vector<float> data_;
  std::vector<double> norms_;
};

/// Throws DataError naming a duplicate id or a dimension mismatch.
VectorStore build_store(std::vector<std::pair<std::string, std::vector<float>>> entries, SimilarityKind kind);
VectorStore build_store(const VectorSet& vectors, SimilarityKind kind);

struct RankedList {
  std::string query_id;
  std::vector<std::pair<std::string, double>> hits;  // scores non-increasing, ties by ascending id
};

/// Exact top-k by the store's similarity. Throws ConfigError when k == 0 or
/// the query dimension differs from the store.
RankedList top_k(const RepVector& query, const VectorStore& store, std::size_t k, std::string query_id = {});
RankedList top_k(std::span<const double> query, const VectorStore& store, std::size_t k,
                 std::string query_id = {});

/// DCG@10 with gain 2^rel - 1 and log2(rank + 1) discount, over the ideal DCG
/// from the judged grades. 0 when nothing relevant is judged.
double ndcg_at_10(const RankedList& ranked, const std::map<std::string, int>& judgments);

struct QueryScore {
  std::string query_id;
  double ndcg = 0.0;
};

struct EvalResult {
  double mean_ndcg = 0.0;
  std::vector<QueryScore> per_query;  // in query order
  std::vector<RankedList> runs;       // in query order
  std::size_t skipped_queries = 0;    // queries without a qrels entry
};

/// Ranks every query against `store` and averages NDCG@10 over the judged
/// queries (unweighted). Queries lacking qrels are excluded and counted.
EvalResult evaluate_run(const VectorSet& queries, const VectorStore& store, const Qrels& qrels, std::size_t k = 10,
                        std::size_t threads = 1);

/// TSV: query_id, rank, passage_id, score.
void write_run_tsv(std::span<const RankedList> runs, const std::filesystem::path& path);
/// CSV: query_id,ndcg@10.
void write_per_query_csv(std::span<const QueryScore> scores, const std::filesystem::path& path);

}  // namespace lmort
