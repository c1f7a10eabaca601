// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <thread>
#include <unordered_set>

#include "lmort/error.hpp"

namespace lmort {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::string lowercase(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

std::string_view to_string(SimilarityKind kind) { return kind == SimilarityKind::Dot ? "dot" : "cosine"; }

SimilarityKind parse_similarity(std::string_view text) {
  const std::string lower = lowercase(text);
  if (lower == "dot") return SimilarityKind::Dot;
  if (lower == "cosine" || lower == "cos") return SimilarityKind::Cosine;
  throw ConfigError("unknown similarity '" + std::string(text) + "' (expected dot or cosine)");
}

double similarity(std::span<const double> a, std::span<const double> b, SimilarityKind kind) {
  if (a.size() != b.size()) {
    throw ConfigError("similarity between vectors of dimension " + std::to_string(a.size()) + " and " +
                      std::to_string(b.size()));
  }
  const double d = dot(a, b);
  if (kind == SimilarityKind::Dot) return d;
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw NumericError("cosine similarity of a zero vector");
  }
  return d / (na * nb);
}

double similarity(const RepVector& a, const RepVector& b, SimilarityKind kind) {
  return similarity(std::span<const double>(a.values), std::span<const double>(b.values), kind);
}

double VectorStore::score(std::span<const double> query, double query_norm, std::size_t i) const {
  const float* r = data_.data() + i * dim_;
  double d = 0.0;
  for (std::size_t c = 0; c < dim_; ++c) d += query[c] * static_cast<double>(r[c]);
  if (kind_ == SimilarityKind::Dot) return d;
  return d / (query_norm * norms_[i]);
}

VectorStore build_store(std::vector<std::pair<std::string, std::vector<float>>> entries, SimilarityKind kind) {
  VectorStore store;
  store.kind_ = kind;
  if (entries.empty()) return store;
  store.dim_ = entries.front().second.size();
  std::unordered_set<std::string> seen;
  store.ids_.reserve(entries.size());
  store.data_.reserve(entries.size() * store.dim_);
  store.norms_.reserve(entries.size());
  for (auto& [id, vec] : entries) {
    if (vec.size() != store.dim_) {
      throw DataError("vector '" + id + "' has dimension " + std::to_string(vec.size()) + ", store expects " +
                      std::to_string(store.dim_));
    }
    if (!seen.insert(id).second) {
      throw DataError("duplicate id '" + id + "' in vector store");
    }
    double sq = 0.0;
    for (float v : vec) sq += static_cast<double>(v) * static_cast<double>(v);
    if (kind == SimilarityKind::Cosine && sq == 0.0) {
      throw NumericError("vector '" + id + "' is zero and cannot be scored by cosine");
    }
    store.norms_.push_back(std::sqrt(sq));
    store.data_.insert(store.data_.end(), vec.begin(), vec.end());
    store.ids_.push_back(std::move(id));
  }
  return store;
}

VectorStore build_store(const VectorSet& vectors, SimilarityKind kind) {
  std::vector<std::pair<std::string, std::vector<float>>> entries;
  entries.reserve(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto row = vectors.rows.row(static_cast<Eigen::Index>(i));
    entries.emplace_back(vectors.ids[i], std::vector<float>(row.data(), row.data() + row.size()));
  }
  return build_store(std::move(entries), kind);
}

RankedList top_k(std::span<const double> query, const VectorStore& store, std::size_t k, std::string query_id) {
  if (k == 0) {
    throw ConfigError("top_k needs k >= 1");
  }
  RankedList ranked;
  ranked.query_id = std::move(query_id);
  if (store.size() == 0) return ranked;
  if (query.size() != store.dim()) {
    throw ConfigError("query dimension " + std::to_string(query.size()) + " does not match store dimension " +
                      std::to_string(store.dim()));
  }
  double qn = 0.0;
  if (store.kind() == SimilarityKind::Cosine) {
    qn = norm(query);
    if (qn == 0.0) throw NumericError("cosine search with a zero query vector");
  }
  std::vector<std::pair<double, std::size_t>> scored(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) scored[i] = {store.score(query, qn, i), i};
  const auto& ids = store.ids();
  const auto better = [&ids](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return ids[a.second] < ids[b.second];
  };
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
  ranked.hits.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) ranked.hits.emplace_back(ids[scored[i].second], scored[i].first);
  return ranked;
}

RankedList top_k(const RepVector& query, const VectorStore& store, std::size_t k, std::string query_id) {
  return top_k(std::span<const double>(query.values), store, k, std::move(query_id));
}

double ndcg_at_10(const RankedList& ranked, const std::map<std::string, int>& judgments) {
  constexpr std::size_t kCutoff = 10;
  std::vector<int> grades;
  grades.reserve(judgments.size());
  for (const auto& [pid, grade] : judgments) grades.push_back(grade);
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(kCutoff, grades.size()); ++i) {
    ideal += (std::exp2(grades[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  if (ideal == 0.0) return 0.0;
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(kCutoff, ranked.hits.size()); ++i) {
    const auto it = judgments.find(ranked.hits[i].first);
    if (it == judgments.end() || it->second <= 0) continue;
    dcg += (std::exp2(it->second) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / ideal;
}

EvalResult evaluate_run(const VectorSet& queries, const VectorStore& store, const Qrels& qrels, std::size_t k,
                        std::size_t threads) {
  const std::size_t n = queries.size();
  std::vector<RankedList> runs(n);
  auto rank_range = [&](std::size_t begin, std::size_t end) {
    std::vector<double> q(queries.dim());
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = queries.rows.row(static_cast<Eigen::Index>(i));
      for (std::size_t c = 0; c < q.size(); ++c) q[c] = static_cast<double>(row(static_cast<Eigen::Index>(c)));
      runs[i] = top_k(q, store, k, queries.ids[i]);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    rank_range(0, n);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin < end) pool.emplace_back(rank_range, begin, end);
    }
  }

  EvalResult result;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = qrels.find(queries.ids[i]);
    if (it == qrels.end()) {
      ++result.skipped_queries;
      continue;
    }
    const double score = ndcg_at_10(runs[i], it->second);
    result.per_query.push_back({queries.ids[i], score});
    total += score;
  }
  if (!result.per_query.empty()) result.mean_ndcg = total / static_cast<double>(result.per_query.size());
  result.runs = std::move(runs);
  return result;
}

void write_run_tsv(std::span<const RankedList> runs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open run file for writing: " + path.string());
  char buf[64];
  for (const auto& run : runs) {
    for (std::size_t r = 0; r < run.hits.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%.9g", run.hits[r].second);
      out << run.query_id << '\t' << (r + 1) << '\t' << run.hits[r].first << '\t' << buf << '\n';
    }
  }
  out.close();
  if (out.fail()) throw DataError("write failed: " + path.string());
}

void write_per_query_csv(std::span<const QueryScore> scores, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open metrics CSV for writing: " + path.string());
  out << "query_id,ndcg@10\n";
  char buf[64];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.17g", s.ndcg);
    out << s.query_id << ',' << buf << '\n';
  }
  out.close();
  if (out.fail()) throw DataError("write failed: " + path.string());
}

}  // namespace lmort
