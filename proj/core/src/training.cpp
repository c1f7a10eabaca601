// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "lmort/error.hpp"
#include "lmort/rng.hpp"

namespace lmort {
namespace {

constexpr std::size_t kGradientLanes = 8;

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < n; i += threads) fn(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Adds upstream * d sim(a, b) / da into ga and / db into gb.
void similarity_backward(std::span<const double> a, std::span<const double> b, SimilarityKind kind, double upstream,
                         std::span<double> ga, std::span<double> gb) {
  if (kind == SimilarityKind::Dot) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      ga[i] += upstream * b[i];
      gb[i] += upstream * a[i];
    }
    return;
  }
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine similarity of a zero vector");
  const double s = dot(a, b) / (na * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ga[i] += upstream * (b[i] / (na * nb) - s * a[i] / (na * na));
    gb[i] += upstream * (a[i] / (na * nb) - s * b[i] / (nb * nb));
  }
}

Matrix spread_pooled_gradient(const ForwardTape& tape, std::span<const double> grad) {
  const auto n = static_cast<Eigen::Index>(tape.mask.size());
  Matrix g = Matrix::Zero(n, static_cast<Eigen::Index>(grad.size()));
  const double scale = 1.0 / static_cast<double>(tape.pooled_count);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (!tape.mask[static_cast<std::size_t>(r)]) continue;
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = grad[static_cast<std::size_t>(c)] * scale;
  }
  return g;
}

void save_pair(const TunerParams& params, const OptimizerState& opt, const LayerBinding& layers,
               const std::filesystem::path& dir, const std::string& stem) {
  save_checkpoint(params, layers, dir / (stem + ".lmt"));
  save_optimizer_state(opt, dir / (stem + ".opt"));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0.0)) throw ConfigError("adam epsilon must be > 0");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0");
}

ContrastiveLoss contrastive_loss(double sim_pos, std::span<const double> sim_negs, double temperature) {
  if (!std::isfinite(sim_pos) || !(temperature > 0.0)) {
    throw NumericError("contrastive loss got a non-finite similarity or temperature");
  }
  double top = sim_pos / temperature;
  for (double s : sim_negs) {
    if (!std::isfinite(s)) throw NumericError("contrastive loss got a non-finite negative similarity");
    top = std::max(top, s / temperature);
  }
  double sum = std::exp(sim_pos / temperature - top);
  for (double s : sim_negs) sum += std::exp(s / temperature - top);
  const double lse = top + std::log(sum);

  ContrastiveLoss out;
  out.loss = lse - sim_pos / temperature;
  if (sim_negs.empty()) out.loss = 0.0;
  out.grad_positive = (std::exp(sim_pos / temperature - lse) - 1.0) / temperature;
  if (sim_negs.empty()) out.grad_positive = 0.0;
  out.grad_negatives.reserve(sim_negs.size());
  for (double s : sim_negs) out.grad_negatives.push_back(std::exp(s / temperature - lse) / temperature);
  if (!std::isfinite(out.loss)) throw NumericError("contrastive loss is not finite");
  return out;
}

StateCache::StateCache(std::span<const LayeredStates> records, const LayerBinding& layers) : layers_(layers) {
  entries_.reserve(records.size());
  for (const auto& rec : records) {
    const MatrixF& a = rec.layer(layers.align_layer);
    const MatrixF& u = rec.layer(layers.uniform_layer);
    if (entries_.empty()) {
      d_llm_ = static_cast<std::size_t>(a.cols());
    } else if (static_cast<std::size_t>(a.cols()) != d_llm_) {
      throw DataError("sequence '" + rec.sequence_id + "' has width " + std::to_string(a.cols()) + ", expected " +
                      std::to_string(d_llm_));
    }
    Entry entry{a.cast<double>(), u.cast<double>(), rec.attention_mask};
    if (!entries_.emplace(rec.sequence_id, std::move(entry)).second) {
      throw DataError("duplicate sequence id '" + rec.sequence_id + "' in hidden-state dump");
    }
  }
}

const StateCache::Entry& StateCache::at(const std::string& id) const {
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw DataError("no cached hidden states for id '" + id + "'");
  return it->second;
}

void require_cached(std::span<const TrainExample> examples, const StateCache& cache) {
  for (const auto& ex : examples) {
    if (!cache.contains(ex.query_id)) throw DataError("no cached hidden states for query '" + ex.query_id + "'");
    for (const auto& id : ex.positive_ids) {
      if (!cache.contains(id)) throw DataError("no cached hidden states for passage '" + id + "'");
    }
    for (const auto& id : ex.negative_ids) {
      if (!cache.contains(id)) throw DataError("no cached hidden states for passage '" + id + "'");
    }
  }
}

double train_step(std::span<const TrainExample> batch, const StateCache& cache, TunerParams& params,
                  OptimizerState& optimizer, const TrainConfig& config) {
  config.validate();
  if (optimizer.first_moment.size() != params.size() || optimizer.second_moment.size() != params.size()) {
    throw ConfigError("optimizer state holds " + std::to_string(optimizer.first_moment.size()) +
                      " moments for " + std::to_string(params.size()) + " parameters");
  }
  if (cache.d_llm() != params.d_llm() && cache.size() > 0) {
    throw ConfigError("cached states have width " + std::to_string(cache.d_llm()) + ", tuner expects " +
                      std::to_string(params.d_llm()));
  }
  require_cached(batch, cache);

  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> index;
  const auto intern = [&](const std::string& id) {
    const auto [it, inserted] = index.emplace(id, ids.size());
    if (inserted) ids.push_back(id);
    return it->second;
  };

  struct Query {
    std::size_t query;
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
  };
  std::vector<Query> queries;
  std::vector<std::size_t> passage_pool;
  std::unordered_set<std::size_t> pooled;
  for (const auto& ex : batch) {
    ex.validate();
    Query q{intern(ex.query_id), {}, {}};
    for (const auto& id : ex.positive_ids) q.positives.push_back(intern(id));
    const std::size_t n_neg = std::min(config.negatives_per_query, ex.negative_ids.size());
    for (std::size_t i = 0; i < n_neg; ++i) q.negatives.push_back(intern(ex.negative_ids[i]));
    for (std::size_t p : q.positives) {
      if (pooled.insert(p).second) passage_pool.push_back(p);
    }
    for (std::size_t p : q.negatives) {
      if (pooled.insert(p).second) passage_pool.push_back(p);
    }
    queries.push_back(std::move(q));
  }
  if (config.use_in_batch_negatives) {
    for (auto& q : queries) {
      std::unordered_set<std::size_t> own(q.positives.begin(), q.positives.end());
      own.insert(q.negatives.begin(), q.negatives.end());
      own.insert(q.query);
      for (std::size_t p : passage_pool) {
        if (!own.contains(p)) q.negatives.push_back(p);
      }
    }
  }

  std::vector<ForwardResult> forward(ids.size());
  std::vector<std::vector<double>> pooled_vecs(ids.size());
  parallel_for(ids.size(), config.threads, [&](std::size_t i) {
    const auto& entry = cache.at(ids[i]);
    forward[i] = tuner_forward(entry.align, entry.uniform, entry.mask, params);
    pooled_vecs[i] = pooled_rep(forward[i].output, entry.mask, false).values;
  });

  const std::size_t width = params.config().block_dim();
  std::vector<std::vector<double>> grad_pooled(ids.size(), std::vector<double>(width, 0.0));
  std::vector<bool> touched(ids.size(), false);
  double total_loss = 0.0;
  std::vector<double> sim_negs;
  for (const auto& q : queries) {
    const auto& qv = pooled_vecs[q.query];
    sim_negs.resize(q.negatives.size());
    for (std::size_t i = 0; i < q.negatives.size(); ++i) {
      sim_negs[i] = similarity(qv, pooled_vecs[q.negatives[i]], config.similarity);
    }
    for (std::size_t p : q.positives) {
      const double sim_pos = similarity(qv, pooled_vecs[p], config.similarity);
      const ContrastiveLoss cl = contrastive_loss(sim_pos, sim_negs, config.temperature);
      total_loss += cl.loss;
      if (cl.grad_positive != 0.0) {
        similarity_backward(qv, pooled_vecs[p], config.similarity, cl.grad_positive, grad_pooled[q.query],
                            grad_pooled[p]);
        touched[q.query] = touched[p] = true;
      }
      for (std::size_t i = 0; i < q.negatives.size(); ++i) {
        if (cl.grad_negatives[i] == 0.0) continue;
        const std::size_t n = q.negatives[i];
        similarity_backward(qv, pooled_vecs[n], config.similarity, cl.grad_negatives[i], grad_pooled[q.query],
                            grad_pooled[n]);
        touched[q.query] = touched[n] = true;
      }
    }
  }
  if (!std::isfinite(total_loss)) throw NumericError("batch loss is not finite");

  // Fixed lanes keep the summation order independent of the thread count.
  const std::size_t lanes = std::max<std::size_t>(1, std::min(kGradientLanes, ids.size()));
  const std::size_t per_lane = (ids.size() + lanes - 1) / std::max<std::size_t>(1, lanes);
  std::vector<std::optional<TunerGradients>> lane_grads(lanes);
  parallel_for(lanes, config.threads, [&](std::size_t lane) {
    const std::size_t begin = lane * per_lane;
    const std::size_t end = std::min(ids.size(), begin + per_lane);
    for (std::size_t i = begin; i < end; ++i) {
      if (!touched[i]) continue;
      if (!lane_grads[lane]) lane_grads[lane].emplace(params);
      const Matrix g = spread_pooled_gradient(forward[i].tape, grad_pooled[i]);
      tuner_backward_into(forward[i].tape, params, g, *lane_grads[lane]);
    }
  });
  std::vector<double> grad(params.size(), 0.0);
  for (const auto& lg : lane_grads) {
    if (!lg) continue;
    const auto v = lg->values();
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += v[k];
  }

  double sq = 0.0;
  for (double g : grad) sq += g * g;
  if (!std::isfinite(sq)) throw NumericError("gradient is not finite");
  if (config.grad_clip && std::sqrt(sq) > *config.grad_clip) {
    const double scale = *config.grad_clip / std::sqrt(sq);
    for (double& g : grad) g *= scale;
  }

  optimizer.step += 1;
  const double t = static_cast<double>(optimizer.step);
  const double c1 = 1.0 - std::pow(config.adam.beta1, t);
  const double c2 = 1.0 - std::pow(config.adam.beta2, t);
  auto p = params.values();
  for (std::size_t k = 0; k < grad.size(); ++k) {
    double& m = optimizer.first_moment[k];
    double& v = optimizer.second_moment[k];
    m = config.adam.beta1 * m + (1.0 - config.adam.beta1) * grad[k];
    v = config.adam.beta2 * v + (1.0 - config.adam.beta2) * grad[k] * grad[k];
    const double update = config.learning_rate * (m / c1) / (std::sqrt(v / c2) + config.adam.epsilon);
    p[k] = static_cast<float>(p[k] - update);
    if (!std::isfinite(p[k])) {
      throw NumericError("parameter " + std::to_string(k) + " became non-finite at step " +
                         std::to_string(optimizer.step));
    }
  }
  return total_loss;
}

TrainLoopResult train_loop(std::span<const TrainExample> examples, const StateCache& cache, TunerParams params,
                           const TrainConfig& config, const TrainLoopOptions& options) {
  config.validate();
  for (const auto& ex : examples) ex.validate();
  require_cached(examples, cache);

  OptimizerState optimizer = options.resume ? *options.resume : OptimizerState(params.size());
  if (optimizer.first_moment.size() != params.size()) {
    throw ConfigError("optimizer state does not match the tuner's parameter count");
  }
  const std::size_t n = examples.size();
  if (n == 0 && config.epochs > 0) throw DataError("no training examples");
  const std::uint64_t steps_per_epoch = n == 0 ? 0 : (n + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total_steps = steps_per_epoch * config.epochs;
  if (optimizer.step > total_steps) {
    throw ConfigError("resume step " + std::to_string(optimizer.step) + " exceeds the schedule of " +
                      std::to_string(total_steps) + " steps");
  }

  const bool write_files = !options.checkpoint_dir.empty();
  std::ofstream loss_csv;
  if (write_files) {
    std::filesystem::create_directories(options.checkpoint_dir);
    const auto log_path = options.checkpoint_dir / "loss.csv";
    const bool append = optimizer.step > 0 && std::filesystem::exists(log_path);
    loss_csv.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!loss_csv) throw DataError("cannot open loss log: " + log_path.string());
    if (!append) loss_csv << "step,loss\n";
  }

  TrainLoopResult result{std::move(params), {}, {}, false};
  std::vector<TrainExample> batch;
  std::vector<std::size_t> order;
  std::uint64_t order_epoch = UINT64_MAX;
  char buf[64];
  while (optimizer.step < total_steps) {
    const std::uint64_t epoch = optimizer.step / steps_per_epoch;
    const std::uint64_t pos = optimizer.step % steps_per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(n, config.seed, epoch);
      order_epoch = epoch;
    }
    batch.clear();
    const std::size_t begin = pos * config.batch_size;
    const std::size_t end = std::min(n, begin + config.batch_size);
    for (std::size_t i = begin; i < end; ++i) batch.push_back(examples[order[i]]);

    const double loss = train_step(batch, cache, result.params, optimizer, config);
    result.loss_log.push_back({optimizer.step, loss});
    if (write_files) {
      std::snprintf(buf, sizeof buf, "%.17g", loss);
      loss_csv << optimizer.step << ',' << buf << '\n';
    }
    if (options.verbose && (optimizer.step % steps_per_epoch == 0 || optimizer.step % 50 == 0)) {
      std::fprintf(stderr, "step %llu/%llu loss %.6f\n", static_cast<unsigned long long>(optimizer.step),
                   static_cast<unsigned long long>(total_steps), loss);
    }
    if (write_files && optimizer.step % steps_per_epoch == 0) {
      save_pair(result.params, optimizer, options.layers, options.checkpoint_dir,
                "epoch_" + std::to_string(optimizer.step / steps_per_epoch));
    }
    if (options.stop_after_step && optimizer.step >= *options.stop_after_step && optimizer.step < total_steps) {
      if (write_files) {
        loss_csv.flush();
        save_pair(result.params, optimizer, options.layers, options.checkpoint_dir, "last");
      }
      result.optimizer = std::move(optimizer);
      return result;
    }
  }
  if (write_files) {
    loss_csv.flush();
    save_pair(result.params, optimizer, options.layers, options.checkpoint_dir, "final");
  }
  result.optimizer = std::move(optimizer);
  result.completed = true;
  return result;
}

VectorSet encode_ids(std::span<const std::string> ids, const StateCache& cache, const TunerParams& params,
                     std::size_t threads) {
  VectorSet out;
  out.ids.assign(ids.begin(), ids.end());
  const auto width = static_cast<Eigen::Index>(params.config().block_dim());
  out.rows.resize(static_cast<Eigen::Index>(ids.size()), width);
  for (const auto& id : ids) cache.at(id);
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const auto& entry = cache.at(ids[i]);
    const RepVector rep = encode(entry.align, entry.uniform, entry.mask, params);
    for (Eigen::Index c = 0; c < width; ++c) {
      out.rows(static_cast<Eigen::Index>(i), c) = static_cast<float>(rep.values[static_cast<std::size_t>(c)]);
    }
  });
  return out;
}

std::size_t default_thread_count() {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("LMORT_THREADS");
  if (env == nullptr || *env == '\0') return hw;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (end == env || *end != '\0' || v == 0) throw ConfigError(std::string("invalid LMORT_THREADS value '") + env + "'");
  return std::min<std::size_t>(v, hw);
}

}  // namespace lmort
