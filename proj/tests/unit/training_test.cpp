// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "lmort/error.hpp"
#include "lmort/training.hpp"
#include "support.hpp"

namespace lmort {
namespace {

using test::TempDir;

TEST(Contrastive, SymmetricCaseIsLogTwo) {
  const std::vector<double> negs{0.3};
  const ContrastiveLoss l = contrastive_loss(0.3, negs);
  EXPECT_NEAR(l.loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(l.grad_positive, -0.5, 1e-15);
  EXPECT_NEAR(l.grad_negatives[0], 0.5, 1e-15);
}

TEST(Contrastive, NoNegativesIsExactlyZero) {
  const ContrastiveLoss l = contrastive_loss(0.9, {});
  EXPECT_EQ(l.loss, 0.0);
  EXPECT_EQ(l.grad_positive, 0.0);
}

TEST(Contrastive, GradientMatchesCentralDifferences) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const double t = rng.uniform(0.05, 2.0);
    const double pos = rng.uniform(-1, 1);
    std::vector<double> negs(1 + rng.index(6));
    for (auto& n : negs) n = rng.uniform(-1, 1);
    const ContrastiveLoss l = contrastive_loss(pos, negs, t);
    const double h = 1e-6;
    const double gp = (contrastive_loss(pos + h, negs, t).loss - contrastive_loss(pos - h, negs, t).loss) / (2 * h);
    EXPECT_NEAR(l.grad_positive, gp, 1e-7);
    for (std::size_t i = 0; i < negs.size(); ++i) {
      auto up = negs;
      auto dn = negs;
      up[i] += h;
      dn[i] -= h;
      const double g = (contrastive_loss(pos, up, t).loss - contrastive_loss(pos, dn, t).loss) / (2 * h);
      EXPECT_NEAR(l.grad_negatives[i], g, 1e-7);
    }
  }
}

TEST(Contrastive, LargeLogitsStayFinite) {
  const std::vector<double> negs{1.0, -1.0};
  const ContrastiveLoss l = contrastive_loss(-1.0, negs, 1e-3);
  EXPECT_NEAR(l.loss, 2000.0, 1e-9);
  const std::vector<double> bad{std::numeric_limits<double>::quiet_NaN()};
  EXPECT_THROW(contrastive_loss(0.0, bad), NumericError);
}

struct Fixture {
  std::vector<LayeredStates> records;
  std::vector<TrainExample> examples;
  TunerConfig tuner;
  TrainConfig train;
};

Fixture fixture() {
  Fixture f;
  Rng rng(7);
  for (int i = 0; i < 6; ++i) {
    f.records.push_back(test::random_record(rng, "q" + std::to_string(i), 3 + rng.index(3), 16, {0, 1}));
  }
  for (int i = 0; i < 12; ++i) {
    f.records.push_back(test::random_record(rng, "p" + std::to_string(i), 3 + rng.index(4), 16, {0, 1}));
  }
  for (int i = 0; i < 6; ++i) {
    f.examples.push_back({"q" + std::to_string(i), {"p" + std::to_string(i)}, {"p" + std::to_string(i + 6)}});
  }
  f.tuner.n_blocks = 1;
  f.tuner.d_model = 16;
  f.tuner.n_heads = 2;
  f.train.batch_size = 2;
  f.train.epochs = 2;
  f.train.learning_rate = 1e-3;
  f.train.negatives_per_query = 1;
  return f;
}

bool same_values(const TunerParams& a, const TunerParams& b) {
  return a.size() == b.size() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

TEST(StateCacheTest, LookupAndMissingIds) {
  const Fixture f = fixture();
  const StateCache cache(f.records, LayerBinding{1, 0});
  EXPECT_EQ(cache.size(), 18u);
  EXPECT_EQ(cache.d_llm(), 16u);
  EXPECT_TRUE(cache.contains("p3"));
  EXPECT_EQ(cache.at("q2").align(1, 4), static_cast<double>(f.records[2].layer(1)(1, 4)));
  EXPECT_THROW(cache.at("zz"), DataError);
  const std::vector<TrainExample> bad{{"q1", {"p1"}, {"missing"}}};
  EXPECT_THROW(require_cached(bad, cache), DataError);
  EXPECT_THROW(StateCache(f.records, LayerBinding{2, 0}), DataError);
}

TEST(TrainStep, ZeroGradientLeavesParamsUnchanged) {
  Fixture f = fixture();
  f.train.negatives_per_query = 0;
  const StateCache cache(f.records, {});
  TunerParams p = init_params(f.tuner, 16);
  const TunerParams before = p;
  OptimizerState opt(p.size());
  const double loss = train_step(std::span(f.examples).first(2), cache, p, opt, f.train);
  EXPECT_EQ(loss, 0.0);
  EXPECT_TRUE(same_values(p, before));
  EXPECT_EQ(opt.step, 1u);
}

TEST(TrainStep, LossMatchesIndependentComputation) {
  Fixture f = fixture();
  f.train.negatives_per_query = 0;
  f.train.use_in_batch_negatives = true;
  f.train.temperature = 0.5;
  const StateCache cache(f.records, {});
  TunerParams p = init_params(f.tuner, 16);
  std::map<std::string, std::vector<double>> v;
  for (const char* id : {"q0", "q1", "p0", "p1"}) {
    const auto& e = cache.at(id);
    v[id] = encode(e.align, e.uniform, e.mask, p).values;
  }
  const auto term = [&](const char* q, const char* pos, const char* neg) {
    const double sp = cosine(v[q], v[pos]) / 0.5;
    const double sn = cosine(v[q], v[neg]) / 0.5;
    return -sp + std::log(std::exp(sp) + std::exp(sn));
  };
  const double want = term("q0", "p0", "p1") + term("q1", "p1", "p0");
  OptimizerState opt(p.size());
  const double got = train_step(std::span(f.examples).first(2), cache, p, opt, f.train);
  EXPECT_NEAR(got, want, 1e-10);
}

TEST(TrainStep, UpdatedParamsAreF32Representable) {
  const Fixture f = fixture();
  const StateCache cache(f.records, {});
  TunerParams p = init_params(f.tuner, 16);
  OptimizerState opt(p.size());
  train_step(f.examples, cache, p, opt, f.train);
  for (double x : p.values()) ASSERT_EQ(x, static_cast<double>(static_cast<float>(x)));
}

TEST(TrainLoop, ZeroEpochsReturnsInitialParams) {
  Fixture f = fixture();
  f.train.epochs = 0;
  const StateCache cache(f.records, {});
  const TunerParams init = init_params(f.tuner, 16);
  const TrainLoopResult r = train_loop(f.examples, cache, init, f.train);
  EXPECT_TRUE(same_values(r.params, init));
  EXPECT_TRUE(r.loss_log.empty());
  EXPECT_TRUE(r.completed);
}

TEST(TrainLoop, SeedReproducesLossLogAndThreadsDoNotMatter) {
  Fixture f = fixture();
  const StateCache cache(f.records, {});
  const TrainLoopResult a = train_loop(f.examples, cache, init_params(f.tuner, 16), f.train);
  const TrainLoopResult b = train_loop(f.examples, cache, init_params(f.tuner, 16), f.train);
  f.train.threads = 4;
  const TrainLoopResult c = train_loop(f.examples, cache, init_params(f.tuner, 16), f.train);
  ASSERT_EQ(a.loss_log.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.loss_log[i].step, i + 1);
    EXPECT_EQ(a.loss_log[i].loss, b.loss_log[i].loss);
    EXPECT_EQ(a.loss_log[i].loss, c.loss_log[i].loss);
  }
  EXPECT_TRUE(same_values(a.params, b.params));
  EXPECT_TRUE(same_values(a.params, c.params));
  EXPECT_FALSE(same_values(a.params, init_params(f.tuner, 16)));
}

TEST(TrainLoop, ResumeMatchesUninterruptedRun) {
  TempDir dir;
  const Fixture f = fixture();
  const StateCache cache(f.records, {});
  const TrainLoopResult full = train_loop(f.examples, cache, init_params(f.tuner, 16), f.train);

  TrainLoopOptions first;
  first.checkpoint_dir = dir.path();
  first.stop_after_step = 4;
  const TrainLoopResult part = train_loop(f.examples, cache, init_params(f.tuner, 16), f.train, first);
  EXPECT_FALSE(part.completed);
  EXPECT_EQ(part.optimizer.step, 4u);
  ASSERT_TRUE(std::filesystem::exists(dir / "last.lmt"));
  ASSERT_TRUE(std::filesystem::exists(dir / "epoch_1.lmt"));

  TrainLoopOptions second;
  second.checkpoint_dir = dir.path();
  second.resume = load_optimizer_state(dir / "last.opt");
  const TrainLoopResult rest =
      train_loop(f.examples, cache, load_checkpoint(dir / "last.lmt").params, f.train, second);
  EXPECT_TRUE(rest.completed);
  ASSERT_EQ(rest.loss_log.size(), 2u);
  EXPECT_EQ(rest.loss_log[0].step, 5u);
  EXPECT_EQ(rest.loss_log[1].loss, full.loss_log[5].loss);
  EXPECT_TRUE(same_values(rest.params, full.params));
  EXPECT_EQ(rest.optimizer, full.optimizer);

  std::ifstream csv(dir / "loss.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 7u);
  EXPECT_TRUE(same_values(load_checkpoint(dir / "final.lmt").params, full.params));
}

TEST(TrainLoop, CachedStatesAreNotModified) {
  const Fixture f = fixture();
  const std::vector<LayeredStates> copy = f.records;
  const StateCache cache(f.records, LayerBinding{1, 0});
  const Matrix before = cache.at("p4").align;
  train_loop(f.examples, cache, init_params(f.tuner, 16), f.train);
  EXPECT_EQ(f.records, copy);
  EXPECT_EQ(cache.at("p4").align, before);
}

TEST(TrainLoop, ReducedTunerLearnsOnTheToyTask) {
  Fixture f = fixture();
  f.tuner.d_model = 8;
  f.tuner.reduction = ReductionConfig{24, 8};
  f.train.epochs = 30;
  f.train.learning_rate = 3e-3;
  const StateCache cache(f.records, {});
  const TrainLoopResult r = train_loop(f.examples, cache, init_params(f.tuner, 16), f.train);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    first += r.loss_log[i].loss;
    last += r.loss_log[r.loss_log.size() - 1 - i].loss;
  }
  EXPECT_LT(last, first);
}

TEST(EncodeIds, RowsFollowIdOrder) {
  const Fixture f = fixture();
  const StateCache cache(f.records, {});
  const TunerParams p = init_params(f.tuner, 16);
  const std::vector<std::string> ids{"p3", "q1"};
  const VectorSet v = encode_ids(ids, cache, p, 2);
  EXPECT_EQ(v.ids, ids);
  const auto& e = cache.at("q1");
  const RepVector rep = encode(e.align, e.uniform, e.mask, p);
  for (std::size_t c = 0; c < rep.dim(); ++c) {
    EXPECT_EQ(v.rows(1, static_cast<Eigen::Index>(c)), static_cast<float>(rep.values[c]));
  }
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Threads, EnvironmentOverride) {
  ::setenv("LMORT_THREADS", "1", 1);
  EXPECT_EQ(default_thread_count(), 1u);
  ::setenv("LMORT_THREADS", "zero", 1);
  EXPECT_THROW(default_thread_count(), ConfigError);
  ::unsetenv("LMORT_THREADS");
  EXPECT_GE(default_thread_count(), 1u);
}

}  // namespace
}  // namespace lmort
