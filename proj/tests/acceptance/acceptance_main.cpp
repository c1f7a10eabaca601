// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "commands.hpp"
#include "lmort/checkpoint.hpp"
#include "lmort/error.hpp"
#include "lmort/synthetic_llm.hpp"
#include "lmort/training.hpp"
#include "support.hpp"

namespace lmort {
namespace {

static_assert(!std::is_copy_assignable_v<Emulator>);
static_assert(!std::is_move_assignable_v<Emulator>);
static_assert(std::is_const_v<std::remove_reference_t<decltype(std::declval<const Emulator&>().config())>>);

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_oracle() {
  TunerConfig plain;
  plain.n_blocks = 2;
  plain.d_model = 32;
  plain.n_heads = 2;
  TunerConfig reduced = plain;
  reduced.reduction = ReductionConfig{64, 16};
  Outcome o{true, {}};
  for (const auto& [name, cfg] : {std::pair{"plain", plain}, std::pair{"reduced", reduced}}) {
    const test::GradientReport coarse = test::finite_difference_check(cfg, 32, 5, 101, 1e-3);
    const test::GradientReport fine = test::finite_difference_check(cfg, 32, 5, 101, 1e-4);
    const bool ok = coarse.tensor_failures == 0 && coarse.checked == count_params(cfg, 32) &&
                    fine.element_failures == 0;
    o.pass = o.pass && ok;
    o.detail += fmt("%s: %zu params, h=1e-3 worst tensor rel %.2e (%s), elements over 1e-4 at h=1e-3: %zu "
                    "(worst %.2e), at h=1e-4: %zu; ",
                    name, coarse.checked, coarse.worst_tensor_rel, coarse.worst_tensor.c_str(),
                    coarse.element_failures, coarse.worst_element_rel, fine.element_failures);
  }
  return o;
}

// ---- 2 ---------------------------------------------------------------------

Outcome loss_unit_values() {
  using test::unit_rep;
  const std::vector<std::pair<RepVector, RepVector>> same{{unit_rep({0.6, 0.8}), unit_rep({0.6, 0.8})}};
  const std::vector<std::pair<RepVector, RepVector>> basis{{unit_rep({1, 0}), unit_rep({0, 1})}};
  const std::vector<RepVector> coincident{unit_rep({1, 0}), unit_rep({1, 0}), unit_rep({1, 0})};
  const std::vector<RepVector> antipodal{unit_rep({0, 1}), unit_rep({0, -1})};
  const std::vector<double> neg{0.25};
  const double a0 = alignment_loss(same);
  const double a2 = alignment_loss(basis);
  const double u0 = uniformity_loss(coincident);
  const double u1 = uniformity_loss(antipodal, PairBudget::all());
  const double c = contrastive_loss(0.25, neg).loss;
  const bool pass = a0 == 0.0 && std::abs(a2 - 2.0) < 1e-12 && u0 == 0.0 && std::abs(u1 + 0.69281) <= 1e-5 &&
                    std::abs(c - std::log(2.0)) <= 1e-12;
  return {pass, fmt("align %.3g / %.15g, uniform %.3g / %.8f, contrastive %.15f", a0, a2, u0, u1, c)};
}

// ---- 3 ---------------------------------------------------------------------

Outcome rotation_invariance() {
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.index(31));
    const Matrix q = test::random_orthogonal(rng, d);
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(rng.index(30));
    const Matrix raw_x = test::random_matrix(rng, n, d);
    const Matrix raw_y = test::random_matrix(rng, n, d);
    const auto losses = [&](const Matrix& x, const Matrix& y) {
      std::vector<std::pair<RepVector, RepVector>> pairs;
      std::vector<RepVector> all;
      const std::vector<std::uint8_t> one{1};
      for (Eigen::Index i = 0; i < n; ++i) {
        const RepVector a = pooled_rep(Matrix(x.row(i)), one, true);
        const RepVector b = pooled_rep(Matrix(y.row(i)), one, true);
        pairs.emplace_back(a, b);
        all.push_back(a);
        all.push_back(b);
      }
      return std::pair{alignment_loss(pairs), uniformity_loss(all)};
    };
    const auto [a, u] = losses(raw_x, raw_y);
    const auto [ra, ru] = losses(raw_x * q.transpose(), raw_y * q.transpose());
    worst = std::max({worst, std::abs(a - ra), std::abs(u - ru)});
  }
  return {worst < 1e-6, fmt("100 trials, largest change %.3e", worst)};
}

// ---- 4 ---------------------------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(4);
  std::vector<std::string> ids;
  std::vector<std::vector<float>> rows;
  std::vector<std::pair<std::string, std::vector<float>>> entries;
  for (int i = 0; i < 1000; ++i) {
    std::vector<float> v(64);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    ids.push_back("p" + std::to_string(i));
    rows.push_back(v);
    entries.emplace_back(ids.back(), v);
  }
  std::size_t mismatches = 0;
  double worst_score = 0.0;
  for (const SimilarityKind kind : {SimilarityKind::Cosine, SimilarityKind::Dot}) {
    const VectorStore store = build_store(entries, kind);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> q(64);
      for (auto& x : q) x = rng.normal();
      for (const std::size_t k : {1, 10, 100}) {
        const RankedList got = top_k(q, store, k);
        const auto want = test::oracle_ranking(q, ids, rows, kind, k);
        if (got.hits.size() != want.size()) ++mismatches;
        for (std::size_t i = 0; i < std::min(got.hits.size(), want.size()); ++i) {
          if (got.hits[i].first != want[i].first) ++mismatches;
          worst_score = std::max(worst_score, std::abs(got.hits[i].second - want[i].second));
        }
      }
    }
  }

  std::vector<RepVector> reps;
  for (int i = 0; i < 60; ++i) reps.push_back(test::unit_rep(test::random_unit(rng, 16)));
  const double exhaustive = uniformity_loss(reps, PairBudget::all());
  const double budgeted = uniformity_loss(reps, PairBudget::sampled(60 * 60), 9);
  const double budget_gap = std::abs(exhaustive - budgeted);

  std::vector<LayeredStates> records;
  for (int i = 0; i < 20; ++i) {
    records.push_back(test::random_record(rng, "s" + std::to_string(i), 2 + rng.index(6), 12, {0, 2, 5}));
  }
  std::vector<IdPair> pairs;
  for (int i = 0; i < 10; ++i) pairs.emplace_back("s" + std::to_string(i), "s" + std::to_string(19 - i));
  const std::vector<std::uint32_t> layers{0, 2, 5};
  const LayerDiagnostics diag = sweep_layers(records, pairs, layers);
  bool sweep_equal = diag.rows.size() == 3;
  for (std::size_t l = 0; sweep_equal && l < 3; ++l) {
    std::map<std::string, RepVector> pooled;
    std::vector<RepVector> all;
    for (const auto& r : records) {
      pooled[r.sequence_id] = pooled_rep(r.layer(layers[l]), r.attention_mask, true);
      all.push_back(pooled[r.sequence_id]);
    }
    std::vector<std::pair<RepVector, RepVector>> ps;
    for (const auto& [a, b] : pairs) ps.emplace_back(pooled.at(a), pooled.at(b));
    sweep_equal = diag.rows[l].align_loss == alignment_loss(ps) && diag.rows[l].uniform_loss == uniformity_loss(all);
  }
  return {mismatches == 0 && worst_score < 1e-12 && budget_gap <= 1e-12 && sweep_equal,
          fmt("top_k id mismatches %zu (score gap %.1e), budget n^2 gap %.1e, sweep %s", mismatches, worst_score,
              budget_gap, sweep_equal ? "equal" : "differs")};
}

// ---- 5, 6, 7 ---------------------------------------------------------------

struct TaskData {
  test::TempDir dir;
  cli::Experiment experiment;
  LayerDiagnostics diag;
  std::vector<std::filesystem::path> files;
};

TrainConfig desk_preset(std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = 3e-4;
  t.epochs = 10;
  t.seed = seed;
  t.threads = default_thread_count();
  return t;
}

void build_task(TaskData& d) {
  const Emulator emulator = build_emulator(EmulatorConfig{});
  const SyntheticTask task = make_synthetic_task(SyntheticTaskSpec{});
  std::vector<std::uint32_t> layers(emulator.config().emission_points());
  std::iota(layers.begin(), layers.end(), 0u);
  std::vector<LayeredStates> records;
  for (const auto& s : task.queries) records.push_back(emulator.encode_layers(s.id, s.tokens, layers));
  for (const auto& s : task.corpus) records.push_back(emulator.encode_layers(s.id, s.tokens, layers));
  std::vector<IdPair> pairs;
  for (const auto& ex : task.train_examples) {
    for (const auto& p : ex.positive_ids) pairs.push_back({ex.query_id, p});
  }
  d.files = {d.dir / "dump.hsd", d.dir / "train.jsonl", d.dir / "pairs.tsv", d.dir / "qrels.tsv"};
  write_dump(records, d.files[0]);
  write_train_jsonl(task.train_examples, d.files[1]);
  write_pairs_tsv(pairs, d.files[2]);
  write_qrels_tsv(task.qrels, d.files[3]);

  d.experiment.records = read_dump(d.files[0]);
  d.experiment.train_examples = read_train_jsonl(d.files[1]);
  d.experiment.qrels = read_qrels_tsv(d.files[3]);
  for (const auto& s : task.queries) d.experiment.query_ids.push_back(s.id);
  for (const auto& s : task.corpus) d.experiment.passage_ids.push_back(s.id);
  d.diag = sweep_layers(d.experiment.records, read_pairs_tsv(d.files[2]), layers);
}

TaskData& task_data() {
  static TaskData data;
  static const bool built = (build_task(data), true);
  (void)built;
  return data;
}

std::vector<std::string> hash_files() {
  std::vector<std::string> out;
  for (const auto& f : task_data().files) out.push_back(test::sha256_file(f));
  return out;
}

std::vector<std::string> hashes_before;

Outcome end_to_end_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  TaskData& d = task_data();
  hashes_before = hash_files();
  const cli::AblationSetup setup = cli::ablation_setup(cli::Ablation::Full, d.diag);
  const cli::ExperimentResult r =
      cli::run_experiment(d.experiment, setup.layers, TunerConfig{}, desk_preset(0), cli::SearchOptions{}, true);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double gain = r.trained_ndcg - r.untrained_ndcg;
  return {gain >= 0.30 && r.trained_ndcg >= 0.85 && seconds < 600.0,
          fmt("layers a=%u u=%u, untrained %.4f, trained %.4f, gain %+.4f (need +0.30), %.1fs",
              setup.layers.align_layer, setup.layers.uniform_layer, r.untrained_ndcg, r.trained_ndcg, gain,
              seconds)};
}

Outcome ablation_direction() {
  TaskData& d = task_data();
  int beats_worst = 0;
  int beats_self = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto score = [&](cli::Ablation a) {
      const cli::AblationSetup s = cli::ablation_setup(a, d.diag);
      TunerConfig cfg;
      cfg.seed = seed;
      cfg.cross_attention = s.cross_attention;
      return cli::run_experiment(d.experiment, s.layers, cfg, desk_preset(seed), cli::SearchOptions{}).trained_ndcg;
    };
    const double full = score(cli::Ablation::Full);
    const double worst = score(cli::Ablation::WorstAU);
    const double self = score(cli::Ablation::SelfOnlyA);
    beats_worst += full > worst;
    beats_self += full > self;
    detail += fmt("seed %llu full %.4f worst_au %.4f self_only %.4f; ", static_cast<unsigned long long>(seed), full,
                  worst, self);
  }
  detail += fmt("full > worst_au in %d/5, full > self_only in %d/5", beats_worst, beats_self);
  return {beats_worst >= 4 && beats_self >= 4, detail};
}

Outcome frozen_contract() {
  if (hashes_before.empty()) hashes_before = hash_files();
  TaskData& d = task_data();
  const std::vector<std::string> after = hash_files();
  const bool records_intact = read_dump(d.files[0]) == d.experiment.records;
  const Emulator emulator = build_emulator(EmulatorConfig{});
  const std::vector<double> before = emulator.flat_weights();
  const std::vector<std::uint32_t> tokens{1, 2, 3};
  const std::vector<std::uint32_t> all{0, 8};
  (void)emulator.encode_layers("probe", tokens, all);
  const bool weights_intact = emulator.flat_weights() == before;
  return {after == hashes_before && records_intact && weights_intact,
          fmt("%zu files hashed, sha256 %s, dump %s, emulator weights %s, not assignable (static)", after.size(),
              after == hashes_before ? "unchanged" : "CHANGED", records_intact ? "intact" : "CHANGED",
              weights_intact ? "unchanged" : "CHANGED")};
}

// ---- 8 ---------------------------------------------------------------------

Outcome metric_fixture() {
  double worst = 0.0;
  double rank3 = -1.0;
  for (const auto& c : test::ndcg_fixture()) {
    RankedList r{c.query_id, {}};
    double s = 1.0;
    for (const auto& id : c.ranking) r.hits.emplace_back(id, s -= 0.01);
    const double got = ndcg_at_10(r, c.judgments);
    if (c.query_id == "q2") rank3 = got;
    worst = std::max(worst, std::abs(got - c.expected));
  }
  return {worst <= 1e-9 && std::abs(rank3 - 0.5) <= 1e-9,
          fmt("5 queries, largest error %.1e, rank-3 case %.12f", worst, rank3)};
}

// ---- 9 ---------------------------------------------------------------------

Outcome format_round_trips() {
  test::TempDir dir;
  Rng rng(9);
  int hsd = 0, vec = 0, lmt = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t d = 1 + rng.index(24);
    std::vector<std::uint32_t> layers;
    for (std::uint32_t l = 0; l < 10; ++l) {
      if (rng.index(3) == 0) layers.push_back(l);
    }
    if (layers.empty()) layers.push_back(static_cast<std::uint32_t>(rng.index(10)));
    std::vector<LayeredStates> records;
    const std::size_t count = rng.index(6);
    for (std::size_t r = 0; r < count; ++r) {
      records.push_back(test::random_record(rng, "id" + std::to_string(i) + "-" + std::to_string(r),
                                            1 + rng.index(12), d, layers));
    }
    write_dump(records, dir / "x.hsd");
    hsd += read_dump(dir / "x.hsd") == records;

    VectorSet v;
    const std::size_t n = rng.index(20);
    for (std::size_t r = 0; r < n; ++r) v.ids.push_back("v" + std::to_string(rng.index(1u << 30)) + "_" + std::to_string(r));
    v.rows = test::random_matrix_f(rng, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(1 + rng.index(40)));
    write_vectors(v, dir / "x.vec");
    vec += read_vectors(dir / "x.vec") == v;

    TunerConfig c;
    c.n_blocks = 1 + static_cast<std::uint32_t>(rng.index(3));
    c.n_heads = 1 + static_cast<std::uint32_t>(rng.index(3));
    const std::uint32_t width = c.n_heads * (1 + static_cast<std::uint32_t>(rng.index(4)));
    c.cross_attention = rng.index(2) == 0;
    c.connection_mode = rng.index(2) == 0 ? ConnectionMode::AToU : ConnectionMode::UToA;
    c.reread_self_input = rng.index(2) == 0;
    c.seed = rng.next();
    std::size_t d_llm = width;
    if (rng.index(2) == 0) {
      c.reduction = ReductionConfig{1 + static_cast<std::uint32_t>(rng.index(20)), width};
      d_llm = 1 + rng.index(30);
    } else {
      c.d_model = width;
    }
    const TunerParams p = init_params(c, d_llm);
    const LayerBinding b{static_cast<std::uint32_t>(rng.index(40)), static_cast<std::uint32_t>(rng.index(40))};
    save_checkpoint(p, b, dir / "x.lmt");
    const Checkpoint back = load_checkpoint(dir / "x.lmt");
    lmt += back.layers == b && back.params.config() == c && back.params.d_llm() == d_llm &&
           std::equal(p.values().begin(), p.values().end(), back.params.values().begin(), back.params.values().end());
  }
  return {hsd == 200 && vec == 200 && lmt == 200, fmt("HSD %d/200, VEC1 %d/200, LMT1 %d/200", hsd, vec, lmt)};
}

// ---- 10 --------------------------------------------------------------------

Outcome parameter_accounting() {
  Rng rng(10);
  int matched = 0;
  for (int i = 0; i < 50; ++i) {
    TunerConfig c;
    c.n_blocks = 1 + static_cast<std::uint32_t>(rng.index(4));
    c.n_heads = 1 + static_cast<std::uint32_t>(rng.index(4));
    const std::uint32_t width = c.n_heads * (1 + static_cast<std::uint32_t>(rng.index(8)));
    c.ffn_multiplier = 1 + static_cast<std::uint32_t>(rng.index(4));
    c.cross_attention = rng.index(2) == 0;
    std::size_t d_llm = width;
    if (rng.index(2) == 0) {
      c.reduction = ReductionConfig{1 + static_cast<std::uint32_t>(rng.index(64)), width};
      d_llm = 1 + rng.index(64);
    } else {
      c.d_model = width;
    }
    matched += count_params(c, d_llm) == test::shape_walk_count(TunerParams(c, d_llm));
  }
  TunerConfig standard;
  standard.n_blocks = 3;
  standard.d_model = 4096;
  standard.n_heads = 16;
  TunerConfig reduced = standard;
  reduced.reduction = ReductionConfig{8192, 1024};
  const double backbone = 6.05e9;
  const std::size_t s = count_params(standard, 4096);
  const std::size_t r = count_params(reduced, 4096);
  return {matched == 50,
          fmt("%d/50 configs match; 6B setting: standard %zu (%.1f%% of %.2fB), reduced %zu (%.1f%%); "
              "reported figures 13%% / 2%%",
              matched, s, 100.0 * static_cast<double>(s) / backbone, backbone / 1e9, r,
              100.0 * static_cast<double>(r) / backbone)};
}

}  // namespace
}  // namespace lmort

int main() {
  using namespace lmort;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"loss unit values", loss_unit_values},
      {"rotation invariance", rotation_invariance},
      {"oracle equivalence", oracle_equivalence},
      {"end-to-end learning", end_to_end_learning},
      {"ablation direction", ablation_direction},
      {"frozen backbone", frozen_contract},
      {"metric fixture", metric_fixture},
      {"format round-trips", format_round_trips},
      {"parameter accounting", parameter_accounting},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s criterion %zu %s [%.1fs]: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, s,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
