// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "lmort/checkpoint.hpp"
#include "lmort/error.hpp"
#include "lmort/synthetic_llm.hpp"

namespace lmort::cli {
namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::vector<TextRecord> to_text_records(std::span<const TokenSequence> seqs) {
  std::vector<TextRecord> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back({s.id, tokens_to_text(s.tokens)});
  return out;
}

LayerBinding resolve_layers(const RunManifest& m) {
  if (m.layers) return *m.layers;
  if (m.has_path("heatmap")) {
    LayerDiagnostics diag = import_heatmap_csv(m.path("heatmap"));
    select_layers(diag);
    return {diag.selected_a, diag.selected_u};
  }
  throw ConfigError("no tuner input layers: give [layers] align/uniform or [paths] heatmap");
}

std::vector<std::string> ids_of(std::span<const TextRecord> records) {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.id);
  return ids;
}

LayerDiagnostics sweep(const RunManifest& m, std::span<const LayeredStates> records,
                       std::span<const IdPair> pairs) {
  std::vector<std::uint32_t> layers = m.analysis.layers;
  if (layers.empty() && !records.empty()) layers = records.front().layer_indices;
  SweepOptions opts;
  if (m.analysis.uniform_pairs) opts.uniform_budget = PairBudget::sampled(*m.analysis.uniform_pairs);
  opts.seed = m.analysis.seed;
  return sweep_layers(records, pairs, layers, opts);
}

}  // namespace

void cmd_emulate(const RunManifest& m, std::ostream& out) {
  const auto& dir = m.path("out_dir");
  if (!std::filesystem::is_directory(dir)) throw DataError("output directory does not exist: " + dir.string());
  if (m.task.vocab_size > m.emulator.vocab_size) {
    throw ConfigError("[task] vocab_size exceeds [emulator] vocab_size");
  }
  if (m.task.sequence_length > m.emulator.max_seq_len) {
    throw ConfigError("[task] sequence_length exceeds [emulator] max_seq_len");
  }
  std::vector<std::uint32_t> layers = m.emulate_layers;
  if (layers.empty()) {
    layers.resize(m.emulator.emission_points());
    std::iota(layers.begin(), layers.end(), 0u);
  }
  for (std::uint32_t l : layers) {
    if (l >= m.emulator.emission_points()) {
      throw ConfigError("[emulator] layers: " + std::to_string(l) + " is beyond the last emission point");
    }
  }

  const SyntheticTask task = make_synthetic_task(m.task);
  const Emulator emulator = build_emulator(m.emulator);
  std::vector<LayeredStates> records;
  records.reserve(task.queries.size() + task.corpus.size());
  for (const auto& s : task.queries) records.push_back(emulator.encode_layers(s.id, s.tokens, layers));
  for (const auto& s : task.corpus) records.push_back(emulator.encode_layers(s.id, s.tokens, layers));

  std::vector<IdPair> pairs;
  for (const auto& ex : task.train_examples) {
    for (const auto& p : ex.positive_ids) pairs.push_back({ex.query_id, p});
  }

  write_dump(records, dir / kDumpFile);
  write_text_jsonl(to_text_records(task.queries), dir / kQueriesFile);
  write_text_jsonl(to_text_records(task.corpus), dir / kCorpusFile);
  write_qrels_tsv(task.qrels, dir / kQrelsFile);
  write_train_jsonl(task.train_examples, dir / kTrainFile);
  write_pairs_tsv(pairs, dir / kPairsFile);
  out << "wrote " << records.size() << " sequences x " << layers.size() << " layers to " << dir.string() << '\n';
}

LayerDiagnostics cmd_analyze(const RunManifest& m, std::ostream& out) {
  m.require_inputs({"dump", "pairs"});
  m.require_output_dirs({"heatmap"});
  const auto records = read_dump(m.path("dump"));
  const auto pairs = read_pairs_tsv(m.path("pairs"));
  LayerDiagnostics diag = sweep(m, records, pairs);
  export_heatmap_csv(diag, m.path("heatmap"));
  out << "layer  align_loss  uniform_loss\n";
  char buf[96];
  for (const auto& row : diag.rows) {
    std::snprintf(buf, sizeof buf, "%5u  %10.6f  %12.6f\n", row.layer, row.align_loss, row.uniform_loss);
    out << buf;
  }
  out << "selected align layer: " << diag.selected_a << '\n';
  out << "selected uniform layer: " << diag.selected_u << '\n';
  return diag;
}

TrainLoopResult cmd_train(const RunManifest& m, std::ostream& out) {
  m.require_inputs({"dump", "train"});
  m.path("checkpoint_dir");
  const LayerBinding layers = resolve_layers(m);
  std::optional<Checkpoint> resumed;
  std::optional<OptimizerState> resume_state;
  if (m.has_path("resume_from")) {
    const auto stem = m.path("resume_from");
    auto lmt = stem;
    auto opt = stem;
    lmt += ".lmt";
    opt += ".opt";
    resumed = load_checkpoint(lmt);
    resume_state = load_optimizer_state(opt);
    if (!(resumed->params.config() == m.tuner) || !(resumed->layers == layers)) {
      throw ConfigError("checkpoint " + lmt.string() + " was trained with a different tuner config or layers");
    }
  }

  const auto header = read_dump_header(m.path("dump"));
  m.tuner.validate(header.d_model);
  const auto records = read_dump(m.path("dump"));
  const auto examples = read_train_jsonl(m.path("train"));
  const StateCache cache(records, layers);
  require_cached(examples, cache);

  TunerParams params = resumed ? std::move(resumed->params) : init_params(m.tuner, header.d_model);
  TrainLoopOptions opts;
  opts.checkpoint_dir = m.path("checkpoint_dir");
  opts.layers = layers;
  opts.resume = std::move(resume_state);
  opts.verbose = true;
  TrainLoopResult result = train_loop(examples, cache, std::move(params), m.train, opts);
  out << "layers align=" << layers.align_layer << " uniform=" << layers.uniform_layer
      << " connection=" << to_string(m.tuner.connection_mode) << '\n';
  out << "trained " << result.optimizer.step << " steps";
  if (!result.loss_log.empty()) out << ", final batch loss " << fixed4(result.loss_log.back().loss);
  out << "\ncheckpoint " << (opts.checkpoint_dir / "final.lmt").string() << '\n';
  return result;
}

VectorSet cmd_encode(const RunManifest& m, std::ostream& out) {
  m.require_inputs({"checkpoint", "dump"});
  if (m.has_path("ids")) m.require_inputs({"ids"});
  m.require_output_dirs({"vectors"});
  const Checkpoint ckpt = load_checkpoint(m.path("checkpoint"));
  const auto header = read_dump_header(m.path("dump"));
  if (header.d_model != ckpt.params.d_llm()) {
    throw DataError("dump width " + std::to_string(header.d_model) + " does not match checkpoint width " +
                    std::to_string(ckpt.params.d_llm()));
  }
  const auto records = read_dump(m.path("dump"));
  const StateCache cache(records, ckpt.layers);
  std::vector<std::string> ids;
  if (m.has_path("ids")) {
    ids = ids_of(read_text_jsonl(m.path("ids")));
  } else {
    for (const auto& r : records) ids.push_back(r.sequence_id);
  }
  VectorSet vectors = encode_ids(ids, cache, ckpt.params, m.train.threads);
  write_vectors(vectors, m.path("vectors"));
  out << "encoded " << vectors.size() << " sequences (d=" << vectors.dim() << ") to " << m.path("vectors").string()
      << '\n';
  return vectors;
}

EvalResult cmd_search_eval(const RunManifest& m, std::ostream& out, std::ostream& err) {
  m.require_inputs({"query_vectors", "passage_vectors", "qrels"});
  m.require_output_dirs({"run"});
  if (m.has_path("metrics")) m.require_output_dirs({"metrics"});
  const VectorSet queries = read_vectors(m.path("query_vectors"));
  const VectorSet passages = read_vectors(m.path("passage_vectors"));
  if (queries.size() > 0 && passages.size() > 0 && queries.dim() != passages.dim()) {
    throw DataError("query vectors have dimension " + std::to_string(queries.dim()) + ", passages " +
                    std::to_string(passages.dim()));
  }
  std::vector<std::string> warnings;
  const Qrels qrels = read_qrels_tsv(m.path("qrels"), &warnings);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  const VectorStore store = build_store(passages, m.search.similarity);
  EvalResult result = evaluate_run(queries, store, qrels, m.search.k, m.train.threads);
  write_run_tsv(result.runs, m.path("run"));
  if (m.has_path("metrics")) write_per_query_csv(result.per_query, m.path("metrics"));
  if (result.skipped_queries > 0) {
    err << "warning: " << result.skipped_queries << " queries have no qrels entry and were not evaluated\n";
  }
  out << "evaluated " << result.per_query.size() << " queries\n";
  out << "NDCG@10 " << fixed4(result.mean_ndcg) << '\n';
  return result;
}

std::string_view to_string(Ablation ablation) {
  switch (ablation) {
    case Ablation::Full: return "full";
    case Ablation::WorstAU: return "worst_au";
    case Ablation::SelfOnlyA: return "self_only_a";
    case Ablation::SelfOnlyU: return "self_only_u";
    case Ablation::EmbeddingOnly: return "embedding_only";
  }
  return "?";
}

std::vector<Ablation> all_ablations() {
  return {Ablation::Full, Ablation::WorstAU, Ablation::SelfOnlyA, Ablation::SelfOnlyU, Ablation::EmbeddingOnly};
}

Ablation parse_ablation(std::string_view name) {
  for (Ablation a : all_ablations()) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown ablation '" + std::string(name) +
                    "' (expected full, worst_au, self_only_a, self_only_u or embedding_only)");
}

AblationSetup ablation_setup(Ablation ablation, const LayerDiagnostics& diag) {
  switch (ablation) {
    case Ablation::Full: return {{diag.selected_a, diag.selected_u}, true};
    case Ablation::WorstAU: return {{diag.worst_a(), diag.worst_u()}, true};
    case Ablation::SelfOnlyA: return {{diag.selected_a, diag.selected_a}, false};
    case Ablation::SelfOnlyU: return {{diag.selected_u, diag.selected_u}, false};
    case Ablation::EmbeddingOnly: return {{0, 0}, true};
  }
  throw ConfigError("unknown ablation");
}

double score_params(const Experiment& e, const StateCache& cache, const TunerParams& params,
                    const SearchOptions& search, std::size_t threads) {
  const VectorSet q = encode_ids(e.query_ids, cache, params, threads);
  const VectorSet p = encode_ids(e.passage_ids, cache, params, threads);
  const VectorStore store = build_store(p, search.similarity);
  return evaluate_run(q, store, e.qrels, search.k, threads).mean_ndcg;
}

ExperimentResult run_experiment(const Experiment& e, const LayerBinding& binding, const TunerConfig& tuner,
                                const TrainConfig& train, const SearchOptions& search, bool score_untrained) {
  const StateCache cache(e.records, binding);
  TunerParams params = init_params(tuner, cache.d_llm());
  ExperimentResult result{0.0, 0.0, {params, {}, {}, false}};
  if (score_untrained) result.untrained_ndcg = score_params(e, cache, params, search, train.threads);
  TrainLoopOptions opts;
  opts.layers = binding;
  result.training = train_loop(e.train_examples, cache, std::move(params), train, opts);
  result.trained_ndcg = score_params(e, cache, result.training.params, search, train.threads);
  return result;
}

std::vector<AblationRow> cmd_ablate(const RunManifest& m, std::span<const Ablation> ablations, std::ostream& out) {
  m.require_inputs({"dump", "train", "pairs", "queries", "corpus", "qrels"});
  m.require_output_dirs({"ablation_csv"});
  if (ablations.empty()) throw ConfigError("no ablations requested");
  const auto header = read_dump_header(m.path("dump"));
  for (Ablation a : ablations) {
    TunerConfig cfg = m.tuner;
    cfg.cross_attention = ablation_setup(a, LayerDiagnostics{}).cross_attention;
    cfg.validate(header.d_model);
  }

  Experiment e;
  e.records = read_dump(m.path("dump"));
  e.train_examples = read_train_jsonl(m.path("train"));
  e.query_ids = ids_of(read_text_jsonl(m.path("queries")));
  e.passage_ids = ids_of(read_text_jsonl(m.path("corpus")));
  e.qrels = read_qrels_tsv(m.path("qrels"));
  const auto pairs = read_pairs_tsv(m.path("pairs"));
  const LayerDiagnostics diag = sweep(m, e.records, pairs);
  out << "selected align layer: " << diag.selected_a << ", uniform layer: " << diag.selected_u << '\n';

  std::vector<AblationRow> rows;
  for (Ablation a : ablations) {
    const AblationSetup setup = ablation_setup(a, diag);
    TunerConfig cfg = m.tuner;
    cfg.cross_attention = setup.cross_attention;
    const ExperimentResult r = run_experiment(e, setup.layers, cfg, m.train, m.search);
    rows.push_back({a, setup.layers, setup.cross_attention, r.trained_ndcg});
    out << to_string(a) << ": align=" << setup.layers.align_layer << " uniform=" << setup.layers.uniform_layer
        << " cross=" << (setup.cross_attention ? "on" : "off") << " NDCG@10 " << fixed4(r.trained_ndcg) << '\n';
  }

  std::optional<double> full;
  for (const auto& r : rows) {
    if (r.ablation == Ablation::Full) full = r.ndcg;
  }
  std::ofstream csv(m.path("ablation_csv"), std::ios::trunc);
  if (!csv) throw DataError("cannot write " + m.path("ablation_csv").string());
  csv << "ablation,align_layer,uniform_layer,cross_attention,ndcg@10,relative_to_full\n";
  char buf[64];
  for (const auto& r : rows) {
    csv << to_string(r.ablation) << ',' << r.layers.align_layer << ',' << r.layers.uniform_layer << ','
        << (r.cross_attention ? 1 : 0) << ',';
    std::snprintf(buf, sizeof buf, "%.9g", r.ndcg);
    csv << buf << ',';
    if (full && *full > 0.0) {
      std::snprintf(buf, sizeof buf, "%.6f", (r.ndcg - *full) / *full);
      csv << buf;
    }
    csv << '\n';
  }
  csv.close();
  if (csv.fail()) throw DataError("write failed: " + m.path("ablation_csv").string());
  return rows;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"lmort: layer-selecting output tuner for dense retrieval over frozen language-model states"};
  app.require_subcommand(1);

  std::string manifest_path;
  std::optional<std::uint64_t> seed;
  std::string connection;
  std::optional<std::uint32_t> blocks;
  std::optional<std::size_t> k;
  bool deterministic = false;
  std::vector<std::string> ablation_names;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--manifest", manifest_path, "TOML run manifest")->required();
    sub->add_option("--seed", seed, "Override every seed in the manifest");
    sub->add_option("--connection", connection, "Tuner connection mode: a2u or u2a");
    sub->add_option("--blocks", blocks, "Number of tuner blocks");
    sub->add_option("--k", k, "Retrieval depth");
    sub->add_flag("--deterministic", deterministic, "Single-threaded execution");
  };
  CLI::App* emulate = app.add_subcommand("emulate", "Generate a synthetic task and its hidden-state dump");
  CLI::App* analyze = app.add_subcommand("analyze", "Layer-wise alignment/uniformity sweep");
  CLI::App* train = app.add_subcommand("train", "Train the tuner on a hidden-state dump");
  CLI::App* encode = app.add_subcommand("encode", "Encode dump sequences with a trained checkpoint");
  CLI::App* search = app.add_subcommand("search-eval", "Exact search and NDCG@10");
  CLI::App* ablate = app.add_subcommand("ablate", "Train and evaluate connection ablations");
  for (CLI::App* sub : {emulate, analyze, train, encode, search, ablate}) add_common(sub);
  ablate->add_option("names", ablation_names, "Ablations to run (default: manifest [ablate] names, else all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    Overrides overrides;
    overrides.seed = seed;
    if (!connection.empty()) overrides.connection = parse_connection_mode(connection);
    overrides.blocks = blocks;
    overrides.k = k;
    overrides.deterministic = deterministic;
    const RunManifest m = load_manifest(manifest_path, overrides);

    if (*emulate) {
      cmd_emulate(m, out);
    } else if (*analyze) {
      cmd_analyze(m, out);
    } else if (*train) {
      cmd_train(m, out);
    } else if (*encode) {
      cmd_encode(m, out);
    } else if (*search) {
      cmd_search_eval(m, out, err);
    } else if (*ablate) {
      if (ablation_names.empty()) ablation_names = m.ablations;
      std::vector<Ablation> ablations;
      for (const auto& name : ablation_names) ablations.push_back(parse_ablation(name));
      if (ablations.empty()) ablations = all_ablations();
      cmd_ablate(m, ablations, out);
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace lmort::cli
