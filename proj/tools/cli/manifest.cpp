// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "manifest.hpp"

#include <fstream>
#include <sstream>

#include <toml.hpp>

#include "lmort/error.hpp"

namespace lmort::cli {
namespace {

std::string where(std::string_view section, std::string_view key) {
  return "[" + std::string(section) + "] " + std::string(key);
}

double as_real(const toml::node& n, const std::string& w) {
  if (const auto* f = n.as_floating_point()) return f->get();
  if (const auto* i = n.as_integer()) return static_cast<double>(i->get());
  throw ConfigError(w + " must be a number");
}

std::uint64_t as_uint(const toml::node& n, const std::string& w) {
  const auto* i = n.as_integer();
  if (i == nullptr || i->get() < 0) throw ConfigError(w + " must be a non-negative integer");
  return static_cast<std::uint64_t>(i->get());
}

std::uint32_t as_u32(const toml::node& n, const std::string& w) {
  const std::uint64_t v = as_uint(n, w);
  if (v > UINT32_MAX) throw ConfigError(w + " is out of range");
  return static_cast<std::uint32_t>(v);
}

bool as_bool(const toml::node& n, const std::string& w) {
  const auto* b = n.as_boolean();
  if (b == nullptr) throw ConfigError(w + " must be true or false");
  return b->get();
}

std::string as_string(const toml::node& n, const std::string& w) {
  const auto* s = n.as_string();
  if (s == nullptr) throw ConfigError(w + " must be a string");
  return s->get();
}

std::vector<std::uint32_t> as_u32_list(const toml::node& n, const std::string& w) {
  const auto* arr = n.as_array();
  if (arr == nullptr) throw ConfigError(w + " must be an array of integers");
  std::vector<std::uint32_t> out;
  for (const auto& item : *arr) out.push_back(as_u32(item, w));
  return out;
}

std::vector<std::string> as_string_list(const toml::node& n, const std::string& w) {
  const auto* arr = n.as_array();
  if (arr == nullptr) throw ConfigError(w + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& item : *arr) out.push_back(as_string(item, w));
  return out;
}

[[noreturn]] void unknown_key(std::string_view section, std::string_view key) {
  throw ConfigError("unknown key " + where(section, key));
}

const toml::table& as_table(const toml::node& n, std::string_view section) {
  const auto* t = n.as_table();
  if (t == nullptr) throw ConfigError("[" + std::string(section) + "] must be a table");
  return *t;
}

void read_paths(const toml::table& t, RunManifest& m) {
  for (auto&& [k, v] : t) {
    const std::filesystem::path p = as_string(v, where("paths", k.str()));
    m.paths[std::string(k.str())] = p.is_absolute() ? p : m.base_dir / p;
  }
}

void read_emulator(const toml::table& t, RunManifest& m) {
  auto& e = m.emulator;
  for (auto&& [k, v] : t) {
    const std::string w = where("emulator", k.str());
    if (k == "seed") e.seed = as_uint(v, w);
    else if (k == "vocab_size") e.vocab_size = as_u32(v, w);
    else if (k == "d_model") e.d_model = as_u32(v, w);
    else if (k == "n_layers") e.n_layers = as_u32(v, w);
    else if (k == "n_heads") e.n_heads = as_u32(v, w);
    else if (k == "max_seq_len") e.max_seq_len = as_u32(v, w);
    else if (k == "layers") m.emulate_layers = as_u32_list(v, w);
    else unknown_key("emulator", k.str());
  }
}

void read_task(const toml::table& t, RunManifest& m) {
  auto& s = m.task;
  for (auto&& [k, v] : t) {
    const std::string w = where("task", k.str());
    if (k == "seed") s.seed = as_uint(v, w);
    else if (k == "n_queries") s.n_queries = as_uint(v, w);
    else if (k == "n_passages") s.n_passages = as_uint(v, w);
    else if (k == "positives_per_query") s.positives_per_query = as_uint(v, w);
    else if (k == "negatives_per_query") s.negatives_per_query = as_uint(v, w);
    else if (k == "noise_level") s.noise_level = as_real(v, w);
    else if (k == "sequence_length") s.sequence_length = as_uint(v, w);
    else if (k == "vocab_size") s.vocab_size = as_u32(v, w);
    else unknown_key("task", k.str());
  }
}

void read_layers(const toml::table& t, RunManifest& m) {
  std::optional<std::uint32_t> a;
  std::optional<std::uint32_t> u;
  for (auto&& [k, v] : t) {
    if (k == "align") a = as_u32(v, where("layers", "align"));
    else if (k == "uniform") u = as_u32(v, where("layers", "uniform"));
    else unknown_key("layers", k.str());
  }
  if (!a || !u) throw ConfigError("[layers] needs both align and uniform");
  m.layers = LayerBinding{*a, *u};
}

void read_tuner(const toml::table& t, RunManifest& m) {
  auto& c = m.tuner;
  std::optional<std::uint32_t> hidden;
  std::optional<std::uint32_t> out;
  for (auto&& [k, v] : t) {
    const std::string w = where("tuner", k.str());
    if (k == "n_blocks") c.n_blocks = as_u32(v, w);
    else if (k == "d_model") c.d_model = as_u32(v, w);
    else if (k == "n_heads") c.n_heads = as_u32(v, w);
    else if (k == "ffn_multiplier") c.ffn_multiplier = as_u32(v, w);
    else if (k == "connection") c.connection_mode = parse_connection_mode(as_string(v, w));
    else if (k == "reduction_hidden") hidden = as_u32(v, w);
    else if (k == "reduction_out") out = as_u32(v, w);
    else if (k == "layer_norm_eps") c.layer_norm_eps = as_real(v, w);
    else if (k == "seed") c.seed = as_uint(v, w);
    else if (k == "cross_attention") c.cross_attention = as_bool(v, w);
    else if (k == "reread_self_input") c.reread_self_input = as_bool(v, w);
    else unknown_key("tuner", k.str());
  }
  if (hidden.has_value() != out.has_value()) {
    throw ConfigError("[tuner] reduction_hidden and reduction_out must be given together");
  }
  if (hidden) c.reduction = ReductionConfig{*hidden, *out};
}

void read_train(const toml::table& t, RunManifest& m) {
  auto& c = m.train;
  for (auto&& [k, v] : t) {
    const std::string w = where("train", k.str());
    if (k == "batch_size") c.batch_size = as_uint(v, w);
    else if (k == "learning_rate") c.learning_rate = as_real(v, w);
    else if (k == "epochs") c.epochs = as_uint(v, w);
    else if (k == "negatives_per_query") c.negatives_per_query = as_uint(v, w);
    else if (k == "in_batch_negatives") c.use_in_batch_negatives = as_bool(v, w);
    else if (k == "similarity") c.similarity = parse_similarity(as_string(v, w));
    else if (k == "temperature") c.temperature = as_real(v, w);
    else if (k == "adam_beta1") c.adam.beta1 = as_real(v, w);
    else if (k == "adam_beta2") c.adam.beta2 = as_real(v, w);
    else if (k == "adam_epsilon") c.adam.epsilon = as_real(v, w);
    else if (k == "grad_clip") c.grad_clip = as_real(v, w);
    else if (k == "seed") c.seed = as_uint(v, w);
    else if (k == "threads") c.threads = as_uint(v, w);
    else unknown_key("train", k.str());
  }
}

void read_analysis(const toml::table& t, RunManifest& m) {
  auto& a = m.analysis;
  for (auto&& [k, v] : t) {
    const std::string w = where("analysis", k.str());
    if (k == "layers") a.layers = as_u32_list(v, w);
    else if (k == "uniform_pairs") a.uniform_pairs = as_uint(v, w);
    else if (k == "seed") a.seed = as_uint(v, w);
    else unknown_key("analysis", k.str());
  }
}

void read_search(const toml::table& t, RunManifest& m) {
  for (auto&& [k, v] : t) {
    const std::string w = where("search", k.str());
    if (k == "k") m.search.k = as_uint(v, w);
    else if (k == "similarity") m.search.similarity = parse_similarity(as_string(v, w));
    else unknown_key("search", k.str());
  }
}

void read_ablate(const toml::table& t, RunManifest& m) {
  for (auto&& [k, v] : t) {
    if (k == "names") m.ablations = as_string_list(v, where("ablate", "names"));
    else unknown_key("ablate", k.str());
  }
}

}  // namespace

const std::filesystem::path& RunManifest::path(const std::string& key) const {
  const auto it = paths.find(key);
  if (it == paths.end()) throw ConfigError("manifest is missing [paths] " + key);
  return it->second;
}

void RunManifest::require_inputs(std::initializer_list<std::string_view> keys) const {
  for (const auto key : keys) {
    const auto& p = path(std::string(key));
    if (!std::filesystem::exists(p)) {
      throw DataError("input [paths] " + std::string(key) + " does not exist: " + p.string());
    }
  }
}

void RunManifest::require_output_dirs(std::initializer_list<std::string_view> keys) const {
  for (const auto key : keys) {
    const auto parent = path(std::string(key)).parent_path();
    if (!parent.empty() && !std::filesystem::is_directory(parent)) {
      throw DataError("output directory for [paths] " + std::string(key) + " does not exist: " + parent.string());
    }
  }
}

RunManifest parse_manifest(std::string_view toml_text, const std::filesystem::path& base_dir,
                           const Overrides& overrides) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "manifest parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }

  RunManifest m;
  m.base_dir = base_dir;
  for (auto&& [k, v] : root) {
    const std::string_view name = k.str();
    const toml::table& t = as_table(v, name);
    if (name == "paths") read_paths(t, m);
    else if (name == "emulator") read_emulator(t, m);
    else if (name == "task") read_task(t, m);
    else if (name == "layers") read_layers(t, m);
    else if (name == "tuner") read_tuner(t, m);
    else if (name == "train") read_train(t, m);
    else if (name == "analysis") read_analysis(t, m);
    else if (name == "search") read_search(t, m);
    else if (name == "ablate") read_ablate(t, m);
    else throw ConfigError("unknown manifest table [" + std::string(name) + "]");
  }
  if (!root.contains("train") || !root["train"].as_table()->contains("threads")) {
    m.train.threads = default_thread_count();
  }

  if (overrides.seed) {
    m.emulator.seed = *overrides.seed;
    m.task.seed = *overrides.seed;
    m.tuner.seed = *overrides.seed;
    m.train.seed = *overrides.seed;
    m.analysis.seed = *overrides.seed;
  }
  if (overrides.connection) m.tuner.connection_mode = *overrides.connection;
  if (overrides.blocks) m.tuner.n_blocks = *overrides.blocks;
  if (overrides.k) m.search.k = *overrides.k;
  if (overrides.deterministic) m.train.threads = 1;

  m.emulator.validate();
  m.train.validate();
  if (m.search.k == 0) throw ConfigError("[search] k must be >= 1");
  if (m.train.threads == 0) throw ConfigError("[train] threads must be >= 1");
  return m;
}

RunManifest load_manifest(const std::filesystem::path& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest: " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_manifest(text.str(), path.parent_path(), overrides);
}

}  // namespace lmort::cli
