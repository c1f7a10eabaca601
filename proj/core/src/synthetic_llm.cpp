// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/synthetic_llm.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>

#include "lmort/error.hpp"
#include "lmort/rng.hpp"

namespace lmort {
namespace {

constexpr double kWeightStddev = 0.02;
constexpr double kLayerNormEps = 1e-5;

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = kWeightStddev * rng.normal();
  }
  return m;
}

RowVector layer_norm(const RowVector& x, const RowVector& gain, const RowVector& bias) {
  const double mean = x.mean();
  const RowVector centered = x.array() - mean;
  const double var = centered.squaredNorm() / static_cast<double>(x.size());
  return (centered / std::sqrt(var + kLayerNormEps)).cwiseProduct(gain) + bias;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::string padded_id(char prefix, std::size_t index, std::size_t count) {
  std::string digits = std::to_string(index);
  const std::size_t width = std::to_string(count > 0 ? count - 1 : 0).size();
  return std::string(1, prefix) + std::string(width - std::min(width, digits.size()), '0') + digits;
}

std::vector<std::uint32_t> noisy_copy(std::span<const std::uint32_t> source, double noise, std::uint32_t vocab,
                                      Rng& rng) {
  std::vector<std::uint32_t> out(source.begin(), source.end());
  if (vocab < 2) return out;
  for (auto& tok : out) {
    if (rng.uniform() < noise) {
      // Substitute with a different token.
      const auto shift = static_cast<std::uint32_t>(1 + rng.index(vocab - 1));
      tok = (tok + shift) % vocab;
    }
  }
  return out;
}

}  // namespace

void EmulatorConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len == 0) {
    throw ConfigError("emulator sizes must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("emulator d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

namespace {

EmulatorConfig validated(const EmulatorConfig& config) {
  config.validate();
  return config;
}

}  // namespace

// Each weight group draws from its own stream derived from the seed.
Emulator::Emulator(const EmulatorConfig& config)
    : config_(validated(config)),
      token_embedding_([this] {
        Rng rng(config_.seed);
        return gaussian(rng, config_.vocab_size, config_.d_model);
      }()),
      position_embedding_([this] {
        Rng rng(mix_seed(config_.seed, 1));
        return gaussian(rng, config_.max_seq_len, config_.d_model);
      }()),
      blocks_([this] {
        const Eigen::Index d = config_.d_model;
        std::vector<Block> blocks;
        blocks.reserve(config_.n_layers);
        for (std::uint32_t l = 0; l < config_.n_layers; ++l) {
          Rng rng(mix_seed(config_.seed, 100 + l));
          Block b;
          b.ln1_gain = RowVector::Ones(d);
          b.ln1_bias = RowVector::Zero(d);
          b.w_qkv = gaussian(rng, d, 3 * d);
          b.b_qkv = RowVector::Zero(3 * d);
          b.w_o = gaussian(rng, d, d);
          b.b_o = RowVector::Zero(d);
          b.ln2_gain = RowVector::Ones(d);
          b.ln2_bias = RowVector::Zero(d);
          b.w_in = gaussian(rng, d, 4 * d);
          b.b_in = RowVector::Zero(4 * d);
          b.w_out = gaussian(rng, 4 * d, d);
          b.b_out = RowVector::Zero(d);
          blocks.push_back(std::move(b));
        }
        return blocks;
      }()) {}

Emulator build_emulator(const EmulatorConfig& config) { return Emulator(config); }

LayeredStates Emulator::encode_layers(std::string sequence_id, std::span<const std::uint32_t> tokens,
                                      std::span<const std::uint32_t> layers) const {
  if (tokens.empty()) {
    throw DataError("cannot encode an empty token sequence");
  }
  if (tokens.size() > config_.max_seq_len) {
    throw DataError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                    std::to_string(config_.max_seq_len));
  }
  for (std::uint32_t tok : tokens) {
    if (tok >= config_.vocab_size) {
      throw DataError("token id " + std::to_string(tok) + " is out of vocabulary (size " +
                      std::to_string(config_.vocab_size) + ")");
    }
  }
  std::vector<std::uint32_t> wanted(layers.begin(), layers.end());
  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
  if (wanted.empty()) {
    throw ConfigError("no layers requested");
  }
  if (wanted.back() >= config_.emission_points()) {
    throw ConfigError("layer " + std::to_string(wanted.back()) + " is outside [0, " +
                      std::to_string(config_.emission_points()) + ")");
  }

  const auto n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index d = config_.d_model;
  const Eigen::Index heads = config_.n_heads;
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  LayeredStates out;
  out.sequence_id = std::move(sequence_id);
  out.layer_indices = wanted;
  out.attention_mask.assign(tokens.size(), 1);

  std::size_t next_wanted = 0;
  auto emit = [&](std::uint32_t layer, const Matrix& x) {
    if (next_wanted < wanted.size() && wanted[next_wanted] == layer) {
      out.states.push_back(x.cast<float>());
      ++next_wanted;
    }
  };

  Matrix x(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    x.row(t) = token_embedding_.row(tokens[static_cast<std::size_t>(t)]) + position_embedding_.row(t);
  }
  emit(0, x);

  Matrix qkv(n, 3 * d);
  std::vector<double> weights(static_cast<std::size_t>(n));
  for (std::uint32_t l = 0; l < config_.n_layers && next_wanted < wanted.size(); ++l) {
    const Block& b = blocks_[l];
    for (Eigen::Index t = 0; t < n; ++t) {
      const RowVector a = layer_norm(x.row(t), b.ln1_gain, b.ln1_bias);
      qkv.row(t) = a * b.w_qkv + b.b_qkv;
    }
    for (Eigen::Index t = 0; t < n; ++t) {
      RowVector context = RowVector::Zero(d);
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto q = qkv.row(t).segment(h * dk, dk);
        double max_logit = -INFINITY;
        for (Eigen::Index s = 0; s <= t; ++s) {
          const double logit = scale * q.dot(qkv.row(s).segment(d + h * dk, dk));
          weights[static_cast<std::size_t>(s)] = logit;
          max_logit = std::max(max_logit, logit);
        }
        double total = 0.0;
        for (Eigen::Index s = 0; s <= t; ++s) {
          auto& w = weights[static_cast<std::size_t>(s)];
          w = std::exp(w - max_logit);
          total += w;
        }
        for (Eigen::Index s = 0; s <= t; ++s) {
          context.segment(h * dk, dk) += (weights[static_cast<std::size_t>(s)] / total) *
                                         qkv.row(s).segment(2 * d + h * dk, dk);
        }
      }
      x.row(t) += context * b.w_o + b.b_o;
      const RowVector a2 = layer_norm(x.row(t), b.ln2_gain, b.ln2_bias);
      RowVector hidden = a2 * b.w_in + b.b_in;
      hidden = hidden.unaryExpr([](double v) { return gelu(v); });
      x.row(t) += hidden * b.w_out + b.b_out;
    }
    emit(l + 1, x);
  }
  return out;
}

std::vector<double> Emulator::flat_weights() const {
  std::vector<double> flat;
  auto append = [&flat](const auto& m) { flat.insert(flat.end(), m.data(), m.data() + m.size()); };
  append(token_embedding_);
  append(position_embedding_);
  for (const auto& b : blocks_) {
    append(b.ln1_gain);
    append(b.ln1_bias);
    append(b.w_qkv);
    append(b.b_qkv);
    append(b.w_o);
    append(b.b_o);
    append(b.ln2_gain);
    append(b.ln2_bias);
    append(b.w_in);
    append(b.b_in);
    append(b.w_out);
    append(b.b_out);
  }
  return flat;
}

std::vector<std::uint32_t> byte_tokenize(std::string_view text) {
  std::vector<std::uint32_t> tokens;
  tokens.reserve(text.size());
  for (char c : text) tokens.push_back(static_cast<unsigned char>(c));
  return tokens;
}

std::string tokens_to_text(std::span<const std::uint32_t> tokens) {
  std::string text;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) text.push_back(' ');
    text += std::to_string(tokens[i]);
  }
  return text;
}

std::vector<std::uint32_t> text_to_tokens(std::string_view text) {
  std::vector<std::uint32_t> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] == ' ') {
      ++pos;
      continue;
    }
    std::uint32_t value = 0;
    const auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + text.size(), value);
    if (ec != std::errc()) {
      throw FormatError("token text is not a list of integers: '" + std::string(text) + "'");
    }
    tokens.push_back(value);
    pos = static_cast<std::size_t>(ptr - text.data());
  }
  return tokens;
}

SyntheticTask make_synthetic_task(const SyntheticTaskSpec& spec) {
  if (spec.n_queries == 0 || spec.n_passages == 0 || spec.positives_per_query == 0 || spec.sequence_length == 0 ||
      spec.vocab_size == 0) {
    throw ConfigError("synthetic task sizes must be positive");
  }
  if (spec.noise_level < 0.0 || spec.noise_level > 1.0) {
    throw ConfigError("noise_level must lie in [0, 1]");
  }
  if (spec.n_passages < spec.positives_per_query + spec.negatives_per_query) {
    throw ConfigError("infeasible task: " + std::to_string(spec.n_passages) + " passages cannot supply " +
                      std::to_string(spec.positives_per_query) + " positives + " +
                      std::to_string(spec.negatives_per_query) + " negatives per query");
  }
  if (spec.n_queries * spec.positives_per_query > spec.n_passages) {
    throw ConfigError("infeasible task: " + std::to_string(spec.n_queries) + " queries x " +
                      std::to_string(spec.positives_per_query) + " distinct positives exceed " +
                      std::to_string(spec.n_passages) + " passages");
  }

  Rng rng(spec.seed);
  SyntheticTask task;
  task.corpus.resize(spec.n_passages);
  for (std::size_t i = 0; i < spec.n_passages; ++i) {
    auto& p = task.corpus[i];
    p.id = padded_id('p', i, spec.n_passages);
    p.tokens.resize(spec.sequence_length);
    for (auto& tok : p.tokens) tok = static_cast<std::uint32_t>(rng.index(spec.vocab_size));
  }

  std::vector<std::size_t> order(spec.n_passages);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));

  task.queries.resize(spec.n_queries);
  task.train_examples.reserve(spec.n_queries);
  std::size_t cursor = 0;
  for (std::size_t q = 0; q < spec.n_queries; ++q) {
    TrainExample ex;
    ex.query_id = padded_id('q', q, spec.n_queries);
    std::set<std::size_t> positives;
    for (std::size_t k = 0; k < spec.positives_per_query; ++k) {
      const std::size_t pi = order[cursor++];
      positives.insert(pi);
      ex.positive_ids.push_back(task.corpus[pi].id);
      if (k > 0) {
        const auto& first = task.corpus[order[cursor - 1 - k]].tokens;
        task.corpus[pi].tokens = noisy_copy(first, spec.noise_level, spec.vocab_size, rng);
      }
    }
    const auto& anchor = task.corpus[order[cursor - spec.positives_per_query]];
    task.queries[q].id = ex.query_id;
    task.queries[q].tokens = noisy_copy(anchor.tokens, spec.noise_level, spec.vocab_size, rng);

    std::set<std::size_t> negatives;
    while (negatives.size() < spec.negatives_per_query) {
      const auto pick = static_cast<std::size_t>(rng.index(spec.n_passages));
      if (!positives.contains(pick) && negatives.insert(pick).second) {
        ex.negative_ids.push_back(task.corpus[pick].id);
      }
    }
    for (const auto& pid : ex.positive_ids) task.qrels[ex.query_id][pid] = 1;
    task.train_examples.push_back(std::move(ex));
  }
  return task;
}

}  // namespace lmort
