// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/tuner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "lmort/error.hpp"
#include "lmort/rng.hpp"
#include "tuner_ops.hpp"

namespace lmort {

std::string_view to_string(ConnectionMode mode) { return mode == ConnectionMode::AToU ? "a2u" : "u2a"; }

ConnectionMode parse_connection_mode(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "a2u" || lower == "a_to_u") return ConnectionMode::AToU;
  if (lower == "u2a" || lower == "u_to_a") return ConnectionMode::UToA;
  throw ConfigError("unknown connection mode '" + std::string(text) + "' (expected a2u or u2a)");
}

void TunerConfig::validate(std::size_t d_llm) const {
  if (n_blocks == 0) throw ConfigError("tuner needs at least one block");
  if (n_heads == 0) throw ConfigError("tuner n_heads must be >= 1");
  if (ffn_multiplier == 0) throw ConfigError("tuner ffn_multiplier must be >= 1");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  if (d_llm == 0) throw ConfigError("backbone width must be positive");
  if (reduction) {
    if (reduction->hidden_dim == 0 || reduction->out_dim == 0) {
      throw ConfigError("reduction hidden_dim and out_dim must be positive");
    }
  } else if (d_model != d_llm) {
    throw ConfigError("without a reduction MLP the tuner width (" + std::to_string(d_model) +
                      ") must equal the backbone width (" + std::to_string(d_llm) + ")");
  }
  if (block_dim() % n_heads != 0) {
    throw ConfigError("tuner width " + std::to_string(block_dim()) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

ParamLayout::ParamLayout(const TunerConfig& config, std::size_t d_llm) {
  config.validate(d_llm);
  const Eigen::Index w = config.block_dim();
  const Eigen::Index ffn = static_cast<Eigen::Index>(config.ffn_multiplier) * w;
  if (config.reduction) {
    const Eigen::Index h = config.reduction->hidden_dim;
    ReductionSlots r{};
    r.w1 = add("reduce.w1", static_cast<Eigen::Index>(d_llm), h);
    r.b1 = add("reduce.b1", 1, h);
    r.w2 = add("reduce.w2", h, w);
    r.b2 = add("reduce.b2", 1, w);
    reduction_ = r;
  }
  for (std::uint32_t b = 0; b < config.n_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    BlockSlots slots{};
    slots.self = add_attention(prefix + "self", w);
    slots.self_norm = add_norm(prefix + "self_norm", w);
    if (config.cross_attention) {
      slots.cross = add_attention(prefix + "cross", w);
      slots.cross_norm = add_norm(prefix + "cross_norm", w);
    }
    slots.w_in = add(prefix + "ffn.w_in", w, ffn);
    slots.b_in = add(prefix + "ffn.b_in", 1, ffn);
    slots.w_out = add(prefix + "ffn.w_out", ffn, w);
    slots.b_out = add(prefix + "ffn.b_out", 1, w);
    slots.ffn_norm = add_norm(prefix + "ffn_norm", w);
    blocks_.push_back(slots);
  }
}

std::size_t ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  total_ = (total_ + kSlotAlignment - 1) / kSlotAlignment * kSlotAlignment;
  slots_.push_back(TensorSlot{std::move(name), rows, cols, total_});
  total_ += slots_.back().size();
  return slots_.size() - 1;
}

AttentionSlots ParamLayout::add_attention(const std::string& prefix, Eigen::Index width) {
  AttentionSlots a{};
  a.wq = add(prefix + ".wq", width, width);
  a.bq = add(prefix + ".bq", 1, width);
  a.wk = add(prefix + ".wk", width, width);
  a.bk = add(prefix + ".bk", 1, width);
  a.wv = add(prefix + ".wv", width, width);
  a.bv = add(prefix + ".bv", 1, width);
  a.wo = add(prefix + ".wo", width, width);
  a.bo = add(prefix + ".bo", 1, width);
  return a;
}

NormSlots ParamLayout::add_norm(const std::string& prefix, Eigen::Index width) {
  return NormSlots{add(prefix + ".gain", 1, width), add(prefix + ".bias", 1, width)};
}

std::optional<std::size_t> ParamLayout::find(std::string_view name) const {
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].name == name) return i;
  }
  return std::nullopt;
}

ParamBuffer::ParamBuffer(std::shared_ptr<const ParamLayout> layout)
    : layout_(std::move(layout)), values_(layout_->total_size(), 0.0) {}

MatrixMap ParamBuffer::tensor(std::size_t slot) {
  const auto& s = layout_->slot(slot);
  return MatrixMap(values_.data() + s.offset, s.rows, s.cols);
}

ConstMatrixMap ParamBuffer::tensor(std::size_t slot) const {
  const auto& s = layout_->slot(slot);
  return ConstMatrixMap(values_.data() + s.offset, s.rows, s.cols);
}

MatrixMap ParamBuffer::tensor(std::string_view name) {
  const auto slot = layout_->find(name);
  if (!slot) throw ConfigError("unknown parameter tensor '" + std::string(name) + "'");
  return tensor(*slot);
}

ConstMatrixMap ParamBuffer::tensor(std::string_view name) const {
  const auto slot = layout_->find(name);
  if (!slot) throw ConfigError("unknown parameter tensor '" + std::string(name) + "'");
  return tensor(*slot);
}

void ParamBuffer::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

TunerParams::TunerParams(const TunerConfig& config, std::size_t d_llm)
    : ParamBuffer(std::make_shared<const ParamLayout>(config, d_llm)), config_(config), d_llm_(d_llm) {}

TunerParams init_params(const TunerConfig& config, std::size_t d_llm) {
  TunerParams params(config, d_llm);
  Rng rng(config.seed);
  for (std::size_t i = 0; i < params.layout().slots().size(); ++i) {
    const auto& slot = params.layout().slot(i);
    auto t = params.tensor(i);
    const bool is_gain = slot.name.ends_with(".gain");
    if (slot.rows == 1) {
      t.setConstant(is_gain ? 1.0 : 0.0);
      continue;
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(slot.rows + slot.cols));
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      t.data()[k] = static_cast<float>(rng.uniform(-limit, limit));
    }
  }
  return params;
}

std::size_t count_params(const TunerConfig& config, std::size_t d_llm) {
  config.validate(d_llm);
  const std::size_t w = config.block_dim();
  const std::size_t f = config.ffn_multiplier;
  const std::size_t attention = 4 * (w * w + w);
  const std::size_t norm = 2 * w;
  const std::size_t ffn = 2 * f * w * w + f * w + w;
  std::size_t block = attention + norm + ffn + norm;
  if (config.cross_attention) block += attention + norm;
  std::size_t reduction = 0;
  if (config.reduction) {
    const std::size_t h = config.reduction->hidden_dim;
    const std::size_t o = config.reduction->out_dim;
    reduction = d_llm * h + h + h * o + o;
  }
  return reduction + config.n_blocks * block;
}

namespace {

void require_finite(const Matrix& m, const std::string& where) {
  if (!m.allFinite()) {
    throw NumericError("non-finite values produced by " + where);
  }
}

Matrix reduce_impl(const Matrix& states, const TunerParams& params, ReductionTape* tape) {
  const auto& slots = params.layout().reduction();
  if (!slots) {
    throw ConfigError("reduce_dims called on a tuner without a reduction MLP");
  }
  if (states.cols() != static_cast<Eigen::Index>(params.d_llm())) {
    throw ConfigError("reduce_dims input width " + std::to_string(states.cols()) + " != backbone width " +
                      std::to_string(params.d_llm()));
  }
  Matrix hidden = detail::add_bias(states * params.tensor(slots->w1), params.tensor(slots->b1));
  hidden = hidden.cwiseMax(0.0);
  Matrix out = detail::add_bias(hidden * params.tensor(slots->w2), params.tensor(slots->b2));
  if (tape != nullptr) tape->hidden = std::move(hidden);
  return out;
}

Matrix attend(const Matrix& query_src, const Matrix& kv_src, std::span<const std::uint8_t> key_mask,
              const AttentionWeights& w, std::uint32_t n_heads, AttentionCache* cache) {
  const Eigen::Index width = w.wq.cols();
  if (query_src.cols() != w.wq.rows() || kv_src.cols() != w.wk.rows()) {
    throw ConfigError("attention input width does not match projection shapes");
  }
  if (n_heads == 0 || width % n_heads != 0) {
    throw ConfigError("attention width must be divisible by n_heads");
  }
  if (static_cast<Eigen::Index>(key_mask.size()) != kv_src.rows()) {
    throw ConfigError("attention key mask length does not match key count");
  }
  if (std::none_of(key_mask.begin(), key_mask.end(), [](std::uint8_t m) { return m != 0; })) {
    throw DataError("attention has every key masked");
  }
  const Eigen::Index dk = width / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix q = detail::add_bias(query_src * w.wq, w.bq);
  Matrix k = detail::add_bias(kv_src * w.wk, w.bk);
  Matrix v = detail::add_bias(kv_src * w.wv, w.bv);
  Matrix context(query_src.rows(), width);
  std::vector<Matrix> probs;
  probs.reserve(n_heads);
  for (std::uint32_t h = 0; h < n_heads; ++h) {
    Matrix scores = (q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose()) * scale;
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      double max_logit = -std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < scores.cols(); ++c) {
        if (key_mask[static_cast<std::size_t>(c)]) max_logit = std::max(max_logit, scores(r, c));
      }
      double total = 0.0;
      for (Eigen::Index c = 0; c < scores.cols(); ++c) {
        const double e = key_mask[static_cast<std::size_t>(c)] ? std::exp(scores(r, c) - max_logit) : 0.0;
        scores(r, c) = e;
        total += e;
      }
      scores.row(r) /= total;
    }
    context.middleCols(h * dk, dk).noalias() = scores * v.middleCols(h * dk, dk);
    probs.push_back(std::move(scores));
  }
  Matrix out = detail::add_bias(context * w.wo, w.bo);
  if (cache != nullptr) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
  }
  return out;
}

// Shared by tuner_forward and encode; `tape` may be null.
Matrix forward_impl(const Matrix& align_states, const Matrix& uniform_states, std::span<const std::uint8_t> mask,
                    const TunerParams& params, ForwardTape* tape) {
  const TunerConfig& cfg = params.config();
  const auto d_llm = static_cast<Eigen::Index>(params.d_llm());
  if (align_states.rows() != uniform_states.rows()) {
    throw ConfigError("align and uniform states must have the same token count");
  }
  if (align_states.cols() != d_llm || uniform_states.cols() != d_llm) {
    throw ConfigError("backbone states have width " + std::to_string(align_states.cols()) + "/" +
                      std::to_string(uniform_states.cols()) + ", tuner expects " + std::to_string(d_llm));
  }
  if (static_cast<Eigen::Index>(mask.size()) != align_states.rows()) {
    throw ConfigError("mask length does not match token count");
  }

  const bool a_to_u = cfg.connection_mode == ConnectionMode::AToU;
  const Matrix& self_raw = a_to_u ? align_states : uniform_states;
  const Matrix& cross_raw = a_to_u ? uniform_states : align_states;

  Matrix self_stream;
  Matrix cross_stream;
  if (cfg.reduction) {
    ReductionTape self_red, cross_red;
    self_stream = reduce_impl(self_raw, params, tape ? &self_red : nullptr);
    require_finite(self_stream, "reduction MLP (self stream)");
    if (cfg.cross_attention) {
      cross_stream = reduce_impl(cross_raw, params, tape ? &cross_red : nullptr);
      require_finite(cross_stream, "reduction MLP (cross stream)");
    }
    if (tape) {
      tape->self_reduction = std::move(self_red);
      if (cfg.cross_attention) tape->cross_reduction = std::move(cross_red);
    }
  } else {
    self_stream = self_raw;
    if (cfg.cross_attention) cross_stream = cross_raw;
  }

  const auto& layout = params.layout();
  Matrix x = self_stream;
  if (tape) tape->blocks.resize(cfg.n_blocks);
  for (std::uint32_t b = 0; b < cfg.n_blocks; ++b) {
    const BlockSlots& slots = layout.blocks()[b];
    const std::string where = "block " + std::to_string(b + 1);
    BlockTape* bt = tape ? &tape->blocks[b] : nullptr;
    const Matrix& self_kv = (b > 0 && cfg.reread_self_input) ? self_stream : x;

    Matrix attn = attend(x, self_kv, mask, attention_weights(params, slots.self), cfg.n_heads,
                         bt ? &bt->self_attention : nullptr);
    require_finite(attn, where + " self attention");
    Matrix s = detail::layer_norm_forward(x + attn, params.tensor(slots.self_norm.gain),
                                          params.tensor(slots.self_norm.bias), cfg.layer_norm_eps,
                                          bt ? &bt->self_norm : nullptr);
    require_finite(s, where + " self attention layer norm");

    Matrix c;
    if (slots.cross) {
      Matrix cross = attend(s, cross_stream, mask, attention_weights(params, *slots.cross), cfg.n_heads,
                            bt ? &bt->cross_attention : nullptr);
      require_finite(cross, where + " cross attention");
      c = detail::layer_norm_forward(s + cross, params.tensor(slots.cross_norm->gain),
                                     params.tensor(slots.cross_norm->bias), cfg.layer_norm_eps,
                                     bt ? &bt->cross_norm : nullptr);
      require_finite(c, where + " cross attention layer norm");
    } else {
      c = s;
    }

    Matrix pre = detail::add_bias(c * params.tensor(slots.w_in), params.tensor(slots.b_in));
    Matrix act = pre.unaryExpr([](double v) { return detail::gelu(v); });
    Matrix ffn = detail::add_bias(act * params.tensor(slots.w_out), params.tensor(slots.b_out));
    require_finite(ffn, where + " feed-forward");
    Matrix y = detail::layer_norm_forward(c + ffn, params.tensor(slots.ffn_norm.gain),
                                          params.tensor(slots.ffn_norm.bias), cfg.layer_norm_eps,
                                          bt ? &bt->ffn_norm : nullptr);
    require_finite(y, where + " feed-forward layer norm");

    if (bt) {
      bt->input = std::move(x);
      bt->self_out = std::move(s);
      bt->cross_out = slots.cross ? std::move(c) : Matrix();
      bt->ffn_pre = std::move(pre);
      bt->ffn_act = std::move(act);
    }
    x = std::move(y);
  }

  if (tape) {
    tape->mask.assign(mask.begin(), mask.end());
    tape->align_states = align_states;
    tape->uniform_states = uniform_states;
    tape->self_stream = std::move(self_stream);
    tape->cross_stream = std::move(cross_stream);
    tape->output = x;
    tape->pooled_count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
    tape->param_count = params.size();
    tape->d_llm = params.d_llm();
  }
  return x;
}

}  // namespace

Matrix reduce_dims(const Matrix& states, const TunerParams& params) { return reduce_impl(states, params, nullptr); }

AttentionWeights attention_weights(const ParamBuffer& params, const AttentionSlots& s) {
  return AttentionWeights{params.tensor(s.wq), params.tensor(s.bq), params.tensor(s.wk), params.tensor(s.bk),
                          params.tensor(s.wv), params.tensor(s.bv), params.tensor(s.wo), params.tensor(s.bo)};
}

Matrix self_bi_attention(const Matrix& x, std::span<const std::uint8_t> mask, const AttentionWeights& weights,
                         std::uint32_t n_heads, AttentionCache* cache) {
  return attend(x, x, mask, weights, n_heads, cache);
}

Matrix cross_bi_attention(const Matrix& s, const Matrix& memory, std::span<const std::uint8_t> key_mask,
                          const AttentionWeights& weights, std::uint32_t n_heads, AttentionCache* cache) {
  return attend(s, memory, key_mask, weights, n_heads, cache);
}

ForwardResult tuner_forward(const Matrix& align_states, const Matrix& uniform_states,
                            std::span<const std::uint8_t> mask, const TunerParams& params) {
  ForwardResult result;
  result.output = forward_impl(align_states, uniform_states, mask, params, &result.tape);
  return result;
}

RepVector encode(const Matrix& align_states, const Matrix& uniform_states, std::span<const std::uint8_t> mask,
                 const TunerParams& params) {
  const Matrix out = forward_impl(align_states, uniform_states, mask, params, nullptr);
  return pooled_rep(out, mask, false);
}

}  // namespace lmort
