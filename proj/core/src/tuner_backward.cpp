// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "lmort/error.hpp"
#include "lmort/tuner.hpp"
#include "tuner_ops.hpp"

namespace lmort {
namespace {

Matrix layer_norm_backward(const Matrix& grad_out, const LayerNormCache& cache, ConstMatrixMap gain,
                           MatrixMap grad_gain, MatrixMap grad_bias) {
  const Eigen::Index w = grad_out.cols();
  grad_gain.row(0) += (grad_out.array() * cache.normalized.array()).colwise().sum().matrix();
  grad_bias.row(0) += grad_out.colwise().sum();
  Matrix grad_norm = grad_out.array().rowwise() * gain.row(0).array();
  Matrix grad_in(grad_out.rows(), w);
  for (Eigen::Index t = 0; t < grad_out.rows(); ++t) {
    const double mean_g = grad_norm.row(t).mean();
    const double mean_gx = grad_norm.row(t).dot(cache.normalized.row(t)) / static_cast<double>(w);
    grad_in.row(t) = cache.inv_std(t) * (grad_norm.row(t).array() - mean_g -
                                         cache.normalized.row(t).array() * mean_gx)
                                            .matrix();
  }
  return grad_in;
}

struct AttentionGrads {
  Matrix query_src;
  Matrix kv_src;
};

// Backward of attend(); adds weight gradients into `grads`.
AttentionGrads attention_backward(const Matrix& grad_out, const Matrix& query_src, const Matrix& kv_src,
                                  const AttentionCache& cache, const AttentionWeights& w, const AttentionSlots& slots,
                                  std::uint32_t n_heads, TunerGradients& grads) {
  const Eigen::Index width = w.wq.cols();
  const Eigen::Index dk = width / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  grads.tensor(slots.wo).noalias() += cache.context.transpose() * grad_out;
  grads.tensor(slots.bo).row(0) += grad_out.colwise().sum();
  const Matrix grad_context = grad_out * w.wo.transpose();

  Matrix grad_q(cache.q.rows(), width);
  Matrix grad_k(cache.k.rows(), width);
  Matrix grad_v(cache.v.rows(), width);
  for (std::uint32_t h = 0; h < n_heads; ++h) {
    const Matrix& p = cache.probs[h];
    const auto gc = grad_context.middleCols(h * dk, dk);
    grad_v.middleCols(h * dk, dk).noalias() = p.transpose() * gc;
    const Matrix grad_p = gc * cache.v.middleCols(h * dk, dk).transpose();
    // Softmax Jacobian per row: dS = P * (dP - rowsum(dP * P)).
    const Eigen::VectorXd row_dot = (grad_p.array() * p.array()).rowwise().sum();
    const Matrix grad_scores = (p.array() * (grad_p.array().colwise() - row_dot.array())).matrix() * scale;
    grad_q.middleCols(h * dk, dk).noalias() = grad_scores * cache.k.middleCols(h * dk, dk);
    grad_k.middleCols(h * dk, dk).noalias() = grad_scores.transpose() * cache.q.middleCols(h * dk, dk);
  }

  grads.tensor(slots.wq).noalias() += query_src.transpose() * grad_q;
  grads.tensor(slots.bq).row(0) += grad_q.colwise().sum();
  grads.tensor(slots.wk).noalias() += kv_src.transpose() * grad_k;
  grads.tensor(slots.bk).row(0) += grad_k.colwise().sum();
  grads.tensor(slots.wv).noalias() += kv_src.transpose() * grad_v;
  grads.tensor(slots.bv).row(0) += grad_v.colwise().sum();

  AttentionGrads out;
  out.query_src = grad_q * w.wq.transpose();
  out.kv_src = grad_k * w.wk.transpose() + grad_v * w.wv.transpose();
  return out;
}

void reduction_backward(const Matrix& grad_out, const Matrix& raw_input, const ReductionTape& tape,
                        const TunerParams& params, TunerGradients& grads) {
  const auto& slots = *params.layout().reduction();
  grads.tensor(slots.w2).noalias() += tape.hidden.transpose() * grad_out;
  grads.tensor(slots.b2).row(0) += grad_out.colwise().sum();
  Matrix grad_hidden = grad_out * params.tensor(slots.w2).transpose();
  grad_hidden = (tape.hidden.array() > 0.0).select(grad_hidden, 0.0);
  grads.tensor(slots.w1).noalias() += raw_input.transpose() * grad_hidden;
  grads.tensor(slots.b1).row(0) += grad_hidden.colwise().sum();
}

}  // namespace

void tuner_backward_into(const ForwardTape& tape, const TunerParams& params, const Matrix& grad_output,
                         TunerGradients& grads) {
  const TunerConfig& cfg = params.config();
  if (tape.param_count != params.size() || tape.d_llm != params.d_llm() ||
      tape.blocks.size() != cfg.n_blocks) {
    throw ConfigError("forward tape does not belong to these tuner parameters");
  }
  if (grads.size() != params.size()) {
    throw ConfigError("gradient buffer does not match tuner parameters");
  }
  if (grad_output.rows() != tape.output.rows() || grad_output.cols() != tape.output.cols()) {
    throw ConfigError("upstream gradient shape does not match tuner output");
  }

  const auto& layout = params.layout();
  const bool need_stream_grads = cfg.reduction.has_value();
  Matrix grad_self_stream = Matrix::Zero(tape.self_stream.rows(), tape.self_stream.cols());
  Matrix grad_cross_stream = Matrix::Zero(tape.cross_stream.rows(), tape.cross_stream.cols());

  Matrix grad_y = grad_output;
  for (std::uint32_t bi = cfg.n_blocks; bi-- > 0;) {
    const BlockSlots& slots = layout.blocks()[bi];
    const BlockTape& bt = tape.blocks[bi];
    const Matrix& c = slots.cross ? bt.cross_out : bt.self_out;

    // Feed-forward sub-layer: y = LN(c + ffn(c)).
    Matrix grad_sum = layer_norm_backward(grad_y, bt.ffn_norm, params.tensor(slots.ffn_norm.gain),
                                          grads.tensor(slots.ffn_norm.gain), grads.tensor(slots.ffn_norm.bias));
    grads.tensor(slots.w_out).noalias() += bt.ffn_act.transpose() * grad_sum;
    grads.tensor(slots.b_out).row(0) += grad_sum.colwise().sum();
    Matrix grad_act = grad_sum * params.tensor(slots.w_out).transpose();
    const Matrix grad_pre =
        grad_act.cwiseProduct(bt.ffn_pre.unaryExpr([](double v) { return detail::gelu_grad(v); }));
    grads.tensor(slots.w_in).noalias() += c.transpose() * grad_pre;
    grads.tensor(slots.b_in).row(0) += grad_pre.colwise().sum();
    Matrix grad_c = grad_sum + grad_pre * params.tensor(slots.w_in).transpose();

    // Cross sub-layer: c = LN(s + cross(s, memory)).
    Matrix grad_s;
    if (slots.cross) {
      Matrix grad_sum2 = layer_norm_backward(grad_c, bt.cross_norm, params.tensor(slots.cross_norm->gain),
                                             grads.tensor(slots.cross_norm->gain),
                                             grads.tensor(slots.cross_norm->bias));
      const auto g = attention_backward(grad_sum2, bt.self_out, tape.cross_stream, bt.cross_attention,
                                        attention_weights(params, *slots.cross), *slots.cross, cfg.n_heads, grads);
      grad_s = grad_sum2 + g.query_src;
      if (need_stream_grads) grad_cross_stream += g.kv_src;
    } else {
      grad_s = std::move(grad_c);
    }

    // Self sub-layer: s = LN(x + self(x, kv)), kv = x unless re-reading the raw stream.
    const bool kv_from_stream = bi > 0 && cfg.reread_self_input;
    const Matrix& self_kv = kv_from_stream ? tape.self_stream : bt.input;
    Matrix grad_sum1 = layer_norm_backward(grad_s, bt.self_norm, params.tensor(slots.self_norm.gain),
                                           grads.tensor(slots.self_norm.gain), grads.tensor(slots.self_norm.bias));
    const auto g = attention_backward(grad_sum1, bt.input, self_kv, bt.self_attention,
                                      attention_weights(params, slots.self), slots.self, cfg.n_heads, grads);
    Matrix grad_x = grad_sum1 + g.query_src;
    if (kv_from_stream) {
      if (need_stream_grads) grad_self_stream += g.kv_src;
    } else {
      grad_x += g.kv_src;
    }

    if (bi == 0) {
      if (need_stream_grads) grad_self_stream += grad_x;
    } else {
      grad_y = std::move(grad_x);
    }
  }

  if (need_stream_grads) {
    const bool a_to_u = cfg.connection_mode == ConnectionMode::AToU;
    const Matrix& self_raw = a_to_u ? tape.align_states : tape.uniform_states;
    const Matrix& cross_raw = a_to_u ? tape.uniform_states : tape.align_states;
    reduction_backward(grad_self_stream, self_raw, *tape.self_reduction, params, grads);
    if (tape.cross_reduction) {
      reduction_backward(grad_cross_stream, cross_raw, *tape.cross_reduction, params, grads);
    }
  }
}

TunerGradients tuner_backward(const ForwardTape& tape, const TunerParams& params, const Matrix& grad_output) {
  TunerGradients grads(params);
  tuner_backward_into(tape, params, grad_output, grads);
  return grads;
}

TunerGradients tuner_backward(const ForwardTape& tape, const TunerParams& params,
                              std::span<const double> grad_pooled) {
  if (static_cast<Eigen::Index>(grad_pooled.size()) != tape.output.cols()) {
    throw ConfigError("pooled gradient width does not match tuner output");
  }
  if (tape.pooled_count == 0) {
    throw ConfigError("forward tape has no unmasked positions");
  }
  Matrix grad_output = Matrix::Zero(tape.output.rows(), tape.output.cols());
  const ConstRowVectorMap g(grad_pooled.data(), static_cast<Eigen::Index>(grad_pooled.size()));
  const double inv = 1.0 / static_cast<double>(tape.pooled_count);
  for (Eigen::Index t = 0; t < grad_output.rows(); ++t) {
    if (tape.mask[static_cast<std::size_t>(t)]) grad_output.row(t) = g * inv;
  }
  return tuner_backward(tape, params, grad_output);
}

}  // namespace lmort
