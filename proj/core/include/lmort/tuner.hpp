// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmort/linalg.hpp"
#include "lmort/space_analysis.hpp"

namespace lmort {

/// Which selected backbone layer feeds the self sub-layer.
///   AToU: self attention reads the alignment layer, cross attention the uniformity layer.
///   UToA: the roles are swapped.
enum class ConnectionMode : std::uint8_t { AToU = 0, UToA = 1 };

std::string_view to_string(ConnectionMode mode);
/// Accepts "a2u" / "u2a" (case-insensitive). Throws ConfigError otherwise.
ConnectionMode parse_connection_mode(std::string_view text);

/// Two-layer per-token MLP shrinking backbone states before the blocks.
struct ReductionConfig {
  std::uint32_t hidden_dim = 0;
  std::uint32_t out_dim = 0;

  friend bool operator==(const ReductionConfig&, const ReductionConfig&) = default;
};

struct TunerConfig {
  std::uint32_t n_blocks = 3;
  std::uint32_t d_model = 64;  // ignored when `reduction` is set (out_dim is used)
  std::uint32_t n_heads = 4;
  std::uint32_t ffn_multiplier = 4;
  ConnectionMode connection_mode = ConnectionMode::AToU;
  std::optional<ReductionConfig> reduction;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;
  // Ablation switch: false drops the cross sub-layer and its parameters.
  bool cross_attention = true;
  // Blocks >= 2 take keys/values of the self sub-layer from the raw self
  // stream; queries and the residual still chain from the previous block.
  bool reread_self_input = false;

  /// Width of every block (d_model, or reduction out_dim).
  std::uint32_t block_dim() const { return reduction ? reduction->out_dim : d_model; }
  /// Throws ConfigError for inconsistent shapes against a backbone width.
  void validate(std::size_t d_llm) const;

  friend bool operator==(const TunerConfig&, const TunerConfig&) = default;
};

struct TensorSlot {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

struct AttentionSlots {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
};

struct NormSlots {
  std::size_t gain, bias;
};

struct BlockSlots {
  AttentionSlots self;
  NormSlots self_norm;
  std::optional<AttentionSlots> cross;
  std::optional<NormSlots> cross_norm;
  std::size_t w_in, b_in, w_out, b_out;
  NormSlots ffn_norm;
};

struct ReductionSlots {
  std::size_t w1, b1, w2, b2;
};

/// Named tensors of the tuner laid out in one flat buffer. Biases and
/// layer-norm vectors are 1 x w tensors. Every tensor starts on a 64-byte
/// boundary; the zero padding between tensors is part of total_size().
class ParamLayout {
 public:
  static constexpr std::size_t kSlotAlignment = 8;

  ParamLayout(const TunerConfig& config, std::size_t d_llm);

  const std::vector<TensorSlot>& slots() const { return slots_; }
  const TensorSlot& slot(std::size_t index) const { return slots_.at(index); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t total_size() const { return total_; }

  const std::optional<ReductionSlots>& reduction() const { return reduction_; }
  const std::vector<BlockSlots>& blocks() const { return blocks_; }

 private:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);
  AttentionSlots add_attention(const std::string& prefix, Eigen::Index width);
  NormSlots add_norm(const std::string& prefix, Eigen::Index width);

  std::vector<TensorSlot> slots_;
  std::size_t total_ = 0;
  std::optional<ReductionSlots> reduction_;
  std::vector<BlockSlots> blocks_;
};

/// Flat parameter buffer viewed through a ParamLayout.
class ParamBuffer {
 public:
  ParamBuffer() = default;
  explicit ParamBuffer(std::shared_ptr<const ParamLayout> layout);

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  MatrixMap tensor(std::size_t slot);
  ConstMatrixMap tensor(std::size_t slot) const;
  /// Throws ConfigError when the name is unknown.
  MatrixMap tensor(std::string_view name);
  ConstMatrixMap tensor(std::string_view name) const;

  void set_zero();

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double, Eigen::aligned_allocator<double>> values_;
};

/// All trainable weights of the tuner together with the config they belong to.
class TunerParams : public ParamBuffer {
 public:
  TunerParams(const TunerConfig& config, std::size_t d_llm);

  const TunerConfig& config() const { return config_; }
  std::size_t d_llm() const { return d_llm_; }

 private:
  TunerConfig config_;
  std::size_t d_llm_;
};

/// Gradients with the same layout as the params they were computed for.
class TunerGradients : public ParamBuffer {
 public:
  explicit TunerGradients(const TunerParams& like) : ParamBuffer(like.layout_ptr()) {}
};

/// Xavier-uniform projections, zero biases, unit layer-norm gains; seeded by config.seed.
/// Every value is f32-representable.
TunerParams init_params(const TunerConfig& config, std::size_t d_llm);

/// Closed-form parameter count. With w = block width and f = ffn_multiplier:
///   attention = 4 (w^2 + w), norm = 2 w, ffn = 2 f w^2 + f w + w
///   block     = attention + norm + [attention + norm if cross] + ffn + norm
///   reduction = d_llm h + h + h o + o
///   total     = reduction + n_blocks * block
std::size_t count_params(const TunerConfig& config, std::size_t d_llm);

/// Per-token affine -> ReLU -> affine. Throws ConfigError without a reduction.
Matrix reduce_dims(const Matrix& states, const TunerParams& params);

/// Read-only view of one attention sub-layer's projections (biases are 1 x w).
struct AttentionWeights {
  ConstMatrixMap wq, bq, wk, bk, wv, bv, wo, bo;
};
AttentionWeights attention_weights(const ParamBuffer& params, const AttentionSlots& slots);

struct AttentionCache {
  Matrix q, k, v;
  std::vector<Matrix> probs;  // one n_q x n_k matrix per head
  Matrix context;             // concatenated heads, before the output projection
};

/// Bidirectional multi-head attention with Q, K, V all projected from `x`.
/// Masked positions never act as keys. Throws DataError if all keys are masked.
Matrix self_bi_attention(const Matrix& x, std::span<const std::uint8_t> mask, const AttentionWeights& weights,
                         std::uint32_t n_heads, AttentionCache* cache = nullptr);

/// Queries from `s`, keys and values from `memory`.
Matrix cross_bi_attention(const Matrix& s, const Matrix& memory, std::span<const std::uint8_t> key_mask,
                          const AttentionWeights& weights, std::uint32_t n_heads, AttentionCache* cache = nullptr);

struct LayerNormCache {
  Matrix normalized;
  Eigen::VectorXd inv_std;
};

struct BlockTape {
  Matrix input;
  AttentionCache self_attention;
  LayerNormCache self_norm;
  Matrix self_out;
  AttentionCache cross_attention;
  LayerNormCache cross_norm;
  Matrix cross_out;
  Matrix ffn_pre;
  Matrix ffn_act;
  LayerNormCache ffn_norm;
};

struct ReductionTape {
  Matrix hidden;  // post-ReLU activations
};

/// Everything tuner_backward needs; inputs are kept so the forward can be replayed.
struct ForwardTape {
  std::vector<std::uint8_t> mask;
  Matrix align_states;    // raw H_a as given
  Matrix uniform_states;  // raw H_u as given
  Matrix self_stream;     // (reduced) stream feeding the self sub-layer
  Matrix cross_stream;    // (reduced) stream feeding the cross sub-layer
  std::optional<ReductionTape> self_reduction;
  std::optional<ReductionTape> cross_reduction;
  std::vector<BlockTape> blocks;
  Matrix output;
  std::size_t pooled_count = 0;
  std::size_t param_count = 0;
  std::size_t d_llm = 0;
};

struct ForwardResult {
  Matrix output;  // H_o, n x block_dim
  ForwardTape tape;
};

/// Runs the stacked tuner over two frozen backbone layers.
/// Throws ConfigError on shape mismatch and NumericError naming the
/// sub-layer that produced a non-finite value.
ForwardResult tuner_forward(const Matrix& align_states, const Matrix& uniform_states,
                            std::span<const std::uint8_t> mask, const TunerParams& params);

/// Mean of H_o over unmasked positions, not normalized.
RepVector encode(const Matrix& align_states, const Matrix& uniform_states, std::span<const std::uint8_t> mask,
                 const TunerParams& params);

/// Parameter gradients for an upstream gradient on H_o (n x block_dim).
/// Only parameters receive gradients; the API has no route to the backbone states.
TunerGradients tuner_backward(const ForwardTape& tape, const TunerParams& params, const Matrix& grad_output);

/// Same, for an upstream gradient on the pooled vector.
TunerGradients tuner_backward(const ForwardTape& tape, const TunerParams& params, std::span<const double> grad_pooled);

/// Accumulating form used by training: adds into `grads`.
void tuner_backward_into(const ForwardTape& tape, const TunerParams& params, const Matrix& grad_output,
                         TunerGradients& grads);

}  // namespace lmort
