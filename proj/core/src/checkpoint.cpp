// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/checkpoint.hpp"

#include "binary_io.hpp"
#include "lmort/error.hpp"

namespace lmort {
namespace {

constexpr std::string_view kCheckpointMagic = "LMT1";
constexpr std::string_view kOptimizerMagic = "OPT1";

void write_config(detail::BinaryWriter& out, const TunerConfig& cfg, std::size_t d_llm) {
  out.u32(cfg.n_blocks);
  out.u32(cfg.d_model);
  out.u32(cfg.n_heads);
  out.u32(cfg.ffn_multiplier);
  out.u8(static_cast<std::uint8_t>(cfg.connection_mode));
  out.u8(cfg.reduction ? 1 : 0);
  out.u32(cfg.reduction ? cfg.reduction->hidden_dim : 0);
  out.u32(cfg.reduction ? cfg.reduction->out_dim : 0);
  out.f64(cfg.layer_norm_eps);
  out.u64(cfg.seed);
  out.u8(cfg.cross_attention ? 1 : 0);
  out.u8(cfg.reread_self_input ? 1 : 0);
  out.u32(static_cast<std::uint32_t>(d_llm));
}

bool read_flag(detail::BinaryReader& in, const char* field) {
  const std::uint8_t v = in.u8();
  if (v > 1) in.fail(std::string("invalid ") + field + " flag in checkpoint");
  return v == 1;
}

}  // namespace

void save_checkpoint(const TunerParams& params, const LayerBinding& layers, const std::filesystem::path& path) {
  detail::BinaryWriter out(path, "checkpoint");
  out.magic(kCheckpointMagic);
  write_config(out, params.config(), params.d_llm());
  out.u32(layers.align_layer);
  out.u32(layers.uniform_layer);
  const auto& slots = params.layout().slots();
  out.u32(static_cast<std::uint32_t>(slots.size()));
  std::vector<float> buffer;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    out.string16(slots[i].name);
    out.u32(static_cast<std::uint32_t>(slots[i].rows));
    out.u32(static_cast<std::uint32_t>(slots[i].cols));
    const auto t = params.tensor(i);
    buffer.resize(static_cast<std::size_t>(t.size()));
    for (Eigen::Index k = 0; k < t.size(); ++k) buffer[static_cast<std::size_t>(k)] = static_cast<float>(t.data()[k]);
    out.f32_array(buffer);
  }
  out.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::BinaryReader in(path, "checkpoint");
  in.expect_magic(kCheckpointMagic, "LMT1 checkpoint");
  TunerConfig cfg;
  cfg.n_blocks = in.u32();
  cfg.d_model = in.u32();
  cfg.n_heads = in.u32();
  cfg.ffn_multiplier = in.u32();
  const std::uint8_t mode = in.u8();
  if (mode > 1) in.fail("invalid connection mode in checkpoint");
  cfg.connection_mode = static_cast<ConnectionMode>(mode);
  const bool has_reduction = read_flag(in, "reduction");
  const std::uint32_t hidden = in.u32();
  const std::uint32_t out_dim = in.u32();
  if (has_reduction) cfg.reduction = ReductionConfig{hidden, out_dim};
  cfg.layer_norm_eps = in.f64();
  cfg.seed = in.u64();
  cfg.cross_attention = read_flag(in, "cross_attention");
  cfg.reread_self_input = read_flag(in, "reread_self_input");
  const std::uint32_t d_llm = in.u32();
  LayerBinding layers;
  layers.align_layer = in.u32();
  layers.uniform_layer = in.u32();

  std::optional<TunerParams> params;
  try {
    params.emplace(cfg, d_llm);
  } catch (const ConfigError& e) {
    in.fail(std::string("invalid tuner config in checkpoint: ") + e.what());
  }
  const auto& slots = params->layout().slots();
  const std::uint32_t count = in.u32();
  if (count != slots.size()) {
    in.fail("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
            std::to_string(slots.size()));
  }
  std::vector<float> buffer;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string name = in.string16();
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    if (name != slots[i].name || rows != slots[i].rows || cols != slots[i].cols) {
      in.fail("checkpoint tensor '" + name + "' does not match expected '" + slots[i].name + "'");
    }
    buffer.resize(slots[i].size());
    in.f32_array(buffer);
    auto t = params->tensor(i);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = buffer[static_cast<std::size_t>(k)];
  }
  if (!in.at_end()) in.fail("trailing bytes after checkpoint tensors");
  return Checkpoint{std::move(*params), layers};
}

void save_optimizer_state(const OptimizerState& state, const std::filesystem::path& path) {
  if (state.first_moment.size() != state.second_moment.size()) {
    throw ConfigError("optimizer moments differ in size");
  }
  detail::BinaryWriter out(path, "optimizer state");
  out.magic(kOptimizerMagic);
  out.u64(state.step);
  out.u64(state.first_moment.size());
  out.f64_array(state.first_moment);
  out.f64_array(state.second_moment);
  out.finish();
}

OptimizerState load_optimizer_state(const std::filesystem::path& path) {
  detail::BinaryReader in(path, "optimizer state");
  in.expect_magic(kOptimizerMagic, "OPT1 optimizer state");
  OptimizerState state;
  state.step = in.u64();
  const std::uint64_t count = in.u64();
  if (count * 16 != in.remaining()) in.fail("unexpected end of optimizer state");
  state.first_moment.resize(count);
  state.second_moment.resize(count);
  in.f64_array(state.first_moment);
  in.f64_array(state.second_moment);
  return state;
}

}  // namespace lmort
