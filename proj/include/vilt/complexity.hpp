// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Closed-form parameter and FLOP accounting, and a forward-pass latency
// micro-benchmark.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vilt/model.hpp"

namespace vilt::complexity {

inline constexpr std::string_view kConvention =
    "FLOPs = 2 x multiply-accumulates of the dense products (patch projection, QKV/output projections, "
    "attention scores and mixing, MLP, pooler, ITM head); softmax, LayerNorm, GELU, bias and residual adds "
    "are not counted. Sequence length S = visual + text tokens + 2 class tokens.";

struct Component {
  std::string name;
  std::uint64_t count = 0;
};

struct Latency {
  double median_ms = 0.0;
  double mean_ms = 0.0;
  int reps = 0;
  int warmup = 0;
  std::size_t n_visual = 0;
  std::size_t n_text = 0;
  std::string hardware;
};

struct CostReport {
  std::vector<Component> params;
  std::uint64_t total_params = 0;
  bool text_embedder_included = false;
  bool pretrain_heads_included = false;

  std::vector<Component> flops;
  std::uint64_t total_flops = 0;
  std::size_t n_visual = 0;
  std::size_t n_text = 0;

  std::string convention = std::string(kConvention);
  std::optional<Latency> latency;

  [[nodiscard]] const Component* find_param(std::string_view name) const;
  [[nodiscard]] const Component* find_flops(std::string_view name) const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Human-readable two-column table.
  [[nodiscard]] std::string table() const;
};

/// Per-component counts: text_embedder (when included), patch_projection,
/// visual_position, visual_class, type_embeddings, encoder.attention,
/// encoder.mlp, encoder.layernorm, final_layernorm, pooler, and the
/// pre-training heads when requested.
CostReport count_params(const model::ModelConfig& cfg, bool include_text_embedder = false,
                        bool include_pretrain_heads = false);

/// FLOP breakdown for one forward pass at the given token counts.
CostReport count_flops(const model::ModelConfig& cfg, std::size_t n_visual, std::size_t n_text);

/// Element count of instantiated tensors (same inclusion rule).
std::uint64_t tensor_param_count(const model::Weights& w, bool include_text_embedder = false);

/// CPU model and thread count as reported by the OS.
std::string hardware_string();

/// Median/mean wall time of a single-sample forward pass with `n_visual`
/// patches and `n_text` text positions (class slot included), after
/// `warmup` discarded runs.
Latency bench_latency(const model::ModelConfig& cfg, std::size_t n_visual, std::size_t n_text, int reps,
                      int warmup = 1);

}  // namespace vilt::complexity
