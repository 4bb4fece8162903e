// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Single-stream pre-norm transformer over concatenated text and patch
// tokens.
//
//   text:   [t_class; ids → T] + T_pos                 (class slot at 0)
//   image:  [v_class; patches · V + b] + V_pos          (grid interpolated)
//   z0    = [text + t_type; image + v_type]
//   block:  ẑ = MSA(LN(z)) + z;  z' = MLP(LN(ẑ)) + ẑ
//   pooled: tanh(LN_final(z)[0] · W_pool + b_pool)
//
// Every public value-level operation is implemented on top of the
// graph-level builders so that training and inference share one code path.

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilt/autodiff.hpp"
#include "vilt/common.hpp"
#include "vilt/image.hpp"
#include "vilt/text.hpp"

namespace vilt::model {

using ad::Parameter;
using ad::Tape;
using ad::Var;

struct ModelConfig {
  int hidden = 768;
  int depth = 12;
  int heads = 12;
  int mlp = 3072;
  int patch = 32;
  int channels = 3;
  int vocab_size = 30522;
  /// Text positions including the class slot (rows of T_pos).
  int max_text_len = 40;
  /// Upper bound on kept patches per image.
  int max_patches = 200;
  /// Pretrained visual position grid (h0, w0).
  int pos_grid_rows = 12;
  int pos_grid_cols = 12;
  double ln_eps = 1e-6;
  double dropout = 0.0;
  bool final_ln = true;
  /// Per-channel input normalization (x − mean) / std applied to patch
  /// pixels before the projection. Identity by default.
  std::array<double, 3> pixel_mean = {0.0, 0.0, 0.0};
  std::array<double, 3> pixel_std = {1.0, 1.0, 1.0};

  /// 768-wide, 12-layer, 32-pixel-patch preset.
  static ModelConfig base();
  /// Gradient-check scale: H=8, D=2, two heads.
  static ModelConfig tiny();
  /// Desk-scale training preset for 64×64 synthetic scenes.
  static ModelConfig desk();

  /// Throws UserError when an invariant does not hold.
  void validate() const;
  [[nodiscard]] int head_dim() const { return hidden / heads; }
  [[nodiscard]] int patch_dim() const { return patch * patch * channels; }

  [[nodiscard]] nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Parameter ln1_gamma, ln1_beta;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gamma, ln2_beta;
  Parameter w1, b1, w2, b2;
};

class Weights {
 public:
  explicit Weights(const ModelConfig& cfg);
  Weights(const Weights&) = delete;
  Weights& operator=(const Weights&) = delete;
  Weights(Weights&&) = default;
  Weights& operator=(Weights&&) = default;

  /// Truncated normal (std 0.02, ±2σ) for matrices and class/type/position
  /// vectors; zeros for biases; ones/zeros for LN.
  void init(Rng& rng);

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  /// Stable construction order; names are unique.
  [[nodiscard]] std::vector<Parameter*> parameters();
  [[nodiscard]] std::vector<const Parameter*> parameters() const;
  /// Names of the text embedder tensors (T, T_pos, t_class).
  static bool is_text_embedder(const std::string& name);

  Parameter text_embed;      // [|V|, H]
  Parameter text_pos;        // [max_text_len, H]
  Parameter text_class;      // [1, H]
  Parameter patch_proj;      // [P²C, H]
  Parameter patch_bias;      // [1, H]
  Parameter vis_pos_grid;    // [h0·w0, H]
  Parameter vis_pos_class;   // [1, H]
  Parameter vis_class;       // [1, H]
  Parameter text_type;       // [1, H]
  Parameter vis_type;        // [1, H]
  std::vector<LayerWeights> layers;
  Parameter final_gamma, final_beta;
  Parameter pool_w, pool_b;

 private:
  ModelConfig cfg_;
};

/// Fills `p` from a truncated normal N(0, std²) restricted to ±2·std.
void truncated_normal(Parameter& p, Rng& rng, double std = 0.02);

// ---- graph-level builders ---------------------------------------------------

/// Output of one sample's forward graph.
struct SampleGraph {
  Var sequence;                 // [S, H] after the final LN (if enabled)
  Var pooled;                   // [1, H]
  std::vector<bool> attn_mask;  // [S]
  int text_len = 0;             // L (incl. class slot); visual class at L
  /// Patch row feeding each visual token slot (after the visual class
  /// slot); −1 for padding slots.
  std::vector<int> visual_source;
};

/// [L, H]: row 0 is t_class, rows ≥ 1 are T[id]; T_pos[0..L) added.
Var embed_text_graph(Tape& tape, Weights& w, std::span<const int> ids);

/// [slots + 1, H]: row 0 is v_class + V_pos_class, then one row per kept
/// patch (projection + interpolated V_pos), then zero padding rows.
/// `visual_source` receives the patch row index per slot.
Var embed_image_graph(Tape& tape, Weights& w, const image::PatchBatch& pb, std::size_t slots,
                      std::vector<int>* visual_source);

/// Pre-norm encoder block; throws Error naming `layer_index` when an
/// activation becomes non-finite.
Var encoder_block_graph(Var z, LayerWeights& lw, const ModelConfig& cfg, const std::vector<bool>& key_mask,
                        int layer_index, Rng* dropout_rng);

/// tanh(z[0] · W_pool + b).
Var pool_graph(Var z, Weights& w);

/// Full sample forward. `text_ids`/`text_mask` are one padded row;
/// `visual_slots` pads the visual part to a batch-wide length.
/// `dropout_rng` null disables dropout.
SampleGraph forward_sample(Tape& tape, Weights& w, std::span<const int> text_ids, const std::vector<bool>& text_mask,
                           const image::PatchBatch& pb, std::size_t visual_slots, Rng* dropout_rng = nullptr);

// ---- value-level operations ---------------------------------------------------

/// Batch of per-sample [S, H] sequences.
struct SequenceState {
  std::vector<Matrix> z;
  /// Index of the visual class slot (= text length incl. class slot).
  int modality_split = 0;
  BoolMatrix attn_mask;  // [B, S]
};

/// Kept-patch count padded across a batch.
std::size_t visual_slots(std::span<const image::PatchBatch> patches);

std::vector<Matrix> embed_text(const text::TokenBatch& tokens, Weights& w);
std::vector<Matrix> embed_image(std::span<const image::PatchBatch> patches, Weights& w);
SequenceState fuse(const std::vector<Matrix>& text_emb, const std::vector<Matrix>& image_emb,
                   const text::TokenBatch& tokens, std::span<const image::PatchBatch> patches, Weights& w);
SequenceState encoder_block(const SequenceState& state, LayerWeights& lw, const ModelConfig& cfg, int layer_index = 0);
/// Applies the final LN (when configured) to every sample.
SequenceState final_norm(const SequenceState& state, Weights& w);
Matrix pool(const SequenceState& state, Weights& w);

struct ForwardOutput {
  SequenceState state;
  Matrix pooled;  // [B, H]
};

ForwardOutput forward(const text::TokenBatch& tokens, std::span<const image::PatchBatch> patches, Weights& w);

}  // namespace vilt::model
