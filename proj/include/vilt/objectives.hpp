// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilt/autodiff.hpp"
#include "vilt/image.hpp"
#include "vilt/ipot.hpp"
#include "vilt/model.hpp"
#include "vilt/text.hpp"

namespace vilt::objectives {

using ad::Parameter;
using ad::Var;

/// Pre-training heads: ITM affine, two-layer MLM head, MPP regressor.
struct PretrainHeads {
  explicit PretrainHeads(const model::ModelConfig& cfg);
  PretrainHeads(const PretrainHeads&) = delete;
  PretrainHeads& operator=(const PretrainHeads&) = delete;
  PretrainHeads(PretrainHeads&&) = default;
  PretrainHeads& operator=(PretrainHeads&&) = default;

  void init(Rng& rng);
  [[nodiscard]] std::vector<Parameter*> parameters();

  Parameter itm_w, itm_b;                  // [H, 2], [1, 2]; column 1 = matched
  Parameter mlm_dense_w, mlm_dense_b;      // [H, H]
  Parameter mlm_ln_gamma, mlm_ln_beta;     // [1, H]
  Parameter mlm_decoder_w, mlm_decoder_b;  // [H, |V|]
  Parameter mpp_w, mpp_b;                  // [H, 3]
  double ln_eps = 1e-6;
};

/// Index of the "matched" class in ITM logits.
inline constexpr int kItmMatched = 1;

struct ObjectiveFlags {
  bool use_wpa = true;
  bool use_mpp = false;
  friend bool operator==(const ObjectiveFlags&, const ObjectiveFlags&) = default;
};

struct PretrainBatch {
  text::TokenBatch tokens;
  std::vector<image::PatchBatch> patches;
  std::vector<bool> itm_label;
  /// Per sample [N, 3] mean-RGB targets, −1 where not masked.
  std::vector<Matrix> mpp_labels;
  /// Per sample [N]: patch row masked for MPP.
  std::vector<std::vector<bool>> mpp_mask;

  [[nodiscard]] std::size_t size() const { return patches.size(); }
};

// ---- batch construction ------------------------------------------------------------

/// Image assignment per caption: the aligned image with probability 0.5,
/// otherwise a uniformly drawn different image.
struct ItmAssignment {
  std::vector<std::size_t> image;
  std::vector<bool> label;
};

/// `aligned[i]` is the image of caption i, `n_images` the pool size.
/// Throws UserError when fewer than two images exist.
ItmAssignment build_itm_assignment(std::span<const std::size_t> aligned, std::size_t n_images, Rng& rng,
                                   double p_keep = 0.5);

/// Selects kept patches with probability `p`; zeroes their input rows and
/// records the pre-zeroing mean RGB as the target.
void mask_patches(image::PatchBatch& pb, Matrix& labels, std::vector<bool>& mask, double p, Rng& rng);

/// Fills mpp_labels/mpp_mask with "nothing masked" for every sample.
void clear_mpp(PretrainBatch& batch);

// ---- graph pieces -------------------------------------------------------------------

Var itm_logits(Var pooled, PretrainHeads& h);
/// dense → GELU → LN → decoder.
Var mlm_logits(Var text_rows, PretrainHeads& h);
Var mpp_predictions(Var visual_rows, PretrainHeads& h);

// ---- value-level losses ----------------------------------------------------------------

/// Mean binary NLL of the ITM head over the batch.
double itm_loss(const Matrix& pooled, PretrainHeads& heads, std::span<const bool> labels);
/// Mean NLL over labeled positions; 0 when nothing is labeled. `text` is
/// one sample's [L, H] text slice with matching labels.
double mlm_loss(std::span<const Matrix> text, PretrainHeads& heads, std::span<const std::vector<int>> labels);
/// Mean squared error over masked positions and the 3 channels; 0 when
/// nothing is masked.
double mpp_loss(std::span<const Matrix> visual, PretrainHeads& heads, std::span<const Matrix> targets,
                std::span<const std::vector<bool>> mask);

// ---- aggregated pre-training loss -----------------------------------------------------------

struct LossReport {
  double itm = 0.0;
  double mlm = 0.0;
  /// Already multiplied by the WPA weight.
  double wpa = 0.0;
  double mpp = 0.0;
  double total = 0.0;
  std::size_t positives = 0;
  std::size_t mlm_targets = 0;
  std::size_t mpp_targets = 0;
  std::size_t itm_correct = 0;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct LossOptions {
  bool compute_gradients = true;
  int threads = 1;
  /// Dropout generator seed; unset disables dropout.
  std::optional<std::uint64_t> dropout_seed;
  /// Per-sample plans used instead of solving (gradient checks).
  const std::vector<std::optional<Matrix>>* frozen_plans = nullptr;
  /// Receives the plan used per sample (empty optional when none).
  std::vector<std::optional<Matrix>>* plans_out = nullptr;
  int ipot_iters = ot::kIpotIters;
};

/// total = ITM + 0.1·WPA (positives, when enabled) + MLM + MPP (when
/// enabled). Gradients are added into Parameter::grad when requested.
LossReport pretrain_loss(const PretrainBatch& batch, model::Weights& weights, PretrainHeads& heads,
                         const ObjectiveFlags& flags, const LossOptions& options = {});

}  // namespace vilt::objectives
