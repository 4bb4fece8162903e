// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Word–patch alignment via the inexact proximal point method for optimal
// transport (IPOT).

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "vilt/common.hpp"
#include "vilt/image.hpp"
#include "vilt/model.hpp"

namespace vilt::ot {

struct TransportPlan {
  Matrix plan;  // [n, m]
  Vector a;     // row marginal
  Vector b;     // column marginal
  double cost = 0.0;
  int iters = 0;
  double beta = 0.0;
};

/// Per-iteration diagnostics of one solve.
struct IpotTrace {
  std::vector<double> col_err_inf;  // |colsum(T) − b|∞
  std::vector<double> row_err_l1;   // |rowsum(T) − a|₁
};

/// c[i, j] = 1 − cos(text_i, vis_j); zero vectors count as cosine 0.
Matrix wpa_cost(const Matrix& text, const Matrix& vis);

/// IPOT with `inner` Sinkhorn sweeps per proximal step. The kernel is
/// computed as exp(−(c − min c)/β); the shift cancels in the plan.
/// Throws UserError on non-positive marginals, marginals that do not sum
/// to 1, or beta ≤ 0.
TransportPlan ipot(const Matrix& cost, const Vector& a, const Vector& b, double beta = 0.5, int iters = 50,
                   int inner = 1, IpotTrace* trace = nullptr);

/// ipot() with uniform marginals.
TransportPlan ipot_uniform(const Matrix& cost, double beta = 0.5, int iters = 50, int inner = 1,
                           IpotTrace* trace = nullptr);

/// −Σ T log T over positive entries.
double plan_entropy(const Matrix& plan);

// ---- WPA loss ------------------------------------------------------------------

inline constexpr double kWpaWeight = 0.1;
inline constexpr double kIpotBeta = 0.5;
inline constexpr int kIpotIters = 50;

/// Sequence rows entering the alignment: non-class, non-padding text rows
/// and non-class, non-padding visual rows.
struct AlignmentSubsets {
  std::vector<int> text_rows;
  std::vector<int> visual_rows;
};

AlignmentSubsets alignment_subsets(const std::vector<bool>& attn_mask, int text_len);

/// Graph version: returns weight · ⟨T, c⟩ with T solved on the current
/// features and held constant. When `plan_override` is given it is used
/// instead of solving (finite-difference checks freeze the plan this way).
/// `plan_out` receives the plan used. Degenerate subsets give a constant 0.
ad::Var wpa_loss_graph(const model::SampleGraph& g, double weight = kWpaWeight, int iters = kIpotIters,
                       const Matrix* plan_override = nullptr, TransportPlan* plan_out = nullptr);

/// Value version over one sample of a forward pass.
double wpa_loss(const model::SequenceState& state, std::size_t sample, double weight = kWpaWeight,
                int iters = kIpotIters);

// ---- heatmap export ---------------------------------------------------------------

inline constexpr double kHeatmapFloor = 1.0;
inline constexpr double kHeatmapCeil = 3.0;

/// Row `token_index` of the plan, z-normalized (std 0 → zeros) and clamped
/// to [1, 3], scattered onto a [grid_rows, grid_cols] patch grid. Cells
/// without a kept patch stay at 1.0. `positions[j]` is the grid cell of
/// plan column j. Throws UserError when the token index is out of range.
Matrix heatmap_values(const TransportPlan& plan, std::size_t token_index, int grid_rows, int grid_cols,
                      std::span<const image::GridPos> positions);

/// Overlays the heatmap on `base`: each patch tile is tinted with opacity
/// (v − 1)/2 · 0.8.
image::ImageTensor render_heatmap(const image::ImageTensor& base, const Matrix& values, int patch);

/// Raw plan dump {n, m, beta, iters, cost, a, b, plan}.
void write_plan_json(const TransportPlan& plan, const std::filesystem::path& path);

}  // namespace vilt::ot
