// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/ipot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

namespace vilt::ot {

Matrix wpa_cost(const Matrix& text, const Matrix& vis) {
  if (text.cols() != vis.cols()) throw UserError("wpa_cost: feature widths differ");
  ad::Tape tape;
  return ad::cosine_distance(tape.constant(text), tape.constant(vis)).value();
}

namespace {

void check_marginal(const Vector& m, const char* name) {
  if (m.size() == 0) throw UserError(fmt::format("ipot: {} marginal is empty", name));
  if ((m.array() <= 0.0).any()) throw UserError(fmt::format("ipot: {} marginal must be strictly positive", name));
  if (std::abs(m.sum() - 1.0) > 1e-9) throw UserError(fmt::format("ipot: {} marginal must sum to 1", name));
}

}  // namespace

TransportPlan ipot(const Matrix& cost, const Vector& a, const Vector& b, double beta, int iters, int inner,
                   IpotTrace* trace) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  check_marginal(a, "row");
  check_marginal(b, "column");
  if (a.size() != n || b.size() != m) throw UserError("ipot: marginal sizes do not match the cost matrix");
  if (!(beta > 0.0)) throw UserError("ipot: beta must be positive");
  if (iters < 0 || inner < 1) throw UserError("ipot: iteration counts must be non-negative (inner ≥ 1)");
  if (!cost.allFinite()) throw UserError("ipot: cost matrix must be finite");

  const Matrix kernel = (-(cost.array() - cost.minCoeff()) / beta).exp().matrix();
  Matrix plan = Matrix::Constant(n, m, 1.0 / static_cast<double>(n * m));
  Vector sigma = Vector::Constant(m, 1.0 / static_cast<double>(m));
  Vector delta(n);
  for (int it = 0; it < iters; ++it) {
    const Matrix q = (kernel.array() * plan.array()).matrix();
    for (int k = 0; k < inner; ++k) {
      delta = (a.array() / (q * sigma).array()).matrix();
      sigma = (b.array() / (q.transpose() * delta).array()).matrix();
    }
    plan = delta.asDiagonal() * q * sigma.asDiagonal();
    if (trace) {
      trace->col_err_inf.push_back((plan.colwise().sum().transpose() - b).cwiseAbs().maxCoeff());
      trace->row_err_l1.push_back((plan.rowwise().sum() - a).cwiseAbs().sum());
    }
  }
  TransportPlan out;
  out.cost = (plan.array() * cost.array()).sum();
  out.plan = std::move(plan);
  out.a = a;
  out.b = b;
  out.iters = iters;
  out.beta = beta;
  return out;
}

TransportPlan ipot_uniform(const Matrix& cost, double beta, int iters, int inner, IpotTrace* trace) {
  if (cost.rows() == 0 || cost.cols() == 0) throw UserError("ipot: empty cost matrix");
  const Vector a = Vector::Constant(cost.rows(), 1.0 / static_cast<double>(cost.rows()));
  const Vector b = Vector::Constant(cost.cols(), 1.0 / static_cast<double>(cost.cols()));
  return ipot(cost, a, b, beta, iters, inner, trace);
}

double plan_entropy(const Matrix& plan) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < plan.size(); ++i) {
    const double p = plan.data()[i];
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// ---- WPA loss --------------------------------------------------------------------

AlignmentSubsets alignment_subsets(const std::vector<bool>& attn_mask, int text_len) {
  AlignmentSubsets s;
  for (int i = 1; i < text_len && i < static_cast<int>(attn_mask.size()); ++i) {
    if (attn_mask[static_cast<std::size_t>(i)]) s.text_rows.push_back(i);
  }
  for (int i = text_len + 1; i < static_cast<int>(attn_mask.size()); ++i) {
    if (attn_mask[static_cast<std::size_t>(i)]) s.visual_rows.push_back(i);
  }
  return s;
}

ad::Var wpa_loss_graph(const model::SampleGraph& g, double weight, int iters, const Matrix* plan_override,
                       TransportPlan* plan_out) {
  ad::Tape& tape = *g.sequence.tape();
  const auto subsets = alignment_subsets(g.attn_mask, g.text_len);
  if (subsets.text_rows.empty() || subsets.visual_rows.empty() || weight == 0.0) {
    return tape.constant(Matrix::Zero(1, 1));
  }
  ad::Var text = ad::gather_rows(g.sequence, subsets.text_rows);
  ad::Var vis = ad::gather_rows(g.sequence, subsets.visual_rows);
  ad::Var cost = ad::cosine_distance(text, vis);
  Matrix plan;
  if (plan_override) {
    if (plan_override->rows() != cost.rows() || plan_override->cols() != cost.cols()) {
      throw UserError("wpa_loss: frozen plan shape mismatch");
    }
    plan = *plan_override;
    if (plan_out) {
      plan_out->plan = plan;
      plan_out->cost = (plan.array() * cost.value().array()).sum();
    }
  } else {
    TransportPlan tp = ipot_uniform(cost.value(), kIpotBeta, iters);
    plan = tp.plan;
    if (plan_out) *plan_out = std::move(tp);
  }
  return ad::scale(ad::weighted_sum(cost, plan), weight);
}

double wpa_loss(const model::SequenceState& state, std::size_t sample, double weight, int iters) {
  if (sample >= state.z.size()) throw UserError("wpa_loss: sample index out of range");
  const Matrix& z = state.z[sample];
  std::vector<bool> mask(static_cast<std::size_t>(state.attn_mask.cols()));
  for (Eigen::Index j = 0; j < state.attn_mask.cols(); ++j) {
    mask[static_cast<std::size_t>(j)] = state.attn_mask(static_cast<Eigen::Index>(sample), j);
  }
  const auto subsets = alignment_subsets(mask, state.modality_split);
  if (subsets.text_rows.empty() || subsets.visual_rows.empty()) {
    fmt::print(stderr, "warning: wpa_loss on a degenerate subset (n={}, m={}); returning 0\n",
               subsets.text_rows.size(), subsets.visual_rows.size());
    return 0.0;
  }
  Matrix text(static_cast<Eigen::Index>(subsets.text_rows.size()), z.cols());
  Matrix vis(static_cast<Eigen::Index>(subsets.visual_rows.size()), z.cols());
  for (std::size_t i = 0; i < subsets.text_rows.size(); ++i) text.row(static_cast<Eigen::Index>(i)) = z.row(subsets.text_rows[i]);
  for (std::size_t i = 0; i < subsets.visual_rows.size(); ++i) vis.row(static_cast<Eigen::Index>(i)) = z.row(subsets.visual_rows[i]);
  return weight * ipot_uniform(wpa_cost(text, vis), kIpotBeta, iters).cost;
}

// ---- heatmap export ----------------------------------------------------------------

Matrix heatmap_values(const TransportPlan& plan, std::size_t token_index, int grid_rows, int grid_cols,
                      std::span<const image::GridPos> positions) {
  if (token_index >= static_cast<std::size_t>(plan.plan.rows())) {
    throw UserError(fmt::format("heatmap: token index {} outside [0, {})", token_index, plan.plan.rows()));
  }
  if (positions.size() != static_cast<std::size_t>(plan.plan.cols())) {
    throw UserError("heatmap: one grid position per plan column is required");
  }
  const Eigen::RowVectorXd row = plan.plan.row(static_cast<Eigen::Index>(token_index));
  const double mean = row.mean();
  const double stdev = std::sqrt((row.array() - mean).square().mean());
  Matrix values = Matrix::Constant(grid_rows, grid_cols, kHeatmapFloor);
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    const double z = stdev > 0.0 ? (row(j) - mean) / stdev : 0.0;
    const auto& gp = positions[static_cast<std::size_t>(j)];
    if (gp.row < 0 || gp.row >= grid_rows || gp.col < 0 || gp.col >= grid_cols) {
      throw UserError("heatmap: grid position outside the grid");
    }
    values(gp.row, gp.col) = std::clamp(z, kHeatmapFloor, kHeatmapCeil);
  }
  return values;
}

image::ImageTensor render_heatmap(const image::ImageTensor& base, const Matrix& values, int patch) {
  image::ImageTensor out = base;
  constexpr std::array<double, 3> kTint = {1.0, 0.25, 0.6};
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const int r = y / patch, c = x / patch;
      if (r >= values.rows() || c >= values.cols()) continue;
      const double alpha = 0.8 * (values(r, c) - kHeatmapFloor) / (kHeatmapCeil - kHeatmapFloor);
      for (int ch = 0; ch < 3; ++ch) {
        out.at(ch, y, x) = (1.0 - alpha) * base.at(ch, y, x) + alpha * kTint[static_cast<std::size_t>(ch)];
      }
    }
  }
  return out;
}

void write_plan_json(const TransportPlan& plan, const std::filesystem::path& path) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < plan.plan.rows(); ++i) {
    rows.push_back(std::vector<double>(plan.plan.row(i).data(), plan.plan.row(i).data() + plan.plan.cols()));
  }
  nlohmann::json j = {{"n", plan.plan.rows()},
                      {"m", plan.plan.cols()},
                      {"beta", plan.beta},
                      {"iters", plan.iters},
                      {"cost", plan.cost},
                      {"a", std::vector<double>(plan.a.data(), plan.a.data() + plan.a.size())},
                      {"b", std::vector<double>(plan.b.data(), plan.b.data() + plan.b.size())},
                      {"plan", rows}};
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << '\n';
}

}  // namespace vilt::ot
