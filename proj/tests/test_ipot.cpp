// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "helpers.hpp"
#include "vilt/ipot.hpp"

namespace vilt::ot {
namespace {

// Assignment optimum by enumeration; with uniform marginals the optimal
// plan is a permutation scaled by 1/n.
double brute_force_optimum(const Matrix& c) {
  const auto n = static_cast<int>(c.rows());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += c(i, perm[static_cast<std::size_t>(i)]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / n;
}

TEST(Ipot, MatchesPermutationOptimumWithExactColumnMarginals) {
  Rng rng = derive_rng(17, {});
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + trial % 4;
    Matrix c(n, n);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform01(rng);
    IpotTrace trace;
    const auto tp = ipot_uniform(c, 0.5, 500, 1, &trace);
    const double opt = brute_force_optimum(c);
    const double got = (tp.plan.array() * c.array()).sum();
    EXPECT_LE(std::abs(got - opt), 0.02 * opt) << "trial " << trial << " n " << n;
    EXPECT_NEAR(tp.cost, got, 1e-12);
    ASSERT_EQ(trace.col_err_inf.size(), 500U);
    for (double e : trace.col_err_inf) ASSERT_LE(e, 1e-12);
    EXPECT_TRUE((tp.plan.array() >= 0.0).all());
  }
}

TEST(Ipot, RowMarginalsConverge) {
  Rng rng = derive_rng(3, {});
  Matrix c(4, 6);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform01(rng);
  IpotTrace trace;
  const auto tp = ipot_uniform(c, 0.5, 300, 1, &trace);
  EXPECT_LT(trace.row_err_l1.back(), 1e-3);
  EXPECT_LT(trace.row_err_l1.back(), trace.row_err_l1.front());
  EXPECT_NEAR(tp.plan.sum(), 1.0, 1e-12);
  EXPECT_EQ(tp.iters, 300);
  EXPECT_DOUBLE_EQ(tp.beta, 0.5);
}

TEST(Ipot, ConstantCostShiftLeavesPlanUnchanged) {
  Rng rng = derive_rng(4, {});
  Matrix c(3, 5);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform01(rng);
  const auto a = ipot_uniform(c, 0.5, 50);
  const auto b = ipot_uniform((c.array() + 7.0).matrix(), 0.5, 50);
  EXPECT_LT((a.plan - b.plan).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ipot, RejectsInvalidInput) {
  const Matrix c = Matrix::Ones(2, 2);
  Vector a(2);
  a << 0.5, 0.5;
  Vector bad(2);
  bad << 0.7, 0.7;
  EXPECT_THROW(ipot(c, a, bad), UserError);
  Vector zero(2);
  zero << 1.0, 0.0;
  EXPECT_THROW(ipot(c, zero, a), UserError);
  EXPECT_THROW(ipot(c, a, a, 0.0), UserError);
  Vector three(3);
  three << 0.2, 0.3, 0.5;
  EXPECT_THROW(ipot(c, a, three), UserError);
  EXPECT_THROW(ipot_uniform(Matrix(0, 3)), UserError);
}

TEST(WpaCost, CosineDistance) {
  Matrix t(2, 2);
  t << 1, 0, 0, 2;
  Matrix v(3, 2);
  v << 3, 0, 1, 1, 0, 0;
  const auto c = wpa_cost(t, v);
  EXPECT_NEAR(c(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(c(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(c(0, 1), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(c(1, 2), 1.0, 1e-15);
}

TEST(AlignmentSubsets, SkipClassAndPadding) {
  // text_len 4 with one padded text slot, then visual class and three slots.
  const std::vector<bool> mask = {true, true, true, false, true, true, true, false};
  const auto s = alignment_subsets(mask, 4);
  EXPECT_EQ(s.text_rows, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.visual_rows, (std::vector<int>{5, 6}));
}

TEST(Heatmap, ValuesAreClampedAndScattered) {
  Rng rng = derive_rng(8, {});
  for (int trial = 0; trial < 20; ++trial) {
    Matrix c(3, 6);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform01(rng);
    const auto tp = ipot_uniform(c, 0.5, 1000);
    std::vector<image::GridPos> pos;
    for (int j = 0; j < 6; ++j) pos.push_back({j / 3, j % 3});
    for (std::size_t r = 0; r < 3; ++r) {
      const auto h = heatmap_values(tp, r, 3, 3, pos);
      EXPECT_GE(h.minCoeff(), kHeatmapFloor);
      EXPECT_LE(h.maxCoeff(), kHeatmapCeil);
      // Bottom row has no kept patch.
      for (int x = 0; x < 3; ++x) EXPECT_EQ(h(2, x), kHeatmapFloor);
    }
  }
  TransportPlan tp;
  tp.plan = Matrix::Constant(2, 2, 0.25);
  const std::vector<image::GridPos> pos = {{0, 0}, {0, 1}};
  EXPECT_THROW(heatmap_values(tp, 2, 1, 2, pos), UserError);
  const std::vector<image::GridPos> outside = {{0, 0}, {1, 0}};
  EXPECT_THROW(heatmap_values(tp, 0, 1, 2, outside), UserError);
}

TEST(Heatmap, PeakedRowHitsTheCeilingAndUniformRowIsFlat) {
  TransportPlan peaked;
  peaked.plan = Matrix::Zero(1, 16);
  peaked.plan(0, 5) = 1.0;
  std::vector<image::GridPos> pos;
  for (int j = 0; j < 16; ++j) pos.push_back({j / 4, j % 4});
  const auto h = heatmap_values(peaked, 0, 4, 4, pos);
  // z of the single spike is √15 > 3.
  EXPECT_DOUBLE_EQ(h(1, 1), kHeatmapCeil);
  EXPECT_DOUBLE_EQ(h(0, 0), kHeatmapFloor);

  TransportPlan flat;
  flat.plan = Matrix::Constant(1, 16, 1.0 / 16);
  const auto hf = heatmap_values(flat, 0, 4, 4, pos);
  EXPECT_TRUE((hf.array() == kHeatmapFloor).all());
  Rng rng = derive_rng(1, {});
  const auto base = testing::random_image(16, 16, rng);
  EXPECT_EQ(render_heatmap(base, hf, 4), base);
  const auto tinted = render_heatmap(base, h, 4);
  EXPECT_NE(tinted.at(1, 5, 5), base.at(1, 5, 5));
  EXPECT_EQ(tinted.at(1, 0, 0), base.at(1, 0, 0));
}

TEST(Heatmap, PlanDumpIsReadable) {
  testing::TempDir dir("plan");
  Matrix c(2, 3);
  c << 0.1, 0.5, 0.9, 0.4, 0.2, 0.3;
  const auto tp = ipot_uniform(c, 0.5, 10);
  write_plan_json(tp, dir.path / "p.json");
  std::ifstream in(dir.path / "p.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("n").get<int>(), 2);
  EXPECT_EQ(j.at("m").get<int>(), 3);
  EXPECT_EQ(j.at("iters").get<int>(), 10);
  EXPECT_NEAR(j.at("plan").at(1).at(2).get<double>(), tp.plan(1, 2), 1e-15);
}

TEST(Entropy, UniformPlan) {
  const Matrix p = Matrix::Constant(2, 4, 1.0 / 8);
  EXPECT_NEAR(plan_entropy(p), std::log(8.0), 1e-12);
}

}  // namespace
}  // namespace vilt::ot
