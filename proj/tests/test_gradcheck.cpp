// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite differences against the analytic gradient of the full
// pre-training loss on the tiny model.

#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "vilt/objectives.hpp"

namespace vilt {
namespace {

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

GradCheck run_check(std::uint64_t seed, const objectives::ObjectiveFlags& flags) {
  auto cfg = model::ModelConfig::tiny();
  model::Weights w(cfg);
  objectives::PretrainHeads heads(cfg);
  Rng rng = derive_rng(seed, {1});
  w.init(rng);
  heads.init(rng);
  // Larger weights than the 0.02 init so every path carries signal.
  std::vector<ad::Parameter*> params = w.parameters();
  for (auto* p : heads.parameters()) params.push_back(p);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += noise(rng);
  }
  const auto batch = testing::tiny_batch(seed);

  std::vector<std::optional<Matrix>> plans;
  objectives::LossOptions opt;
  opt.plans_out = &plans;
  for (auto* p : params) p->zero_grad();
  objectives::pretrain_loss(batch, w, heads, flags, opt);
  std::vector<Matrix> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  objectives::LossOptions frozen;
  frozen.compute_gradients = false;
  frozen.frozen_plans = &plans;
  const double h = 1e-4;
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      const double up = objectives::pretrain_loss(batch, w, heads, flags, frozen).total;
      p->value.data()[i] = orig - h;
      const double down = objectives::pretrain_loss(batch, w, heads, flags, frozen).total;
      p->value.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return out;
}

TEST(GradCheck, FullPretrainLossAllObjectives) {
  const auto r = run_check(3, {true, true});
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 1000u);
}

TEST(GradCheck, WithoutWpaOrMpp) {
  const auto r = run_check(5, {false, false});
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

}  // namespace
}  // namespace vilt
