// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "helpers.hpp"
#include "vilt/objectives.hpp"
#include "vilt/synth.hpp"

namespace vilt::objectives {
namespace {

using testing::random_image;
using testing::tiny_batch;

TEST(ItmAssignment, PositiveRateAndNegativeSupport) {
  Rng rng = derive_rng(10, {});
  std::vector<std::size_t> aligned(10000);
  for (std::size_t i = 0; i < aligned.size(); ++i) aligned[i] = i % 50;
  const auto a = build_itm_assignment(aligned, 50, rng);
  std::size_t pos = 0;
  std::vector<int> hits(50, 0);
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (a.label[i]) {
      ++pos;
      EXPECT_EQ(a.image[i], aligned[i]);
    } else {
      EXPECT_NE(a.image[i], aligned[i]);
      ASSERT_LT(a.image[i], 50U);
      hits[a.image[i]] += 1;
    }
  }
  EXPECT_NEAR(static_cast<double>(pos) / 10000.0, 0.5, 0.02);
  for (int h : hits) EXPECT_GT(h, 40);
  EXPECT_THROW(build_itm_assignment(aligned, 1, rng), UserError);
}

TEST(Mpp, TargetsAreThePreMaskingMeans) {
  Rng rng = derive_rng(4, {});
  auto pb = image::patchify(random_image(16, 16, rng), 4);
  const auto before = pb;
  Matrix labels;
  std::vector<bool> mask;
  mask_patches(pb, labels, mask, 0.5, rng);
  std::size_t masked = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (mask[i]) {
      ++masked;
      const auto rgb = image::patch_mean_rgb(before, i);
      EXPECT_DOUBLE_EQ(labels(r, 0), rgb[0]);
      EXPECT_DOUBLE_EQ(labels(r, 2), rgb[2]);
      EXPECT_TRUE((pb.patches.row(r).array() == 0.0).all());
    } else {
      EXPECT_EQ(labels(r, 0), -1.0);
      EXPECT_EQ(pb.patches.row(r), before.patches.row(r));
    }
  }
  EXPECT_GT(masked, 0U);
  EXPECT_LT(masked, pb.size());
}

TEST(Losses, UntrainedLossIsNearChance) {
  auto cfg = model::ModelConfig::desk();
  const auto vocab = synth::toy_vocabulary();
  cfg.vocab_size = vocab.size();
  model::Weights w(cfg);
  PretrainHeads heads(cfg);
  Rng rng = derive_rng(0, {1});
  w.init(rng);
  heads.init(rng);

  PretrainBatch batch;
  std::vector<text::TokenRow> rows;
  std::vector<std::size_t> aligned;
  std::vector<image::ImageTensor> images;
  for (std::size_t i = 0; i < 32; ++i) {
    const auto spec = synth::random_scene(rng);
    rows.push_back(text::tokenize(synth::caption(spec, rng), vocab, static_cast<std::size_t>(cfg.max_text_len)));
    images.push_back(synth::render(spec));
    aligned.push_back(i);
  }
  batch.tokens = text::whole_word_mask(text::make_batch(rows, vocab), vocab, 0.15, rng);
  const auto itm = build_itm_assignment(aligned, images.size(), rng);
  batch.itm_label = itm.label;
  for (std::size_t i = 0; i < 32; ++i) batch.patches.push_back(image::patchify(images[itm.image[i]], cfg.patch));
  clear_mpp(batch);
  LossOptions opt;
  opt.compute_gradients = false;
  const auto r = pretrain_loss(batch, w, heads, {false, false}, opt);
  const double chance = std::log(2.0) + std::log(static_cast<double>(vocab.size()));
  EXPECT_NEAR(r.itm + r.mlm, chance, 0.2 * chance);
  EXPECT_NEAR(r.itm, std::log(2.0), 0.05);
  EXPECT_GT(r.mlm_targets, 0U);
  EXPECT_DOUBLE_EQ(r.wpa, 0.0);
  EXPECT_DOUBLE_EQ(r.total, r.itm + r.mlm);
}

class TinyObjectives : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng = derive_rng(6, {});
    w.init(rng);
    heads.init(rng);
  }
  model::ModelConfig cfg = model::ModelConfig::tiny();
  model::Weights w{cfg};
  PretrainHeads heads{cfg};
};

TEST_F(TinyObjectives, ThreadedMatchesSerial) {
  const auto batch = tiny_batch(1);
  std::vector<Parameter*> params = w.parameters();
  for (Parameter* p : heads.parameters()) params.push_back(p);
  auto run = [&](int threads) {
    for (Parameter* p : params) p->zero_grad();
    LossOptions opt;
    opt.threads = threads;
    const auto r = pretrain_loss(batch, w, heads, {true, true}, opt);
    std::vector<Matrix> grads;
    for (Parameter* p : params) grads.push_back(p->grad);
    return std::make_pair(r, grads);
  };
  const auto [r1, g1] = run(1);
  const auto [r3, g3] = run(3);
  EXPECT_NEAR(r1.total, r3.total, 1e-12);
  EXPECT_EQ(r1.itm_correct, r3.itm_correct);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    const double scale = std::max(1.0, g1[i].cwiseAbs().maxCoeff());
    EXPECT_LT((g1[i] - g3[i]).cwiseAbs().maxCoeff(), 1e-12 * scale) << params[i]->name;
  }
}

TEST_F(TinyObjectives, ReportCountsAndFlags) {
  const auto batch = tiny_batch(2);
  LossOptions opt;
  opt.compute_gradients = false;
  const auto none = pretrain_loss(batch, w, heads, {false, false}, opt);
  const auto all = pretrain_loss(batch, w, heads, {true, true}, opt);
  EXPECT_EQ(all.positives, 2U);
  EXPECT_EQ(all.mlm_targets, 3U);
  EXPECT_GT(all.mpp_targets, 0U);
  EXPECT_DOUBLE_EQ(none.mpp, 0.0);
  EXPECT_DOUBLE_EQ(none.wpa, 0.0);
  EXPECT_GT(all.wpa, 0.0);
  EXPECT_GT(all.mpp, 0.0);
  EXPECT_DOUBLE_EQ(all.itm, none.itm);
  EXPECT_DOUBLE_EQ(all.mlm, none.mlm);
  EXPECT_NEAR(all.total, all.itm + all.mlm + all.wpa + all.mpp, 1e-12);
}

TEST_F(TinyObjectives, ValueLevelItmMatchesReference) {
  Matrix pooled(2, cfg.hidden);
  pooled.setConstant(0.3);
  pooled(1, 0) = -0.7;
  const std::array<bool, 2> labels = {true, false};
  const double got = itm_loss(pooled, heads, labels);
  double expect = 0.0;
  for (int i = 0; i < 2; ++i) {
    const Eigen::RowVectorXd z = pooled.row(i) * heads.itm_w.value + heads.itm_b.value;
    const int y = labels[static_cast<std::size_t>(i)] ? kItmMatched : 1 - kItmMatched;
    expect += std::log(std::exp(z(0)) + std::exp(z(1))) - z(y);
  }
  EXPECT_NEAR(got, expect / 2.0, 1e-12);
}

}  // namespace
}  // namespace vilt::objectives
