// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "vilt/downstream.hpp"

namespace vilt::downstream {
namespace {

using testing::random_image;
using testing::tiny_vocab;

TEST(Negatives, DistinctAndExcludePositive) {
  Rng rng = derive_rng(1, {});
  std::vector<int> hits(10, 0);
  for (int t = 0; t < 3000; ++t) {
    const auto neg = sample_negatives(10, 4, 3, rng);
    ASSERT_EQ(neg.size(), 3U);
    const std::set<std::size_t> uniq(neg.begin(), neg.end());
    ASSERT_EQ(uniq.size(), 3U);
    for (auto n : neg) {
      ASSERT_NE(n, 4U);
      ASSERT_LT(n, 10U);
      hits[n] += 1;
    }
  }
  // Each of the 9 others drawn with probability 3/9.
  for (std::size_t i = 0; i < 10; ++i) {
    if (i == 4) continue;
    EXPECT_NEAR(hits[i] / 3000.0, 1.0 / 3.0, 0.04);
  }
  EXPECT_EQ(sample_negatives(4, 0, 3, rng).size(), 3U);
  EXPECT_THROW(sample_negatives(4, 0, 4, rng), UserError);
  EXPECT_THROW(sample_negatives(4, 4, 1, rng), UserError);
}

TEST(ScoreCrossEntropy, Reference) {
  const std::vector<double> s = {2.0, 1.0, 0.0};
  const double expect = -(2.0 - std::log(std::exp(2.0) + std::exp(1.0) + 1.0));
  EXPECT_NEAR(score_cross_entropy(s), expect, 1e-14);
  const std::vector<double> shifted = {1002.0, 1001.0, 1000.0};
  EXPECT_NEAR(score_cross_entropy(shifted), expect, 1e-12);
  const std::vector<double> uniform(32, 0.3);
  EXPECT_NEAR(score_cross_entropy(uniform), std::log(32.0), 1e-14);
  EXPECT_THROW(score_cross_entropy(std::span<const double>()), UserError);
}

TEST(Recall, OracleRandomAndTies) {
  RetrievalIndex oracle;
  oracle.scores = Matrix::Zero(5, 5);
  for (int i = 0; i < 5; ++i) {
    oracle.scores(i, (i + 2) % 5) = 1.0;
    oracle.ground_truth.push_back(static_cast<std::size_t>((i + 2) % 5));
  }
  EXPECT_DOUBLE_EQ(recall_at_k(oracle, 1), 1.0);

  // Random scores: expectation k / K.
  Rng rng = derive_rng(2, {});
  RetrievalIndex rnd;
  rnd.scores.resize(100, 100);
  for (Eigen::Index i = 0; i < rnd.scores.size(); ++i) rnd.scores.data()[i] = uniform01(rng);
  for (std::size_t i = 0; i < 100; ++i) rnd.ground_truth.push_back(uniform_index(rng, 100));
  const double r1 = recall_at_k(rnd, 1);
  const double r5 = recall_at_k(rnd, 5);
  const double r10 = recall_at_k(rnd, 10);
  EXPECT_NEAR(r1, 0.01, 0.02);
  EXPECT_LE(r1, r5);
  EXPECT_LE(r5, r10);
  EXPECT_NEAR(r10, 0.10, 0.08);

  // Strictly monotone transforms leave every rank unchanged.
  RetrievalIndex squashed = rnd;
  squashed.scores = rnd.scores.unaryExpr([](double v) { return std::exp(3.0 * v) - 7.0; });
  for (std::size_t k : {1, 5, 10}) EXPECT_DOUBLE_EQ(recall_at_k(squashed, k), recall_at_k(rnd, k));

  // Ties go to the earlier candidate.
  RetrievalIndex tie;
  tie.scores = Matrix::Constant(2, 3, 0.5);
  tie.ground_truth = {0, 2};
  EXPECT_DOUBLE_EQ(recall_at_k(tie, 1), 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k(tie, 3), 1.0);

  RetrievalIndex bad = tie;
  bad.ground_truth = {0};
  EXPECT_THROW(recall_at_k(bad, 1), UserError);
  bad.ground_truth = {0, 3};
  EXPECT_THROW(recall_at_k(bad, 1), UserError);
}

class TinyDownstream : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng = derive_rng(8, {});
    w.init(rng);
    heads.init(rng);
    for (int i = 0; i < 3; ++i) images.push_back(image::patchify(random_image(8, 8, rng), 4));
    for (const char* s : {"a red circle", "the blue square above", "green triangle"}) {
      texts.push_back(text::tokenize(s, vocab, 8));
    }
  }
  model::ModelConfig cfg = model::ModelConfig::tiny();
  text::Vocabulary vocab = tiny_vocab();
  model::Weights w{cfg};
  objectives::PretrainHeads heads{cfg};
  std::vector<image::PatchBatch> images;
  std::vector<text::TokenRow> texts;
};

TEST_F(TinyDownstream, SimilarityHeadStartsFromMatchedItmRow) {
  SimilarityHead sim(heads);
  EXPECT_EQ(sim.w.value, heads.itm_w.value.col(objectives::kItmMatched));
  EXPECT_EQ(sim.b.value(0, 0), heads.itm_b.value(0, objectives::kItmMatched));
  EXPECT_TRUE(sim.w.decay);
  EXPECT_FALSE(sim.b.decay);

  // The initial score is the matched ITM logit.
  const auto grid = score_grid(texts, images, w, sim);
  const std::vector<text::TokenRow> row = {texts[1]};
  const auto batch = text::make_batch(row, vocab);
  const std::vector<image::PatchBatch> one = {images[2]};
  const auto out = model::forward(batch, one, w);
  const Matrix logits = (out.pooled * heads.itm_w.value).rowwise() + heads.itm_b.value.row(0);
  EXPECT_NEAR(grid(1, 2), logits(0, objectives::kItmMatched), 1e-12);
}

TEST_F(TinyDownstream, ScoreGridThreadsMatchSerial) {
  SimilarityHead sim(heads);
  const auto a = score_grid(texts, images, w, sim, 1);
  const auto b = score_grid(texts, images, w, sim, 3);
  ASSERT_EQ(a.rows(), 3);
  ASSERT_EQ(a.cols(), 3);
  EXPECT_EQ(a, b);
}

TEST_F(TinyDownstream, RetrievalLossMatchesScoreGrid) {
  SimilarityHead sim(heads);
  const std::vector<text::TokenRow> negs = {texts[0], texts[2]};
  const double loss = retrieval_loss(texts[1], negs, images[0], w, sim, false);
  const auto grid = score_grid(texts, images, w, sim);
  const std::vector<double> s = {grid(1, 0), grid(0, 0), grid(2, 0)};
  EXPECT_NEAR(loss, score_cross_entropy(s), 1e-12);
}

TEST_F(TinyDownstream, RetrievalLossGradientMatchesFiniteDifferences) {
  SimilarityHead sim(heads);
  const std::vector<text::TokenRow> negs = {texts[0], texts[2]};
  std::vector<Parameter*> params = w.parameters();
  for (Parameter* p : sim.parameters()) params.push_back(p);
  for (Parameter* p : params) p->zero_grad();
  retrieval_loss(texts[1], negs, images[0], w, sim, true);
  const double h = 1e-5;
  double worst = 0.0;
  for (Parameter* p : params) {
    // A few coordinates per tensor keep the check fast.
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(p->value.size(), 3); ++k) {
      double& v = p->value.data()[k];
      const double keep = v;
      v = keep + h;
      const double up = retrieval_loss(texts[1], negs, images[0], w, sim, false);
      v = keep - h;
      const double down = retrieval_loss(texts[1], negs, images[0], w, sim, false);
      v = keep;
      const double fd = (up - down) / (2 * h);
      const double an = p->grad.data()[k];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST_F(TinyDownstream, ClassifierHeadsShapeAndForward) {
  auto vqa = make_vqa_head(cfg, 7);
  EXPECT_EQ(vqa.input(), cfg.hidden);
  EXPECT_EQ(vqa.hidden(), 2 * cfg.hidden);
  EXPECT_EQ(vqa.classes(), 7);
  auto pair = make_nlvr2_head(cfg);
  EXPECT_EQ(pair.input(), 2 * cfg.hidden);
  EXPECT_EQ(pair.classes(), 2);
  Rng rng = derive_rng(9, {});
  vqa.init(rng);
  pair.init(rng);
  EXPECT_TRUE((vqa.ln_gamma.value.array() == 1.0).all());
  EXPECT_TRUE((vqa.b1.value.array() == 0.0).all());
  EXPECT_GT(vqa.w1.value.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(vqa.parameters().size(), 6U);

  const auto batch = text::make_batch(texts, vocab);
  const auto out = model::forward(batch, images, w);
  EXPECT_EQ(vqa_forward(batch, images, w, vqa), vqa(out.pooled));

  // Pair logits from the concatenation of both pooled features.
  std::vector<image::PatchBatch> second = {images[2], images[0], images[1]};
  const auto out2 = model::forward(batch, second, w);
  Matrix cat(3, 2 * cfg.hidden);
  cat << out.pooled, out2.pooled;
  const Matrix expect = pair(cat);
  const Matrix got = nlvr2_forward(batch, images, second, w, pair);
  EXPECT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-12);
  const std::vector<image::PatchBatch> short_list = {images[0]};
  EXPECT_THROW(nlvr2_forward(batch, images, short_list, w, pair), UserError);
}

TEST(Report, Schema) {
  const auto j = evaluation_report("retrieval", "val", {{"ir_r1", 0.5}}, "abc", "def");
  for (const char* key : {"task", "split", "metrics", "config_hash", "checkpoint_hash", "code_version"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j.at("code_version"), kCodeVersion);
}

}  // namespace
}  // namespace vilt::downstream
