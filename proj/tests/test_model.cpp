// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"
#include "vilt/model.hpp"

namespace vilt::model {
namespace {

using testing::random_image;
using testing::tiny_vocab;

class TinyModel : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng = derive_rng(5, {});
    w.init(rng);
  }
  ModelConfig cfg = ModelConfig::tiny();
  Weights w{cfg};
  text::Vocabulary vocab = tiny_vocab();
};

TEST_F(TinyModel, SequenceLayoutAndShapes) {
  Rng rng = derive_rng(1, {});
  const auto row = text::tokenize("a red square", vocab, 8);
  const std::vector<bool> mask(row.ids.size(), true);
  auto pb = image::sample_patches(image::patchify(random_image(8, 12, rng), 4), 4, rng);
  Tape tape;
  const auto g = forward_sample(tape, w, row.ids, mask, pb, 6);
  EXPECT_EQ(g.text_len, 5);
  // text + visual class + 6 slots
  EXPECT_EQ(g.sequence.rows(), 5 + 1 + 6);
  EXPECT_EQ(g.sequence.cols(), cfg.hidden);
  EXPECT_EQ(g.pooled.rows(), 1);
  ASSERT_EQ(g.visual_source.size(), 6U);
  EXPECT_EQ(g.visual_source[4], -1);
  EXPECT_FALSE(g.attn_mask[5 + 1 + 4]);
  EXPECT_TRUE(g.attn_mask[5]);
  const auto kept = pb.kept_indices();
  for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(g.visual_source[s], kept[s]);
}

TEST_F(TinyModel, PaddingDoesNotChangeRealPositions) {
  Rng rng = derive_rng(2, {});
  const auto row = text::tokenize("a red square", vocab, 8);
  const auto pb = image::patchify(random_image(8, 8, rng), 4);

  Tape t1;
  const auto a = forward_sample(t1, w, row.ids, std::vector<bool>(row.ids.size(), true), pb, pb.kept());
  auto padded = row.ids;
  padded.push_back(vocab.specials().pad);
  padded.push_back(vocab.specials().pad);
  std::vector<bool> pmask(padded.size(), true);
  pmask[5] = pmask[6] = false;
  Tape t2;
  const auto b = forward_sample(t2, w, padded, pmask, pb, pb.kept() + 3);

  EXPECT_LT((a.pooled.value() - b.pooled.value()).cwiseAbs().maxCoeff(), 1e-12);
  for (int r = 0; r < 5; ++r) {
    EXPECT_LT((a.sequence.value().row(r) - b.sequence.value().row(r)).cwiseAbs().maxCoeff(), 1e-12);
  }
  // Visual rows shift by the two padded text slots.
  for (Eigen::Index r = 5; r < a.sequence.rows(); ++r) {
    EXPECT_LT((a.sequence.value().row(r) - b.sequence.value().row(r + 2)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST_F(TinyModel, BatchedValuePathMatchesGraphPath) {
  Rng rng = derive_rng(3, {});
  std::vector<text::TokenRow> rows = {text::tokenize("a red square above the blue triangle", vocab, 8),
                                      text::tokenize("green circle", vocab, 8)};
  const auto tokens = text::make_batch(rows, vocab);
  std::vector<image::PatchBatch> pbs = {image::patchify(random_image(8, 12, rng), 4),
                                        image::sample_patches(image::patchify(random_image(8, 8, rng), 4), 3, rng)};
  const auto out = forward(tokens, pbs, w);
  ASSERT_EQ(out.pooled.rows(), 2);
  const std::size_t slots = visual_slots(pbs);
  EXPECT_EQ(slots, 6U);
  for (int b = 0; b < 2; ++b) {
    std::vector<int> ids(tokens.ids.row(b).data(), tokens.ids.row(b).data() + tokens.length());
    std::vector<bool> mask(static_cast<std::size_t>(tokens.length()));
    for (Eigen::Index j = 0; j < tokens.length(); ++j) mask[static_cast<std::size_t>(j)] = tokens.attn_mask(b, j);
    Tape tape;
    const auto g = forward_sample(tape, w, ids, mask, pbs[static_cast<std::size_t>(b)], slots);
    EXPECT_LT((g.pooled.value() - out.pooled.row(b)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((g.sequence.value() - out.state.z[static_cast<std::size_t>(b)]).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(out.state.modality_split, static_cast<int>(tokens.length()));
}

TEST_F(TinyModel, OutputDependsOnBothModalities) {
  Rng rng = derive_rng(4, {});
  const auto row = text::tokenize("a red square", vocab, 8);
  const std::vector<bool> mask(row.ids.size(), true);
  const auto p1 = image::patchify(random_image(8, 8, rng), 4);
  const auto p2 = image::patchify(random_image(8, 8, rng), 4);
  Tape t;
  const Matrix a = forward_sample(t, w, row.ids, mask, p1, 4).pooled.value();
  const Matrix b = forward_sample(t, w, row.ids, mask, p2, 4).pooled.value();
  const auto other = text::tokenize("a blue circle", vocab, 8);
  const std::vector<bool> other_mask(other.ids.size(), true);
  const Matrix c = forward_sample(t, w, other.ids, other_mask, p1, 4).pooled.value();
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_GT((a - c).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Weights, InitAndNaming) {
  const auto cfg = ModelConfig::desk();
  Weights w(cfg);
  Rng rng = derive_rng(0, {});
  w.init(rng);
  std::set<std::string> names;
  for (const Parameter* p : w.parameters()) {
    EXPECT_TRUE(names.insert(p->name).second) << p->name;
    EXPECT_TRUE(p->value.allFinite());
  }
  EXPECT_EQ(w.patch_proj.value.rows(), cfg.patch_dim());
  EXPECT_EQ(w.vis_pos_grid.value.rows(), cfg.pos_grid_rows * cfg.pos_grid_cols);
  // Truncation at two standard deviations.
  EXPECT_LE(w.patch_proj.value.cwiseAbs().maxCoeff(), 0.04 + 1e-15);
  EXPECT_NEAR(w.patch_proj.value.array().square().mean(), 0.02 * 0.02 * 0.774, 0.02 * 0.02 * 0.05);
  EXPECT_TRUE((w.patch_bias.value.array() == 0.0).all());
  EXPECT_TRUE((w.layers[0].ln1_gamma.value.array() == 1.0).all());
  EXPECT_FALSE(w.patch_bias.decay);
  EXPECT_TRUE(w.patch_proj.decay);
  EXPECT_TRUE(Weights::is_text_embedder(w.text_embed.name));
  EXPECT_TRUE(Weights::is_text_embedder(w.text_pos.name));
  EXPECT_TRUE(Weights::is_text_embedder(w.text_class.name));
  EXPECT_FALSE(Weights::is_text_embedder(w.patch_proj.name));
}

TEST(ModelConfigJson, RoundTripAndValidation) {
  auto cfg = ModelConfig::desk();
  cfg.dropout = 0.1;
  EXPECT_EQ(ModelConfig::from_json(cfg.to_json()), cfg);
  auto bad = ModelConfig::tiny();
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), UserError);
  bad = ModelConfig::tiny();
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), UserError);
  auto j = ModelConfig::tiny().to_json();
  j["hidden"] = "wide";
  EXPECT_THROW(ModelConfig::from_json(j), UserError);
}

TEST(Model, TooLongTextIsRejected) {
  const auto cfg = ModelConfig::tiny();
  Weights w(cfg);
  Rng rng = derive_rng(0, {});
  w.init(rng);
  const std::vector<int> ids(static_cast<std::size_t>(cfg.max_text_len) + 1, 5);
  const auto pb = image::patchify(random_image(8, 8, rng), 4);
  Tape t;
  EXPECT_THROW(forward_sample(t, w, ids, std::vector<bool>(ids.size(), true), pb, 4), UserError);
}

}  // namespace
}  // namespace vilt::model
