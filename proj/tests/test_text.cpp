// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>
#include <set>

#include "helpers.hpp"
#include "vilt/synth.hpp"
#include "vilt/text.hpp"

namespace vilt::text {
namespace {

using testing::TempDir;
using testing::tiny_vocab;

TEST(BasicSplit, LowercasesAndIsolatesPunctuation) {
  const auto w = basic_split("  A Red,square?  ok ");
  const std::vector<std::string> expect = {"a", "red", ",", "square", "?", "ok"};
  EXPECT_EQ(w, expect);
  EXPECT_TRUE(basic_split("   ").empty());
}

TEST(Tokenize, WordPieceUnknownAndTruncation) {
  const auto v = tiny_vocab();
  const auto row = tokenize("A red square and a zebra", v, 16);
  // [CLS] a red squ ##are and a [UNK]
  const std::vector<int> ids = {2, 5, 6, 10, 11, 18, 5, 1};
  EXPECT_EQ(row.ids, ids);
  const std::vector<int> words = {-1, 0, 1, 2, 2, 3, 4, 5};
  EXPECT_EQ(row.word_ids, words);
  EXPECT_EQ(detokenize(row.ids, v), "a red square and a [UNK]");

  const auto cut = tokenize("a red square and a zebra", v, 4);
  EXPECT_EQ(cut.ids.size(), 4U);
  EXPECT_EQ(cut.ids[0], v.specials().cls);
}

TEST(Tokenize, ToyVocabularyCoversEveryCaption) {
  const auto v = synth::toy_vocabulary();
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng = derive_rng(s, {1});
    const auto spec = synth::random_scene(rng);
    const auto cap = synth::caption(spec, rng);
    const auto row = tokenize(cap, v, 64);
    for (int id : row.ids) EXPECT_NE(id, v.specials().unk) << cap;
    EXPECT_EQ(detokenize(row.ids, v), cap);
  }
}

TEST(Vocabulary, RejectsDuplicatesAndRoundTrips) {
  EXPECT_THROW(Vocabulary({"[PAD]", "a", "a"}, Vocabulary::Specials{0, 1, 1, 1, 1}), UserError);
  EXPECT_THROW(Vocabulary({"[PAD]", "a"}, Vocabulary::Specials{0, 1, 2, 3, 4}), UserError);
  TempDir dir("vocab");
  const auto v = tiny_vocab();
  v.save(dir.path / "vocab.txt");
  const auto back = Vocabulary::load(dir.path / "vocab.txt");
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.specials().mask, v.specials().mask);
  EXPECT_THROW(Vocabulary::load(dir.path / "missing.txt"), UserError);
}

TEST(MakeBatch, PadsAndMasks) {
  const auto v = tiny_vocab();
  std::vector<TokenRow> rows = {tokenize("a red", v, 8), tokenize("a blue square", v, 8)};
  const auto b = make_batch(rows, v);
  ASSERT_EQ(b.batch(), 2);
  ASSERT_EQ(b.length(), 5);
  EXPECT_EQ(b.ids(0, 3), v.specials().pad);
  EXPECT_FALSE(b.attn_mask(0, 3));
  EXPECT_TRUE(b.attn_mask(1, 4));
  EXPECT_EQ(b.word_ids(0, 4), -1);
  EXPECT_TRUE((b.mlm_labels.array() == kIgnoreLabel).all());
}

// Corpus of multi-piece words so that partial masking would show up.
TokenBatch long_batch(const Vocabulary& v, std::size_t rows) {
  std::vector<TokenRow> r;
  const std::string line = "a red square above the blue triangle and a green circle left right below the red square";
  for (std::size_t i = 0; i < rows; ++i) r.push_back(tokenize(line, v, 64));
  return make_batch(r, v);
}

TEST(WholeWordMask, SelectionAndCorruptionRates) {
  const auto v = tiny_vocab();
  const auto batch = long_batch(v, 1000);
  Rng rng = derive_rng(7, {});
  MaskStats st;
  const auto out = whole_word_mask(batch, v, 0.15, rng, &st);
  ASSERT_GE(st.words, 10000U);

  const double rate = static_cast<double>(st.selected) / static_cast<double>(st.words);
  EXPECT_NEAR(rate, 0.15, 0.01);
  const auto sel = static_cast<double>(st.selected);
  EXPECT_NEAR(static_cast<double>(st.masked) / sel, 0.8, 0.02);
  EXPECT_NEAR(static_cast<double>(st.randomized) / sel, 0.1, 0.02);
  EXPECT_NEAR(static_cast<double>(st.kept) / sel, 0.1, 0.02);

  // Recount from the output: every word is labeled on all pieces or none.
  std::size_t partial = 0;
  std::size_t words = 0;
  std::size_t selected = 0;
  for (Eigen::Index i = 0; i < out.batch(); ++i) {
    std::map<int, std::pair<int, int>> per_word;  // labeled, pieces
    for (Eigen::Index j = 0; j < out.length(); ++j) {
      const int w = out.word_ids(i, j);
      if (w < 0) {
        EXPECT_EQ(out.mlm_labels(i, j), kIgnoreLabel);
        EXPECT_EQ(out.ids(i, j), batch.ids(i, j));
        continue;
      }
      auto& pw = per_word[w];
      pw.second += 1;
      if (out.mlm_labels(i, j) != kIgnoreLabel) {
        pw.first += 1;
        EXPECT_EQ(out.mlm_labels(i, j), batch.ids(i, j));
      } else {
        EXPECT_EQ(out.ids(i, j), batch.ids(i, j));
      }
    }
    for (const auto& [w, pw] : per_word) {
      ++words;
      if (pw.first > 0) ++selected;
      if (pw.first > 0 && pw.first < pw.second) ++partial;
    }
  }
  EXPECT_EQ(partial, 0U);
  EXPECT_EQ(words, st.words);
  EXPECT_EQ(selected, st.selected);
}

TEST(WholeWordMask, MultiPieceWordsShareOneDecision) {
  const auto v = tiny_vocab();
  const auto batch = long_batch(v, 2000);
  Rng rng = derive_rng(11, {});
  const auto out = whole_word_mask(batch, v, 0.15, rng);
  // "square" is pieces 3, 4 of every row: both [MASK] or neither.
  for (Eigen::Index i = 0; i < out.batch(); ++i) {
    const bool m3 = out.ids(i, 3) == v.specials().mask;
    const bool m4 = out.ids(i, 4) == v.specials().mask;
    EXPECT_EQ(m3, m4);
  }
}

TEST(WholeWordMask, RejectsBadInput) {
  const auto v = tiny_vocab();
  auto batch = long_batch(v, 2);
  Rng rng = derive_rng(1, {});
  EXPECT_THROW(whole_word_mask(batch, v, 0.0, rng), UserError);
  EXPECT_THROW(whole_word_mask(batch, v, 1.0, rng), UserError);
  batch.word_ids.resize(0, 0);
  EXPECT_THROW(whole_word_mask(batch, v, 0.15, rng), UserError);
}

TEST(TokenMask, RateAndSpecialsUntouched) {
  const auto v = tiny_vocab();
  const auto batch = long_batch(v, 1000);
  Rng rng = derive_rng(3, {});
  MaskStats st;
  const auto out = token_mask(batch, v, 0.15, rng, &st);
  std::size_t pieces = 0;
  std::size_t labeled = 0;
  for (Eigen::Index i = 0; i < out.batch(); ++i) {
    for (Eigen::Index j = 0; j < out.length(); ++j) {
      if (v.is_special(batch.ids(i, j))) {
        EXPECT_EQ(out.mlm_labels(i, j), kIgnoreLabel);
        continue;
      }
      ++pieces;
      if (out.mlm_labels(i, j) != kIgnoreLabel) ++labeled;
    }
  }
  EXPECT_NEAR(static_cast<double>(labeled) / static_cast<double>(pieces), 0.15, 0.01);
  // Some multi-piece word must end up partially labeled.
  std::size_t partial = 0;
  for (Eigen::Index i = 0; i < out.batch(); ++i) {
    const bool a = out.mlm_labels(i, 3) != kIgnoreLabel;
    const bool b = out.mlm_labels(i, 4) != kIgnoreLabel;
    if (a != b) ++partial;
  }
  EXPECT_GT(partial, 0U);
}

TEST(Manifest, RoundTripAndResolution) {
  TempDir dir("manifest");
  const std::vector<CorpusEntry> entries = {{"images/a.png", "a red circle", "train"},
                                            {"images/b.png", "a blue square", "val"}};
  write_manifest(dir.path / "m.jsonl", entries);
  const auto back = read_manifest(dir.path / "m.jsonl");
  ASSERT_EQ(back.size(), 2U);
  EXPECT_EQ(back[1].caption, "a blue square");
  EXPECT_EQ(back[1].split, "val");
  EXPECT_EQ(std::filesystem::path(back[0].image), dir.path / "images/a.png");
  EXPECT_THROW(read_manifest(dir.path / "none.jsonl"), UserError);
}

}  // namespace
}  // namespace vilt::text
