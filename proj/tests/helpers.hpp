// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "vilt/common.hpp"
#include "vilt/image.hpp"
#include "vilt/model.hpp"
#include "vilt/objectives.hpp"
#include "vilt/text.hpp"

namespace vilt::testing {

/// 20-token vocabulary matching ModelConfig::tiny().
inline text::Vocabulary tiny_vocab() {
  std::vector<std::string> t = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a",   "red",  "blue", "green", "circle",
                                "squ",   "##are", "tri",   "##angle", "above", "below", "left", "right", "and", "the"};
  return text::Vocabulary(std::move(t), text::Vocabulary::Specials{0, 1, 2, 3, 4});
}

inline image::ImageTensor random_image(int h, int w, Rng& rng) {
  image::ImageTensor img(h, w, 0.0);
  for (int c = 0; c < image::ImageTensor::kChannels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) img.at(c, y, x) = uniform01(rng);
    }
  }
  return img;
}

/// Three samples on the tiny model: a matched pair, a mismatched pair and
/// a matched pair with padding, with MLM labels and MPP targets set.
inline objectives::PretrainBatch tiny_batch(std::uint64_t seed) {
  const auto vocab = tiny_vocab();
  Rng rng = derive_rng(seed, {42});
  std::vector<text::TokenRow> rows = {text::tokenize("a red square above the blue triangle", vocab, 8),
                                      text::tokenize("green circle left", vocab, 8),
                                      text::tokenize("a blue square", vocab, 8)};
  objectives::PretrainBatch b;
  b.tokens = text::make_batch(rows, vocab);
  b.tokens.mlm_labels(0, 2) = b.tokens.ids(0, 2);
  b.tokens.ids(0, 2) = vocab.specials().mask;
  b.tokens.mlm_labels(1, 1) = b.tokens.ids(1, 1);
  b.tokens.mlm_labels(2, 3) = b.tokens.ids(2, 3);
  b.tokens.ids(2, 3) = 7;
  b.itm_label = {true, false, true};
  // 8×12 images give a 2×3 grid, so the 2×2 position grid is interpolated.
  for (int i = 0; i < 3; ++i) {
    auto pb = image::patchify(random_image(8, 12, rng), 4);
    if (i == 2) pb = image::sample_patches(pb, 4, rng);
    b.patches.push_back(pb);
  }
  objectives::clear_mpp(b);
  for (std::size_t i = 0; i < 3; ++i) objectives::mask_patches(b.patches[i], b.mpp_labels[i], b.mpp_mask[i], 0.5, rng);
  return b;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("vilt_test_" + tag + "_" + hex64(fnv1a64(tag, static_cast<std::uint64_t>(::getpid()))));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace vilt::testing
