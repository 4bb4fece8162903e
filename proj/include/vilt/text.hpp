// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vilt/common.hpp"

namespace vilt::text {

/// Subword inventory. Line number in the vocabulary file is the id;
/// continuation pieces carry the "##" prefix.
class Vocabulary {
 public:
  struct Specials {
    int pad = 0;
    int unk = 1;
    int cls = 2;
    int sep = 3;
    int mask = 4;
  };

  Vocabulary() = default;
  /// Throws UserError on duplicate tokens or out-of-range special ids.
  Vocabulary(std::vector<std::string> tokens, Specials specials);

  /// Reads `path` (one token per line) and its JSON sidecar
  /// `path + ".json"` holding {"pad": "[PAD]", ...}.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  [[nodiscard]] std::optional<int> find(std::string_view token) const;
  [[nodiscard]] const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
  [[nodiscard]] const Specials& specials() const { return specials_; }
  [[nodiscard]] bool is_special(int id) const;
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  Specials specials_;
};

/// One tokenized caption. Position 0 is always the class slot.
struct TokenRow {
  std::vector<int> ids;
  /// Source-word index per position, −1 for specials.
  std::vector<int> word_ids;
};

/// Padded batch of token rows.
struct TokenBatch {
  IntMatrix ids;         // [B, L]
  IntMatrix word_ids;    // [B, L], −1 for specials/padding
  BoolMatrix attn_mask;  // [B, L]
  IntMatrix mlm_labels;  // [B, L], kIgnoreLabel where not predicted

  [[nodiscard]] Eigen::Index batch() const { return ids.rows(); }
  [[nodiscard]] Eigen::Index length() const { return ids.cols(); }
};

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes its own word.
std::vector<std::string> basic_split(std::string_view text);

/// Greedy longest-match WordPiece over each word of `basic_split(text)`.
/// The class token is prepended and the row truncated to `max_len`.
TokenRow tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

/// Joins pieces back into words ("gi ##raf ##fe" → "giraffe"); specials
/// are dropped.
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

/// Pads rows to a common length with the pad id; attention is true on real
/// positions and labels are all kIgnoreLabel.
TokenBatch make_batch(std::span<const TokenRow> rows, const Vocabulary& vocab);

/// Corruption outcome counts, for monitoring and statistical tests.
struct MaskStats {
  std::size_t words = 0;
  std::size_t selected = 0;
  std::size_t masked = 0;
  std::size_t randomized = 0;
  std::size_t kept = 0;
};

/// Whole-word masking: each word is selected with `p_mask`; all subwords of
/// a selected word share one 80/10/10 decision (mask / random token /
/// unchanged) and all receive labels. Throws UserError when word_ids are
/// missing or p_mask is outside (0, 1).
TokenBatch whole_word_mask(const TokenBatch& batch, const Vocabulary& vocab, double p_mask, Rng& rng,
                           MaskStats* stats = nullptr);

/// Per-subword masking (BERT original); the ablation baseline.
TokenBatch token_mask(const TokenBatch& batch, const Vocabulary& vocab, double p_mask, Rng& rng,
                      MaskStats* stats = nullptr);

// ---- corpus manifest -----------------------------------------------------

struct CorpusEntry {
  std::string image;
  std::string caption;
  std::string split;
};

/// Reads the UTF-8 JSONL manifest; relative image paths are resolved
/// against the manifest directory.
std::vector<CorpusEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const CorpusEntry> entries);

}  // namespace vilt::text
