// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

namespace vilt::text {

using nlohmann::json;

Vocabulary::Vocabulary(std::vector<std::string> tokens, Specials specials)
    : tokens_(std::move(tokens)), specials_(specials) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw UserError(fmt::format("duplicate vocabulary token '{}'", tokens_[i]));
    }
  }
  for (int id : {specials_.pad, specials_.unk, specials_.cls, specials_.sep, specials_.mask}) {
    if (id < 0 || id >= size()) throw UserError(fmt::format("special token id {} out of range", id));
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError(fmt::format("cannot open vocabulary '{}'", path.string()));
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  auto sidecar_path = path;
  sidecar_path += ".json";
  std::ifstream side(sidecar_path);
  if (!side) throw UserError(fmt::format("cannot open vocabulary sidecar '{}'", sidecar_path.string()));
  const json spec = json::parse(side);
  auto lookup = [&](const char* key) {
    const auto tok = spec.at(key).get<std::string>();
    auto it = std::find(tokens.begin(), tokens.end(), tok);
    if (it == tokens.end()) throw UserError(fmt::format("special '{}' ({}) not in vocabulary", key, tok));
    return static_cast<int>(it - tokens.begin());
  };
  Specials s{lookup("pad"), lookup("unk"), lookup("cls"), lookup("sep"), lookup("mask")};
  return Vocabulary(std::move(tokens), s);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write vocabulary '{}'", path.string()));
  for (const auto& t : tokens_) out << t << '\n';
  auto sidecar_path = path;
  sidecar_path += ".json";
  std::ofstream side(sidecar_path);
  json spec = {{"pad", token(specials_.pad)},
               {"unk", token(specials_.unk)},
               {"cls", token(specials_.cls)},
               {"sep", token(specials_.sep)},
               {"mask", token(specials_.mask)}};
  side << spec.dump(2) << '\n';
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool Vocabulary::is_special(int id) const {
  return id == specials_.pad || id == specials_.unk || id == specials_.cls || id == specials_.sep ||
         id == specials_.mask;
}

std::vector<std::string> basic_split(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return words;
}

namespace {

// Greedy longest-match split of one word; falls back to [unk] for the whole
// word when any suffix cannot be matched.
std::vector<int> wordpiece(const std::string& word, const Vocabulary& vocab) {
  std::vector<int> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    std::optional<int> match;
    while (end > start) {
      std::string piece = word.substr(start, end - start);
      if (start > 0) piece = "##" + piece;
      if ((match = vocab.find(piece))) break;
      --end;
    }
    if (!match) return {vocab.specials().unk};
    pieces.push_back(*match);
    start = end;
  }
  return pieces;
}

}  // namespace

TokenRow tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw UserError("tokenize: max_len must be at least 2");
  TokenRow row;
  row.ids.push_back(vocab.specials().cls);
  row.word_ids.push_back(-1);
  const auto words = basic_split(text);
  for (std::size_t w = 0; w < words.size() && row.ids.size() < max_len; ++w) {
    for (int id : wordpiece(words[w], vocab)) {
      if (row.ids.size() >= max_len) break;
      row.ids.push_back(id);
      row.word_ids.push_back(static_cast<int>(w));
    }
  }
  return row;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_special(id) && id != vocab.specials().unk) continue;
    const std::string& tok = vocab.token(id);
    if (tok.starts_with("##")) {
      out += tok.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

TokenBatch make_batch(std::span<const TokenRow> rows, const Vocabulary& vocab) {
  std::size_t len = 1;
  for (const auto& r : rows) len = std::max(len, r.ids.size());
  const auto b = static_cast<Eigen::Index>(rows.size());
  const auto l = static_cast<Eigen::Index>(len);
  TokenBatch batch;
  batch.ids = IntMatrix::Constant(b, l, vocab.specials().pad);
  batch.word_ids = IntMatrix::Constant(b, l, -1);
  batch.attn_mask = BoolMatrix::Constant(b, l, false);
  batch.mlm_labels = IntMatrix::Constant(b, l, kIgnoreLabel);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    if (r.word_ids.size() != r.ids.size()) throw UserError("make_batch: word_ids missing");
    for (std::size_t j = 0; j < r.ids.size(); ++j) {
      batch.ids(i, static_cast<Eigen::Index>(j)) = r.ids[j];
      batch.word_ids(i, static_cast<Eigen::Index>(j)) = r.word_ids[j];
      batch.attn_mask(i, static_cast<Eigen::Index>(j)) = true;
    }
  }
  return batch;
}

namespace {

enum class Corruption { kMask, kRandom, kKeep };

Corruption draw_corruption(Rng& rng) {
  const double u = uniform01(rng);
  if (u < 0.8) return Corruption::kMask;
  if (u < 0.9) return Corruption::kRandom;
  return Corruption::kKeep;
}

int random_regular_token(const Vocabulary& vocab, Rng& rng) {
  // Vocabularies always contain at least one regular token in practice;
  // fall back to unk otherwise.
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int id = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab.size())));
    if (!vocab.is_special(id)) return id;
  }
  return vocab.specials().unk;
}

void check_mask_args(const TokenBatch& batch, double p_mask) {
  if (!(p_mask > 0.0 && p_mask < 1.0)) throw UserError(fmt::format("p_mask {} outside (0, 1)", p_mask));
  if (batch.word_ids.rows() != batch.ids.rows() || batch.word_ids.cols() != batch.ids.cols()) {
    throw UserError("masking requires word_ids");
  }
}

void apply(Corruption c, TokenBatch& out, Eigen::Index i, Eigen::Index j, const Vocabulary& vocab, Rng& rng,
           int random_id) {
  out.mlm_labels(i, j) = out.ids(i, j);
  switch (c) {
    case Corruption::kMask:
      out.ids(i, j) = vocab.specials().mask;
      break;
    case Corruption::kRandom:
      out.ids(i, j) = random_id >= 0 ? random_id : random_regular_token(vocab, rng);
      break;
    case Corruption::kKeep:
      break;
  }
}

void count(MaskStats* stats, Corruption c) {
  if (!stats) return;
  ++stats->selected;
  if (c == Corruption::kMask) ++stats->masked;
  if (c == Corruption::kRandom) ++stats->randomized;
  if (c == Corruption::kKeep) ++stats->kept;
}

bool maskable(const TokenBatch& b, const Vocabulary& vocab, Eigen::Index i, Eigen::Index j) {
  return b.attn_mask(i, j) && b.word_ids(i, j) >= 0 && !vocab.is_special(b.ids(i, j));
}

}  // namespace

TokenBatch whole_word_mask(const TokenBatch& batch, const Vocabulary& vocab, double p_mask, Rng& rng,
                           MaskStats* stats) {
  check_mask_args(batch, p_mask);
  TokenBatch out = batch;
  out.mlm_labels.setConstant(kIgnoreLabel);
  for (Eigen::Index i = 0; i < batch.batch(); ++i) {
    Eigen::Index j = 0;
    while (j < batch.length()) {
      if (!maskable(batch, vocab, i, j)) {
        ++j;
        continue;
      }
      const int word = batch.word_ids(i, j);
      Eigen::Index end = j;
      while (end < batch.length() && batch.word_ids(i, end) == word && batch.attn_mask(i, end)) ++end;
      if (stats) ++stats->words;
      if (uniform01(rng) < p_mask) {
        const Corruption c = draw_corruption(rng);
        count(stats, c);
        for (Eigen::Index k = j; k < end; ++k) {
          if (maskable(batch, vocab, i, k)) apply(c, out, i, k, vocab, rng, -1);
        }
      }
      j = end;
    }
  }
  return out;
}

TokenBatch token_mask(const TokenBatch& batch, const Vocabulary& vocab, double p_mask, Rng& rng,
                      MaskStats* stats) {
  check_mask_args(batch, p_mask);
  TokenBatch out = batch;
  out.mlm_labels.setConstant(kIgnoreLabel);
  for (Eigen::Index i = 0; i < batch.batch(); ++i) {
    for (Eigen::Index j = 0; j < batch.length(); ++j) {
      if (!maskable(batch, vocab, i, j)) continue;
      if (stats) ++stats->words;
      if (uniform01(rng) < p_mask) {
        const Corruption c = draw_corruption(rng);
        count(stats, c);
        apply(c, out, i, j, vocab, rng, -1);
      }
    }
  }
  return out;
}

std::vector<CorpusEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError(fmt::format("cannot open corpus manifest '{}'", path.string()));
  const auto base = path.parent_path();
  std::vector<CorpusEntry> entries;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
      CorpusEntry e{row.at("image").get<std::string>(), row.at("caption").get<std::string>(),
                    row.value("split", std::string("train"))};
      if (std::filesystem::path(e.image).is_relative()) e.image = (base / e.image).string();
      entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw UserError(fmt::format("{}:{}: malformed manifest row: {}", path.string(), line_no, ex.what()));
    }
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, std::span<const CorpusEntry> entries) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write manifest '{}'", path.string()));
  for (const auto& e : entries) {
    out << json{{"image", e.image}, {"caption", e.caption}, {"split", e.split}}.dump() << '\n';
  }
}

}  // namespace vilt::text
