// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace vilt::model {

// ---- ModelConfig ------------------------------------------------------------------

ModelConfig ModelConfig::base() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.hidden = 8;
  c.depth = 2;
  c.heads = 2;
  c.mlp = 16;
  c.patch = 4;
  c.vocab_size = 20;
  c.max_text_len = 8;
  c.max_patches = 6;
  c.pos_grid_rows = 2;
  c.pos_grid_cols = 2;
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.hidden = 64;
  c.depth = 2;
  c.heads = 4;
  c.mlp = 128;
  c.patch = 16;
  c.vocab_size = 64;
  c.max_text_len = 20;
  c.max_patches = 16;
  c.pos_grid_rows = 4;
  c.pos_grid_cols = 4;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw UserError(fmt::format("model config: {} must be ≥ 1 (got {})", name, v));
  };
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(mlp, "mlp");
  positive(patch, "patch");
  positive(channels, "channels");
  positive(vocab_size, "vocab_size");
  positive(max_text_len, "max_text_len");
  positive(max_patches, "max_patches");
  positive(pos_grid_rows, "pos_grid_rows");
  positive(pos_grid_cols, "pos_grid_cols");
  if (depth < 0) throw UserError("model config: depth must be ≥ 0");
  if (hidden % heads != 0) {
    throw UserError(fmt::format("model config: hidden {} not divisible by heads {}", hidden, heads));
  }
  if (!(ln_eps > 0.0)) throw UserError("model config: ln_eps must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UserError("model config: dropout outside [0, 1)");
  for (std::size_t c = 0; c < 3; ++c) {
    if (!std::isfinite(pixel_mean[c]) || !(pixel_std[c] > 0.0) || !std::isfinite(pixel_std[c])) {
      throw UserError("model config: pixel normalization needs finite means and positive stds");
    }
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"hidden", hidden},         {"depth", depth},
          {"heads", heads},           {"mlp", mlp},
          {"patch", patch},           {"channels", channels},
          {"vocab_size", vocab_size}, {"max_text_len", max_text_len},
          {"max_patches", max_patches}, {"pos_grid_rows", pos_grid_rows},
          {"pos_grid_cols", pos_grid_cols}, {"ln_eps", ln_eps},
          {"dropout", dropout},       {"final_ln", final_ln},
          {"pixel_mean", pixel_mean}, {"pixel_std", pixel_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (j.contains("preset")) {
      const auto preset = j.at("preset").get<std::string>();
      if (preset == "base") {
        c = base();
      } else if (preset == "tiny") {
        c = tiny();
      } else if (preset == "desk") {
        c = desk();
      } else {
        throw UserError(fmt::format("unknown model preset '{}'", preset));
      }
    }
    c.hidden = j.value("hidden", c.hidden);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp = j.value("mlp", c.mlp);
    c.patch = j.value("patch", c.patch);
    c.channels = j.value("channels", c.channels);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_text_len = j.value("max_text_len", c.max_text_len);
    c.max_patches = j.value("max_patches", c.max_patches);
    c.pos_grid_rows = j.value("pos_grid_rows", c.pos_grid_rows);
    c.pos_grid_cols = j.value("pos_grid_cols", c.pos_grid_cols);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
    c.dropout = j.value("dropout", c.dropout);
    c.final_ln = j.value("final_ln", c.final_ln);
    c.pixel_mean = j.value("pixel_mean", c.pixel_mean);
    c.pixel_std = j.value("pixel_std", c.pixel_std);
  } catch (const nlohmann::json::exception& ex) {
    throw UserError(fmt::format("model config: {}", ex.what()));
  }
  c.validate();
  return c;
}

// ---- Weights --------------------------------------------------------------------

namespace {

Parameter make(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay) {
  Parameter p;
  p.name = std::move(name);
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  p.decay = decay;
  return p;
}

}  // namespace

void truncated_normal(Parameter& p, Rng& rng, double std) {
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    double v = 0.0;
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * std);
    p.value.data()[i] = v;
  }
}

Weights::Weights(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const Eigen::Index h = cfg.hidden;
  text_embed = make("text.embed", cfg.vocab_size, h, true);
  text_pos = make("text.pos", cfg.max_text_len, h, true);
  text_class = make("text.class", 1, h, true);
  patch_proj = make("visual.proj.weight", cfg.patch_dim(), h, true);
  patch_bias = make("visual.proj.bias", 1, h, false);
  vis_pos_grid = make("visual.pos_grid", static_cast<Eigen::Index>(cfg.pos_grid_rows) * cfg.pos_grid_cols, h, true);
  vis_pos_class = make("visual.pos_class", 1, h, true);
  vis_class = make("visual.class", 1, h, true);
  text_type = make("type.text", 1, h, true);
  vis_type = make("type.visual", 1, h, true);
  layers.resize(static_cast<std::size_t>(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    auto& l = layers[static_cast<std::size_t>(i)];
    const std::string pre = fmt::format("layers.{}.", i);
    l.ln1_gamma = make(pre + "ln1.gamma", 1, h, false);
    l.ln1_beta = make(pre + "ln1.beta", 1, h, false);
    l.wq = make(pre + "attn.q.weight", h, h, true);
    l.bq = make(pre + "attn.q.bias", 1, h, false);
    l.wk = make(pre + "attn.k.weight", h, h, true);
    l.bk = make(pre + "attn.k.bias", 1, h, false);
    l.wv = make(pre + "attn.v.weight", h, h, true);
    l.bv = make(pre + "attn.v.bias", 1, h, false);
    l.wo = make(pre + "attn.out.weight", h, h, true);
    l.bo = make(pre + "attn.out.bias", 1, h, false);
    l.ln2_gamma = make(pre + "ln2.gamma", 1, h, false);
    l.ln2_beta = make(pre + "ln2.beta", 1, h, false);
    l.w1 = make(pre + "mlp.fc1.weight", h, cfg.mlp, true);
    l.b1 = make(pre + "mlp.fc1.bias", 1, cfg.mlp, false);
    l.w2 = make(pre + "mlp.fc2.weight", cfg.mlp, h, true);
    l.b2 = make(pre + "mlp.fc2.bias", 1, h, false);
    l.ln1_gamma.value.setOnes();
    l.ln2_gamma.value.setOnes();
  }
  final_gamma = make("final_ln.gamma", 1, h, false);
  final_beta = make("final_ln.beta", 1, h, false);
  final_gamma.value.setOnes();
  pool_w = make("pool.weight", h, h, true);
  pool_b = make("pool.bias", 1, h, false);
}

void Weights::init(Rng& rng) {
  for (Parameter* p : parameters()) {
    const std::string& n = p->name;
    if (n.ends_with(".gamma")) {
      p->value.setOnes();
    } else if (n.ends_with(".bias") || n.ends_with(".beta")) {
      p->value.setZero();
    } else {
      truncated_normal(*p, rng);
    }
    p->zero_grad();
  }
}

std::vector<Parameter*> Weights::parameters() {
  std::vector<Parameter*> ps = {&text_embed, &text_pos,      &text_class, &patch_proj, &patch_bias,
                                &vis_pos_grid, &vis_pos_class, &vis_class,  &text_type,  &vis_type};
  for (auto& l : layers) {
    for (Parameter* p : {&l.ln1_gamma, &l.ln1_beta, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                         &l.ln2_gamma, &l.ln2_beta, &l.w1, &l.b1, &l.w2, &l.b2}) {
      ps.push_back(p);
    }
  }
  for (Parameter* p : {&final_gamma, &final_beta, &pool_w, &pool_b}) ps.push_back(p);
  return ps;
}

std::vector<const Parameter*> Weights::parameters() const {
  auto ps = const_cast<Weights*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

bool Weights::is_text_embedder(const std::string& name) {
  return name == "text.embed" || name == "text.pos" || name == "text.class";
}

// ---- graph builders ---------------------------------------------------------------

Var embed_text_graph(Tape& tape, Weights& w, std::span<const int> ids) {
  const auto& cfg = w.config();
  if (ids.empty()) throw UserError("embed_text: a text row needs its class slot");
  if (static_cast<int>(ids.size()) > cfg.max_text_len) {
    throw UserError(fmt::format("embed_text: length {} exceeds max_text_len {}", ids.size(), cfg.max_text_len));
  }
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= cfg.vocab_size) {
      throw UserError(fmt::format("embed_text: token id {} outside [0, {})", ids[i], cfg.vocab_size));
    }
  }
  Var cls = tape.param(w.text_class);
  std::vector<Var> parts = {cls};
  if (ids.size() > 1) parts.push_back(ad::gather_rows(tape.param(w.text_embed), ids.subspan(1)));
  Var tokens = parts.size() == 1 ? cls : ad::concat_rows(parts);
  Var pos = ad::slice_rows(tape.param(w.text_pos), 0, static_cast<Eigen::Index>(ids.size()));
  return ad::add(tokens, pos);
}

Var embed_image_graph(Tape& tape, Weights& w, const image::PatchBatch& pb, std::size_t slots,
                      std::vector<int>* visual_source) {
  const auto& cfg = w.config();
  if (pb.patches.cols() != cfg.patch_dim()) {
    throw UserError(fmt::format("embed_image: patch width {} != P²·C = {}", pb.patches.cols(), cfg.patch_dim()));
  }
  const std::vector<int> kept = pb.kept_indices();
  if (kept.size() > slots) throw UserError("embed_image: more kept patches than visual slots");
  std::vector<int> source(slots, -1);
  std::copy(kept.begin(), kept.end(), source.begin());
  if (visual_source) *visual_source = source;

  Var cls = ad::add(tape.param(w.vis_class), tape.param(w.vis_pos_class));
  std::vector<Var> parts = {cls};
  if (!kept.empty()) {
    Matrix rows(static_cast<Eigen::Index>(kept.size()), pb.patches.cols());
    Matrix interp(static_cast<Eigen::Index>(kept.size()),
                  static_cast<Eigen::Index>(cfg.pos_grid_rows) * cfg.pos_grid_cols);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const auto idx = static_cast<Eigen::Index>(i);
      rows.row(idx) = pb.patches.row(kept[i]);
      const auto gp = pb.grid_pos[static_cast<std::size_t>(kept[i])];
      if (gp.row < 0 || gp.row >= pb.grid_rows || gp.col < 0 || gp.col >= pb.grid_cols) {
        throw UserError("embed_image: grid position outside the patch grid");
      }
      interp.row(idx) = image::interpolation_row(cfg.pos_grid_rows, cfg.pos_grid_cols, pb.grid_rows, pb.grid_cols,
                                                 gp.row, gp.col);
    }
    const Eigen::Index plane = static_cast<Eigen::Index>(cfg.patch) * cfg.patch;
    for (int c = 0; c < cfg.channels && c < 3; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      if (cfg.pixel_mean[ci] == 0.0 && cfg.pixel_std[ci] == 1.0) continue;
      auto block = rows.middleCols(c * plane, plane);
      block = ((block.array() - cfg.pixel_mean[ci]) / cfg.pixel_std[ci]).matrix();
    }
    Var proj = ad::linear(tape.constant(std::move(rows)), tape.param(w.patch_proj), tape.param(w.patch_bias));
    Var pos = ad::matmul(tape.constant(std::move(interp)), tape.param(w.vis_pos_grid));
    parts.push_back(ad::add(proj, pos));
  }
  if (slots > kept.size()) {
    parts.push_back(tape.constant(Matrix::Zero(static_cast<Eigen::Index>(slots - kept.size()), cfg.hidden)));
  }
  return parts.size() == 1 ? cls : ad::concat_rows(parts);
}

Var encoder_block_graph(Var z, LayerWeights& lw, const ModelConfig& cfg, const std::vector<bool>& key_mask,
                        int layer_index, Rng* dropout_rng) {
  Tape& t = *z.tape();
  Var h = ad::layer_norm(z, t.param(lw.ln1_gamma), t.param(lw.ln1_beta), cfg.ln_eps);
  Var q = ad::linear(h, t.param(lw.wq), t.param(lw.bq));
  Var k = ad::linear(h, t.param(lw.wk), t.param(lw.bk));
  Var v = ad::linear(h, t.param(lw.wv), t.param(lw.bv));
  Var attn = ad::linear(ad::attention(q, k, v, key_mask, cfg.heads), t.param(lw.wo), t.param(lw.bo));
  if (dropout_rng) attn = ad::dropout(attn, cfg.dropout, *dropout_rng);
  Var mid = ad::add(attn, z);
  Var h2 = ad::layer_norm(mid, t.param(lw.ln2_gamma), t.param(lw.ln2_beta), cfg.ln_eps);
  Var mlp = ad::linear(ad::gelu(ad::linear(h2, t.param(lw.w1), t.param(lw.b1))), t.param(lw.w2), t.param(lw.b2));
  if (dropout_rng) mlp = ad::dropout(mlp, cfg.dropout, *dropout_rng);
  Var out = ad::add(mlp, mid);
  if (!out.value().allFinite()) throw Error(fmt::format("non-finite activation in encoder layer {}", layer_index));
  return out;
}

Var pool_graph(Var z, Weights& w) {
  Tape& t = *z.tape();
  return ad::tanh(ad::linear(ad::slice_rows(z, 0, 1), t.param(w.pool_w), t.param(w.pool_b)));
}

SampleGraph forward_sample(Tape& tape, Weights& w, std::span<const int> text_ids, const std::vector<bool>& text_mask,
                           const image::PatchBatch& pb, std::size_t visual_slots, Rng* dropout_rng) {
  const auto& cfg = w.config();
  if (text_ids.size() != text_mask.size()) throw UserError("forward: text ids and mask differ in length");
  SampleGraph g;
  g.text_len = static_cast<int>(text_ids.size());
  Var text = ad::add_row(embed_text_graph(tape, w, text_ids), tape.param(w.text_type));
  Var vis = ad::add_row(embed_image_graph(tape, w, pb, visual_slots, &g.visual_source), tape.param(w.vis_type));
  const std::array<Var, 2> parts = {text, vis};
  Var z = ad::concat_rows(parts);
  g.attn_mask.assign(text_mask.begin(), text_mask.end());
  g.attn_mask.push_back(true);
  for (int src : g.visual_source) g.attn_mask.push_back(src >= 0);
  if (dropout_rng && cfg.dropout > 0.0) z = ad::dropout(z, cfg.dropout, *dropout_rng);
  for (int i = 0; i < cfg.depth; ++i) {
    z = encoder_block_graph(z, w.layers[static_cast<std::size_t>(i)], cfg, g.attn_mask, i,
                            cfg.dropout > 0.0 ? dropout_rng : nullptr);
  }
  if (cfg.final_ln) z = ad::layer_norm(z, tape.param(w.final_gamma), tape.param(w.final_beta), cfg.ln_eps);
  g.sequence = z;
  g.pooled = pool_graph(z, w);
  return g;
}

// ---- value-level operations ------------------------------------------------------------

namespace {

std::vector<int> row_ids(const text::TokenBatch& tokens, Eigen::Index b) {
  std::vector<int> ids(static_cast<std::size_t>(tokens.length()));
  for (Eigen::Index j = 0; j < tokens.length(); ++j) ids[static_cast<std::size_t>(j)] = tokens.ids(b, j);
  return ids;
}

std::vector<bool> row_mask_vec(const BoolMatrix& m, Eigen::Index b) {
  std::vector<bool> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(j)] = m(b, j);
  return out;
}

}  // namespace

std::size_t visual_slots(std::span<const image::PatchBatch> patches) {
  std::size_t slots = 0;
  for (const auto& pb : patches) slots = std::max(slots, pb.kept());
  return slots;
}

std::vector<Matrix> embed_text(const text::TokenBatch& tokens, Weights& w) {
  std::vector<Matrix> out;
  for (Eigen::Index b = 0; b < tokens.batch(); ++b) {
    Tape tape;
    const auto ids = row_ids(tokens, b);
    out.push_back(embed_text_graph(tape, w, ids).value());
  }
  return out;
}

std::vector<Matrix> embed_image(std::span<const image::PatchBatch> patches, Weights& w) {
  const std::size_t slots = visual_slots(patches);
  std::vector<Matrix> out;
  for (const auto& pb : patches) {
    Tape tape;
    out.push_back(embed_image_graph(tape, w, pb, slots, nullptr).value());
  }
  return out;
}

SequenceState fuse(const std::vector<Matrix>& text_emb, const std::vector<Matrix>& image_emb,
                   const text::TokenBatch& tokens, std::span<const image::PatchBatch> patches, Weights& w) {
  if (text_emb.size() != image_emb.size() || text_emb.size() != patches.size()) {
    throw UserError("fuse: batch sizes differ");
  }
  SequenceState s;
  s.modality_split = text_emb.empty() ? 0 : static_cast<int>(text_emb.front().rows());
  const std::size_t slots = visual_slots(patches);
  const Eigen::Index seq = s.modality_split + static_cast<Eigen::Index>(slots) + 1;
  s.attn_mask = BoolMatrix::Constant(static_cast<Eigen::Index>(text_emb.size()), seq, false);
  for (std::size_t b = 0; b < text_emb.size(); ++b) {
    const Matrix& t = text_emb[b];
    const Matrix& v = image_emb[b];
    if (t.cols() != v.cols()) throw UserError("fuse: hidden sizes differ");
    Matrix z(t.rows() + v.rows(), t.cols());
    z.topRows(t.rows()) = t.rowwise() + w.text_type.value.row(0);
    z.bottomRows(v.rows()) = v.rowwise() + w.vis_type.value.row(0);
    s.z.push_back(std::move(z));
    const auto bi = static_cast<Eigen::Index>(b);
    for (Eigen::Index j = 0; j < tokens.length(); ++j) s.attn_mask(bi, j) = tokens.attn_mask(bi, j);
    s.attn_mask(bi, s.modality_split) = true;
    const auto kept = patches[b].kept();
    for (std::size_t j = 0; j < kept; ++j) s.attn_mask(bi, s.modality_split + 1 + static_cast<Eigen::Index>(j)) = true;
  }
  return s;
}

SequenceState encoder_block(const SequenceState& state, LayerWeights& lw, const ModelConfig& cfg, int layer_index) {
  SequenceState out = state;
  for (std::size_t b = 0; b < state.z.size(); ++b) {
    Tape tape;
    const auto mask = row_mask_vec(state.attn_mask, static_cast<Eigen::Index>(b));
    out.z[b] = encoder_block_graph(tape.constant(state.z[b]), lw, cfg, mask, layer_index, nullptr).value();
  }
  return out;
}

SequenceState final_norm(const SequenceState& state, Weights& w) {
  if (!w.config().final_ln) return state;
  SequenceState out = state;
  for (auto& z : out.z) {
    Tape tape;
    z = ad::layer_norm(tape.constant(z), tape.param(w.final_gamma), tape.param(w.final_beta), w.config().ln_eps)
            .value();
  }
  return out;
}

Matrix pool(const SequenceState& state, Weights& w) {
  Matrix out(static_cast<Eigen::Index>(state.z.size()), w.config().hidden);
  for (std::size_t b = 0; b < state.z.size(); ++b) {
    Tape tape;
    out.row(static_cast<Eigen::Index>(b)) = pool_graph(tape.constant(state.z[b]), w).value().row(0);
  }
  return out;
}

ForwardOutput forward(const text::TokenBatch& tokens, std::span<const image::PatchBatch> patches, Weights& w) {
  if (tokens.batch() != static_cast<Eigen::Index>(patches.size())) throw UserError("forward: batch sizes differ");
  ForwardOutput out;
  const std::size_t slots = visual_slots(patches);
  out.pooled = Matrix(tokens.batch(), w.config().hidden);
  out.state.modality_split = static_cast<int>(tokens.length());
  const auto seq = tokens.length() + static_cast<Eigen::Index>(slots) + 1;
  out.state.attn_mask = BoolMatrix::Constant(tokens.batch(), seq, false);
  for (Eigen::Index b = 0; b < tokens.batch(); ++b) {
    Tape tape;
    const auto ids = row_ids(tokens, b);
    const auto mask = row_mask_vec(tokens.attn_mask, b);
    auto g = forward_sample(tape, w, ids, mask, patches[static_cast<std::size_t>(b)], slots);
    out.state.z.push_back(g.sequence.value());
    out.pooled.row(b) = g.pooled.value().row(0);
    for (std::size_t j = 0; j < g.attn_mask.size(); ++j) out.state.attn_mask(b, static_cast<Eigen::Index>(j)) = g.attn_mask[j];
  }
  return out;
}

}  // namespace vilt::model
