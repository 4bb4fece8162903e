// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <fmt/format.h>

namespace vilt::objectives {

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

PretrainHeads::PretrainHeads(const model::ModelConfig& cfg)
    : itm_w(make("heads.itm.weight", cfg.hidden, 2, true)),
      itm_b(make("heads.itm.bias", 1, 2, false)),
      mlm_dense_w(make("heads.mlm.dense.weight", cfg.hidden, cfg.hidden, true)),
      mlm_dense_b(make("heads.mlm.dense.bias", 1, cfg.hidden, false)),
      mlm_ln_gamma(make("heads.mlm.ln.gamma", 1, cfg.hidden, false)),
      mlm_ln_beta(make("heads.mlm.ln.beta", 1, cfg.hidden, false)),
      mlm_decoder_w(make("heads.mlm.decoder.weight", cfg.hidden, cfg.vocab_size, true)),
      mlm_decoder_b(make("heads.mlm.decoder.bias", 1, cfg.vocab_size, false)),
      mpp_w(make("heads.mpp.weight", cfg.hidden, 3, true)),
      mpp_b(make("heads.mpp.bias", 1, 3, false)),
      ln_eps(cfg.ln_eps) {
  mlm_ln_gamma.value.setOnes();
}

void PretrainHeads::init(Rng& rng) {
  for (Parameter* p : parameters()) {
    if (p->name.ends_with(".gamma")) {
      p->value.setOnes();
    } else if (p->name.ends_with(".bias") || p->name.ends_with(".beta")) {
      p->value.setZero();
    } else {
      model::truncated_normal(*p, rng);
    }
    p->zero_grad();
  }
}

std::vector<Parameter*> PretrainHeads::parameters() {
  return {&itm_w,         &itm_b,         &mlm_dense_w, &mlm_dense_b, &mlm_ln_gamma,
          &mlm_ln_beta,   &mlm_decoder_w, &mlm_decoder_b, &mpp_w,     &mpp_b};
}

// ---- batch construction ----------------------------------------------------------

ItmAssignment build_itm_assignment(std::span<const std::size_t> aligned, std::size_t n_images, Rng& rng,
                                   double p_keep) {
  if (n_images < 2) throw UserError("image-text matching needs at least two distinct images");
  ItmAssignment out;
  out.image.reserve(aligned.size());
  out.label.reserve(aligned.size());
  for (std::size_t own : aligned) {
    if (own >= n_images) throw UserError("aligned image index out of range");
    if (uniform01(rng) < p_keep) {
      out.image.push_back(own);
      out.label.push_back(true);
    } else {
      // Uniform over the n−1 other images.
      std::size_t other = uniform_index(rng, n_images - 1);
      if (other >= own) ++other;
      out.image.push_back(other);
      out.label.push_back(false);
    }
  }
  return out;
}

void mask_patches(image::PatchBatch& pb, Matrix& labels, std::vector<bool>& mask, double p, Rng& rng) {
  labels = Matrix::Constant(static_cast<Eigen::Index>(pb.size()), 3, -1.0);
  mask.assign(pb.size(), false);
  for (std::size_t i = 0; i < pb.size(); ++i) {
    if (!pb.keep_mask[i]) continue;
    if (uniform01(rng) >= p) continue;
    const auto rgb = image::patch_mean_rgb(pb, i);
    labels.row(static_cast<Eigen::Index>(i)) << rgb[0], rgb[1], rgb[2];
    mask[i] = true;
    pb.patches.row(static_cast<Eigen::Index>(i)).setZero();
  }
}

void clear_mpp(PretrainBatch& batch) {
  batch.mpp_labels.clear();
  batch.mpp_mask.clear();
  for (const auto& pb : batch.patches) {
    batch.mpp_labels.push_back(Matrix::Constant(static_cast<Eigen::Index>(pb.size()), 3, -1.0));
    batch.mpp_mask.emplace_back(pb.size(), false);
  }
}

// ---- graph pieces -----------------------------------------------------------------

Var itm_logits(Var pooled, PretrainHeads& h) {
  ad::Tape& t = *pooled.tape();
  return ad::linear(pooled, t.param(h.itm_w), t.param(h.itm_b));
}

Var mlm_logits(Var text_rows, PretrainHeads& h) {
  ad::Tape& t = *text_rows.tape();
  Var hidden = ad::gelu(ad::linear(text_rows, t.param(h.mlm_dense_w), t.param(h.mlm_dense_b)));
  hidden = ad::layer_norm(hidden, t.param(h.mlm_ln_gamma), t.param(h.mlm_ln_beta), h.ln_eps);
  return ad::linear(hidden, t.param(h.mlm_decoder_w), t.param(h.mlm_decoder_b));
}

Var mpp_predictions(Var visual_rows, PretrainHeads& h) {
  ad::Tape& t = *visual_rows.tape();
  return ad::linear(visual_rows, t.param(h.mpp_w), t.param(h.mpp_b));
}

// ---- value-level losses ---------------------------------------------------------------

double itm_loss(const Matrix& pooled, PretrainHeads& heads, std::span<const bool> labels) {
  if (pooled.rows() != static_cast<Eigen::Index>(labels.size())) throw UserError("itm_loss: label count mismatch");
  if (labels.empty()) return 0.0;
  ad::Tape tape;
  std::vector<int> y(labels.begin(), labels.end());
  Var logits = itm_logits(tape.constant(pooled), heads);
  return ad::cross_entropy_sum(logits, y).scalar() / static_cast<double>(labels.size());
}

double mlm_loss(std::span<const Matrix> text, PretrainHeads& heads, std::span<const std::vector<int>> labels) {
  if (text.size() != labels.size()) throw UserError("mlm_loss: batch mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < text.size(); ++b) {
    std::vector<int> rows, targets;
    for (std::size_t j = 0; j < labels[b].size(); ++j) {
      if (labels[b][j] == kIgnoreLabel) continue;
      rows.push_back(static_cast<int>(j));
      targets.push_back(labels[b][j]);
    }
    if (rows.empty()) continue;
    ad::Tape tape;
    Var logits = mlm_logits(ad::gather_rows(tape.constant(text[b]), rows), heads);
    total += ad::cross_entropy_sum(logits, targets).scalar();
    count += rows.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double mpp_loss(std::span<const Matrix> visual, PretrainHeads& heads, std::span<const Matrix> targets,
                std::span<const std::vector<bool>> mask) {
  if (visual.size() != targets.size() || visual.size() != mask.size()) throw UserError("mpp_loss: batch mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < visual.size(); ++b) {
    ad::Tape tape;
    Var pred = mpp_predictions(tape.constant(visual[b]), heads);
    total += ad::squared_error_sum(pred, targets[b], mask[b]).scalar();
    count += static_cast<std::size_t>(std::count(mask[b].begin(), mask[b].end(), true));
  }
  return count == 0 ? 0.0 : total / (3.0 * static_cast<double>(count));
}

// ---- aggregated loss ---------------------------------------------------------------------

nlohmann::json LossReport::to_json() const {
  return {{"itm", itm}, {"mlm", mlm}, {"wpa", wpa}, {"mpp", mpp}, {"total", total}};
}

namespace {

struct Normalizers {
  double batch = 1.0;
  double mlm = 0.0;
  double positives = 0.0;
  double mpp = 0.0;
};

struct SampleTerms {
  double itm = 0.0;
  double mlm = 0.0;
  double wpa = 0.0;
  double mpp = 0.0;
  bool correct = false;
};

SampleTerms run_sample(const PretrainBatch& batch, std::size_t b, std::size_t slots, model::Weights& weights,
                       PretrainHeads& heads, const ObjectiveFlags& flags, const Normalizers& norm,
                       const LossOptions& options, ad::GradientBuffer* grads,
                       std::optional<Matrix>* plan_out) {
  const auto bi = static_cast<Eigen::Index>(b);
  const auto& tokens = batch.tokens;
  std::vector<int> ids(static_cast<std::size_t>(tokens.length()));
  std::vector<bool> mask(ids.size());
  for (Eigen::Index j = 0; j < tokens.length(); ++j) {
    ids[static_cast<std::size_t>(j)] = tokens.ids(bi, j);
    mask[static_cast<std::size_t>(j)] = tokens.attn_mask(bi, j);
  }
  std::optional<Rng> dropout_rng;
  if (options.dropout_seed) dropout_rng = derive_rng(*options.dropout_seed, {b});

  ad::Tape tape;
  const auto g = model::forward_sample(tape, weights, ids, mask, batch.patches[b], slots,
                                       dropout_rng ? &*dropout_rng : nullptr);
  SampleTerms terms;
  std::vector<Var> contributions;

  // ITM
  const int label = batch.itm_label[b] ? kItmMatched : 1 - kItmMatched;
  Var logits = itm_logits(g.pooled, heads);
  const std::array<int, 1> y = {label};
  Var itm = ad::cross_entropy_sum(logits, y);
  terms.itm = itm.scalar() / norm.batch;
  const auto& lv = logits.value();
  terms.correct = (lv(0, kItmMatched) > lv(0, 1 - kItmMatched)) == batch.itm_label[b];
  contributions.push_back(ad::scale(itm, 1.0 / norm.batch));

  // MLM
  std::vector<int> rows, targets;
  for (Eigen::Index j = 0; j < tokens.length(); ++j) {
    if (tokens.mlm_labels(bi, j) == kIgnoreLabel) continue;
    rows.push_back(static_cast<int>(j));
    targets.push_back(tokens.mlm_labels(bi, j));
  }
  if (!rows.empty()) {
    Var mlm = ad::cross_entropy_sum(mlm_logits(ad::gather_rows(g.sequence, rows), heads), targets);
    terms.mlm = mlm.scalar() / norm.mlm;
    contributions.push_back(ad::scale(mlm, 1.0 / norm.mlm));
  }

  // WPA (matched pairs only)
  if (flags.use_wpa && batch.itm_label[b]) {
    const Matrix* frozen = nullptr;
    if (options.frozen_plans && b < options.frozen_plans->size() && (*options.frozen_plans)[b]) {
      frozen = &*(*options.frozen_plans)[b];
    }
    ot::TransportPlan plan;
    Var wpa = ot::wpa_loss_graph(g, ot::kWpaWeight, options.ipot_iters, frozen, &plan);
    if (plan.plan.size() > 0 && plan_out) *plan_out = plan.plan;
    terms.wpa = wpa.scalar() / norm.positives;
    contributions.push_back(ad::scale(wpa, 1.0 / norm.positives));
  }

  // MPP
  if (flags.use_mpp && b < batch.mpp_mask.size()) {
    std::vector<int> seq_rows;
    std::vector<bool> row_mask;
    Matrix target(0, 3);
    std::vector<Eigen::Index> patch_rows;
    for (std::size_t slot = 0; slot < g.visual_source.size(); ++slot) {
      const int src = g.visual_source[slot];
      if (src < 0 || !batch.mpp_mask[b][static_cast<std::size_t>(src)]) continue;
      seq_rows.push_back(g.text_len + 1 + static_cast<int>(slot));
      patch_rows.push_back(src);
    }
    if (!seq_rows.empty()) {
      target.resize(static_cast<Eigen::Index>(patch_rows.size()), 3);
      for (std::size_t i = 0; i < patch_rows.size(); ++i) {
        target.row(static_cast<Eigen::Index>(i)) = batch.mpp_labels[b].row(patch_rows[i]);
      }
      row_mask.assign(seq_rows.size(), true);
      Var mpp = ad::squared_error_sum(mpp_predictions(ad::gather_rows(g.sequence, seq_rows), heads), target, row_mask);
      terms.mpp = mpp.scalar() / norm.mpp;
      contributions.push_back(ad::scale(mpp, 1.0 / norm.mpp));
    }
  }

  if (grads) {
    Var total = contributions.front();
    for (std::size_t i = 1; i < contributions.size(); ++i) total = ad::add(total, contributions[i]);
    tape.backward(total);
    tape.flush_grads(*grads);
  }
  return terms;
}

}  // namespace

LossReport pretrain_loss(const PretrainBatch& batch, model::Weights& weights, PretrainHeads& heads,
                         const ObjectiveFlags& flags, const LossOptions& options) {
  const std::size_t n = batch.size();
  if (n == 0) throw UserError("pretrain_loss: empty batch");
  if (batch.tokens.batch() != static_cast<Eigen::Index>(n) || batch.itm_label.size() != n) {
    throw UserError("pretrain_loss: inconsistent batch sizes");
  }
  if (flags.use_mpp && (batch.mpp_mask.size() != n || batch.mpp_labels.size() != n)) {
    throw UserError("pretrain_loss: MPP enabled without MPP targets");
  }
  LossReport report;
  Normalizers norm;
  norm.batch = static_cast<double>(n);
  for (Eigen::Index b = 0; b < batch.tokens.batch(); ++b) {
    for (Eigen::Index j = 0; j < batch.tokens.length(); ++j) {
      if (batch.tokens.mlm_labels(b, j) != kIgnoreLabel) ++report.mlm_targets;
    }
  }
  report.positives = static_cast<std::size_t>(std::count(batch.itm_label.begin(), batch.itm_label.end(), true));
  if (flags.use_mpp) {
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < batch.mpp_mask[b].size(); ++i) {
        if (batch.mpp_mask[b][i] && batch.patches[b].keep_mask[i]) ++report.mpp_targets;
      }
    }
  }
  norm.mlm = std::max<double>(1.0, static_cast<double>(report.mlm_targets));
  norm.positives = std::max<double>(1.0, static_cast<double>(report.positives));
  norm.mpp = 3.0 * std::max<double>(1.0, static_cast<double>(report.mpp_targets));

  const std::size_t slots = model::visual_slots(batch.patches);
  std::vector<SampleTerms> terms(n);
  std::vector<std::optional<Matrix>> plans(n);
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.threads, 1)), 1, n);
  std::vector<ad::GradientBuffer> buffers(workers);
  auto work = [&](std::size_t w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    for (std::size_t b = begin; b < end; ++b) {
      terms[b] = run_sample(batch, b, slots, weights, heads, flags, norm, options,
                            options.compute_gradients ? &buffers[w] : nullptr, &plans[b]);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  if (options.compute_gradients) {
    for (std::size_t w = 1; w < workers; ++w) buffers[w].merge_into(buffers[0]);
    buffers[0].apply_to_params();
  }
  for (const auto& t : terms) {
    report.itm += t.itm;
    report.mlm += t.mlm;
    report.wpa += t.wpa;
    report.mpp += t.mpp;
    if (t.correct) ++report.itm_correct;
  }
  report.total = report.itm + report.mlm + report.wpa + report.mpp;
  if (options.plans_out) *options.plans_out = std::move(plans);
  return report;
}

}  // namespace vilt::objectives
