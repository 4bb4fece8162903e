// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <fmt/format.h>

namespace vilt::downstream {

namespace {

Parameter make(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay) {
  Parameter p;
  p.name = std::move(name);
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  p.decay = decay;
  return p;
}

std::vector<int> ids_of(const text::TokenBatch& t, Eigen::Index b) {
  std::vector<int> ids(static_cast<std::size_t>(t.length()));
  for (Eigen::Index j = 0; j < t.length(); ++j) ids[static_cast<std::size_t>(j)] = t.ids(b, j);
  return ids;
}

std::vector<bool> mask_of(const text::TokenBatch& t, Eigen::Index b) {
  std::vector<bool> m(static_cast<std::size_t>(t.length()));
  for (Eigen::Index j = 0; j < t.length(); ++j) m[static_cast<std::size_t>(j)] = t.attn_mask(b, j);
  return m;
}

std::vector<bool> full_mask(const text::TokenRow& row) { return std::vector<bool>(row.ids.size(), true); }

}  // namespace

// ---- ClassifierHead ----------------------------------------------------------------

ClassifierHead::ClassifierHead(std::string prefix, int input, int hidden, int classes, double ln_eps)
    : w1(make(prefix + ".fc1.weight", input, hidden, true)),
      b1(make(prefix + ".fc1.bias", 1, hidden, false)),
      ln_gamma(make(prefix + ".ln.gamma", 1, hidden, false)),
      ln_beta(make(prefix + ".ln.beta", 1, hidden, false)),
      w2(make(prefix + ".fc2.weight", hidden, classes, true)),
      b2(make(prefix + ".fc2.bias", 1, classes, false)),
      ln_eps_(ln_eps) {
  if (input < 1 || hidden < 1 || classes < 1) throw UserError("classifier head dimensions must be positive");
  ln_gamma.value.setOnes();
}

void ClassifierHead::init(Rng& rng) {
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

std::vector<Parameter*> ClassifierHead::parameters() { return {&w1, &b1, &ln_gamma, &ln_beta, &w2, &b2}; }

Var ClassifierHead::forward(Var x) {
  ad::Tape& t = *x.tape();
  Var h = ad::gelu(ad::linear(x, t.param(w1), t.param(b1)));
  h = ad::layer_norm(h, t.param(ln_gamma), t.param(ln_beta), ln_eps_);
  return ad::linear(h, t.param(w2), t.param(b2));
}

Matrix ClassifierHead::operator()(const Matrix& x) {
  ad::Tape tape;
  return forward(tape.constant(x)).value();
}

ClassifierHead make_vqa_head(const model::ModelConfig& cfg, int classes) {
  return ClassifierHead("heads.vqa", cfg.hidden, 2 * cfg.hidden, classes, cfg.ln_eps);
}

ClassifierHead make_nlvr2_head(const model::ModelConfig& cfg) {
  return ClassifierHead("heads.nlvr2", 2 * cfg.hidden, 2 * cfg.hidden, 2, cfg.ln_eps);
}

Matrix vqa_forward(const text::TokenBatch& tokens, std::span<const image::PatchBatch> patches, model::Weights& w,
                   ClassifierHead& head) {
  const auto out = model::forward(tokens, patches, w);
  return head(out.pooled);
}

Var nlvr2_logits_graph(ad::Tape& tape, std::span<const int> ids, const std::vector<bool>& mask,
                       const image::PatchBatch& image1, const image::PatchBatch& image2, model::Weights& w,
                       ClassifierHead& head) {
  const auto g1 = model::forward_sample(tape, w, ids, mask, image1, image1.kept());
  const auto g2 = model::forward_sample(tape, w, ids, mask, image2, image2.kept());
  if (head.input() != 2 * w.config().hidden) throw UserError("nlvr2 head must consume 2H inputs");
  // [p1 | p2] = p1·[I 0] + p2·[0 I].
  Matrix left = Matrix::Zero(w.config().hidden, 2 * w.config().hidden);
  Matrix right = Matrix::Zero(w.config().hidden, 2 * w.config().hidden);
  left.leftCols(w.config().hidden).setIdentity();
  right.rightCols(w.config().hidden).setIdentity();
  Var pair = ad::add(ad::matmul(g1.pooled, tape.constant(left)), ad::matmul(g2.pooled, tape.constant(right)));
  return head.forward(pair);
}

Matrix nlvr2_forward(const text::TokenBatch& tokens, std::span<const image::PatchBatch> images1,
                     std::span<const image::PatchBatch> images2, model::Weights& w, ClassifierHead& head) {
  if (images1.size() != images2.size() || tokens.batch() != static_cast<Eigen::Index>(images1.size())) {
    throw UserError("nlvr2_forward: batch sizes differ");
  }
  Matrix out(tokens.batch(), 2);
  for (Eigen::Index b = 0; b < tokens.batch(); ++b) {
    ad::Tape tape;
    const auto ids = ids_of(tokens, b);
    out.row(b) = nlvr2_logits_graph(tape, ids, mask_of(tokens, b), images1[static_cast<std::size_t>(b)],
                                    images2[static_cast<std::size_t>(b)], w, head)
                     .value()
                     .row(0);
  }
  return out;
}

// ---- retrieval ----------------------------------------------------------------------

SimilarityHead::SimilarityHead(objectives::PretrainHeads& itm)
    : w(make("heads.sim.weight", itm.itm_w.value.rows(), 1, true)), b(make("heads.sim.bias", 1, 1, false)) {
  w.value = itm.itm_w.value.col(objectives::kItmMatched);
  b.value(0, 0) = itm.itm_b.value(0, objectives::kItmMatched);
}

Var SimilarityHead::score(Var pooled) {
  ad::Tape& t = *pooled.tape();
  return ad::linear(pooled, t.param(w), t.param(b));
}

std::vector<std::size_t> sample_negatives(std::size_t corpus, std::size_t positive, std::size_t n_neg, Rng& rng) {
  if (positive >= corpus) throw UserError("sample_negatives: positive index out of range");
  if (corpus - 1 < n_neg) {
    throw UserError(fmt::format("retrieval needs {} negatives but the corpus has only {} other texts", n_neg, corpus - 1));
  }
  std::vector<std::size_t> pool;
  pool.reserve(corpus - 1);
  for (std::size_t i = 0; i < corpus; ++i) {
    if (i != positive) pool.push_back(i);
  }
  for (std::size_t i = 0; i < n_neg; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  pool.resize(n_neg);
  return pool;
}

double score_cross_entropy(std::span<const double> scores) {
  if (scores.empty()) throw UserError("score_cross_entropy: empty score list");
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - mx);
  return -(scores[0] - mx - std::log(z));
}

double retrieval_loss(const text::TokenRow& positive, std::span<const text::TokenRow> negatives,
                      const image::PatchBatch& image, model::Weights& w, SimilarityHead& head, bool compute_gradients,
                      ad::GradientBuffer* sink) {
  ad::Tape tape;
  std::vector<Var> scores;
  auto score_of = [&](const text::TokenRow& row) {
    const auto g = model::forward_sample(tape, w, row.ids, full_mask(row), image, image.kept());
    scores.push_back(head.score(g.pooled));
  };
  score_of(positive);
  for (const auto& neg : negatives) score_of(neg);
  // [1, 1+n] row of scores via concat and transpose-by-matmul.
  Var column = ad::concat_rows(scores);
  Var row = ad::matmul_nt(tape.constant(Matrix::Ones(1, 1)), column);
  const std::array<int, 1> target = {0};
  Var loss = ad::cross_entropy_sum(row, target);
  if (compute_gradients) {
    tape.backward(loss);
    if (sink) {
      tape.flush_grads(*sink);
    } else {
      tape.flush_grads();
    }
  }
  return loss.scalar();
}

Matrix score_grid(std::span<const text::TokenRow> texts, std::span<const image::PatchBatch> images, model::Weights& w,
                  SimilarityHead& head, int threads) {
  Matrix scores(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(images.size()));
  const std::size_t total = texts.size() * images.size();
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1,
                                                      std::max<std::size_t>(total, 1));
  auto work = [&](std::size_t worker) {
    for (std::size_t k = worker; k < total; k += workers) {
      const std::size_t t = k / images.size();
      const std::size_t i = k % images.size();
      ad::Tape tape;
      const auto g = model::forward_sample(tape, w, texts[t].ids, full_mask(texts[t]), images[i], images[i].kept());
      scores(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = head.score(g.pooled).scalar();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < workers; ++k) pool.emplace_back(work, k);
    for (auto& th : pool) th.join();
  }
  return scores;
}

double recall_at_k(const RetrievalIndex& index, std::size_t k) {
  const auto q = static_cast<std::size_t>(index.scores.rows());
  if (index.ground_truth.size() != q) throw UserError("recall_at_k: one ground truth per query is required");
  if (q == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < q; ++i) {
    const auto row = index.scores.row(static_cast<Eigen::Index>(i));
    const std::size_t gt = index.ground_truth[i];
    if (gt >= static_cast<std::size_t>(row.size())) throw UserError("recall_at_k: ground truth out of range");
    const double s = row(static_cast<Eigen::Index>(gt));
    std::size_t rank = 0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      if (row(j) > s || (row(j) == s && static_cast<std::size_t>(j) < gt)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(q);
}

nlohmann::json evaluation_report(const std::string& task, const std::string& split, const nlohmann::json& metrics,
                                 const std::string& config_hash, const std::string& checkpoint_hash) {
  return {{"task", task},
          {"split", split},
          {"metrics", metrics},
          {"config_hash", config_hash},
          {"checkpoint_hash", checkpoint_hash},
          {"code_version", std::string(kCodeVersion)}};
}

}  // namespace vilt::downstream
