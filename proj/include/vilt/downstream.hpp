// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilt/autodiff.hpp"
#include "vilt/model.hpp"
#include "vilt/objectives.hpp"
#include "vilt/text.hpp"

namespace vilt::downstream {

using ad::Parameter;
using ad::Var;

/// affine → GELU → LN → affine.
class ClassifierHead {
 public:
  ClassifierHead(std::string prefix, int input, int hidden, int classes, double ln_eps = 1e-6);
  ClassifierHead(const ClassifierHead&) = delete;
  ClassifierHead& operator=(const ClassifierHead&) = delete;
  ClassifierHead(ClassifierHead&&) = default;
  ClassifierHead& operator=(ClassifierHead&&) = default;

  void init(Rng& rng);
  [[nodiscard]] std::vector<Parameter*> parameters();
  Var forward(Var x);
  /// Value-level forward over rows of `x`.
  Matrix operator()(const Matrix& x);

  [[nodiscard]] int input() const { return static_cast<int>(w1.value.rows()); }
  [[nodiscard]] int hidden() const { return static_cast<int>(w1.value.cols()); }
  [[nodiscard]] int classes() const { return static_cast<int>(w2.value.cols()); }

  Parameter w1, b1, ln_gamma, ln_beta, w2, b2;

 private:
  double ln_eps_;
};

/// VQA-style head on the pooled feature: input H, hidden 2H, K classes.
ClassifierHead make_vqa_head(const model::ModelConfig& cfg, int classes);
/// NLVR2 pair head: input 2H (two pooled features), hidden 2H, 2 classes.
ClassifierHead make_nlvr2_head(const model::ModelConfig& cfg);

/// logits = head(pooled); [B, K].
Matrix vqa_forward(const text::TokenBatch& tokens, std::span<const image::PatchBatch> patches, model::Weights& w,
                   ClassifierHead& head);

/// Pair method: pooled features of (question, image1) and (question,
/// image2) are concatenated, [B, 2].
Matrix nlvr2_forward(const text::TokenBatch& tokens, std::span<const image::PatchBatch> images1,
                     std::span<const image::PatchBatch> images2, model::Weights& w, ClassifierHead& head);

/// Graph version for one sample; returns [1, 2] logits.
Var nlvr2_logits_graph(ad::Tape& tape, std::span<const int> ids, const std::vector<bool>& mask,
                       const image::PatchBatch& image1, const image::PatchBatch& image2, model::Weights& w,
                       ClassifierHead& head);

// ---- retrieval -------------------------------------------------------------------

/// Scalar image–text score initialized from the matched-pair row of the
/// ITM head.
struct SimilarityHead {
  SimilarityHead() = default;
  explicit SimilarityHead(objectives::PretrainHeads& itm);
  SimilarityHead(const SimilarityHead&) = delete;
  SimilarityHead& operator=(const SimilarityHead&) = delete;
  SimilarityHead(SimilarityHead&&) = default;
  SimilarityHead& operator=(SimilarityHead&&) = default;

  [[nodiscard]] std::vector<Parameter*> parameters() { return {&w, &b}; }
  Var score(Var pooled);

  Parameter w;  // [H, 1]
  Parameter b;  // [1, 1]
};

/// `n_neg` distinct indices from [0, corpus) excluding `positive`.
/// Throws UserError when corpus − 1 < n_neg.
std::vector<std::size_t> sample_negatives(std::size_t corpus, std::size_t positive, std::size_t n_neg, Rng& rng);

/// Cross entropy over [positive, negatives...] scores with the positive at
/// index 0. When requested, gradients go to `sink` or, when it is null,
/// straight into Parameter::grad.
double retrieval_loss(const text::TokenRow& positive, std::span<const text::TokenRow> negatives,
                      const image::PatchBatch& image, model::Weights& w, SimilarityHead& head, bool compute_gradients,
                      ad::GradientBuffer* sink = nullptr);

/// CE with target 0 for a row of scores (reference arithmetic).
double score_cross_entropy(std::span<const double> scores);

/// Scores [texts.size(), images.size()] for every (text, image) pair.
Matrix score_grid(std::span<const text::TokenRow> texts, std::span<const image::PatchBatch> images, model::Weights& w,
                  SimilarityHead& head, int threads = 1);

struct RetrievalIndex {
  Matrix scores;  // [Q, K]
  std::vector<std::size_t> ground_truth;
};

/// Fraction of queries whose ground truth ranks within the top k; ties are
/// broken by candidate order (earlier wins).
double recall_at_k(const RetrievalIndex& index, std::size_t k);

/// {task, split, metrics, config_hash, checkpoint_hash, code_version}.
nlohmann::json evaluation_report(const std::string& task, const std::string& split, const nlohmann::json& metrics,
                                 const std::string& config_hash, const std::string& checkpoint_hash);

}  // namespace vilt::downstream
