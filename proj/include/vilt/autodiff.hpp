// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation applied to its Vars together with a
// closure that propagates the output gradient to the inputs. Parameters are
// bound into a tape as leaves; after `backward` the accumulated leaf
// gradients are flushed either into `Parameter::grad` or into a separate
// GradientBuffer (one per worker thread).

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vilt/common.hpp"

namespace vilt::ad {

/// A named learnable tensor. Vectors are stored as [1, n] matrices.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  /// Whether decoupled weight decay applies (false for biases and LN).
  bool decay = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

/// Gradients collected from one or more tapes, keyed by parameter.
class GradientBuffer {
 public:
  void add(const Parameter* p, const Matrix& g);
  /// Adds every buffered gradient into `Parameter::grad`.
  void apply_to_params() const;
  void merge_into(GradientBuffer& other) const;
  [[nodiscard]] const Matrix* find(const Parameter* p) const;
  void clear() { grads_.clear(); }

 private:
  std::unordered_map<const Parameter*, Matrix> grads_;
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] const Matrix& grad() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  /// Value of a [1, 1] node.
  [[nodiscard]] double scalar() const;
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] int id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var constant(Matrix value);
  /// Leaf bound to a parameter. Binding the same parameter twice returns the
  /// same node.
  Var param(Parameter& p);

  /// Runs reverse accumulation from a [1, 1] node.
  void backward(Var root, double seed = 1.0);
  /// Moves parameter leaf gradients into `Parameter::grad` (+=).
  void flush_grads() const;
  void flush_grads(GradientBuffer& out) const;

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Internal node API used by the operator implementations.
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&)> backward;
  };
  Var push(Matrix value, bool needs_grad, std::function<void(Tape&)> backward);
  [[nodiscard]] Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] bool needs_grad(int id) const { return node(id).needs_grad; }
  /// grad(id) += g, allocating on first use. No-op for constants.
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = node(id);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::vector<std::pair<Parameter*, int>> leaves_;
};

// ---- operators ---------------------------------------------------------

Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
/// Adds a [1, n] row to every row of `a`.
Var add_row(Var a, Var row);
/// x · w + b with b a [1, out] row.
Var linear(Var x, Var w, Var b);
Var tanh(Var a);
/// Exact GELU, x · Φ(x).
Var gelu(Var a);
/// Row-wise layer normalization with affine [1, n] gamma and beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, Rng& rng);

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var gather_rows(Var a, std::span<const int> rows);
Var concat_rows(std::span<const Var> parts);
/// Multiplies row i by mask[i] (0 or 1 in practice).
Var mask_rows(Var a, std::span<const double> mask);

/// Multi-head scaled dot-product attention over [S, H] inputs. Keys with
/// key_mask == false receive −∞ logits.
Var attention(Var q, Var k, Var v, const std::vector<bool>& key_mask, int heads);

/// Σ over rows with label != kIgnoreLabel of −log softmax(logits)[label].
Var cross_entropy_sum(Var logits, std::span<const int> labels);
/// Σ over rows with mask of ‖pred − target‖².
Var squared_error_sum(Var pred, const Matrix& target, const std::vector<bool>& row_mask);
/// c[i, j] = 1 − cos(a_i, b_j); zero rows count as cosine 0.
Var cosine_distance(Var a, Var b);
/// Σ a ⊙ weights for a constant weight matrix.
Var weighted_sum(Var a, const Matrix& weights);
Var sum(Var a);

}  // namespace vilt::ad
