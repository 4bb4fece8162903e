// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

namespace vilt::ad {

// ---- GradientBuffer ------------------------------------------------------

void GradientBuffer::add(const Parameter* p, const Matrix& g) {
  auto [it, inserted] = grads_.try_emplace(p, g);
  if (!inserted) it->second += g;
}

void GradientBuffer::apply_to_params() const {
  for (const auto& [p, g] : grads_) {
    auto* param = const_cast<Parameter*>(p);
    if (param->grad.size() == 0) {
      param->grad = g;
    } else {
      param->grad += g;
    }
  }
}

void GradientBuffer::merge_into(GradientBuffer& other) const {
  for (const auto& [p, g] : grads_) other.add(p, g);
}

const Matrix* GradientBuffer::find(const Parameter* p) const {
  auto it = grads_.find(p);
  return it == grads_.end() ? nullptr : &it->second;
}

// ---- Var / Tape ----------------------------------------------------------

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Matrix& Var::grad() const { return tape_->node(id_).grad; }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw Error(fmt::format("scalar() on a {}x{} node", v.rows(), v.cols()));
  }
  return v(0, 0);
}

Var Tape::push(Matrix value, bool needs_grad, std::function<void(Tape&)> backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Var v = push(p.value, true, nullptr);
  param_nodes_.emplace(&p, v.id());
  leaves_.emplace_back(&p, v.id());
  return v;
}

void Tape::backward(Var root, double seed) {
  if (root.tape() != this) throw Error("backward() called with a foreign Var");
  Node& r = node(root.id());
  if (r.value.size() != 1) throw Error("backward() requires a scalar root");
  if (!r.needs_grad) return;
  r.grad = Matrix::Constant(1, 1, seed);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this);
  }
}

void Tape::flush_grads() const {
  for (const auto& [p, id] : leaves_) {
    const Matrix& g = node(id).grad;
    if (g.size() == 0) continue;
    if (p->grad.size() == 0) {
      p->grad = g;
    } else {
      p->grad += g;
    }
  }
}

void Tape::flush_grads(GradientBuffer& out) const {
  for (const auto& [p, id] : leaves_) {
    const Matrix& g = node(id).grad;
    if (g.size() != 0) out.add(p, g);
  }
}

// ---- operators -----------------------------------------------------------

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw Error("operands live on different tapes");
  return *a.tape();
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(fmt::format("{}: shape mismatch {}x{} vs {}x{}", op, a.rows(), a.cols(), b.rows(),
                            b.cols()));
  }
}

double erf_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw Error(fmt::format("matmul: {}x{} · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
  }
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.node(ib).value.transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.node(ia).value.transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols()) throw Error("matmul_nt: inner dimension mismatch");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.node(ib).value);
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.transpose() * tp.node(ia).value);
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a.value(), b.value(), "add");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() + b.value();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() - b.value();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    tp.accumulate(ia, g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, -g);
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out = a.value() * s;
  return t.push(std::move(out), t.needs_grad(ia), [ia, s, self = t.size()](Tape& tp) {
    tp.accumulate(ia, tp.node(static_cast<int>(self)).grad * s);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: row shape mismatch");
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ir), [ia, ir, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    tp.accumulate(ia, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, Matrix(g.colwise().sum()));
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = same_tape(x, w);
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw Error(fmt::format("linear: x {}x{}, w {}x{}, b {}x{}", x.rows(), x.cols(), w.rows(), w.cols(),
                            b.rows(), b.cols()));
  }
  const int ix = x.id(), iw = w.id(), ib = b.id();
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  const bool ng = t.needs_grad(ix) || t.needs_grad(iw) || t.needs_grad(ib);
  return t.push(std::move(out), ng, [ix, iw, ib, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    if (tp.needs_grad(ix)) tp.accumulate(ix, g * tp.node(iw).value.transpose());
    if (tp.needs_grad(iw)) tp.accumulate(iw, tp.node(ix).value.transpose() * g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, Matrix(g.colwise().sum()));
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out = a.value().array().tanh().matrix();
  return t.push(std::move(out), t.needs_grad(ia), [ia, self = t.size()](Tape& tp) {
    const Tape::Node& n = tp.node(static_cast<int>(self));
    tp.accumulate(ia, (n.grad.array() * (1.0 - n.value.array().square())).matrix());
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return x * erf_cdf(x); });
  return t.push(std::move(out), t.needs_grad(ia), [ia, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    const Matrix d = tp.node(ia).value.unaryExpr([](double x) {
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return erf_cdf(x) + x * pdf;
    });
    tp.accumulate(ia, (g.array() * d.array()).matrix());
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(x, gamma);
  const Eigen::Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw Error("layer_norm: gamma/beta shape mismatch");
  }
  const Matrix& xv = x.value();
  auto xhat = std::make_shared<Matrix>(xv.rows(), n);
  auto rstd = std::make_shared<Vector>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    (*rstd)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mean) * (*rstd)(r);
  }
  Matrix out = (xhat->array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool ng = t.needs_grad(ix) || t.needs_grad(ig) || t.needs_grad(ib);
  return t.push(std::move(out), ng, [ix, ig, ib, xhat, rstd, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    if (tp.needs_grad(ib)) tp.accumulate(ib, Matrix(g.colwise().sum()));
    if (tp.needs_grad(ig)) tp.accumulate(ig, Matrix((g.array() * xhat->array()).colwise().sum()));
    if (tp.needs_grad(ix)) {
      const Matrix gx_hat = (g.array().rowwise() * tp.node(ig).value.row(0).array()).matrix();
      Matrix gx(g.rows(), g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double m1 = gx_hat.row(r).mean();
        const double m2 = gx_hat.row(r).dot(xhat->row(r)) / static_cast<double>(g.cols());
        gx.row(r) = (*rstd)(r) * (gx_hat.row(r).array() - m1 - xhat->row(r).array() * m2);
      }
      tp.accumulate(ix, gx);
    }
  });
}

Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout probability must be < 1");
  Tape& t = *x.tape();
  const int ix = x.id();
  auto keep = std::make_shared<Matrix>(x.rows(), x.cols());
  std::bernoulli_distribution bern(1.0 - p);
  for (Eigen::Index i = 0; i < keep->size(); ++i) keep->data()[i] = bern(rng) ? 1.0 / (1.0 - p) : 0.0;
  Matrix out = (x.value().array() * keep->array()).matrix();
  return t.push(std::move(out), t.needs_grad(ix), [ix, keep, self = t.size()](Tape& tp) {
    tp.accumulate(ix, (tp.node(static_cast<int>(self)).grad.array() * keep->array()).matrix());
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = *a.tape();
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw Error("slice_rows: out of range");
  const int ia = a.id();
  Matrix out = a.value().middleRows(begin, count);
  return t.push(std::move(out), t.needs_grad(ia), [ia, begin, count, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    Tape::Node& in = tp.node(ia);
    if (in.grad.size() == 0) in.grad.setZero(in.value.rows(), in.value.cols());
    in.grad.middleRows(begin, count) += g;
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw Error(fmt::format("gather_rows: index {} outside [0, {})", rows[i], a.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.push(std::move(out), t.needs_grad(ia), [ia, idx = std::move(idx), self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    Tape::Node& in = tp.node(ia);
    if (in.grad.size() == 0) in.grad.setZero(in.value.rows(), in.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) in.grad.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool ng = false;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw Error("concat_rows: operands on different tapes");
    if (p.cols() != cols) throw Error("concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id());
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), ng, [ids = std::move(ids), self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index n = tp.node(id).value.rows();
      tp.accumulate(id, g.middleRows(off, n));
      off += n;
    }
  });
}

Var mask_rows(Var a, std::span<const double> mask) {
  Tape& t = *a.tape();
  if (static_cast<Eigen::Index>(mask.size()) != a.rows()) throw Error("mask_rows: size mismatch");
  const int ia = a.id();
  Eigen::VectorXd m = Eigen::Map<const Eigen::VectorXd>(mask.data(), static_cast<Eigen::Index>(mask.size()));
  Matrix out = (a.value().array().colwise() * m.array()).matrix();
  return t.push(std::move(out), t.needs_grad(ia), [ia, m, self = t.size()](Tape& tp) {
    tp.accumulate(ia, (tp.node(static_cast<int>(self)).grad.array().colwise() * m.array()).matrix());
  });
}

Var attention(Var q, Var k, Var v, const std::vector<bool>& key_mask, int heads) {
  Tape& t = same_tape(q, k);
  const Eigen::Index s_q = q.rows(), s_k = k.rows(), width = q.cols();
  if (k.cols() != width || v.cols() != width || v.rows() != s_k) throw Error("attention: shape mismatch");
  if (static_cast<Eigen::Index>(key_mask.size()) != s_k) throw Error("attention: key mask size mismatch");
  if (heads <= 0 || width % heads != 0) throw Error("attention: width not divisible by heads");
  const Eigen::Index dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(heads));
  Matrix out(s_q, width);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix logits = (qh * kh.transpose()) * inv_sqrt;
    Matrix& p = (*probs)[static_cast<std::size_t>(h)];
    p.setZero(s_q, s_k);
    for (Eigen::Index i = 0; i < s_q; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < s_k; ++j) {
        if (key_mask[static_cast<std::size_t>(j)]) mx = std::max(mx, logits(i, j));
      }
      if (!std::isfinite(mx)) continue;
      double z = 0.0;
      for (Eigen::Index j = 0; j < s_k; ++j) {
        if (!key_mask[static_cast<std::size_t>(j)]) continue;
        p(i, j) = std::exp(logits(i, j) - mx);
        z += p(i, j);
      }
      p.row(i) /= z;
    }
    out.middleCols(h * dh, dh) = p * vh;
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  const bool ng = t.needs_grad(iq) || t.needs_grad(ik) || t.needs_grad(iv);
  return t.push(std::move(out), ng, [iq, ik, iv, heads, dh, inv_sqrt, probs, self = t.size()](Tape& tp) {
    const Matrix& g = tp.node(static_cast<int>(self)).grad;
    const Matrix& qv = tp.node(iq).value;
    const Matrix& kv = tp.node(ik).value;
    const Matrix& vv = tp.node(iv).value;
    Matrix gq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix gk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix gv = Matrix::Zero(vv.rows(), vv.cols());
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
      const auto gh = g.middleCols(h * dh, dh);
      gv.middleCols(h * dh, dh) += p.transpose() * gh;
      const Matrix gp = gh * vv.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd inner = (gp.array() * p.array()).rowwise().sum();
      const Matrix gs = ((gp.colwise() - inner).array() * p.array()).matrix() * inv_sqrt;
      gq.middleCols(h * dh, dh) += gs * kv.middleCols(h * dh, dh);
      gk.middleCols(h * dh, dh) += gs.transpose() * qv.middleCols(h * dh, dh);
    }
    tp.accumulate(iq, gq);
    tp.accumulate(ik, gk);
    tp.accumulate(iv, gv);
  });
}

Var cross_entropy_sum(Var logits, std::span<const int> labels) {
  Tape& t = *logits.tape();
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw Error("cross_entropy: label count mismatch");
  auto probs = std::make_shared<Matrix>(Matrix::Zero(z.rows(), z.cols()));
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y == kIgnoreLabel) continue;
    if (y < 0 || y >= z.cols()) throw Error(fmt::format("cross_entropy: label {} outside [0, {})", y, z.cols()));
    const double mx = z.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(r).array() - mx).exp();
    const double sum_e = e.sum();
    probs->row(r) = e / sum_e;
    total += -(z(r, y) - mx - std::log(sum_e));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const int il = logits.id();
  return t.push(Matrix::Constant(1, 1, total), t.needs_grad(il),
                [il, probs, lab = std::move(lab), self = t.size()](Tape& tp) {
                  const double g = tp.node(static_cast<int>(self)).grad(0, 0);
                  Matrix d = *probs;
                  for (std::size_t r = 0; r < lab.size(); ++r) {
                    if (lab[r] != kIgnoreLabel) d(static_cast<Eigen::Index>(r), lab[r]) -= 1.0;
                  }
                  tp.accumulate(il, d * g);
                });
}

Var squared_error_sum(Var pred, const Matrix& target, const std::vector<bool>& row_mask) {
  Tape& t = *pred.tape();
  check_same_shape(pred.value(), target, "squared_error_sum");
  if (static_cast<Eigen::Index>(row_mask.size()) != target.rows()) throw Error("squared_error_sum: mask size");
  auto diff = std::make_shared<Matrix>(Matrix::Zero(target.rows(), target.cols()));
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    if (row_mask[static_cast<std::size_t>(r)]) diff->row(r) = pred.value().row(r) - target.row(r);
  }
  const double total = diff->squaredNorm();
  const int ip = pred.id();
  return t.push(Matrix::Constant(1, 1, total), t.needs_grad(ip), [ip, diff, self = t.size()](Tape& tp) {
    tp.accumulate(ip, *diff * (2.0 * tp.node(static_cast<int>(self)).grad(0, 0)));
  });
}

Var cosine_distance(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols()) throw Error("cosine_distance: width mismatch");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  auto an = std::make_shared<Matrix>(av.rows(), av.cols());
  auto bn = std::make_shared<Matrix>(bv.rows(), bv.cols());
  auto anorm = std::make_shared<Vector>(av.rows());
  auto bnorm = std::make_shared<Vector>(bv.rows());
  auto normalize = [](const Matrix& x, Matrix& xn, Vector& norms) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      norms(r) = x.row(r).norm();
      if (norms(r) > 0.0) {
        xn.row(r) = x.row(r) / norms(r);
      } else {
        xn.row(r).setZero();
      }
    }
  };
  normalize(av, *an, *anorm);
  normalize(bv, *bn, *bnorm);
  const Matrix cos = *an * bn->transpose();
  Matrix out = (1.0 - cos.array()).matrix();
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib, an, bn, anorm, bnorm, self = t.size()](Tape& tp) {
                  // d cos(a,b)/da = (b̂ − cos·â)/‖a‖
                  const Matrix gcos = -tp.node(static_cast<int>(self)).grad;
                  const Matrix cos = *an * bn->transpose();
                  if (tp.needs_grad(ia)) {
                    Matrix ga = gcos * *bn;
                    const Eigen::VectorXd w = (gcos.array() * cos.array()).rowwise().sum();
                    for (Eigen::Index r = 0; r < ga.rows(); ++r) {
                      ga.row(r) = (*anorm)(r) > 0.0 ? Eigen::RowVectorXd((ga.row(r) - w(r) * an->row(r)) / (*anorm)(r))
                                                    : Eigen::RowVectorXd::Zero(ga.cols());
                    }
                    tp.accumulate(ia, ga);
                  }
                  if (tp.needs_grad(ib)) {
                    Matrix gb = gcos.transpose() * *an;
                    const Eigen::VectorXd w = (gcos.array() * cos.array()).colwise().sum().transpose();
                    for (Eigen::Index r = 0; r < gb.rows(); ++r) {
                      gb.row(r) = (*bnorm)(r) > 0.0 ? Eigen::RowVectorXd((gb.row(r) - w(r) * bn->row(r)) / (*bnorm)(r))
                                                    : Eigen::RowVectorXd::Zero(gb.cols());
                    }
                    tp.accumulate(ib, gb);
                  }
                });
}

Var weighted_sum(Var a, const Matrix& weights) {
  Tape& t = *a.tape();
  check_same_shape(a.value(), weights, "weighted_sum");
  const int ia = a.id();
  const double total = (a.value().array() * weights.array()).sum();
  return t.push(Matrix::Constant(1, 1, total), t.needs_grad(ia), [ia, weights, self = t.size()](Tape& tp) {
    tp.accumulate(ia, weights * tp.node(static_cast<int>(self)).grad(0, 0));
  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(Matrix::Constant(1, 1, a.value().sum()), t.needs_grad(ia), [ia, self = t.size()](Tape& tp) {
    const Tape::Node& in = tp.node(ia);
    tp.accumulate(ia, Matrix::Constant(in.value.rows(), in.value.cols(), tp.node(static_cast<int>(self)).grad(0, 0)));
  });
}

}  // namespace vilt::ad
