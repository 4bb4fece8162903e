// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "vilt/autodiff.hpp"

namespace vilt::ad {
namespace {

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

Parameter random_param(const std::string& name, int r, int c, Rng& rng) {
  Parameter p{name, Matrix(r, c), Matrix::Zero(r, c), true};
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
  return p;
}

double evaluate(std::vector<Parameter>& ps, const Builder& f) {
  Tape t;
  std::vector<Var> in;
  for (auto& p : ps) in.push_back(t.param(p));
  return f(t, in).scalar();
}

// Reverse-mode gradient vs central differences for every input entry.
void check_gradients(std::vector<Parameter> ps, const Builder& f, double tol = 1e-6) {
  for (auto& p : ps) p.zero_grad();
  {
    Tape t;
    std::vector<Var> in;
    for (auto& p : ps) in.push_back(t.param(p));
    Var out = f(t, in);
    ASSERT_EQ(out.rows(), 1);
    ASSERT_EQ(out.cols(), 1);
    t.backward(out);
    t.flush_grads();
  }
  const double h = 1e-5;
  for (auto& p : ps) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data()[i];
      p.value.data()[i] = keep + h;
      const double up = evaluate(ps, f);
      p.value.data()[i] = keep - h;
      const double down = evaluate(ps, f);
      p.value.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad.data()[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      EXPECT_LT(rel, tol) << p.name << "[" << i << "] analytic " << analytic << " numeric " << numeric;
    }
  }
}

// Contracts a matrix output to a scalar with fixed random weights so every
// entry of the output matters.
Var contract(Var x, std::uint64_t seed = 99) {
  Rng rng = derive_rng(seed, {});
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix w(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  return weighted_sum(x, w);
}

class OpGradient : public ::testing::Test {
 protected:
  Rng rng = derive_rng(2026, {});
};

TEST_F(OpGradient, MatmulFamily) {
  check_gradients({random_param("a", 3, 4, rng), random_param("b", 4, 2, rng)},
                  [](Tape&, std::vector<Var>& v) { return contract(matmul(v[0], v[1])); });
  check_gradients({random_param("a", 3, 4, rng), random_param("b", 5, 4, rng)},
                  [](Tape&, std::vector<Var>& v) { return contract(matmul_nt(v[0], v[1])); });
  check_gradients({random_param("x", 3, 4, rng), random_param("w", 4, 2, rng), random_param("b", 1, 2, rng)},
                  [](Tape&, std::vector<Var>& v) { return contract(linear(v[0], v[1], v[2])); });
}

TEST_F(OpGradient, Elementwise) {
  check_gradients({random_param("a", 2, 3, rng), random_param("b", 2, 3, rng), random_param("r", 1, 3, rng)},
                  [](Tape&, std::vector<Var>& v) {
                    return contract(add_row(scale(sub(add(v[0], v[1]), v[1]), -1.5), v[2]));
                  });
  check_gradients({random_param("a", 3, 3, rng)}, [](Tape&, std::vector<Var>& v) { return contract(tanh(v[0])); });
  check_gradients({random_param("a", 3, 3, rng)}, [](Tape&, std::vector<Var>& v) { return contract(gelu(v[0])); });
  check_gradients({random_param("a", 3, 3, rng)}, [](Tape&, std::vector<Var>& v) { return sum(v[0]); });
}

TEST_F(OpGradient, LayerNorm) {
  check_gradients({random_param("x", 3, 5, rng), random_param("g", 1, 5, rng), random_param("b", 1, 5, rng)},
                  [](Tape&, std::vector<Var>& v) { return contract(layer_norm(v[0], v[1], v[2], 1e-6)); });
}

TEST_F(OpGradient, RowOps) {
  check_gradients({random_param("a", 5, 3, rng), random_param("b", 2, 3, rng)}, [](Tape&, std::vector<Var>& v) {
    const std::vector<int> rows = {4, 0, 0, 2};
    const std::vector<double> mask = {1, 0, 1, 1};
    Var g = gather_rows(v[0], rows);
    std::vector<Var> parts = {slice_rows(v[0], 1, 2), mask_rows(g, mask), v[1]};
    return contract(concat_rows(parts));
  });
}

TEST_F(OpGradient, AttentionWithMaskedKeys) {
  check_gradients({random_param("q", 4, 6, rng), random_param("k", 4, 6, rng), random_param("v", 4, 6, rng)},
                  [](Tape&, std::vector<Var>& v) {
                    return contract(attention(v[0], v[1], v[2], {true, true, false, true}, 2));
                  });
}

TEST_F(OpGradient, Losses) {
  check_gradients({random_param("logits", 4, 5, rng)}, [](Tape&, std::vector<Var>& v) {
    const std::vector<int> labels = {2, kIgnoreLabel, 0, 4};
    return cross_entropy_sum(v[0], labels);
  });
  Matrix target = Matrix::Random(3, 3);
  check_gradients({random_param("pred", 3, 3, rng)}, [target](Tape&, std::vector<Var>& v) {
    return squared_error_sum(v[0], target, {true, false, true});
  });
  check_gradients({random_param("a", 3, 4, rng), random_param("b", 2, 4, rng)},
                  [](Tape&, std::vector<Var>& v) { return contract(cosine_distance(v[0], v[1])); });
}

TEST(Autodiff, ValuesMatchReferenceArithmetic) {
  Tape t;
  Matrix logits(1, 3);
  logits << 1.0, 2.0, 0.5;
  const std::vector<int> label = {1};
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  EXPECT_NEAR(cross_entropy_sum(t.constant(logits), label).scalar(), lse - 2.0, 1e-12);

  Matrix x(1, 3);
  x << 1.0, -1.0, 0.0;
  const Matrix g = gelu(t.constant(x)).value();
  EXPECT_NEAR(g(0, 0), 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 1e-12);
  EXPECT_NEAR(g(0, 2), 0.0, 1e-15);

  // Masked keys get no attention weight: changing their values is a no-op.
  Matrix q = Matrix::Random(3, 4);
  Matrix k = Matrix::Random(3, 4);
  Matrix v = Matrix::Random(3, 4);
  const Matrix o1 = attention(t.constant(q), t.constant(k), t.constant(v), {true, true, false}, 2).value();
  v.row(2).setConstant(100.0);
  k.row(2).setConstant(-7.0);
  const Matrix o2 = attention(t.constant(q), t.constant(k), t.constant(v), {true, true, false}, 2).value();
  EXPECT_LT((o1 - o2).cwiseAbs().maxCoeff(), 1e-12);

  // Zero rows count as cosine 0.
  Matrix a = Matrix::Zero(1, 2);
  Matrix b(1, 2);
  b << 1.0, 0.0;
  EXPECT_DOUBLE_EQ(cosine_distance(t.constant(a), t.constant(b)).value()(0, 0), 1.0);
}

TEST(Autodiff, SharedParameterAccumulatesAndBuffersMerge) {
  Parameter p{"p", Matrix::Constant(1, 2, 3.0), Matrix::Zero(1, 2), true};
  Tape t;
  Var a = t.param(p);
  Var b = t.param(p);
  EXPECT_EQ(a.id(), b.id());
  Var out = sum(add(scale(a, 2.0), b));
  t.backward(out);
  GradientBuffer buf;
  t.flush_grads(buf);
  GradientBuffer total;
  buf.merge_into(total);
  buf.merge_into(total);
  total.apply_to_params();
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 6.0);
  EXPECT_DOUBLE_EQ(p.grad(0, 1), 6.0);
}

TEST(Autodiff, DropoutIsInvertedAndIdentityAtZero) {
  Rng rng = derive_rng(1, {});
  Tape t;
  Matrix x = Matrix::Ones(200, 50);
  const Matrix same = dropout(t.constant(x), 0.0, rng).value();
  EXPECT_EQ(same, x);
  const Matrix d = dropout(t.constant(x), 0.25, rng).value();
  EXPECT_NEAR(d.mean(), 1.0, 0.03);
  const double zeros = static_cast<double>((d.array() == 0.0).count()) / static_cast<double>(d.size());
  EXPECT_NEAR(zeros, 0.25, 0.02);
}

}  // namespace
}  // namespace vilt::ad
