#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "unimeec/autodiff.hpp"

using namespace unimeec;
using ad::Tape;
using ad::Var;

namespace {

Matrix randn(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

using OpFn = std::function<Var(Tape&, std::vector<Var>&)>;

// Contracts the op output with a fixed random matrix so every output entry
// matters, then compares the gradient of every input entry against central
// differences.
double max_fd_error(const OpFn& f, std::vector<Matrix> inputs, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  std::vector<Parameter> params(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    params[k].name = "in" + std::to_string(k);
    params[k].value = inputs[k];
    params[k].zero_grad();
  }
  Matrix probe;
  auto loss = [&](Tape& t) {
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(t.param(p));
    Var y = f(t, vars);
    if (probe.size() == 0) probe = randn(static_cast<int>(y.rows()), static_cast<int>(y.cols()), rng);
    return ad::sum(ad::mul(y, t.constant(probe)));
  };
  {
    Tape t;
    t.backward(loss(t));
  }
  double worst = 0.0;
  const double h = 1e-6;
  for (auto& p : params)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double saved = p.value.data()[i];
      p.value.data()[i] = saved + h;
      double up, down;
      {
        Tape t;
        up = loss(t).value()(0, 0);
      }
      p.value.data()[i] = saved - h;
      {
        Tape t;
        down = loss(t).value()(0, 0);
      }
      p.value.data()[i] = saved;
      const double num = (up - down) / (2 * h);
      const double an = p.grad.data()[i];
      worst = std::max(worst, std::abs(num - an) / std::max({std::abs(num), std::abs(an), 1e-6}));
    }
  return worst;
}

}  // namespace

TEST(Autodiff, MatmulAndTransposeGradients) {
  std::mt19937_64 rng(1);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::matmul(v[0], v[1]); },
                         {randn(3, 4, rng), randn(4, 2, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::matmul_nt(v[0], v[1]); },
                         {randn(3, 4, rng), randn(5, 4, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::transpose(v[0]); }, {randn(3, 2, rng)}), 1e-6);
}

TEST(Autodiff, ElementwiseGradients) {
  std::mt19937_64 rng(2);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::gelu(v[0]); }, {randn(3, 5, rng)}), 1e-5);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::leaky_relu(v[0], 0.2); }, {randn(3, 5, rng)}),
            1e-5);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::relu(v[0]); }, {randn(3, 5, rng)}), 1e-5);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::mul(v[0], v[1]); },
                         {randn(2, 3, rng), randn(2, 3, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::add_row(v[0], v[1]); },
                         {randn(4, 3, rng), randn(1, 3, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::outer_sum(v[0], v[1]); },
                         {randn(4, 1, rng), randn(1, 3, rng)}),
            1e-6);
}

TEST(Autodiff, NormalizationGradients) {
  std::mt19937_64 rng(4);
  Matrix mask = Matrix::Ones(4, 5);
  mask(0, 1) = mask(2, 4) = mask(2, 0) = 0.0;
  EXPECT_LT(max_fd_error([&](Tape&, std::vector<Var>& v) { return ad::masked_softmax(v[0], mask); },
                         {randn(4, 5, rng)}),
            1e-5);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                         {randn(3, 6, rng), randn(1, 6, rng), randn(1, 6, rng)}),
            1e-5);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::softmax_cross_entropy(v[0], 2); },
                         {randn(1, 5, rng)}),
            1e-6);
}

TEST(Autodiff, StructuralOpGradients) {
  std::mt19937_64 rng(5);
  const std::vector<int> ids{2, 0, 2, 1};
  EXPECT_LT(max_fd_error([&](Tape&, std::vector<Var>& v) { return ad::gather_rows(v[0], ids); }, {randn(3, 4, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error(
                [](Tape&, std::vector<Var>& v) {
                  const Var parts[] = {v[0], v[1]};
                  return ad::concat_cols(parts);
                },
                {randn(3, 2, rng), randn(3, 4, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error(
                [](Tape&, std::vector<Var>& v) {
                  const Var parts[] = {v[0], v[1]};
                  return ad::concat_rows(parts);
                },
                {randn(1, 3, rng), randn(2, 3, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::replace_rows(v[0], 1, v[1]); },
                         {randn(5, 3, rng), randn(2, 3, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::slice_cols(ad::slice_rows(v[0], 1, 2), 1, 2); },
                         {randn(4, 4, rng)}),
            1e-6);
  EXPECT_LT(max_fd_error([](Tape&, std::vector<Var>& v) { return ad::mean_rows(v[0]); }, {randn(4, 3, rng)}), 1e-6);
}

TEST(Autodiff, GeluMatchesClosedForm) {
  Tape t;
  Matrix x(1, 3);
  x << 0.0, 1.0, -2.0;
  const Matrix y = ad::gelu(t.constant(x)).value();
  for (int c = 0; c < 3; ++c) {
    const double v = x(0, c);
    EXPECT_NEAR(y(0, c), 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))), 1e-15);
  }
  EXPECT_NEAR(y(0, 1), 0.8413447460685429, 1e-12);
}

TEST(Autodiff, MaskedSoftmaxZerosAndEmptyRows) {
  Tape t;
  Matrix x(2, 3);
  x << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0;
  Matrix mask(2, 3);
  mask << 1, 0, 1, 0, 0, 0;
  const Matrix y = ad::masked_softmax(t.constant(x), mask).value();
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_NEAR(y(0, 0) + y(0, 2), 1.0, 1e-15);
  EXPECT_NEAR(y(0, 2) / y(0, 0), std::exp(2.0), 1e-12);
  EXPECT_EQ(y.row(1).cwiseAbs().sum(), 0.0);
}

TEST(Autodiff, TailMaskBlocksGradient) {
  Parameter p;
  p.value = Matrix::Random(1, 5);
  p.zero_grad();
  Tape t;
  Var logits = ad::mask_tail_cols(t.param(p), 3);
  EXPECT_TRUE(std::isinf(logits.value()(0, 4)));
  EXPECT_EQ(ad::softmax_row(logits.value())(0, 3), 0.0);
  t.backward(ad::softmax_cross_entropy(logits, 1));
  EXPECT_EQ(p.grad(0, 3), 0.0);
  EXPECT_EQ(p.grad(0, 4), 0.0);
  EXPECT_NE(p.grad(0, 0), 0.0);
  Tape t2;
  EXPECT_THROW(ad::softmax_cross_entropy(ad::mask_tail_cols(t2.constant(Matrix::Zero(1, 4)), 2), 3), ShapeError);
}

TEST(Autodiff, SharedLeafAccumulates) {
  Parameter p;
  p.value = Matrix::Constant(1, 1, 3.0);
  p.zero_grad();
  Tape t;
  Var x = t.param(p);
  t.backward(ad::mul(x, x));  // d(x^2)/dx = 6
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 6.0);
}

TEST(Autodiff, FrozenParameterGetsNoGradient) {
  Parameter p;
  p.value = Matrix::Ones(2, 2);
  p.trainable = false;
  p.zero_grad();
  Tape t;
  t.backward(ad::sum(ad::scale(t.param(p), 2.0)));
  EXPECT_EQ(p.grad.cwiseAbs().sum(), 0.0);
}
