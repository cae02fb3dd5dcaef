#include <cmath>

#include <gtest/gtest.h>

#include "subjepa/mlp.hpp"

using namespace subjepa;

namespace {

// Straight-line single-sample forward pass.
std::vector<double> naive_forward(const Mlp& net, std::vector<double> x) {
  for (const auto& l : net.layers()) {
    std::vector<double> y(l.out_dim());
    for (std::size_t o = 0; o < l.out_dim(); ++o) {
      double s = l.b[o];
      for (std::size_t i = 0; i < l.in_dim(); ++i) s += l.w(o, i) * x[i];
      if (l.act == Activation::Tanh) s = std::tanh(s);
      if (l.act == Activation::Relu) s = std::max(0.0, s);
      y[o] = s;
    }
    x = std::move(y);
  }
  return x;
}

// Scalar loss sum(C .* net(X)) for a fixed C.
double scalar_loss(const Mlp& net, const Matrix& x, const Matrix& c) {
  return dot(net.forward(x).data(), c.data());
}

void randomize_biases(Mlp& net, Rng& r) {
  for (auto& l : net.layers())
    for (auto& b : l.b) b = 0.3 * r.gaussian();
}

} // namespace

TEST(Mlp, ZeroParamsGiveZeroOutput) {
  Mlp net({5, 4, 3}, Activation::Tanh);
  const auto y = net.forward(std::vector<double>{1, 2, 3, 4, 5});
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, SingleLinearLayerIsMatvec) {
  Rng r(1);
  Mlp net({4, 3}, Activation::Tanh);
  net.init_random(r);
  const std::vector<double> x{0.5, -1.0, 2.0, 0.25};
  const auto y = net.forward(x);
  const auto ref = matvec(net.layers()[0].w, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], ref[i], 1e-15);
  EXPECT_EQ(net.hidden_activation(), Activation::Identity);
}

TEST(Mlp, BatchedForwardMatchesNaiveOracle) {
  for (auto act : {Activation::Tanh, Activation::Relu}) {
    Rng r(2);
    Mlp net({6, 8, 5, 3}, act);
    net.init_random(r);
    randomize_biases(net, r);
    const Matrix x = gaussian_matrix(r, 7, 6);
    const Matrix y = net.forward(x);
    for (std::size_t i = 0; i < 7; ++i) {
      const auto ref = naive_forward(net, std::vector<double>(x.row(i).begin(), x.row(i).end()));
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y(i, c), ref[c], 1e-12);
    }
  }
}

TEST(Mlp, ShapeChecks) {
  EXPECT_THROW(Mlp({4}, Activation::Tanh), ContractError);
  EXPECT_THROW(Mlp({4, 0, 2}, Activation::Tanh), ContractError);
  Mlp net({4, 2}, Activation::Tanh);
  EXPECT_THROW(net.forward(Matrix(2, 3)), ContractError);
  MlpCache cache;
  net.forward(Matrix(2, 4), &cache);
  EXPECT_THROW(net.backward(cache, Matrix(2, 3)), ContractError);
  EXPECT_EQ(net.sizes(), (std::vector<std::size_t>{4, 2}));
  EXPECT_EQ(net.num_params(), 10u);
}

TEST(Mlp, ZeroLastLayerInit) {
  Rng r(3);
  Mlp net({4, 6, 2}, Activation::Tanh);
  net.init_random(r, true);
  for (double v : net.layers().back().w.data()) EXPECT_EQ(v, 0.0);
  const Matrix y = net.forward(gaussian_matrix(r, 3, 4));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, BackwardMatchesFiniteDifferencesOnEveryParameter) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const Activation act = seed % 2 ? Activation::Relu : Activation::Tanh;
    Mlp net({3 + seed % 3, 5, 4, 2 + seed % 2}, act);
    net.init_random(r);
    randomize_biases(net, r);
    const Matrix x = gaussian_matrix(r, 4, net.in_dim());
    const Matrix c = gaussian_matrix(r, 4, net.out_dim());
    MlpCache cache;
    net.forward(x, &cache);
    net.zero_grads();
    const Matrix dx = net.backward(cache, c);

    const double h = 1e-6;
    double worst = 0.0;
    const auto check = [&](double& param, double analytic) {
      const double v = param;
      param = v + h;
      const double fp = scalar_loss(net, x, c);
      param = v - h;
      const double fm = scalar_loss(net, x, c);
      param = v;
      const double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(analytic - fd) / std::max(1e-2, std::abs(fd)));
    };
    for (auto& l : net.layers()) {
      for (std::size_t i = 0; i < l.w.size(); ++i) check(l.w.data()[i], l.dw.data()[i]);
      for (std::size_t i = 0; i < l.b.size(); ++i) check(l.b[i], l.db[i]);
    }
    Matrix xv = x;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      xv.data()[i] = v + h;
      const double fp = scalar_loss(net, xv, c);
      xv.data()[i] = v - h;
      const double fm = scalar_loss(net, xv, c);
      xv.data()[i] = v;
      const double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(dx.data()[i] - fd) / std::max(1e-2, std::abs(fd)));
    }
    EXPECT_LT(worst, 1e-4) << "seed " << seed;
  }
}

TEST(Mlp, BackwardAccumulatesUntilZeroed) {
  Rng r(4);
  Mlp net({3, 4, 2}, Activation::Tanh);
  net.init_random(r);
  const Matrix x = gaussian_matrix(r, 2, 3), c = gaussian_matrix(r, 2, 2);
  MlpCache cache;
  net.forward(x, &cache);
  net.zero_grads();
  net.backward(cache, c);
  const Matrix once = net.layers()[0].dw;
  net.backward(cache, c);
  Matrix twice = once;
  twice *= 2.0;
  EXPECT_LT(max_abs_diff(net.layers()[0].dw, twice), 1e-14);
  net.zero_grads();
  for (double v : net.layers()[0].dw.data()) EXPECT_EQ(v, 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> w{1.0, -2.0, 0.5};
  std::vector<double> g{0.3, -4.0, 0.0};
  Adam opt({0.01, 0.9, 0.999, 1e-8});
  opt.step({{w, g}});
  // Bias-corrected first step is lr * sign(g) (zero gradient stays put).
  EXPECT_NEAR(w[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w[1], -2.0 + 0.01, 1e-9);
  EXPECT_EQ(w[2], 0.5);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, MinimizesQuadratic) {
  std::vector<double> w{3.0, -5.0};
  std::vector<double> g(2);
  Adam opt({0.05, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 2000; ++i) {
    g[0] = 2.0 * (w[0] - 1.0);
    g[1] = 2.0 * 10.0 * (w[1] + 2.0);
    opt.step({{w, g}});
  }
  EXPECT_NEAR(w[0], 1.0, 1e-3);
  EXPECT_NEAR(w[1], -2.0, 1e-3);
}

TEST(Adam, LayoutChangeRejected) {
  std::vector<double> a{1.0}, ga{1.0}, b{1.0, 2.0}, gb{1.0, 1.0};
  Adam opt;
  opt.step({{a, ga}});
  EXPECT_THROW(opt.step({{a, ga}, {b, gb}}), ContractError);
  EXPECT_THROW(opt.step({{b, gb}}), ContractError);
}

TEST(Activation, StringRoundTrip) {
  for (auto a : {Activation::Identity, Activation::Tanh, Activation::Relu})
    EXPECT_EQ(activation_from_string(to_string(a)), a);
  EXPECT_THROW(activation_from_string("gelu"), ContractError);
}
