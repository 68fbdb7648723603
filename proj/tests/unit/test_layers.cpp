// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "avsed/gradcheck.hpp"
#include "avsed/gru.hpp"
#include "avsed/layers.hpp"
#include "test_util.hpp"

using namespace avsed;
using avsed::testing::random_tensor;

namespace {

// Direct six-loop evaluation of a 3x3, stride 1, pad 1 convolution.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                          const Tensor<double>& b) {
  const std::size_t nb = x.dim(0), cin = x.dim(1), nt = x.dim(2),
                    nf = x.dim(3), cout = w.dim(0);
  Tensor<double> y({nb, cout, nt, nf});
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < nt; ++t)
        for (std::size_t f = 0; f < nf; ++f) {
          double s = b[o];
          for (std::size_t c = 0; c < cin; ++c)
            for (int ky = -1; ky <= 1; ++ky)
              for (int kx = -1; kx <= 1; ++kx) {
                const long tt = static_cast<long>(t) + ky;
                const long ff = static_cast<long>(f) + kx;
                if (tt < 0 || ff < 0 || tt >= static_cast<long>(nt) ||
                    ff >= static_cast<long>(nf))
                  continue;
                s += w.at(o, c, ky + 1, kx + 1) * x.at(n, c, tt, ff);
              }
          y.at(n, o, t, f) = s;
        }
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("conv2d identity kernel and bias-only output") {
  Rng rng(3);
  Tensor<float> w({1, 1, 3, 3});
  w.at(0, 0, 1, 1) = 1.0f;
  Tensor<float> b({1});
  Tensor<float> x = random_tensor<float>({2, 1, 5, 7}, rng);
  CHECK(conv2d(x, w, b) == x);

  Tensor<float> w2 = random_tensor<float>({3, 2, 3, 3}, rng);
  Tensor<float> b2({3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  Tensor<float> zero({1, 2, 4, 4});
  Tensor<float> y = conv2d(zero, w2, b2);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t f = 0; f < 4; ++f) CHECK(y.at(0, o, t, f) == b2[o]);
}

TEST_CASE("conv2d matches six-loop oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor<double>({1, 1, 4, 4}, rng);
    auto w = random_tensor<double>({2, 1, 3, 3}, rng);
    auto b = random_tensor<double>({2}, rng);
    CHECK(max_abs_diff(conv2d(x, w, b), naive_conv(x, w, b)) < 1e-6);
  }
  auto x = random_tensor<double>({2, 3, 5, 6}, rng);
  auto w = random_tensor<double>({4, 3, 3, 3}, rng);
  auto b = random_tensor<double>({4}, rng);
  CHECK(max_abs_diff(conv2d(x, w, b), naive_conv(x, w, b)) < 1e-12);
}

TEST_CASE("conv2d rejects channel mismatch and early backward") {
  Tensor<float> x({1, 2, 4, 4});
  Tensor<float> w({3, 1, 3, 3});
  Tensor<float> b({3});
  CHECK_THROWS_AS(conv2d(x, w, b), ShapeError);

  Conv2d<float> conv(1, 2);
  CHECK_THROWS_WITH_AS(conv.backward(Tensor<float>({1, 2, 4, 4})),
                       doctest::Contains("backward before forward"),
                       RuntimeError);
}

TEST_CASE("conv2d backward: zero and identity cases") {
  Rng rng(5);
  Conv2d<double> conv(1, 1);
  conv.weight.value.at(0, 0, 1, 1) = 1.0;
  auto x = random_tensor<double>({1, 1, 4, 5}, rng);
  conv.forward(x);
  auto g = random_tensor<double>({1, 1, 4, 5}, rng);
  CHECK(max_abs_diff(conv.backward(g), g) == 0.0);

  Conv2d<double> c2(2, 3);
  c2.init(rng);
  c2.forward(random_tensor<double>({2, 2, 3, 3}, rng));
  auto gi = c2.backward(Tensor<double>({2, 3, 3, 3}));
  for (double v : gi.data()) CHECK(v == 0.0);
  for (double v : c2.weight.grad.data()) CHECK(v == 0.0);
  for (double v : c2.bias.grad.data()) CHECK(v == 0.0);
}

TEST_CASE("batchnorm train mode normalises per channel") {
  Rng rng(9);
  BatchNorm2d<double> bn(3);
  auto x = random_tensor<double>({4, 3, 4, 4}, rng, -3.0, 5.0);
  auto y = bn.forward(x, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0, ss = 0.0;
    const double n = 4 * 16;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 16; ++i) s += y.at(b, c, i / 4, i % 4);
    const double mean = s / n;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        const double d = y.at(b, c, i / 4, i % 4) - mean;
        ss += d * d;
      }
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::abs(std::sqrt(ss / n) - 1.0) < 1e-3);
  }
  for (std::size_t c = 0; c < 3; ++c) CHECK(bn.running_var[c] >= 0.0);
}

TEST_CASE("batchnorm gamma/beta set output scale and shift") {
  Rng rng(10);
  BatchNorm2d<double> bn(2);
  bn.gamma.value[0] = -2.0;
  bn.gamma.value[1] = 0.5;
  bn.beta.value[0] = 1.0;
  bn.beta.value[1] = -3.0;
  auto x = random_tensor<double>({2, 2, 8, 4}, rng);
  auto y = bn.forward(x, Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0.0, ss = 0.0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t f = 0; f < 4; ++f) s += y.at(b, c, t, f);
    const double mean = s / 64.0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t f = 0; f < 4; ++f)
          ss += (y.at(b, c, t, f) - mean) * (y.at(b, c, t, f) - mean);
    CHECK(std::abs(mean - bn.beta.value[c]) < 1e-3);
    CHECK(std::abs(std::sqrt(ss / 64.0) - std::abs(bn.gamma.value[c])) < 1e-3);
  }
}

TEST_CASE("batchnorm eval mode with initial statistics") {
  BatchNorm2d<float> bn(2);
  bn.gamma.value[1] = 3.0f;
  bn.beta.value[1] = 0.25f;
  Tensor<float> x({1, 2, 2, 2}, 1.5f);
  auto y = bn.forward(x, Mode::kEval);
  const double scale = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y.at(0, 0, 1, 1) == doctest::Approx(1.5 * scale).epsilon(1e-6));
  CHECK(y.at(0, 1, 0, 0) == doctest::Approx(3.0 * 1.5 * scale + 0.25).epsilon(1e-6));
  // Eval forwards are deterministic and leave running stats untouched.
  CHECK(bn.forward(x, Mode::kEval) == y);
  CHECK(bn.running_mean[0] == 0.0f);
  CHECK(bn.running_var[0] == 1.0f);
}

TEST_CASE("batchnorm matches direct formula evaluation") {
  Rng rng(12);
  BatchNorm2d<double> bn(3);
  for (std::size_t c = 0; c < 3; ++c) {
    bn.gamma.value[c] = 0.5 + c;
    bn.beta.value[c] = -0.3 * c;
  }
  auto x = random_tensor<double>({3, 3, 2, 5}, rng);
  auto y = bn.forward(x, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> vals;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t f = 0; f < 5; ++f) vals.push_back(x.at(b, c, t, f));
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= vals.size();
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= vals.size();
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t f = 0; f < 5; ++f) {
          const double expect =
              bn.gamma.value[c] * (x.at(b, c, t, f) - mean) /
                  std::sqrt(var + 1e-5) +
              bn.beta.value[c];
          CHECK(std::abs(y.at(b, c, t, f) - expect) < 1e-5);
        }
    const double unbiased = var * vals.size() / (vals.size() - 1);
    CHECK(bn.running_mean[c] == doctest::Approx(0.1 * mean));
    CHECK(bn.running_var[c] == doctest::Approx(0.9 + 0.1 * unbiased));
  }
}

TEST_CASE("avgpool2d values, oracle and divisibility") {
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 3, 5, 7});
  CHECK(avgpool2d(x, 2, 2)[0] == 4.0f);

  Tensor<float> c({2, 3, 4, 8}, 2.5f);
  auto pc = avgpool2d(c, 2, 2);
  for (float v : pc.data()) CHECK(v == 2.5f);
  // Broadcast upsampling of the pooled constant reproduces the input.
  auto up = avgpool2d_backward(pc, c.shape(), 2, 2);
  for (float& v : up.data()) v *= 4.0f;
  CHECK(up == c);

  Rng rng(4);
  auto r = random_tensor<double>({2, 2, 6, 4}, rng);
  auto p = avgpool2d(r, 3, 2);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t ch = 0; ch < 2; ++ch)
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t f = 0; f < 2; ++f) {
          double s = 0.0;
          for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j)
              s += r.at(b, ch, t * 3 + i, f * 2 + j);
          CHECK(p.at(b, ch, t, f) == doctest::Approx(s / 6.0));
        }
  CHECK_THROWS_AS(avgpool2d(Tensor<float>({1, 1, 5, 4}), 2, 2), ShapeError);
  CHECK_THROWS_AS(avgpool2d(Tensor<float>({1, 1, 4, 3}), 1, 2), ShapeError);
}

TEST_CASE("relu and sigmoid values") {
  Tensor<float> x({2}, std::vector<float>{-1.0f, 2.0f});
  auto r = relu(x);
  CHECK(r[0] == 0.0f);
  CHECK(r[1] == 2.0f);
  CHECK(sigmoid(Tensor<float>({1}, 0.0f))[0] == 0.5f);
  auto s = sigmoid(Tensor<double>({3}, std::vector<double>{-800, 0.3, 800}));
  CHECK(s[0] >= 0.0);
  CHECK(s[2] <= 1.0);
  CHECK(s.all_finite());
}

TEST_CASE("sigmoid gradient matches finite differences") {
  Rng rng(21);
  std::uniform_real_distribution<double> d(-6.0, 6.0);
  for (int i = 0; i < 200; ++i) {
    const double x = d(rng), eps = 1e-6;
    Tensor<double> t({1}, x);
    auto y = sigmoid(t);
    const double analytic = sigmoid_backward(Tensor<double>({1}, 1.0), y)[0];
    const double numeric = (sigm(x + eps) - sigm(x - eps)) / (2 * eps);
    CHECK(std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8) <
          1e-6);
  }
}

TEST_CASE("dropout: eval identity, rate zero, expectation") {
  Rng rng(1);
  auto x = random_tensor<float>({10, 10}, rng);
  CHECK(dropout(x, 0.33, rng, Mode::kEval).output == x);
  CHECK(dropout(x, 0.0, rng, Mode::kTrain).output == x);
  CHECK_THROWS_AS(dropout(x, 1.0, rng, Mode::kTrain), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, rng, Mode::kTrain), ConfigError);

  Tensor<float> ones({1000000}, 1.0f);
  auto r = dropout(ones, 0.33, rng, Mode::kTrain);
  double s = 0.0;
  for (float v : r.output.data()) s += v;
  const double mean = s / 1e6;
  CHECK(mean >= 0.99);
  CHECK(mean <= 1.01);
  // Backward applies the same mask.
  Dropout<float> layer(0.33);
  auto y = layer.forward(ones, Mode::kTrain, &rng);
  CHECK(layer.backward(ones) == y);
}

TEST_CASE("linear: identity, arithmetic and oracle") {
  Tensor<float> w({2, 2}, std::vector<float>{1, 0, 0, 1});
  Tensor<float> b({2});
  Tensor<float> x({3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK(linear(x, w, b) == x);

  Tensor<float> x1({1, 2}, std::vector<float>{1, 2});
  Tensor<float> w1({1, 2}, std::vector<float>{1, 1});
  Tensor<float> b1({1}, 3.0f);
  CHECK(linear(x1, w1, b1)[0] == 6.0f);
  CHECK_THROWS_AS(linear(Tensor<float>({1, 3}), w1, b1), ShapeError);

  Rng rng(8);
  auto xr = random_tensor<double>({2, 3, 5}, rng);
  auto wr = random_tensor<double>({4, 5}, rng);
  auto br = random_tensor<double>({4}, rng);
  auto y = linear(xr, wr, br);
  CHECK(y.shape() == Shape{2, 3, 4});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t o = 0; o < 4; ++o) {
      double s = br[o];
      for (std::size_t i = 0; i < 5; ++i) s += xr[r * 5 + i] * wr.at(o, i);
      CHECK(std::abs(y[r * 4 + o] - s) < 1e-6);
    }
}

TEST_CASE("bigru: zero weights give zero output") {
  BiGru<float> gru(5, 7);
  Tensor<float> x({2, 4, 5}, 1.0f);
  auto y = gru.forward(x);
  CHECK(y.shape() == Shape{2, 4, 14});
  for (float v : y.data()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(gru.forward(x, {4, 0}), ShapeError);
}

TEST_CASE("bigru: hand-unrolled scalar recurrence") {
  BiGru<double> gru(1, 1, 1);
  auto& fwd = gru.params.layers[0][0];
  auto& bwd = gru.params.layers[0][1];
  const double wi_f[3] = {0.3, -0.2, 0.7}, wh_f[3] = {0.4, 0.1, -0.6};
  const double bi_f[3] = {0.05, 0.1, -0.1}, bh_f[3] = {0.0, 0.2, 0.3};
  const double wi_b[3] = {-0.5, 0.8, 0.25}, wh_b[3] = {0.9, -0.3, 0.45};
  const double bi_b[3] = {0.1, 0.0, 0.2}, bh_b[3] = {-0.2, 0.05, 0.0};
  for (int g = 0; g < 3; ++g) {
    fwd.w_ih.value[g] = wi_f[g];
    fwd.w_hh.value[g] = wh_f[g];
    fwd.b_ih.value[g] = bi_f[g];
    fwd.b_hh.value[g] = bh_f[g];
    bwd.w_ih.value[g] = wi_b[g];
    bwd.w_hh.value[g] = wh_b[g];
    bwd.b_ih.value[g] = bi_b[g];
    bwd.b_hh.value[g] = bh_b[g];
  }
  const double xs[2] = {0.5, -1.0};
  auto step = [](double x, double h, const double* wi, const double* wh,
                 const double* bi, const double* bh) {
    const double r = sigm(wi[0] * x + bi[0] + wh[0] * h + bh[0]);
    const double z = sigm(wi[1] * x + bi[1] + wh[1] * h + bh[1]);
    const double n = std::tanh(wi[2] * x + bi[2] + r * (wh[2] * h + bh[2]));
    return (1 - z) * n + z * h;
  };
  const double f0 = step(xs[0], 0.0, wi_f, wh_f, bi_f, bh_f);
  const double f1 = step(xs[1], f0, wi_f, wh_f, bi_f, bh_f);
  const double b1 = step(xs[1], 0.0, wi_b, wh_b, bi_b, bh_b);
  const double b0 = step(xs[0], b1, wi_b, wh_b, bi_b, bh_b);

  Tensor<double> x({1, 2, 1}, std::vector<double>{xs[0], xs[1]});
  auto y = gru.forward(x);
  CHECK(y.at(0, 0, 0) == doctest::Approx(f0).epsilon(1e-12));
  CHECK(y.at(0, 1, 0) == doctest::Approx(f1).epsilon(1e-12));
  CHECK(y.at(0, 0, 1) == doctest::Approx(b0).epsilon(1e-12));
  CHECK(y.at(0, 1, 1) == doctest::Approx(b1).epsilon(1e-12));
}

TEST_CASE("bigru: time reversal with swapped directions") {
  Rng rng(17);
  const std::size_t nt = 6, d = 3, h = 4;
  BiGru<double> a(d, h, 2);
  a.init(rng);
  for (auto& np : a.named_params("g"))
    if (np.name.find(".b_") != std::string::npos)
      for (auto& v : np.param->value.data())
        v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  BiGru<double> b = a;
  for (auto& layer : b.params.layers) std::swap(layer[0], layer[1]);
  // Layer 2 sees [bwd, fwd] halves after the swap; permute its input columns.
  for (auto& dir : b.params.layers[1]) {
    auto& w = dir.w_ih.value;
    for (std::size_t r = 0; r < w.dim(0); ++r)
      for (std::size_t c = 0; c < h; ++c) std::swap(w.at(r, c), w.at(r, c + h));
  }
  auto x = random_tensor<double>({1, nt, d}, rng);
  Tensor<double> xr(x.shape());
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t i = 0; i < d; ++i) xr.at(0, t, i) = x.at(0, nt - 1 - t, i);
  auto ya = a.forward(x);
  auto yb = b.forward(xr);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t k = 0; k < h; ++k) {
      CHECK(yb.at(0, t, k) ==
            doctest::Approx(ya.at(0, nt - 1 - t, h + k)).epsilon(1e-12));
      CHECK(yb.at(0, t, h + k) ==
            doctest::Approx(ya.at(0, nt - 1 - t, k)).epsilon(1e-12));
    }
}

TEST_CASE("bigru: padded frames do not influence valid outputs") {
  Rng rng(2);
  BiGru<double> gru(3, 4);
  gru.init(rng);
  auto x = random_tensor<double>({1, 6, 3}, rng);
  auto short_x = Tensor<double>({1, 4, 3});
  std::copy(x.ptr(), x.ptr() + 12, short_x.ptr());
  auto full = gru.forward(x, {4});
  auto ref = gru.forward(short_x);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < 8; ++k)
      CHECK(full.at(0, t, k) == doctest::Approx(ref.at(0, t, k)).epsilon(1e-14));
  for (std::size_t k = 0; k < 8; ++k) CHECK(full.at(0, 5, k) == 0.0);
}

TEST_CASE("grad_check: linear layer is exact to 1e-6") {
  Rng rng(31);
  Linear<double> lin(4, 3);
  lin.init(rng);
  auto x = random_tensor<double>({5, 4}, rng);
  GradCheckTarget t;
  t.name = "linear";
  t.params = {{"weight", &lin.weight}, {"bias", &lin.bias}};
  t.inputs = {{"x", &x}};
  t.forward = [&] { return lin.forward(x); };
  t.backward = [&](const Tensor<double>& g) {
    return std::vector<Tensor<double>>{lin.backward(g)};
  };
  auto rep = grad_check(t);
  CHECK(rep.max_relative_error < 1e-6);
  CHECK(rep.entries.size() == 3);
}

TEST_CASE("grad_check: non-finite values name the offender") {
  Linear<double> lin(2, 1);
  Tensor<double> x({1, 2}, std::numeric_limits<double>::infinity());
  GradCheckTarget t;
  t.name = "broken";
  t.params = {{"weight", &lin.weight}};
  t.forward = [&] { return lin.forward(x); };
  t.backward = [&](const Tensor<double>& g) {
    lin.backward(g);
    return std::vector<Tensor<double>>{};
  };
  CHECK_THROWS_AS(grad_check(t), RuntimeError);
}

TEST_CASE("grad_check: conv2d backward on random small case") {
  Rng rng(44);
  Conv2d<double> conv(2, 3);
  conv.init(rng);
  for (auto& v : conv.bias.value.data()) v = 0.1;
  auto x = random_tensor<double>({2, 2, 3, 4}, rng);
  GradCheckTarget t;
  t.name = "conv";
  t.params = {{"weight", &conv.weight}, {"bias", &conv.bias}};
  t.inputs = {{"x", &x}};
  t.forward = [&] { return conv.forward(x); };
  t.backward = [&](const Tensor<double>& g) {
    return std::vector<Tensor<double>>{conv.backward(g)};
  };
  GradCheckOptions o;
  o.max_coords_per_tensor = 0;
  CHECK(grad_check(t, o).max_relative_error < 1e-4);
}
