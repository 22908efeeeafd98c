#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "vita/errors.hpp"
#include "vita/ops.hpp"

using namespace vita;
using vita::test::random_tensor;

namespace {

Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, Index s,
                           Index p) {
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(0), k = w.dim(2);
  const Index Ho = (H + 2 * p - k) / s + 1, Wo = (W + 2 * p - k) / s + 1;
  Tensor<double> y(Shape{N, F, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index f = 0; f < F; ++f)
      for (Index oy = 0; oy < Ho; ++oy)
        for (Index ox = 0; ox < Wo; ++ox) {
          double acc = b.defined() ? b.at(f) : 0.0;
          for (Index c = 0; c < C; ++c)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = oy * s + ky - p, ix = ox * s + kx - p;
                if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
                acc += x.at(((n * C + c) * H + iy) * W + ix) * w.at(((f * C + c) * k + ky) * k + kx);
              }
          y.at(((n * F + f) * Ho + oy) * Wo + ox) = acc;
        }
  return y;
}

Tensor<double> conv_transpose_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                     Index s, Index p) {
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(1), k = w.dim(2);
  const Index Ho = (H - 1) * s - 2 * p + k, Wo = (W - 1) * s - 2 * p + k;
  Tensor<double> y(Shape{N, F, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index f = 0; f < F; ++f)
      for (Index i = 0; i < Ho * Wo; ++i) y.at((n * F + f) * Ho * Wo + i) = b.defined() ? b.at(f) : 0.0;
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index iy = 0; iy < H; ++iy)
        for (Index ix = 0; ix < W; ++ix)
          for (Index f = 0; f < F; ++f)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index oy = iy * s + ky - p, ox = ix * s + kx - p;
                if (oy < 0 || ox < 0 || oy >= Ho || ox >= Wo) continue;
                y.at(((n * F + f) * Ho + oy) * Wo + ox) +=
                    x.at(((n * C + c) * H + iy) * W + ix) * w.at(((c * F + f) * k + ky) * k + kx);
              }
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (Index i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
  return s;
}

}  // namespace

TEST_CASE("matmul equals triple loop") {
  auto a = random_tensor<double>({3, 5}, 1), b = random_tensor<double>({5, 4}, 2);
  auto y = matmul(a, b);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) {
      double s = 0;
      for (Index k = 0; k < 5; ++k) s += a.at(i * 5 + k) * b.at(k * 4 + j);
      CHECK(y.at(i * 4 + j) == doctest::Approx(s).epsilon(1e-12));
    }
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("conv2d equals nested loops") {
  auto x = random_tensor<double>({2, 3, 7, 7}, 3), w = random_tensor<double>({4, 3, 3, 3}, 4);
  auto b = random_tensor<double>({4}, 5);
  CHECK(max_abs_diff(conv2d(x, w, b, 1, 1), conv_oracle(x, w, b, 1, 1)) < 1e-5);
  CHECK(max_abs_diff(conv2d(x, w, Tensor<double>(), 2, 0), conv_oracle(x, w, Tensor<double>(), 2, 0)) < 1e-5);
  auto w1 = random_tensor<double>({5, 3, 1, 1}, 6);
  CHECK(max_abs_diff(conv2d(x, w1, Tensor<double>(), 1, 0), conv_oracle(x, w1, Tensor<double>(), 1, 0)) < 1e-5);
}

TEST_CASE("conv2d shape errors") {
  auto x = random_tensor<double>({1, 3, 5, 5}, 1);
  CHECK_THROWS_AS(conv2d(x, random_tensor<double>({2, 2, 3, 3}, 2), Tensor<double>(), 1, 1), DimensionError);
  CHECK_THROWS_AS(conv2d(random_tensor<double>({3, 5, 5}, 1), random_tensor<double>({2, 3, 3, 3}, 2),
                         Tensor<double>(), 1, 1),
                  DimensionError);
}

TEST_CASE("conv_transpose2d equals scatter loops") {
  auto b = random_tensor<double>({2}, 9);
  auto x = random_tensor<double>({2, 3, 4, 4}, 7), w = random_tensor<double>({3, 2, 2, 2}, 8);
  CHECK(max_abs_diff(conv_transpose2d(x, w, b, 2, 0), conv_transpose_oracle(x, w, b, 2, 0)) < 1e-5);
  auto w3 = random_tensor<double>({3, 2, 3, 3}, 10);
  CHECK(max_abs_diff(conv_transpose2d(x, w3, b, 1, 1), conv_transpose_oracle(x, w3, b, 1, 1)) < 1e-5);
  auto x1 = random_tensor<double>({2, 3, 1, 1}, 11), w7 = random_tensor<double>({3, 2, 7, 7}, 12);
  auto y = conv_transpose2d(x1, w7, b, 1, 0);
  CHECK(y.shape() == Shape{2, 2, 7, 7});
  CHECK(max_abs_diff(y, conv_transpose_oracle(x1, w7, b, 1, 0)) < 1e-5);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  struct Geometry {
    Index C, F, H, k, s, p;
  };
  // Every geometry the decoders use.
  for (const Geometry g : {Geometry{3, 4, 8, 3, 1, 1}, Geometry{3, 4, 8, 2, 2, 0}, Geometry{4, 2, 6, 1, 1, 0},
                           Geometry{5, 3, 7, 7, 1, 0}}) {
    auto x = random_tensor<double>({2, g.C, g.H, g.H}, 20 + static_cast<std::uint64_t>(g.k));
    auto w = random_tensor<double>({g.F, g.C, g.k, g.k}, 30 + static_cast<std::uint64_t>(g.k));
    auto cx = conv2d(x, w, Tensor<double>(), g.s, g.p);
    auto y = random_tensor<double>(cx.shape(), 40);
    auto ty = conv_transpose2d(y, w, Tensor<double>(), g.s, g.p);
    REQUIRE(ty.shape() == x.shape());
    CHECK(std::abs(dot(cx, y) - dot(x, ty)) < 1e-5);
  }
}

TEST_CASE("batch_norm2d statistics") {
  auto x = random_tensor<double>({3, 2, 4, 4}, 50, -2, 3);
  auto g = random_tensor<double>({2}, 51, 0.5, 1.5), b = random_tensor<double>({2}, 52);
  auto state = BatchNormState<double>::fresh(2);
  auto y = batch_norm2d(x, g, b, state, Mode::train);
  const Index m = 3 * 16;
  for (Index c = 0; c < 2; ++c) {
    double mean = 0, var = 0;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < 16; ++i) mean += x.at((n * 2 + c) * 16 + i);
    mean /= m;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < 16; ++i) var += std::pow(x.at((n * 2 + c) * 16 + i) - mean, 2);
    const double biased = var / m, unbiased = var / (m - 1);
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < 16; ++i) {
        const Index k = (n * 2 + c) * 16 + i;
        CHECK(y.at(k) == doctest::Approx(g.at(c) * (x.at(k) - mean) / std::sqrt(biased + 1e-5) + b.at(c)).epsilon(1e-10));
      }
    CHECK(state.running_mean.at(c) == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(state.running_var.at(c) == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
  }
  // Eval mode uses the running statistics and leaves them unchanged.
  const auto rm = state.running_mean.clone(), rv = state.running_var.clone();
  auto ye = batch_norm2d(x, g, b, state, Mode::eval);
  CHECK(state.running_mean.values()[0] == rm.values()[0]);
  CHECK(ye.at(0) == doctest::Approx(g.at(0) * (x.at(0) - rm.at(0)) / std::sqrt(rv.at(0) + 1e-5) + b.at(0)));
}

TEST_CASE("layer_norm normalizes the last axis") {
  auto x = random_tensor<double>({2, 3, 8}, 60, -1, 4);
  auto g = Tensor<double>(Shape{8}, 1.0), b = Tensor<double>(Shape{8}, 0.0);
  auto y = layer_norm(x, g, b);
  for (Index r = 0; r < 6; ++r) {
    double mean = 0, sq = 0;
    for (Index i = 0; i < 8; ++i) mean += y.at(r * 8 + i);
    mean /= 8;
    for (Index i = 0; i < 8; ++i) sq += std::pow(y.at(r * 8 + i) - mean, 2);
    CHECK(std::abs(mean) < 1e-10);
    CHECK(sq / 8 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("multi_head_attention equals explicit softmax(QK^T/sqrt(d))V") {
  const Index T = 3, D = 4, H = 2, dh = 2;
  auto x = random_tensor<double>({1, T, D}, 70);
  AttentionWeights<double> w{random_tensor<double>({D, 3 * D}, 71), random_tensor<double>({3 * D}, 72),
                             random_tensor<double>({D, D}, 73), random_tensor<double>({D}, 74)};
  Tensor<double> probs;
  auto y = multi_head_attention(x, w, H, &probs);

  std::vector<double> qkv(T * 3 * D);
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < 3 * D; ++j) {
      double s = w.qkv_b.at(j);
      for (Index i = 0; i < D; ++i) s += x.at(t * D + i) * w.qkv_w.at(i * 3 * D + j);
      qkv[static_cast<std::size_t>(t * 3 * D + j)] = s;
    }
  auto Q = [&](Index t, Index h, Index i) { return qkv[static_cast<std::size_t>(t * 3 * D + h * dh + i)]; };
  auto K = [&](Index t, Index h, Index i) { return qkv[static_cast<std::size_t>(t * 3 * D + D + h * dh + i)]; };
  auto V = [&](Index t, Index h, Index i) { return qkv[static_cast<std::size_t>(t * 3 * D + 2 * D + h * dh + i)]; };
  std::vector<double> ctx(T * D, 0.0);
  for (Index h = 0; h < H; ++h)
    for (Index a = 0; a < T; ++a) {
      std::vector<double> e(T);
      double z = 0;
      for (Index b = 0; b < T; ++b) {
        double s = 0;
        for (Index i = 0; i < dh; ++i) s += Q(a, h, i) * K(b, h, i);
        e[static_cast<std::size_t>(b)] = std::exp(s / std::sqrt(static_cast<double>(dh)));
        z += e[static_cast<std::size_t>(b)];
      }
      double row = 0;
      for (Index b = 0; b < T; ++b) {
        const double p = e[static_cast<std::size_t>(b)] / z;
        CHECK(probs.at((h * T + a) * T + b) == doctest::Approx(p).epsilon(1e-10));
        row += probs.at((h * T + a) * T + b);
        for (Index i = 0; i < dh; ++i) ctx[static_cast<std::size_t>(a * D + h * dh + i)] += p * V(b, h, i);
      }
      CHECK(std::abs(row - 1.0) < 1e-6);
    }
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < D; ++j) {
      double s = w.out_b.at(j);
      for (Index i = 0; i < D; ++i) s += ctx[static_cast<std::size_t>(t * D + i)] * w.out_w.at(i * D + j);
      CHECK(std::abs(y.at(t * D + j) - s) < 1e-5);
    }
}

TEST_CASE("attention rows sum to one") {
  auto x = random_tensor<double>({2, 5, 6}, 80, -3, 3);
  AttentionWeights<double> w{random_tensor<double>({6, 18}, 81), random_tensor<double>({18}, 82),
                             random_tensor<double>({6, 6}, 83), random_tensor<double>({6}, 84)};
  Tensor<double> probs;
  multi_head_attention(x, w, 3, &probs);
  for (Index r = 0; r < 2 * 3 * 5; ++r) {
    double s = 0;
    for (Index c = 0; c < 5; ++c) s += probs.at(r * 5 + c);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("activations") {
  Tensor<double> x(Shape{5}, std::vector<double>{-2.0, -0.5, 0.0, 0.7, 3.0});
  auto g = gelu(x), r = relu(x), s = sigmoid(x);
  for (Index i = 0; i < 5; ++i) {
    const double v = x.at(i);
    CHECK(g.at(i) == doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-12));
    CHECK(r.at(i) == std::max(0.0, v));
    CHECK(s.at(i) == doctest::Approx(1.0 / (1.0 + std::exp(-v))).epsilon(1e-12));
  }
}

TEST_CASE("backward of simple functions") {
  SUBCASE("sum of squares") {
    auto x = random_tensor<double>({4}, 90, -1, 1, true);
    backward(sum(mul(x, x)));
    for (Index i = 0; i < 4; ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(2 * x.at(i)));
  }
  SUBCASE("sigmoid at zero") {
    Tensor<double> x(Shape{1}, 0.0);
    x.set_requires_grad(true);
    backward(sum(sigmoid(x)));
    CHECK(x.grad()[0] == doctest::Approx(0.25));
  }
  SUBCASE("non-scalar loss") {
    auto x = random_tensor<double>({3}, 91, -1, 1, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
    Tape<double>::local().clear();
  }
  SUBCASE("tape is cleared") {
    auto x = random_tensor<double>({3}, 92, -1, 1, true);
    backward(sum(x));
    CHECK(Tape<double>::local().size() == 0);
  }
}

TEST_CASE("no-grad mode records nothing") {
  auto x = random_tensor<float>({3}, 93, -1, 1, true);
  const auto before = Tape<float>::local().size();
  {
    NoGradGuard guard;
    auto y = sum(mul(x, x));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Tape<float>::local().size() == before);
}

TEST_CASE("bce_loss") {
  SUBCASE("perfect prediction") {
    auto y = vita::test::random_binary<double>({2, 1, 4, 4}, 100);
    CHECK(bce_loss(y, y).item() <= 2e-7);
  }
  SUBCASE("half probability") {
    auto y = vita::test::random_binary<double>({1, 1, 8, 8}, 101);
    CHECK(bce_loss(Tensor<double>(Shape{1, 1, 8, 8}, 0.5), y).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("summation oracle") {
    auto p = random_tensor<float>({1, 1, 8, 8}, 102, 0.01, 0.99);
    auto y = vita::test::random_binary<float>({1, 1, 8, 8}, 103);
    double s = 0;
    for (Index i = 0; i < 64; ++i) {
      const double pi = p.at(i), yi = y.at(i);
      s -= yi * std::log(pi) + (1 - yi) * std::log(1 - pi);
    }
    CHECK(std::abs(bce_loss(p, y).item() - s / 64) < 1e-6);
  }
  SUBCASE("non-negative and clamped") {
    Tensor<double> p(Shape{4}, std::vector<double>{0.0, 1.0, 0.0, 1.0});
    Tensor<double> y(Shape{4}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    const double l = bce_loss(p, y).item();
    CHECK(std::isfinite(l));
    CHECK(l > 0);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(bce_loss(Tensor<double>(Shape{4}, 0.5), Tensor<double>(Shape{5}, 0.0)), ContractError);
  }
}

TEST_CASE("forward passes are deterministic") {
  auto x = random_tensor<float>({2, 3, 6, 6}, 110), w = random_tensor<float>({4, 3, 3, 3}, 111);
  auto a = conv2d(x, w, Tensor<float>(), 1, 1), b = conv2d(x, w, Tensor<float>(), 1, 1);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}
