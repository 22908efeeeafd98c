#include "vita/gradsuite.hpp"

#include <cstdio>
#include <functional>
#include <random>

#include "vita/model.hpp"
#include "vita/ops.hpp"
#include "vita/rng.hpp"
#include "vita/train.hpp"

namespace vita {

namespace {

using T = Tensor<double>;

class Maker {
 public:
  explicit Maker(std::uint64_t seed) : rng_(seed) {}

  T uniform(Shape shape, double lo = -1.0, double hi = 1.0, bool grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    T t(std::move(shape));
    for (auto& v : t.values()) v = u(rng_);
    t.set_requires_grad(grad);
    return t;
  }
  T binary(Shape shape) {
    T t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<double>(rng_() & 1);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

/// Random fixed projection so that every output element carries weight.
T project(const T& out, std::uint64_t seed) {
  Maker m(seed);
  return sum(mul(out, m.uniform(out.shape(), -1.0, 1.0, false)));
}

}  // namespace

std::vector<GradSuiteCase> run_gradient_suite(std::uint64_t seed, const GradCheckOptions& base,
                                              bool include_model) {
  std::vector<GradSuiteCase> cases;
  int k = 0;
  auto check = [&](const std::string& name, const std::vector<NamedTensor<double>>& params,
                   const std::function<T()>& out) {
    GradCheckOptions o = base;
    o.seed = derive_seed(seed, name);
    const std::uint64_t proj = derive_seed(seed, static_cast<std::uint64_t>(k++));
    cases.push_back({name, grad_check<double>([&] { return project(out(), proj); }, params, o)});
  };
  Maker m(derive_seed(seed, "gradsuite"));

  {
    T a = m.uniform({3, 4}), b = m.uniform({4, 5});
    check("matmul", {{"a", a}, {"b", b}}, [=] { return matmul(a, b); });
  }
  {
    T x = m.uniform({2, 3, 4}), w = m.uniform({4, 5}), b = m.uniform({5});
    check("linear", {{"x", x}, {"w", w}, {"b", b}}, [=] { return linear(x, w, b); });
  }
  {
    T x = m.uniform({2, 3, 5, 5}), w = m.uniform({4, 3, 3, 3}), b = m.uniform({4});
    check("conv2d k3 s1 p1", {{"x", x}, {"w", w}, {"b", b}}, [=] { return conv2d(x, w, b, 1, 1); });
  }
  {
    T x = m.uniform({1, 2, 6, 6}), w = m.uniform({3, 2, 2, 2});
    check("conv2d k2 s2", {{"x", x}, {"w", w}}, [=] { return conv2d(x, w, T(), 2, 0); });
  }
  {
    T x = m.uniform({2, 4, 3, 3}), w = m.uniform({3, 4, 1, 1});
    check("conv2d 1x1", {{"x", x}, {"w", w}}, [=] { return conv2d(x, w, T(), 1, 0); });
  }
  {
    T x = m.uniform({2, 3, 3, 3}), w = m.uniform({3, 2, 2, 2}), b = m.uniform({2});
    check("conv_transpose2d k2 s2", {{"x", x}, {"w", w}, {"b", b}},
          [=] { return conv_transpose2d(x, w, b, 2, 0); });
  }
  {
    T x = m.uniform({1, 2, 4, 4}), w = m.uniform({2, 3, 3, 3});
    check("conv_transpose2d k3 s1 p1", {{"x", x}, {"w", w}}, [=] { return conv_transpose2d(x, w, T(), 1, 1); });
  }
  {
    T x = m.uniform({2, 3, 1, 1}), w = m.uniform({3, 2, 4, 4}), b = m.uniform({2});
    check("conv_transpose2d 1x1 to k4", {{"x", x}, {"w", w}, {"b", b}},
          [=] { return conv_transpose2d(x, w, b, 1, 0); });
  }
  {
    T x = m.uniform({3, 2, 3, 3}), g = m.uniform({2}, 0.5, 1.5), b = m.uniform({2});
    auto state = std::make_shared<BatchNormState<double>>(BatchNormState<double>::fresh(2));
    check("batch_norm2d train", {{"x", x}, {"gamma", g}, {"beta", b}},
          [=] { return batch_norm2d(x, g, b, *state, Mode::train); });
  }
  {
    T x = m.uniform({2, 2, 3, 3}), g = m.uniform({2}, 0.5, 1.5), b = m.uniform({2});
    auto state = std::make_shared<BatchNormState<double>>(
        BatchNormState<double>{m.uniform({2}, -0.5, 0.5, false), m.uniform({2}, 0.5, 2.0, false)});
    check("batch_norm2d eval", {{"x", x}, {"gamma", g}, {"beta", b}},
          [=] { return batch_norm2d(x, g, b, *state, Mode::eval); });
  }
  {
    T x = m.uniform({2, 3, 6}), g = m.uniform({6}, 0.5, 1.5), b = m.uniform({6});
    check("layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}}, [=] { return layer_norm(x, g, b); });
  }
  {
    T x = m.uniform({2, 4, 6});
    AttentionWeights<double> w{m.uniform({6, 18}, -0.5, 0.5), m.uniform({18}, -0.5, 0.5), m.uniform({6, 6}, -0.5, 0.5),
                               m.uniform({6}, -0.5, 0.5)};
    check("multi_head_attention",
          {{"x", x}, {"qkv_w", w.qkv_w}, {"qkv_b", w.qkv_b}, {"out_w", w.out_w}, {"out_b", w.out_b}},
          [=] { return multi_head_attention(x, w, 2); });
  }
  {
    T x = m.uniform({2, 3, 4}, -2, 2);
    check("relu", {{"x", x}}, [=] { return relu(x); });
  }
  {
    T x = m.uniform({2, 3, 4}, -3, 3);
    check("gelu", {{"x", x}}, [=] { return gelu(x); });
  }
  {
    T x = m.uniform({2, 3, 4}, -4, 4);
    check("sigmoid", {{"x", x}}, [=] { return sigmoid(x); });
  }
  {
    T a = m.uniform({2, 2, 3, 3}), b = m.uniform({2, 3, 3, 3});
    check("concat_channels", {{"a", a}, {"b", b}}, [=] { return concat_channels(a, b); });
  }
  {
    T a = m.uniform({2, 3, 4}), b = m.uniform({4});
    check("add broadcast", {{"a", a}, {"b", b}}, [=] { return add(a, b); });
  }
  {
    T a = m.uniform({2, 3, 4}), b = m.uniform({2, 3, 4});
    check("mul", {{"a", a}, {"b", b}}, [=] { return mul(a, b); });
  }
  {
    T x = m.uniform({3, 4});
    check("scale", {{"x", x}}, [=] { return scale(x, 0.37); });
  }
  {
    T x = m.uniform({2, 6});
    check("reshape", {{"x", x}}, [=] { return reshape(x, Shape{3, 4}); });
  }
  {
    T x = m.uniform({2, 3, 2, 2});
    check("tokens_from_grid", {{"x", x}}, [=] { return tokens_from_grid(x); });
  }
  {
    T x = m.uniform({2, 5, 3});
    check("mean_tokens", {{"x", x}}, [=] { return mean_tokens(x); });
  }
  {
    T x = m.uniform({2, 3});
    check("sum", {{"x", x}}, [=] { return mul(sum(x), sum(x)); });
  }
  {
    T a = m.uniform({2, 3}), b = m.uniform({2, 3});
    check("stack", {{"a", a}, {"b", b}}, [=] { return stack(std::vector<T>{a, b}); });
  }
  {
    T p = m.uniform({2, 1, 4, 4}, 0.05, 0.95), y = m.binary({2, 1, 4, 4});
    check("bce_loss", {{"pred", p}}, [=] { return bce_loss(p, y); });
  }

  if (include_model) {
    AmodalSegmenter<double> model(ModelConfig::toy(HeadKind::dual));
    Maker data(derive_seed(seed, "gradsuite.model"));
    const Index S = model.config().image_side;
    const T x = data.uniform({2, 4, S, S}, -1, 1, false);
    const T ya = data.binary({2, 1, S, S});
    const T yo = data.binary({2, 1, S, S});
    GradCheckOptions o = base;
    o.seed = derive_seed(seed, "toy dual-head loss");
    auto loss = [&] {
      const Prediction<double> pred = model.forward(x, Mode::train);
      return total_loss(pred, ya, yo, LossConfig{}).total;
    };
    cases.push_back({"toy dual-head loss", grad_check<double>(loss, model.parameters().trainable(), o)});
  }
  return cases;
}

std::string format_gradient_table(const std::vector<GradSuiteCase>& cases, double tolerance) {
  std::string out;
  char line[200];
  std::snprintf(line, sizeof line, "%-30s %7s %14s  %s\n", "case", "probes", "max_rel_err", "result");
  out += line;
  for (const auto& c : cases) {
    const bool ok = c.report.passed && c.report.max_rel_error < tolerance;
    std::snprintf(line, sizeof line, "%-30s %7zu %14.3e  %s%s\n", c.name.c_str(), c.report.entries.size(),
                  c.report.max_rel_error, ok ? "ok" : "FAIL",
                  c.report.aborted ? (" (" + c.report.diagnostic + ")").c_str() : "");
    out += line;
  }
  return out;
}

}  // namespace vita
