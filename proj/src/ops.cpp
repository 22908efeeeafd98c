#include "vita/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>

namespace vita {

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<Mat<S>>;
template <typename S>
using CMapMat = Eigen::Map<const Mat<S>>;
template <typename S>
using MapRow = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>;
template <typename S>
using CMapRow = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;
template <typename S>
using CMapCol = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using MapCol = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <typename S>
using StoragePtr = std::shared_ptr<TensorStorage<S>>;

template <typename S>
bool tracking(std::initializer_list<const Tensor<S>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename S>
Tensor<S> make_output(Shape shape, bool track) {
  Tensor<S> out(std::move(shape));
  out.set_requires_grad(track);
  return out;
}

/// Gradient buffer of an input, or null when the input takes no gradient.
template <typename S>
S* sink(const StoragePtr<S>& s) {
  return (s && s->requires_grad) ? s->ensure_grad() : nullptr;
}

template <typename S>
StoragePtr<S> storage_of(const Tensor<S>& t) {
  return t.defined() ? t.storage() : nullptr;
}

void require_rank(const char* op, const char* name, std::size_t got, std::size_t want) {
  if (got != want) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " +
                         std::to_string(want) + ", got " + std::to_string(got));
  }
}

template <typename S>
void im2col(const S* x, Index channels, Index height, Index width, Index k, Index stride, Index pad,
            Index out_h, Index out_w, S* cols) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        S* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          S* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, S(0));
            continue;
          }
          const S* src = x + (c * height + iy) * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* cols, Index channels, Index height, Index width, Index k, Index stride,
            Index pad, Index out_h, Index out_w, S* x) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const S* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          const S* src = row + oy * out_w;
          S* dst = x + (c * height + iy) * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct KinkRecorder {
  kinks::State state = kinks::State::off;
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t cursor = 0;
};

KinkRecorder& kink_recorder() {
  thread_local KinkRecorder r;
  return r;
}

template <typename S>
S gelu_value(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S>
S gelu_slope(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
  const S pdf = std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  return cdf + x * pdf;
}

template <typename S>
S sigmoid_value(S x) {
  S y;
  if (x >= S(0)) {
    y = S(1) / (S(1) + std::exp(-x));
  } else {
    const S e = std::exp(x);
    y = e / (S(1) + e);
  }
  // Keep probabilities strictly inside (0, 1) even when exp saturates.
  return std::clamp(y, std::numeric_limits<S>::min(), std::nextafter(S(1), S(0)));
}

}  // namespace

namespace kinks {
void set_state(State s) {
  auto& r = kink_recorder();
  r.state = s;
  r.cursor = 0;
  if (s == State::record) r.masks.clear();
}
State state() { return kink_recorder().state; }
void reset() {
  auto& r = kink_recorder();
  r.state = State::off;
  r.masks.clear();
  r.cursor = 0;
}
std::size_t recorded_layers() { return kink_recorder().masks.size(); }
}  // namespace kinks

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_rank("matmul", "a", a.rank(), 2);
  require_rank("matmul", "b", b.rank(), 2);
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const bool track = tracking<S>({&a, &b});
  Tensor<S> out = make_output<S>({m, n}, track);
  out.matrix(m, n).noalias() = a.matrix(m, k) * b.matrix(k, n);
  if (track) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<S>::local().record("matmul", [as, bs, os, m, k, n] {
      if (os->grad.empty()) return;
      CMapMat<S> dy(os->grad.data(), m, n);
      if (S* da = sink(as)) MapMat<S>(da, m, k).noalias() += dy * CMapMat<S>(bs->data.data(), k, n).transpose();
      if (S* db = sink(bs)) MapMat<S>(db, k, n).noalias() += CMapMat<S>(as->data.data(), m, k).transpose() * dy;
    });
  }
  return out;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  require_rank("linear", "w", w.rank(), 2);
  if (x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const Index in = w.dim(0), out_dim = w.dim(1), rows = x.numel() / in;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim)) {
    throw DimensionError("linear: bias shape " + shape_str(b.shape()));
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  const bool track = tracking<S>({&x, &w, &b});
  Tensor<S> out = make_output<S>(shape, track);
  auto y = out.matrix(rows, out_dim);
  y.noalias() = x.matrix(rows, in) * w.matrix(in, out_dim);
  if (b.defined()) y.rowwise() += CMapRow<S>(b.data(), out_dim);
  if (track) {
    auto xs = x.storage(), ws = w.storage(), bs = storage_of(b), os = out.storage();
    Tape<S>::local().record("linear", [xs, ws, bs, os, rows, in, out_dim] {
      if (os->grad.empty()) return;
      CMapMat<S> dy(os->grad.data(), rows, out_dim);
      if (S* dx = sink(xs)) MapMat<S>(dx, rows, in).noalias() += dy * CMapMat<S>(ws->data.data(), in, out_dim).transpose();
      if (S* dw = sink(ws)) MapMat<S>(dw, in, out_dim).noalias() += CMapMat<S>(xs->data.data(), rows, in).transpose() * dy;
      if (S* db = sink(bs)) MapRow<S>(db, out_dim) += dy.colwise().sum();
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, Index stride,
                 Index padding) {
  require_rank("conv2d", "x", x.rank(), 4);
  require_rank("conv2d", "w", w.rank(), 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index f = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: invalid stride/padding");
  if (k > h + 2 * padding || k > wd + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != f)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  const Index oh = (h + 2 * padding - k) / stride + 1;
  const Index ow = (wd + 2 * padding - k) / stride + 1;
  const Index patch = c * k * k, positions = oh * ow;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  const bool track = tracking<S>({&x, &w, &bias});
  Tensor<S> out = make_output<S>({n, f, oh, ow}, track);
  CMapMat<S> wm(w.data(), f, patch);
  Mat<S> cols(pointwise ? 0 : patch, pointwise ? 0 : positions);
  for (Index i = 0; i < n; ++i) {
    const S* xi = x.data() + i * c * h * wd;
    MapMat<S> yi(out.data() + i * f * positions, f, positions);
    if (pointwise) {
      yi.noalias() = wm * CMapMat<S>(xi, c, positions);
    } else {
      im2col(xi, c, h, wd, k, stride, padding, oh, ow, cols.data());
      yi.noalias() = wm * cols;
    }
    if (bias.defined()) yi.colwise() += CMapCol<S>(bias.data(), f);
  }

  if (track) {
    auto xs = x.storage(), ws = w.storage(), bs = storage_of(bias), os = out.storage();
    Tape<S>::local().record("conv2d", [=] {
      if (os->grad.empty()) return;
      S* dx = sink(xs);
      S* dw = sink(ws);
      S* db = sink(bs);
      CMapMat<S> wmat(ws->data.data(), f, patch);
      Mat<S> buf(pointwise ? 0 : patch, pointwise ? 0 : positions);
      Mat<S> dcols(pointwise ? 0 : patch, pointwise ? 0 : positions);
      for (Index i = 0; i < n; ++i) {
        CMapMat<S> dyi(os->grad.data() + i * f * positions, f, positions);
        const S* xi = xs->data.data() + i * c * h * wd;
        if (dw) {
          if (pointwise) {
            MapMat<S>(dw, f, patch).noalias() += dyi * CMapMat<S>(xi, c, positions).transpose();
          } else {
            im2col(xi, c, h, wd, k, stride, padding, oh, ow, buf.data());
            MapMat<S>(dw, f, patch).noalias() += dyi * buf.transpose();
          }
        }
        if (dx) {
          S* dxi = dx + i * c * h * wd;
          if (pointwise) {
            MapMat<S>(dxi, c, positions).noalias() += wmat.transpose() * dyi;
          } else {
            dcols.noalias() = wmat.transpose() * dyi;
            col2im(dcols.data(), c, h, wd, k, stride, padding, oh, ow, dxi);
          }
        }
        if (db) MapCol<S>(db, f) += dyi.rowwise().sum();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           Index stride, Index padding) {
  require_rank("conv_transpose2d", "x", x.rank(), 4);
  require_rank("conv_transpose2d", "w", w.rank(), 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index f = w.dim(1), k = w.dim(2);
  if (w.dim(0) != c || w.dim(3) != k) {
    throw DimensionError("conv_transpose2d: weight " + shape_str(w.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
  }
  if (stride < 1 || padding < 0) throw DimensionError("conv_transpose2d: invalid stride/padding");
  const Index oh = (h - 1) * stride - 2 * padding + k;
  const Index ow = (wd - 1) * stride - 2 * padding + k;
  if (oh <= 0 || ow <= 0) {
    throw DimensionError("conv_transpose2d: non-positive output size " + std::to_string(oh) +
                         "x" + std::to_string(ow));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != f)) {
    throw DimensionError("conv_transpose2d: bias shape " + shape_str(bias.shape()));
  }
  const Index patch = f * k * k, positions = h * wd, out_plane = oh * ow;

  const bool track = tracking<S>({&x, &w, &bias});
  Tensor<S> out = make_output<S>({n, f, oh, ow}, track);
  CMapMat<S> wm(w.data(), c, patch);
  Mat<S> cols(patch, positions);
  for (Index i = 0; i < n; ++i) {
    cols.noalias() = wm.transpose() * CMapMat<S>(x.data() + i * c * positions, c, positions);
    S* yi = out.data() + i * f * out_plane;
    col2im(cols.data(), f, oh, ow, k, stride, padding, h, wd, yi);
    if (bias.defined()) {
      MapMat<S>(yi, f, out_plane).colwise() += CMapCol<S>(bias.data(), f);
    }
  }

  if (track) {
    auto xs = x.storage(), ws = w.storage(), bs = storage_of(bias), os = out.storage();
    Tape<S>::local().record("conv_transpose2d", [=] {
      if (os->grad.empty()) return;
      S* dx = sink(xs);
      S* dw = sink(ws);
      S* db = sink(bs);
      CMapMat<S> wmat(ws->data.data(), c, patch);
      Mat<S> gcols(patch, positions);
      for (Index i = 0; i < n; ++i) {
        const S* dyi = os->grad.data() + i * f * out_plane;
        im2col(dyi, f, oh, ow, k, stride, padding, h, wd, gcols.data());
        if (dx) MapMat<S>(dx + i * c * positions, c, positions).noalias() += wmat * gcols;
        if (dw) {
          MapMat<S>(dw, c, patch).noalias() +=
              CMapMat<S>(xs->data.data() + i * c * positions, c, positions) * gcols.transpose();
        }
        if (db) MapCol<S>(db, f) += CMapMat<S>(dyi, f, out_plane).rowwise().sum();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       BatchNormState<S>& state, Mode mode, double eps, double momentum) {
  require_rank("batch_norm2d", "x", x.rank(), 4);
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Index count = n * plane;
  for (const Tensor<S>* p : std::initializer_list<const Tensor<S>*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      throw DimensionError("batch_norm2d: per-channel tensor shape " + shape_str(p->shape()) +
                           " for " + std::to_string(c) + " channels");
    }
  }
  if (mode == Mode::train && count < 2) {
    throw ContractError("batch_norm2d: train mode needs at least 2 values per channel, got " +
                        std::to_string(count));
  }

  const bool track = tracking<S>({&x, &gamma, &beta});
  Tensor<S> out = make_output<S>(x.shape(), track);
  auto xhat = std::make_shared<AlignedVector<S>>(track ? x.numel() : 0);
  auto inv_std = std::make_shared<AlignedVector<S>>(c);

  for (Index ch = 0; ch < c; ++ch) {
    S mean, var;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * plane;
        for (Index j = 0; j < plane; ++j) acc += p[j];
      }
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (Index i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * plane;
        for (Index j = 0; j < plane; ++j) sq += (p[j] - mu) * (p[j] - mu);
      }
      mean = static_cast<S>(mu);
      var = static_cast<S>(sq / static_cast<double>(count));
      const S m = static_cast<S>(momentum);
      state.running_mean.at(ch) = (S(1) - m) * state.running_mean.at(ch) + m * mean;
      const S unbiased = static_cast<S>(sq / static_cast<double>(count - 1));
      state.running_var.at(ch) = (S(1) - m) * state.running_var.at(ch) + m * unbiased;
    } else {
      mean = state.running_mean.at(ch);
      var = state.running_var.at(ch);
    }
    const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*inv_std)[static_cast<std::size_t>(ch)] = istd;
    const S g = gamma.at(ch), b = beta.at(ch);
    for (Index i = 0; i < n; ++i) {
      const Index off = (i * c + ch) * plane;
      const S* p = x.data() + off;
      S* y = out.data() + off;
      for (Index j = 0; j < plane; ++j) {
        const S xh = (p[j] - mean) * istd;
        if (track) (*xhat)[static_cast<std::size_t>(off + j)] = xh;
        y[j] = g * xh + b;
      }
    }
  }

  if (track) {
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
    Tape<S>::local().record("batch_norm2d", [=] {
      if (os->grad.empty()) return;
      S* dx = sink(xs);
      S* dg = sink(gs);
      S* db = sink(bs);
      const S* dy = os->grad.data();
      for (Index ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (Index i = 0; i < n; ++i) {
          const Index off = (i * c + ch) * plane;
          for (Index j = 0; j < plane; ++j) {
            sum_dy += dy[off + j];
            sum_dy_xh += dy[off + j] * (*xhat)[static_cast<std::size_t>(off + j)];
          }
        }
        if (dg) dg[ch] += static_cast<S>(sum_dy_xh);
        if (db) db[ch] += static_cast<S>(sum_dy);
        if (!dx) continue;
        const S g = gs->data[static_cast<std::size_t>(ch)];
        const S istd = (*inv_std)[static_cast<std::size_t>(ch)];
        if (mode == Mode::train) {
          const S inv_count = S(1) / static_cast<S>(count);
          const S mean_dy = static_cast<S>(sum_dy) * inv_count;
          const S mean_dy_xh = static_cast<S>(sum_dy_xh) * inv_count;
          for (Index i = 0; i < n; ++i) {
            const Index off = (i * c + ch) * plane;
            for (Index j = 0; j < plane; ++j) {
              const S xh = (*xhat)[static_cast<std::size_t>(off + j)];
              dx[off + j] += g * istd * (dy[off + j] - mean_dy - xh * mean_dy_xh);
            }
          }
        } else {
          for (Index i = 0; i < n; ++i) {
            const Index off = (i * c + ch) * plane;
            for (Index j = 0; j < plane; ++j) dx[off + j] += g * istd * dy[off + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const Index d = x.shape().back(), rows = x.numel() / d;
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  }
  const bool track = tracking<S>({&x, &gamma, &beta});
  Tensor<S> out = make_output<S>(x.shape(), track);
  auto xhat = std::make_shared<Mat<S>>(rows, d);
  auto inv_std = std::make_shared<AlignedVector<S>>(rows);
  CMapMat<S> xm(x.data(), rows, d);
  MapMat<S> ym(out.data(), rows, d);
  CMapRow<S> g(gamma.data(), d), b(beta.data(), d);
  for (Index r = 0; r < rows; ++r) {
    const S mean = xm.row(r).mean();
    const S var = (xm.row(r).array() - mean).square().mean();
    const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    xhat->row(r) = (xm.row(r).array() - mean) * istd;
    ym.row(r) = xhat->row(r).cwiseProduct(g) + b;
  }
  if (track) {
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
    Tape<S>::local().record("layer_norm", [=] {
      if (os->grad.empty()) return;
      CMapMat<S> dy(os->grad.data(), rows, d);
      if (S* dg = sink(gs)) MapRow<S>(dg, d) += dy.cwiseProduct(*xhat).colwise().sum();
      if (S* db = sink(bs)) MapRow<S>(db, d) += dy.colwise().sum();
      if (S* dx = sink(xs)) {
        MapMat<S> dxm(dx, rows, d);
        CMapRow<S> gam(gs->data.data(), d);
        for (Index r = 0; r < rows; ++r) {
          const auto dxh = dy.row(r).cwiseProduct(gam);
          const S m1 = dxh.mean();
          const S m2 = dxh.cwiseProduct(xhat->row(r)).mean();
          dxm.row(r).array() += (*inv_std)[static_cast<std::size_t>(r)] *
                                (dxh.array() - m1 - xhat->row(r).array() * m2);
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& x, const AttentionWeights<S>& w, Index heads,
                               Tensor<S>* probs) {
  require_rank("multi_head_attention", "x", x.rank(), 3);
  const Index n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("multi_head_attention: embedding dim " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  if (w.qkv_w.shape() != Shape{d, 3 * d} || w.qkv_b.shape() != Shape{3 * d} ||
      w.out_w.shape() != Shape{d, d} || w.out_b.shape() != Shape{d}) {
    throw DimensionError("multi_head_attention: weight shapes do not match D=" + std::to_string(d));
  }
  const Index dh = d / heads, rows = n * t;
  const S scl = S(1) / std::sqrt(static_cast<S>(dh));

  auto qkv = std::make_shared<Mat<S>>(rows, 3 * d);
  auto attn = std::make_shared<Mat<S>>(n * heads * t, t);
  auto ctx = std::make_shared<Mat<S>>(rows, d);
  CMapMat<S> xm(x.data(), rows, d);
  qkv->noalias() = xm * w.qkv_w.matrix(d, 3 * d);
  qkv->rowwise() += CMapRow<S>(w.qkv_b.data(), 3 * d);

  for (Index i = 0; i < n; ++i) {
    for (Index hd = 0; hd < heads; ++hd) {
      const auto q = qkv->block(i * t, hd * dh, t, dh);
      const auto kk = qkv->block(i * t, d + hd * dh, t, dh);
      const auto v = qkv->block(i * t, 2 * d + hd * dh, t, dh);
      auto p = attn->block((i * heads + hd) * t, 0, t, t);
      p.noalias() = (q * kk.transpose()) * scl;
      for (Index r = 0; r < t; ++r) {
        const S mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      ctx->block(i * t, hd * dh, t, dh).noalias() = p * v;
    }
  }

  const bool track = tracking<S>({&x, &w.qkv_w, &w.qkv_b, &w.out_w, &w.out_b});
  Tensor<S> out = make_output<S>({n, t, d}, track);
  auto ym = out.matrix(rows, d);
  ym.noalias() = *ctx * w.out_w.matrix(d, d);
  ym.rowwise() += CMapRow<S>(w.out_b.data(), d);

  if (probs != nullptr) {
    *probs = Tensor<S>({n, heads, t, t});
    probs->matrix(n * heads * t, t) = *attn;
  }

  if (track) {
    auto xs = x.storage(), qws = w.qkv_w.storage(), qbs = w.qkv_b.storage();
    auto ows = w.out_w.storage(), obs = w.out_b.storage(), os = out.storage();
    Tape<S>::local().record("multi_head_attention", [=] {
      if (os->grad.empty()) return;
      CMapMat<S> dy(os->grad.data(), rows, d);
      if (S* g = sink(ows)) MapMat<S>(g, d, d).noalias() += ctx->transpose() * dy;
      if (S* g = sink(obs)) MapRow<S>(g, d) += dy.colwise().sum();
      Mat<S> dctx = dy * CMapMat<S>(ows->data.data(), d, d).transpose();
      Mat<S> dqkv = Mat<S>::Zero(rows, 3 * d);
      Mat<S> dp(t, t), ds(t, t);
      for (Index i = 0; i < n; ++i) {
        for (Index hd = 0; hd < heads; ++hd) {
          const auto q = qkv->block(i * t, hd * dh, t, dh);
          const auto kk = qkv->block(i * t, d + hd * dh, t, dh);
          const auto v = qkv->block(i * t, 2 * d + hd * dh, t, dh);
          const auto p = attn->block((i * heads + hd) * t, 0, t, t);
          const auto dc = dctx.block(i * t, hd * dh, t, dh);
          dp.noalias() = dc * v.transpose();
          dqkv.block(i * t, 2 * d + hd * dh, t, dh).noalias() += p.transpose() * dc;
          for (Index r = 0; r < t; ++r) {
            const S dot = dp.row(r).dot(p.row(r));
            ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
          }
          dqkv.block(i * t, hd * dh, t, dh).noalias() += (ds * kk) * scl;
          dqkv.block(i * t, d + hd * dh, t, dh).noalias() += (ds.transpose() * q) * scl;
        }
      }
      if (S* g = sink(qws)) {
        MapMat<S>(g, d, 3 * d).noalias() += CMapMat<S>(xs->data.data(), rows, d).transpose() * dqkv;
      }
      if (S* g = sink(qbs)) MapRow<S>(g, 3 * d) += dqkv.colwise().sum();
      if (S* g = sink(xs)) {
        MapMat<S>(g, rows, d).noalias() += dqkv * CMapMat<S>(qws->data.data(), d, 3 * d).transpose();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> elementwise(const Tensor<S>& x, Activation f) {
  const bool track = tracking<S>({&x});
  Tensor<S> out = make_output<S>(x.shape(), track);
  const Index count = x.numel();
  const S* in = x.data();
  S* y = out.data();

  switch (f) {
    case Activation::relu: {
      auto& rec = kink_recorder();
      auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(count));
      if (rec.state == kinks::State::replay) {
        if (rec.cursor >= rec.masks.size() || rec.masks[rec.cursor].size() != mask->size()) {
          throw ContractError("relu: replayed activation pattern does not match the network");
        }
        *mask = rec.masks[rec.cursor++];
      } else {
        for (Index i = 0; i < count; ++i) (*mask)[static_cast<std::size_t>(i)] = in[i] > S(0);
        if (rec.state == kinks::State::record) rec.masks.push_back(*mask);
      }
      for (Index i = 0; i < count; ++i) y[i] = (*mask)[static_cast<std::size_t>(i)] ? in[i] : S(0);
      if (track) {
        auto xs = x.storage(), os = out.storage();
        Tape<S>::local().record("relu", [xs, os, mask] {
          if (os->grad.empty()) return;
          if (S* dx = sink(xs)) {
            for (std::size_t i = 0; i < mask->size(); ++i) {
              if ((*mask)[i]) dx[i] += os->grad[i];
            }
          }
        });
      }
      break;
    }
    case Activation::gelu: {
      for (Index i = 0; i < count; ++i) y[i] = gelu_value(in[i]);
      if (track) {
        auto xs = x.storage(), os = out.storage();
        Tape<S>::local().record("gelu", [xs, os] {
          if (os->grad.empty()) return;
          if (S* dx = sink(xs)) {
            for (std::size_t i = 0; i < os->grad.size(); ++i) dx[i] += os->grad[i] * gelu_slope(xs->data[i]);
          }
        });
      }
      break;
    }
    case Activation::sigmoid: {
      for (Index i = 0; i < count; ++i) y[i] = sigmoid_value(in[i]);
      if (track) {
        auto xs = x.storage(), os = out.storage();
        Tape<S>::local().record("sigmoid", [xs, os] {
          if (os->grad.empty()) return;
          if (S* dx = sink(xs)) {
            for (std::size_t i = 0; i < os->grad.size(); ++i) {
              const S v = os->data[i];
              dx[i] += os->grad[i] * v * (S(1) - v);
            }
          }
        });
      }
      break;
    }
  }
  return out;
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  require_rank("concat_channels", "a", a.rank(), 4);
  require_rank("concat_channels", "b", b.rank(), 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Index n = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), plane = a.dim(2) * a.dim(3);
  const bool track = tracking<S>({&a, &b});
  Tensor<S> out = make_output<S>({n, c1 + c2, a.dim(2), a.dim(3)}, track);
  for (Index i = 0; i < n; ++i) {
    S* dst = out.data() + i * (c1 + c2) * plane;
    std::copy_n(a.data() + i * c1 * plane, c1 * plane, dst);
    std::copy_n(b.data() + i * c2 * plane, c2 * plane, dst + c1 * plane);
  }
  if (track) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<S>::local().record("concat_channels", [=] {
      if (os->grad.empty()) return;
      S* da = sink(as);
      S* db = sink(bs);
      for (Index i = 0; i < n; ++i) {
        const S* src = os->grad.data() + i * (c1 + c2) * plane;
        if (da) {
          for (Index j = 0; j < c1 * plane; ++j) da[i * c1 * plane + j] += src[j];
        }
        if (db) {
          for (Index j = 0; j < c2 * plane; ++j) db[i * c2 * plane + j] += src[c1 * plane + j];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.rank() > a.rank() || !std::equal(b.shape().begin(), b.shape().end(),
                                         a.shape().end() - static_cast<std::ptrdiff_t>(b.rank()))) {
    throw DimensionError("add: " + shape_str(b.shape()) + " does not broadcast onto " +
                         shape_str(a.shape()));
  }
  const Index inner = b.numel();
  const Index reps = inner == 0 ? 0 : a.numel() / inner;
  const bool track = tracking<S>({&a, &b});
  Tensor<S> out = make_output<S>(a.shape(), track);
  MapMat<S>(out.data(), reps, inner) = a.matrix(reps, inner).rowwise() + CMapRow<S>(b.data(), inner);
  if (track) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<S>::local().record("add", [=] {
      if (os->grad.empty()) return;
      CMapMat<S> dy(os->grad.data(), reps, inner);
      if (S* da = sink(as)) MapMat<S>(da, reps, inner) += dy;
      if (S* db = sink(bs)) MapRow<S>(db, inner) += dy.colwise().sum();
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const bool track = tracking<S>({&a, &b});
  Tensor<S> out = make_output<S>(a.shape(), track);
  out.array() = a.array() * b.array();
  if (track) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<S>::local().record("mul", [=] {
      if (os->grad.empty()) return;
      S* da = sink(as);
      S* db = sink(bs);
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        if (da) da[i] += os->grad[i] * bs->data[i];
        if (db) db[i] += os->grad[i] * as->data[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  const bool track = tracking<S>({&x});
  Tensor<S> out = make_output<S>(x.shape(), track);
  out.array() = x.array() * factor;
  if (track) {
    auto xs = x.storage(), os = out.storage();
    Tape<S>::local().record("scale", [=] {
      if (os->grad.empty()) return;
      if (S* dx = sink(xs)) {
        for (std::size_t i = 0; i < os->grad.size(); ++i) dx[i] += os->grad[i] * factor;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool track = tracking<S>({&x});
  Tensor<S> out = make_output<S>(std::move(shape), track);
  std::copy_n(x.data(), x.numel(), out.data());
  if (track) {
    auto xs = x.storage(), os = out.storage();
    Tape<S>::local().record("reshape", [=] {
      if (os->grad.empty()) return;
      if (S* dx = sink(xs)) {
        for (std::size_t i = 0; i < os->grad.size(); ++i) dx[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> tokens_from_grid(const Tensor<S>& x) {
  require_rank("tokens_from_grid", "x", x.rank(), 4);
  const Index n = x.dim(0), d = x.dim(1), t = x.dim(2) * x.dim(3);
  const bool track = tracking<S>({&x});
  Tensor<S> out = make_output<S>({n, t, d}, track);
  for (Index i = 0; i < n; ++i) {
    MapMat<S>(out.data() + i * t * d, t, d) = CMapMat<S>(x.data() + i * d * t, d, t).transpose();
  }
  if (track) {
    auto xs = x.storage(), os = out.storage();
    Tape<S>::local().record("tokens_from_grid", [=] {
      if (os->grad.empty()) return;
      if (S* dx = sink(xs)) {
        for (Index i = 0; i < n; ++i) {
          MapMat<S>(dx + i * d * t, d, t) += CMapMat<S>(os->grad.data() + i * t * d, t, d).transpose();
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_tokens(const Tensor<S>& x) {
  require_rank("mean_tokens", "x", x.rank(), 3);
  const Index n = x.dim(0), t = x.dim(1), d = x.dim(2);
  const bool track = tracking<S>({&x});
  Tensor<S> out = make_output<S>({n, d}, track);
  for (Index i = 0; i < n; ++i) {
    MapRow<S>(out.data() + i * d, d) = CMapMat<S>(x.data() + i * t * d, t, d).colwise().mean();
  }
  if (track) {
    auto xs = x.storage(), os = out.storage();
    Tape<S>::local().record("mean_tokens", [=] {
      if (os->grad.empty()) return;
      if (S* dx = sink(xs)) {
        for (Index i = 0; i < n; ++i) {
          const CMapRow<S> g(os->grad.data() + i * d, d);
          MapMat<S> dxi(dx + i * t * d, t, d);
          dxi.rowwise() += g / static_cast<S>(t);
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  const bool track = tracking<S>({&x});
  Tensor<S> out = make_output<S>({1}, track);
  double acc = 0.0;
  for (Index i = 0; i < x.numel(); ++i) acc += x.at(i);
  out.at(0) = static_cast<S>(acc);
  if (track) {
    auto xs = x.storage(), os = out.storage();
    Tape<S>::local().record("sum", [=] {
      if (os->grad.empty()) return;
      if (S* dx = sink(xs)) {
        for (std::size_t i = 0; i < xs->data.size(); ++i) dx[i] += os->grad[0];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& items) {
  if (items.empty()) throw DimensionError("stack: no tensors");
  const Shape& inner = items.front().shape();
  Shape shape{static_cast<Index>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<const Tensor<S>*> ptrs;
  for (const auto& t : items) {
    if (t.shape() != inner) throw DimensionError("stack: mismatched shapes");
    ptrs.push_back(&t);
  }
  bool track = false;
  if (grad_enabled()) {
    for (const auto* p : ptrs) track = track || p->requires_grad();
  }
  Tensor<S> out = make_output<S>(shape, track);
  const Index m = items.front().numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy_n(items[i].data(), m, out.data() + static_cast<Index>(i) * m);
  }
  if (track) {
    std::vector<StoragePtr<S>> stores;
    for (const auto& t : items) stores.push_back(t.storage());
    auto os = out.storage();
    Tape<S>::local().record("stack", [stores, os, m] {
      if (os->grad.empty()) return;
      for (std::size_t i = 0; i < stores.size(); ++i) {
        if (S* dx = sink(stores[i])) {
          for (Index j = 0; j < m; ++j) dx[j] += os->grad[static_cast<std::size_t>(static_cast<Index>(i) * m + j)];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> bce_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (!pred.defined() || !target.defined() || pred.shape() != target.shape()) {
    throw ContractError("bce_loss: prediction " +
                        (pred.defined() ? shape_str(pred.shape()) : std::string("undefined")) +
                        " and target " +
                        (target.defined() ? shape_str(target.shape()) : std::string("undefined")) +
                        " differ in shape");
  }
  const Index count = pred.numel();
  if (count == 0) throw ContractError("bce_loss: empty input");
  const S lo = static_cast<S>(kProbabilityClamp);
  const S hi = S(1) - static_cast<S>(kProbabilityClamp);
  double acc = 0.0;
  for (Index i = 0; i < count; ++i) {
    const double p = std::clamp(pred.at(i), lo, hi);
    const double y = target.at(i);
    acc -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  const bool track = tracking<S>({&pred});
  Tensor<S> out = make_output<S>({1}, track);
  out.at(0) = static_cast<S>(acc / static_cast<double>(count));
  if (!out.all_finite()) throw NumericError("bce_loss: non-finite loss");
  if (track) {
    auto ps = pred.storage(), ts = target.storage(), os = out.storage();
    Tape<S>::local().record("bce_loss", [=] {
      if (os->grad.empty()) return;
      S* dp = sink(ps);
      if (!dp) return;
      const S g = os->grad[0] / static_cast<S>(count);
      for (Index i = 0; i < count; ++i) {
        const S p = ps->data[static_cast<std::size_t>(i)];
        if (p < lo || p > hi) continue;
        const S y = ts->data[static_cast<std::size_t>(i)];
        dp[i] += g * (p - y) / (p * (S(1) - p));
      }
    });
  }
  return out;
}

#define VITA_INSTANTIATE_OPS(S)                                                                  \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);               \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index, Index); \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,      \
                                      Index, Index);                                             \
  template Tensor<S> batch_norm2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,          \
                                  BatchNormState<S>&, Mode, double, double);                     \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, double);   \
  template Tensor<S> multi_head_attention(const Tensor<S>&, const AttentionWeights<S>&, Index,   \
                                          Tensor<S>*);                                           \
  template Tensor<S> elementwise(const Tensor<S>&, Activation);                                  \
  template Tensor<S> concat_channels(const Tensor<S>&, const Tensor<S>&);                        \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> scale(const Tensor<S>&, S);                                                 \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                           \
  template Tensor<S> tokens_from_grid(const Tensor<S>&);                                         \
  template Tensor<S> mean_tokens(const Tensor<S>&);                                              \
  template Tensor<S> sum(const Tensor<S>&);                                                      \
  template Tensor<S> stack(const std::vector<Tensor<S>>&);                                       \
  template Tensor<S> bce_loss(const Tensor<S>&, const Tensor<S>&);

VITA_INSTANTIATE_OPS(float)
VITA_INSTANTIATE_OPS(double)

#undef VITA_INSTANTIATE_OPS

}  // namespace vita
