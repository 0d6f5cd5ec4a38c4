#include <algorithm>
#include <cmath>
#include <limits>

#include "pnc/errors.hpp"
#include "pnc/tensor.hpp"

namespace pnc {

namespace kernels {

void gemm(const double* __restrict a, const double* __restrict b, double* __restrict c,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void transpose(const double* a, double* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t col = c0; col < c1; ++col) out[col * rows + r] = a[r * cols + col];
      }
    }
  }
}

}  // namespace kernels

namespace {

using BackwardFn = std::function<void(std::span<const double>)>;

bool wants_graph(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Gradient buffer of an input, allocated on first touch. Null when the input
// does not participate in differentiation.
double* grad_buffer(TensorImpl* t) {
  if (!t->requires_grad) return nullptr;
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad.data();
}

void record(Tensor& out, const char* op, std::vector<Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->op = op;
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

void require_same_dims(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": mismatched dims " + dims_str(a.dims()) + " vs " +
                     dims_str(b.dims()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got dims " +
                     dims_str(t.dims()));
  }
}

std::size_t inner_extent(const Dims& d) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < d.size(); ++i) n *= d[i];
  return n;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + dims_str(a.dims()) + " x " + dims_str(b.dims()));
  }
  Tensor out(Dims{m, n});
  kernels::gemm(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
  if (wants_graph({&a, &b})) {
    TensorImpl* ai = a.impl().get();
    TensorImpl* bi = b.impl().get();
    record(out, "matmul", {a, b}, [ai, bi, m, k, n](std::span<const double> g) {
      if (double* ga = grad_buffer(ai)) {
        std::vector<double> bt(n * k);
        kernels::transpose(bi->data.data(), bt.data(), k, n);
        kernels::gemm(g.data(), bt.data(), ga, m, n, k, true);
      }
      if (double* gb = grad_buffer(bi)) {
        std::vector<double> at(k * m);
        kernels::transpose(ai->data.data(), at.data(), m, k);
        kernels::gemm(at.data(), g.data(), gb, k, m, n, true);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out(Dims{c, r});
  kernels::transpose(a.data().data(), out.data().data(), r, c);
  if (wants_graph({&a})) {
    TensorImpl* ai = a.impl().get();
    record(out, "transpose", {a}, [ai, r, c](std::span<const double> g) {
      double* ga = grad_buffer(ai);
      for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < r; ++j) ga[j * c + i] += g[i * r + j];
      }
    });
  }
  return out;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

void im2col(const double* x, double* cols, const ConvGeometry& g) {
  const std::size_t np = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const double* plane = x + ch * g.h * g.w;
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx) {
        double* row = cols + ((ch * g.kh + dy) * g.kw + dx) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy + dy) - static_cast<long>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox + dx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, double* x, const ConvGeometry& g) {
  const std::size_t np = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    double* plane = x + ch * g.h * g.w;
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx) {
        const double* row = cols + ((ch * g.kh + dy) * g.kw + dx) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy + dy) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox + dx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) + " of " + dims_str(x.dims()) +
                     " do not match kernel " + dims_str(w.dims()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), pad, 0, 0};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw ShapeError("conv2d: kernel " + dims_str(w.dims()) + " larger than padded input " + dims_str(x.dims()));
  }
  g.oh = g.h + 2 * pad - g.kh + 1;
  g.ow = g.w + 2 * pad - g.kw + 1;

  Tensor out(Dims{g.n, g.o, g.oh, g.ow});
  const bool graph = wants_graph({&x, &w});
  const bool keep_cols = graph && w.requires_grad();
  std::vector<double> cols(keep_cols ? g.n * g.patch() * g.pixels() : g.patch() * g.pixels());
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.o * g.pixels();
  for (std::size_t i = 0; i < g.n; ++i) {
    double* ci = keep_cols ? cols.data() + i * g.patch() * g.pixels() : cols.data();
    im2col(x.data().data() + i * in_stride, ci, g);
    kernels::gemm(w.data().data(), ci, out.data().data() + i * out_stride, g.o, g.patch(), g.pixels(), false);
  }

  if (graph) {
    TensorImpl* xi = x.impl().get();
    TensorImpl* wi = w.impl().get();
    record(out, "conv2d", {x, w},
           [xi, wi, g, in_stride, out_stride, saved = std::move(cols)](std::span<const double> go) {
             double* gw = grad_buffer(wi);
             double* gx = grad_buffer(xi);
             const std::size_t cols_size = g.patch() * g.pixels();
             std::vector<double> wt, scratch(cols_size);
             if (gx) {
               wt.resize(wi->data.size());
               kernels::transpose(wi->data.data(), wt.data(), g.o, g.patch());
             }
             for (std::size_t i = 0; i < g.n; ++i) {
               const double* gout = go.data() + i * out_stride;
               if (gw) {
                 kernels::transpose(saved.data() + i * cols_size, scratch.data(), g.patch(), g.pixels());
                 kernels::gemm(gout, scratch.data(), gw, g.o, g.pixels(), g.patch(), true);
               }
               if (gx) {
                 kernels::gemm(wt.data(), gout, scratch.data(), g.patch(), g.o, g.pixels(), false);
                 col2im_add(scratch.data(), gx + i * in_stride, g);
               }
             }
           });
  }
  return out;
}

Tensor maxpool2x2(const Tensor& x) {
  require_rank("maxpool2x2", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("maxpool2x2: spatial extent too small in " + dims_str(x.dims()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out(Dims{n, c, oh, ow});
  std::vector<std::size_t> arg(out.size());
  const double* src = x.data().data();
  double* dst = out.data().data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = base + (2 * y) * w + 2 * xx;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t idx : cand) {
          if (src[idx] > src[best]) best = idx;
        }
        dst[o] = src[best];
        arg[o] = best;
      }
    }
  }
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "maxpool2x2", {x}, [xi, arg = std::move(arg)](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    });
  }
  return out;
}

Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("adaptive_avg_pool2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool2d: cannot pool " + dims_str(x.dims()) + " to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor out(Dims{n, c, out_h, out_w});
  const double* src = x.data().data();
  double* dst = out.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
        const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        double s = 0.0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t xx = x0; xx < x1; ++xx) s += src[plane * h * w + y * w + xx];
        }
        dst[(plane * out_h + oy) * out_w + ox] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "adaptive_avg_pool2d", {x}, [xi, n, c, h, w, out_h, out_w, lo, hi](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t plane = 0; plane < n * c; ++plane) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
            const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
            const double share =
                g[(plane * out_h + oy) * out_w + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y) {
              for (std::size_t xx = x0; xx < x1; ++xx) gx[plane * h * w + y * w + xx] += share;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.dims());
  const auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "relu", {x}, [xi](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      const double* v = xi->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (v[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.dims());
  const auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = src[i];
    if (v >= 0.0) {
      dst[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      dst[i] = e / (1.0 + e);
    }
  }
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    std::vector<double> y(dst.begin(), dst.end());
    record(out, "sigmoid", {x}, [xi, y = std::move(y)](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dims("add", a, b);
  Tensor out(a.dims());
  const auto x = a.data(), y = b.data();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] + y[i];
  if (wants_graph({&a, &b})) {
    TensorImpl* ai = a.impl().get();
    TensorImpl* bi = b.impl().get();
    record(out, "add", {a, b}, [ai, bi](std::span<const double> g) {
      if (double* ga = grad_buffer(ai)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (double* gb = grad_buffer(bi)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_dims("sub", a, b);
  Tensor out(a.dims());
  const auto x = a.data(), y = b.data();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] - y[i];
  if (wants_graph({&a, &b})) {
    TensorImpl* ai = a.impl().get();
    TensorImpl* bi = b.impl().get();
    record(out, "sub", {a, b}, [ai, bi](std::span<const double> g) {
      if (double* ga = grad_buffer(ai)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (double* gb = grad_buffer(bi)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dims("mul", a, b);
  Tensor out(a.dims());
  const auto x = a.data(), y = b.data();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] * y[i];
  if (wants_graph({&a, &b})) {
    TensorImpl* ai = a.impl().get();
    TensorImpl* bi = b.impl().get();
    record(out, "mul", {a, b}, [ai, bi](std::span<const double> g) {
      if (double* ga = grad_buffer(ai)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (double* gb = grad_buffer(bi)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double s) {
  Tensor out(x.dims());
  const auto v = x.data();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = v[i] * s;
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "scale", {x}, [xi, s](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& x, double s) {
  Tensor out(x.dims());
  const auto v = x.data();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = v[i] + s;
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "add_scalar", {x}, [xi](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2) throw ShapeError("add_bias: input needs rank >= 2, got " + dims_str(x.dims()));
  require_rank("add_bias", b, 1);
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_extent(x.dims());
  if (b.dim(0) != c) {
    throw ShapeError("add_bias: bias " + dims_str(b.dims()) + " does not match axis 1 of " + dims_str(x.dims()));
  }
  Tensor out(x.dims());
  const double* src = x.data().data();
  const double* bias = b.data().data();
  double* dst = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[base + j] = src[base + j] + bias[ch];
    }
  }
  if (wants_graph({&x, &b})) {
    TensorImpl* xi = x.impl().get();
    TensorImpl* bi = b.impl().get();
    record(out, "add_bias", {x, b}, [xi, bi, n, c, inner](std::span<const double> g) {
      if (double* gx = grad_buffer(xi)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (double* gb = grad_buffer(bi)) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * inner;
            double s = 0.0;
            for (std::size_t j = 0; j < inner; ++j) s += g[base + j];
            gb[ch] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& m) {
  if (x.rank() < 2) throw ShapeError("scale_channels: input needs rank >= 2, got " + dims_str(x.dims()));
  require_rank("scale_channels", m, 1);
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_extent(x.dims());
  if (m.dim(0) != c) {
    throw ShapeError("scale_channels: mask " + dims_str(m.dims()) + " does not match axis 1 of " +
                     dims_str(x.dims()));
  }
  Tensor out(x.dims());
  const double* src = x.data().data();
  const double* mv = m.data().data();
  double* dst = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[base + j] = src[base + j] * mv[ch];
    }
  }
  if (wants_graph({&x, &m})) {
    TensorImpl* xi = x.impl().get();
    TensorImpl* mi = m.impl().get();
    record(out, "scale_channels", {x, m}, [xi, mi, n, c, inner](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      double* gm = grad_buffer(mi);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (i * c + ch) * inner;
          if (gx) {
            for (std::size_t j = 0; j < inner; ++j) gx[base + j] += g[base + j] * mi->data[ch];
          }
          if (gm) {
            double s = 0.0;
            for (std::size_t j = 0; j < inner; ++j) s += g[base + j] * xi->data[base + j];
            gm[ch] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Dims& ref = parts.front().dims();
  if (ref.size() < 2) throw ShapeError("concat: inputs need rank >= 2, got " + dims_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Dims& d = p.dims();
    bool ok = d.size() == ref.size() && d[0] == ref[0];
    for (std::size_t i = 2; ok && i < d.size(); ++i) ok = d[i] == ref[i];
    if (!ok) throw ShapeError("concat: dims " + dims_str(d) + " incompatible with " + dims_str(ref));
    total += d[1];
  }
  Dims od = ref;
  od[1] = total;
  const std::size_t n = ref[0], inner = inner_extent(ref);
  Tensor out(od);
  double* dst = out.data().data();
  std::size_t offset = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    widths.push_back(w);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(p.data().data() + i * w * inner, w * inner, dst + (i * total + offset) * inner);
    }
    offset += w;
  }
  bool graph = false;
  for (const auto& p : parts) graph = graph || wants_graph({&p});
  if (graph) {
    std::vector<TensorImpl*> ins;
    for (const auto& p : parts) ins.push_back(p.impl().get());
    record(out, "concat", parts, [ins, widths, n, inner, total](std::span<const double> g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const std::size_t w = widths[k];
        if (double* gp = grad_buffer(ins[k])) {
          for (std::size_t i = 0; i < n; ++i) {
            const double* src = g.data() + (i * total + off) * inner;
            double* dst = gp + i * w * inner;
            for (std::size_t j = 0; j < w * inner; ++j) dst[j] += src[j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor narrow(const Tensor& x, std::size_t start, std::size_t length) {
  if (x.rank() < 2) throw ShapeError("narrow: input needs rank >= 2, got " + dims_str(x.dims()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_extent(x.dims());
  if (length == 0 || start + length > c) {
    throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") outside axis 1 of " + dims_str(x.dims()));
  }
  Dims od = x.dims();
  od[1] = length;
  Tensor out(od);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data().data() + (i * c + start) * inner, length * inner, out.data().data() + i * length * inner);
  }
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "narrow", {x}, [xi, n, c, inner, start, length](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < length * inner; ++j) gx[(i * c + start) * inner + j] += g[i * length * inner + j];
      }
    });
  }
  return out;
}

Tensor select_columns(const Tensor& x, const std::vector<std::size_t>& cols) {
  require_rank("select_columns", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (cols.empty()) throw ShapeError("select_columns: empty column list");
  for (auto col : cols) {
    if (col >= c) {
      throw ShapeError("select_columns: column " + std::to_string(col) + " outside " + dims_str(x.dims()));
    }
  }
  const std::size_t k = cols.size();
  Tensor out(Dims{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.data()[i * k + j] = x.data()[i * c + cols[j]];
  }
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "select_columns", {x}, [xi, cols, n, c, k](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) gx[i * c + cols[j]] += g[i * k + j];
      }
    });
  }
  return out;
}

Tensor Tensor::reshape(Dims dims) const {
  if (product(dims) != size()) {
    throw ShapeError("reshape: cannot view " + dims_str(this->dims()) + " as " + dims_str(dims));
  }
  Tensor out(std::move(dims), impl_->data);
  if (wants_graph({this})) {
    TensorImpl* xi = impl_.get();
    record(out, "reshape", {*this}, [xi](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten: scalar input");
  if (x.rank() == 2) return x;
  return x.reshape(Dims{x.dim(0), x.size() / x.dim(0)});
}

namespace {

void row_softmax(const double* x, double* y, std::size_t c) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    y[j] = std::exp(x[j] - mx);
    s += y[j];
  }
  for (std::size_t j = 0; j < c; ++j) y[j] /= s;
}

void row_log_softmax(const double* x, double* y, std::size_t c) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
}

}  // namespace

Tensor softmax(const Tensor& x) {
  require_rank("softmax", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out(x.dims());
  for (std::size_t i = 0; i < n; ++i) row_softmax(x.data().data() + i * c, out.data().data() + i * c, c);
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    std::vector<double> y(out.data().begin(), out.data().end());
    record(out, "softmax", {x}, [xi, y = std::move(y), n, c](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out(x.dims());
  for (std::size_t i = 0; i < n; ++i) row_log_softmax(x.data().data() + i * c, out.data().data() + i * c, c);
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    std::vector<double> p(out.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(out.data()[i]);
    record(out, "log_softmax", {x}, [xi, p = std::move(p), n, c](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] - p[i * c + j] * s;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "sum", {x}, [xi](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_sq(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  Tensor out = Tensor::scalar(s);
  if (wants_graph({&x})) {
    TensorImpl* xi = x.impl().get();
    record(out, "sum_sq", {x}, [xi](std::span<const double> g) {
      double* gx = grad_buffer(xi);
      for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += 2.0 * xi->data[i] * g[0];
    });
  }
  return out;
}

Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits) {
  require_rank("kl_divergence", student_logits, 2);
  require_same_dims("kl_divergence", student_logits, teacher_logits);
  Tensor p, log_p;
  {
    NoGradGuard guard;
    log_p = log_softmax(teacher_logits.detach());
    p = softmax(teacher_logits.detach());
  }
  Tensor log_q = log_softmax(student_logits);
  Tensor terms = mul(p, sub(log_p, log_q));
  return scale(sum(terms), 1.0 / static_cast<double>(student_logits.dim(0)));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     dims_str(logits.dims()));
  }
  Tensor onehot(Dims{n, c});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " >= " + std::to_string(c));
    onehot.data()[i * c + labels[i]] = 1.0;
  }
  return scale(sum(mul(onehot, log_softmax(logits))), -1.0 / static_cast<double>(n));
}

}  // namespace pnc
