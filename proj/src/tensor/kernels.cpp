#include "revflow/kernels.h"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "revflow/errors.h"

namespace revflow {
namespace {

using Index = std::ptrdiff_t;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

template <typename T>
T apply(Unary k, T v) {
  switch (k.kind) {
    case Unary::Kind::Exp:
      return std::exp(v);
    case Unary::Kind::Tanh:
      return std::tanh(v);
    case Unary::Kind::Relu:
      return v > T{0} ? v : T{0};
    case Unary::Kind::Neg:
      return -v;
    case Unary::Kind::Recip:
      return T{1} / v;
    case Unary::Kind::Scale:
      return static_cast<T>(k.arg) * v;
    case Unary::Kind::Add:
      return v + static_cast<T>(k.arg);
  }
  return v;
}

// Valid output range for a shift: dst[i] reads src[i + offset], 0 <= i + offset < extent.
struct Range {
  Index begin;
  Index end;
};

Range shifted_range(Index extent, Index offset) {
  return {std::max<Index>(0, -offset), std::min<Index>(extent, extent - offset)};
}

// dst[y][x] += a * src[y + oy][x + ox] over the zero-padded window.
template <typename T>
void accumulate_shifted(T* dst, const T* src, Index h, Index w, Index oy, Index ox, T a) {
  const Range ry = shifted_range(h, oy);
  const Range rx = shifted_range(w, ox);
  if (a == T{0}) return;
  for (Index y = ry.begin; y < ry.end; ++y) {
    T* d = dst + y * w;
    const T* s = src + (y + oy) * w + ox;
    for (Index x = rx.begin; x < rx.end; ++x) d[x] += a * s[x];
  }
}

// sum_{y,x} a[y][x] * b[y + oy][x + ox] in double, four independent lanes per row.
template <typename T>
double shifted_dot(const T* a, const T* b, Index h, Index w, Index oy, Index ox) {
  const Range ry = shifted_range(h, oy);
  const Range rx = shifted_range(w, ox);
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  const Index len = rx.end - rx.begin;
  for (Index y = ry.begin; y < ry.end; ++y) {
    const T* pa = a + y * w + rx.begin;
    const T* pb = b + (y + oy) * w + ox + rx.begin;
    Index i = 0;
    for (; i + 4 <= len; i += 4) {
      s0 += static_cast<double>(pa[i]) * static_cast<double>(pb[i]);
      s1 += static_cast<double>(pa[i + 1]) * static_cast<double>(pb[i + 1]);
      s2 += static_cast<double>(pa[i + 2]) * static_cast<double>(pb[i + 2]);
      s3 += static_cast<double>(pa[i + 3]) * static_cast<double>(pb[i + 3]);
    }
    for (; i < len; ++i) s0 += static_cast<double>(pa[i]) * static_cast<double>(pb[i]);
  }
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
void check_conv_weight(const Tensor<T>& weight, std::size_t c_in, const char* op) {
  const Shape& ws = weight.shape();
  if (ws.h != 3 || ws.w != 3) {
    throw ShapeError(std::string(op) + ": weight must be (c_out, c_in, 3, 3), got " +
                     to_string(ws));
  }
  if (ws.c != c_in) {
    throw ShapeError(std::string(op) + ": weight expects " + std::to_string(ws.c) +
                     " input channels, got " + std::to_string(c_in));
  }
}

}  // namespace

template <typename T>
Tensor<T> map(const Tensor<T>& t, Unary kernel) {
  Tensor<T> out = t;
  return map(std::move(out), kernel);
}

template <typename T>
Tensor<T> map(Tensor<T>&& t, Unary kernel) {
  for (T& v : t.values()) v = apply(kernel, v);
  return std::move(t);
}

template <typename T>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, Binary kernel) {
  require_same_shape(a.shape(), b.shape(), "zip");
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const std::size_t n = a.size();
  switch (kernel) {
    case Binary::Add:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      break;
    case Binary::Sub:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      break;
    case Binary::Mul:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      break;
    case Binary::Div:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
      break;
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& t, std::size_t k) {
  const Shape& s = t.shape();
  if (k < 1 || k >= s.c) {
    throw ShapeError("channel_split: split point " + std::to_string(k) + " outside [1, " +
                     std::to_string(s.c) + ")");
  }
  Tensor<T> first(Shape{s.n, k, s.h, s.w});
  Tensor<T> second(Shape{s.n, s.c - k, s.h, s.w});
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(t.plane(n, 0), k * plane, first.plane(n, 0));
    std::copy_n(t.plane(n, k), (s.c - k) * plane, second.plane(n, 0));
  }
  return {std::move(first), std::move(second)};
}

template <typename T>
Tensor<T> channel_slice(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  const Shape& s = t.shape();
  if (begin >= end || end > s.c) {
    throw ShapeError("channel_slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + to_string(s));
  }
  Tensor<T> out(Shape{s.n, end - begin, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(t.plane(n, begin), (end - begin) * s.plane(), out.plane(n, 0));
  }
  return out;
}

template <typename T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("channel_concat: incompatible shapes " + to_string(sa) + " and " +
                     to_string(sb));
  }
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t plane = sa.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.plane(n, 0), sa.c * plane, out.plane(n, 0));
    std::copy_n(b.plane(n, 0), sb.c * plane, out.plane(n, sa.c));
  }
  return out;
}

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  check_conv_weight(weight, xs.c, "conv3x3");
  const std::size_t c_out = weight.shape().n;
  if (bias.size() != c_out) {
    throw ShapeError("conv3x3: bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(c_out));
  }
  Tensor<T> y(Shape{xs.n, c_out, xs.h, xs.w});
  const auto h = static_cast<Index>(xs.h);
  const auto w = static_cast<Index>(xs.w);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < c_out; ++co) {
      T* out = y.plane(n, co);
      std::fill_n(out, xs.plane(), bias[co]);
      for (std::size_t ci = 0; ci < xs.c; ++ci) {
        const T* in = x.plane(n, ci);
        const T* k = weight.data() + (co * xs.c + ci) * 9;
        for (Index ky = 0; ky < 3; ++ky) {
          for (Index kx = 0; kx < 3; ++kx) {
            accumulate_shifted(out, in, h, w, ky - 1, kx - 1, k[ky * 3 + kx]);
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv3x3_input_grad(const Tensor<T>& weight, const Tensor<T>& dy) {
  const Shape& ds = dy.shape();
  const Shape& ws = weight.shape();
  if (ws.n != ds.c || ws.h != 3 || ws.w != 3) {
    throw ShapeError("conv3x3_input_grad: weight " + to_string(ws) + " incompatible with dy " +
                     to_string(ds));
  }
  const std::size_t c_in = ws.c;
  Tensor<T> dx(Shape{ds.n, c_in, ds.h, ds.w});
  const auto h = static_cast<Index>(ds.h);
  const auto w = static_cast<Index>(ds.w);
  for (std::size_t n = 0; n < ds.n; ++n) {
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      T* out = dx.plane(n, ci);
      for (std::size_t co = 0; co < ds.c; ++co) {
        const T* g = dy.plane(n, co);
        const T* k = weight.data() + (co * c_in + ci) * 9;
        for (Index ky = 0; ky < 3; ++ky) {
          for (Index kx = 0; kx < 3; ++kx) {
            accumulate_shifted(out, g, h, w, 1 - ky, 1 - kx, k[ky * 3 + kx]);
          }
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> conv3x3_input_grad_relu(Tensor<T>&& activation, const Tensor<T>& weight,
                                  const Tensor<T>& dy) {
  const Shape& as = activation.shape();
  const Shape& ds = dy.shape();
  const Shape& ws = weight.shape();
  if (ws.n != ds.c || ws.c != as.c || ws.h != 3 || ws.w != 3 || as.n != ds.n || as.h != ds.h ||
      as.w != ds.w) {
    throw ShapeError("conv3x3_input_grad_relu: activation " + to_string(as) + ", weight " +
                     to_string(ws) + ", dy " + to_string(ds) + " are incompatible");
  }
  Tensor<T> scratch(Shape{1, 1, as.h, as.w});
  const auto h = static_cast<Index>(as.h);
  const auto w = static_cast<Index>(as.w);
  const std::size_t plane = as.plane();
  for (std::size_t n = 0; n < as.n; ++n) {
    for (std::size_t ci = 0; ci < as.c; ++ci) {
      T* acc = scratch.data();
      std::fill_n(acc, plane, T{0});
      for (std::size_t co = 0; co < ds.c; ++co) {
        const T* g = dy.plane(n, co);
        const T* k = weight.data() + (co * as.c + ci) * 9;
        for (Index ky = 0; ky < 3; ++ky) {
          for (Index kx = 0; kx < 3; ++kx) {
            accumulate_shifted(acc, g, h, w, 1 - ky, 1 - kx, k[ky * 3 + kx]);
          }
        }
      }
      T* a = activation.plane(n, ci);
      for (std::size_t i = 0; i < plane; ++i) a[i] = a[i] > T{0} ? acc[i] : T{0};
    }
  }
  return std::move(activation);
}

template <typename T>
void conv3x3_param_grad_accumulate(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dweight,
                                   Tensor<T>& dbias) {
  const Shape& xs = x.shape();
  const Shape& ds = dy.shape();
  if (xs.n != ds.n || xs.h != ds.h || xs.w != ds.w) {
    throw ShapeError("conv3x3_param_grad_accumulate: x " + to_string(xs) + " vs dy " +
                     to_string(ds));
  }
  if (!(dweight.shape() == Shape{ds.c, xs.c, 3, 3}) || dbias.size() != ds.c) {
    throw ShapeError("conv3x3_param_grad_accumulate: gradient buffers do not match " +
                     to_string(Shape{ds.c, xs.c, 3, 3}));
  }
  Tensor<double> wacc(dweight.shape());
  Tensor<double> bacc(dbias.shape());
  const auto h = static_cast<Index>(xs.h);
  const auto w = static_cast<Index>(xs.w);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < ds.c; ++co) {
      const T* g = dy.plane(n, co);
      double bsum = 0.0;
      for (std::size_t i = 0; i < xs.plane(); ++i) bsum += static_cast<double>(g[i]);
      bacc[co] += bsum;
      for (std::size_t ci = 0; ci < xs.c; ++ci) {
        const T* in = x.plane(n, ci);
        double* k = wacc.data() + (co * xs.c + ci) * 9;
        for (Index ky = 0; ky < 3; ++ky) {
          for (Index kx = 0; kx < 3; ++kx) {
            k[ky * 3 + kx] += shifted_dot(g, in, h, w, ky - 1, kx - 1);
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < dweight.size(); ++i) dweight[i] += static_cast<T>(wacc[i]);
  for (std::size_t i = 0; i < dbias.size(); ++i) dbias[i] += static_cast<T>(bacc[i]);
}

template <typename T>
Conv3x3Grads<T> conv3x3_backward(const Tensor<T>& x, const Tensor<T>& weight,
                                 const Tensor<T>& dy) {
  check_conv_weight(weight, x.shape().c, "conv3x3_backward");
  if (dy.shape().c != weight.shape().n) {
    throw ShapeError("conv3x3_backward: dy has " + std::to_string(dy.shape().c) +
                     " channels, weight produces " + std::to_string(weight.shape().n));
  }
  Conv3x3Grads<T> g;
  g.dx = conv3x3_input_grad(weight, dy);
  g.dweight = Tensor<T>(weight.shape());
  g.dbias = Tensor<T>(Shape{1, weight.shape().n, 1, 1});
  conv3x3_param_grad_accumulate(x, dy, g.dweight, g.dbias);
  return g;
}

template <typename T>
Tensor<T> pixel_matmul(const Tensor<T>& x, const Tensor<T>& w) {
  const Shape& xs = x.shape();
  if (!(w.shape() == Shape{xs.c, xs.c, 1, 1})) {
    throw ShapeError("pixel_matmul: matrix " + to_string(w.shape()) + " does not match " +
                     std::to_string(xs.c) + " channels");
  }
  Tensor<T> y(xs);
  const std::size_t plane = xs.plane();
  Tensor<double> acc(Shape{1, 1, xs.h, xs.w});
  double* sum = acc.data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t i = 0; i < xs.c; ++i) {
      std::fill_n(sum, plane, 0.0);
      for (std::size_t j = 0; j < xs.c; ++j) {
        const double a = w[i * xs.c + j];
        const T* in = x.plane(n, j);
        for (std::size_t p = 0; p < plane; ++p) sum[p] += a * static_cast<double>(in[p]);
      }
      T* out = y.plane(n, i);
      for (std::size_t p = 0; p < plane; ++p) out[p] = static_cast<T>(sum[p]);
    }
  }
  return y;
}

template <typename T>
double sum(const Tensor<T>& t) {
  double s = 0.0;
  for (T v : t.values()) s += static_cast<double>(v);
  return s;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return s;
}

template <typename T>
double squared_norm(const Tensor<T>& t) {
  return dot(t, t);
}

template <typename T>
double max_abs(const Tensor<T>& t) {
  double m = 0.0;
  for (T v : t.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return out;
}

#define REVFLOW_INSTANTIATE_KERNELS(T)                                                        \
  template Tensor<T> map(const Tensor<T>&, Unary);                                            \
  template Tensor<T> map(Tensor<T>&&, Unary);                                                 \
  template Tensor<T> zip(const Tensor<T>&, const Tensor<T>&, Binary);                         \
  template std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>&, std::size_t);      \
  template Tensor<T> channel_concat(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> channel_slice(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> conv3x3(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Conv3x3Grads<T> conv3x3_backward(const Tensor<T>&, const Tensor<T>&,               \
                                            const Tensor<T>&);                                \
  template Tensor<T> conv3x3_input_grad(const Tensor<T>&, const Tensor<T>&);                  \
  template void conv3x3_param_grad_accumulate(const Tensor<T>&, const Tensor<T>&, Tensor<T>&, \
                                              Tensor<T>&);                                    \
  template Tensor<T> conv3x3_input_grad_relu(Tensor<T>&&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> pixel_matmul(const Tensor<T>&, const Tensor<T>&);                        \
  template double sum(const Tensor<T>&);                                                      \
  template double dot(const Tensor<T>&, const Tensor<T>&);                                    \
  template double squared_norm(const Tensor<T>&);                                             \
  template double max_abs(const Tensor<T>&);                                                  \
  template double max_abs_diff(const Tensor<T>&, const Tensor<T>&);

REVFLOW_INSTANTIATE_KERNELS(float)
REVFLOW_INSTANTIATE_KERNELS(double)

template Tensor<float> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace revflow
