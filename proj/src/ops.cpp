#include "tdg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>

namespace tdg::ad {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
Var<T> emit(Primitive kind, std::initializer_list<Var<T>> inputs, Tensor<T> value, typename Tape<T>::BackwardFn fn) {
  std::span<const Var<T>> span(inputs.begin(), inputs.size());
  return span.front().tape().record(kind, span, std::move(value), std::move(fn));
}

// Gradient buffer of `id` if it wants gradient, else null.
template <typename T>
T* grad_of(Tape<T>& tape, std::size_t id) {
  return tape.requires_grad(id) ? tape.grad_buffer(id).data().data() : nullptr;
}

template <typename T>
const T* out_grad(Tape<T>& tape, std::size_t self) {
  return tape.node(self).grad.data().data();
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

void require_rank(std::string_view op, const char* name, const Shape& s, int rank) {
  if (static_cast<int>(s.size()) != rank) {
    shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

void require_same(std::string_view op, const Shape& a, const Shape& b) {
  if (a == b) return;
  if (a.size() != b.size()) shape_fail(op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  std::string axes;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) axes += (axes.empty() ? "" : ",") + std::to_string(i);
  }
  shape_fail(op, "extents differ on axes [" + axes + "]: " + shape_str(a) + " vs " + shape_str(b));
}

// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, int axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

// Strides of `in` when viewed at `out`'s rank; broadcast axes get stride 0.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const int r = static_cast<int>(out.size());
  const int off = r - static_cast<int>(in.size());
  std::vector<std::int64_t> st(r, 0);
  std::int64_t acc = 1;
  for (int d = r - 1; d >= off; --d) {
    auto e = in[d - off];
    st[d] = (e == 1 && out[d] != 1) ? 0 : acc;
    acc *= e;
  }
  return st;
}

// Visits every output element with the matching offsets into both operands.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa, const std::vector<std::int64_t>& sb,
                        F&& f) {
  const int r = static_cast<int>(out.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t n = shape_numel(out);
  const std::int64_t inner = out[r - 1];
  const std::int64_t ia = sa[r - 1], ib = sb[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ai = 0, bi = 0;
  for (std::int64_t o = 0; o < n; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(o + j, ai + j * ia, bi + j * ib);
    for (int d = r - 2; d >= 0; --d) {
      ++idx[d];
      ai += sa[d];
      bi += sb[d];
      if (idx[d] < out[d]) break;
      ai -= sa[d] * out[d];
      bi -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// ---- convolution helpers ----

struct ConvGeom {
  std::int64_t n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
  std::int64_t ckk() const { return c * kh * kw; }
  std::int64_t hw() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Writes the patch matrix of one image into columns [col_off, col_off + hw) of a
// (ckk x ld) row-major buffer.
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col, std::int64_t ld, std::int64_t col_off) {
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * ld + col_off;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          if (g.stride == 1) {
            const std::int64_t shift = kx - g.pad;
            const std::int64_t lo = std::clamp<std::int64_t>(-shift, 0, g.wo);
            const std::int64_t hi = std::clamp<std::int64_t>(g.w - shift, lo, g.wo);
            std::fill(dst, dst + lo, T{0});
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + hi, dst + g.wo, T{0});
            continue;
          }
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix < 0 || ix >= g.w) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeom& g, const T* col, std::int64_t ld, std::int64_t col_off, T* dx) {
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * ld + col_off;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * g.wo;
          T* dst = dx + (c * g.h + iy) * g.w;
          if (g.stride == 1) {
            const std::int64_t shift = kx - g.pad;
            const std::int64_t lo = std::clamp<std::int64_t>(-shift, 0, g.wo);
            const std::int64_t hi = std::clamp<std::int64_t>(g.w - shift, lo, g.wo);
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
            continue;
          }
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Number of images processed per GEMM so the patch buffer stays bounded.
std::int64_t conv_chunk(const ConvGeom& g) {
  constexpr std::int64_t kBudget = std::int64_t{1} << 22;
  return std::clamp<std::int64_t>(kBudget / std::max<std::int64_t>(1, g.ckk() * g.hw()), 1, g.n);
}

template <typename T>
Var<T> conv2d_impl(const Var<T>& x, const Var<T>& w, const Var<T>* bias, int stride, int padding) {
  constexpr std::string_view op = "conv2d";
  require_rank(op, "input", x.shape(), 4);
  require_rank(op, "weight", w.shape(), 4);
  if (stride < 1 || padding < 0) shape_fail(op, "stride must be >= 1 and padding >= 0");
  ConvGeom g{};
  g.n = x.dim(0), g.c = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.o = w.dim(0), g.kh = w.dim(2), g.kw = w.dim(3);
  g.stride = stride, g.pad = padding;
  if (w.dim(1) != g.c) {
    shape_fail(op, "input axis 1 (" + std::to_string(g.c) + ") != weight axis 1 (" + std::to_string(w.dim(1)) + ")");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.o)) {
    shape_fail(op, "bias must have shape (" + std::to_string(g.o) + "), got " + shape_str(bias->shape()));
  }
  const std::int64_t eh = g.h + 2 * padding - g.kh, ew = g.w + 2 * padding - g.kw;
  if (eh < 0 || ew < 0) shape_fail(op, "kernel larger than padded input on axes [2,3]");
  g.ho = eh / stride + 1;
  g.wo = ew / stride + 1;

  Tensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
  const T* xd = x.value().data().data();
  CMapR<T> wm(w.value().data().data(), g.o, g.ckk());
  const std::int64_t chunk = conv_chunk(g);
  std::vector<T> col;
  MatR<T> res;
  for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::int64_t cn = std::min(chunk, g.n - n0);
    const std::int64_t ld = cn * g.hw();
    col.resize(static_cast<std::size_t>(g.ckk() * ld));
    for (std::int64_t i = 0; i < cn; ++i) {
      const T* xi = xd + (n0 + i) * g.c * g.h * g.w;
      if (g.pointwise()) {
        for (std::int64_t c = 0; c < g.c; ++c) std::copy_n(xi + c * g.hw(), g.hw(), col.data() + c * ld + i * g.hw());
      } else {
        im2col(g, xi, col.data(), ld, i * g.hw());
      }
    }
    res.noalias() = wm * CMapR<T>(col.data(), g.ckk(), ld);
    for (std::int64_t i = 0; i < cn; ++i) {
      T* oi = out.data().data() + (n0 + i) * g.o * g.hw();
      for (std::int64_t o = 0; o < g.o; ++o) {
        const T b = bias ? bias->value()[o] : T{0};
        const T* src = res.data() + o * ld + i * g.hw();
        T* dst = oi + o * g.hw();
        for (std::int64_t k = 0; k < g.hw(); ++k) dst[k] = src[k] + b;
      }
    }
  }

  const std::size_t xid = x.id(), wid = w.id();
  const std::size_t bid = bias ? bias->id() : 0;
  const bool has_bias = bias != nullptr;
  auto backward = [g, xid, wid, bid, has_bias](Tape<T>& tape, std::size_t self) {
    const T* dy = out_grad(tape, self);
    T* dx = grad_of(tape, xid);
    T* dw = grad_of(tape, wid);
    T* db = has_bias ? grad_of(tape, bid) : nullptr;
    if (db) {
      for (std::int64_t n = 0; n < g.n; ++n) {
        for (std::int64_t o = 0; o < g.o; ++o) {
          const T* src = dy + (n * g.o + o) * g.hw();
          T acc{0};
          for (std::int64_t k = 0; k < g.hw(); ++k) acc += src[k];
          db[o] += acc;
        }
      }
    }
    if (!dx && !dw) return;
    const T* xd = tape.value(xid).data().data();
    CMapR<T> wm(tape.value(wid).data().data(), g.o, g.ckk());
    const std::int64_t chunk = conv_chunk(g);
    std::vector<T> col, dyc, dcol;
    for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::int64_t cn = std::min(chunk, g.n - n0);
      const std::int64_t ld = cn * g.hw();
      dyc.resize(static_cast<std::size_t>(g.o * ld));
      for (std::int64_t i = 0; i < cn; ++i) {
        for (std::int64_t o = 0; o < g.o; ++o) {
          std::copy_n(dy + ((n0 + i) * g.o + o) * g.hw(), g.hw(), dyc.data() + o * ld + i * g.hw());
        }
      }
      CMapR<T> dym(dyc.data(), g.o, ld);
      if (dw) {
        col.resize(static_cast<std::size_t>(g.ckk() * ld));
        for (std::int64_t i = 0; i < cn; ++i) {
          const T* xi = xd + (n0 + i) * g.c * g.h * g.w;
          if (g.pointwise()) {
            for (std::int64_t c = 0; c < g.c; ++c) std::copy_n(xi + c * g.hw(), g.hw(), col.data() + c * ld + i * g.hw());
          } else {
            im2col(g, xi, col.data(), ld, i * g.hw());
          }
        }
        MapR<T>(dw, g.o, g.ckk()).noalias() += dym * CMapR<T>(col.data(), g.ckk(), ld).transpose();
      }
      if (dx) {
        dcol.resize(static_cast<std::size_t>(g.ckk() * ld));
        MapR<T>(dcol.data(), g.ckk(), ld).noalias() = wm.transpose() * dym;
        for (std::int64_t i = 0; i < cn; ++i) {
          T* dxi = dx + (n0 + i) * g.c * g.h * g.w;
          if (g.pointwise()) {
            for (std::int64_t c = 0; c < g.c; ++c) {
              const T* src = dcol.data() + c * ld + i * g.hw();
              T* dst = dxi + c * g.hw();
              for (std::int64_t k = 0; k < g.hw(); ++k) dst[k] += src[k];
            }
          } else {
            col2im(g, dcol.data(), ld, i * g.hw(), dxi);
          }
        }
      }
    }
  };
  if (bias) return emit(Primitive::kConv2d, {x, w, *bias}, std::move(out), backward);
  return emit(Primitive::kConv2d, {x, w}, std::move(out), backward);
}

enum class Binary { kAdd, kSub, kMul, kDiv };

template <typename T>
Var<T> binary(Binary kind, const Var<T>& a, const Var<T>& b) {
  static constexpr Primitive kPrims[] = {Primitive::kAdd, Primitive::kSub, Primitive::kMul, Primitive::kDiv};
  const Primitive prim = kPrims[static_cast<int>(kind)];
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  Tensor<T> out(out_shape);
  const T* ad = a.value().data().data();
  const T* bd = b.value().data().data();
  T* od = out.data().data();
  switch (kind) {
    case Binary::kAdd:
      for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) { od[o] = ad[i] + bd[j]; });
      break;
    case Binary::kSub:
      for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) { od[o] = ad[i] - bd[j]; });
      break;
    case Binary::kMul:
      for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) { od[o] = ad[i] * bd[j]; });
      break;
    case Binary::kDiv:
      for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) { od[o] = ad[i] / bd[j]; });
      break;
  }
  const std::size_t aid = a.id(), bid = b.id();
  return emit(prim, {a, b}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const T* dy = out_grad(tape, self);
    T* ga = grad_of(tape, aid);
    T* gb = grad_of(tape, bid);
    const T* av = tape.value(aid).data().data();
    const T* bv = tape.value(bid).data().data();
    switch (kind) {
      case Binary::kAdd:
        for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) {
          if (ga) ga[i] += dy[o];
          if (gb) gb[j] += dy[o];
        });
        break;
      case Binary::kSub:
        for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) {
          if (ga) ga[i] += dy[o];
          if (gb) gb[j] -= dy[o];
        });
        break;
      case Binary::kMul:
        for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) {
          if (ga) ga[i] += dy[o] * bv[j];
          if (gb) gb[j] += dy[o] * av[i];
        });
        break;
      case Binary::kDiv:
        for_each_broadcast(out_shape, sa, sb, [&](auto o, auto i, auto j) {
          if (ga) ga[i] += dy[o] / bv[j];
          if (gb) gb[j] -= dy[o] * av[i] / (bv[j] * bv[j]);
        });
        break;
    }
  });
}

enum class Unary { kRelu, kSigmoid, kTanh };

template <typename T>
Var<T> unary(Unary kind, const Var<T>& x) {
  static constexpr Primitive kPrims[] = {Primitive::kRelu, Primitive::kSigmoid, Primitive::kTanh};
  Tensor<T> out(x.shape());
  const auto in = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    switch (kind) {
      case Unary::kRelu: od[i] = v > T{0} ? v : T{0}; break;
      case Unary::kSigmoid: od[i] = T{1} / (T{1} + std::exp(-v)); break;
      case Unary::kTanh: od[i] = std::tanh(v); break;
    }
  }
  const std::size_t xid = x.id();
  return emit(kPrims[static_cast<int>(kind)], {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    const auto y = tape.value(self).data();
    for (std::size_t i = 0; i < y.size(); ++i) {
      switch (kind) {
        case Unary::kRelu: gx[i] += y[i] > T{0} ? dy[i] : T{0}; break;
        case Unary::kSigmoid: gx[i] += dy[i] * y[i] * (T{1} - y[i]); break;
        case Unary::kTanh: gx[i] += dy[i] * (T{1} - y[i] * y[i]); break;
      }
    }
  });
}

enum class Reduce { kSum, kMean, kMin, kMax };

template <typename T>
Var<T> reduce(Reduce kind, const Var<T>& x, int axis, bool keepdim) {
  static constexpr Primitive kPrims[] = {Primitive::kReduceSum, Primitive::kReduceMean, Primitive::kReduceMin,
                                         Primitive::kReduceMax};
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor<T> out(reduced_shape(x.shape(), ax, keepdim));
  std::vector<std::int64_t> arg;
  if (kind == Reduce::kMin || kind == Reduce::kMax) arg.resize(static_cast<std::size_t>(s.outer * s.inner));
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const T* base = xd + o * s.len * s.inner + i;
      const std::int64_t oi = o * s.inner + i;
      if (kind == Reduce::kSum || kind == Reduce::kMean) {
        T acc{0};
        for (std::int64_t k = 0; k < s.len; ++k) acc += base[k * s.inner];
        od[oi] = kind == Reduce::kMean ? acc / static_cast<T>(s.len) : acc;
      } else {
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < s.len; ++k) {
          const T v = base[k * s.inner];
          if (kind == Reduce::kMin ? v < base[best * s.inner] : v > base[best * s.inner]) best = k;
        }
        arg[oi] = best;
        od[oi] = base[best * s.inner];
      }
    }
  }
  const std::size_t xid = x.id();
  return emit(kPrims[static_cast<int>(kind)], {x}, std::move(out),
              [=, arg = std::move(arg)](Tape<T>& tape, std::size_t self) {
                T* gx = grad_of(tape, xid);
                if (!gx) return;
                const T* dy = out_grad(tape, self);
                const T scale = kind == Reduce::kMean ? T{1} / static_cast<T>(s.len) : T{1};
                for (std::int64_t o = 0; o < s.outer; ++o) {
                  for (std::int64_t i = 0; i < s.inner; ++i) {
                    const std::int64_t oi = o * s.inner + i;
                    T* base = gx + o * s.len * s.inner + i;
                    if (kind == Reduce::kSum || kind == Reduce::kMean) {
                      for (std::int64_t k = 0; k < s.len; ++k) base[k * s.inner] += dy[oi] * scale;
                    } else {
                      base[arg[oi] * s.inner] += dy[oi];
                    }
                  }
                }
              });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible extents on output axis " + std::to_string(i) + ": " + shape_str(a) +
                       " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int padding) {
  return conv2d_impl<T>(x, w, nullptr, stride, padding);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int padding) {
  return conv2d_impl<T>(x, w, &bias, stride, padding);
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
  require_rank("upsample_nearest", "input", x.shape(), 4);
  if (factor < 1) shape_fail("upsample_nearest", "factor must be >= 1");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for (std::int64_t r = 0; r < nc * h; ++r) {
    const T* src = xd + r * w;
    T* dst = od + r * factor * ow;
    for (std::int64_t xx = 0; xx < w; ++xx) std::fill_n(dst + xx * factor, factor, src[xx]);
    for (int k = 1; k < factor; ++k) std::copy_n(dst, ow, dst + k * ow);
  }
  const std::size_t xid = x.id();
  return emit(Primitive::kUpsampleNearest, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    std::vector<T> acc(static_cast<std::size_t>(ow));
    for (std::int64_t r = 0; r < nc * h; ++r) {
      const T* src = dy + r * factor * ow;
      std::copy_n(src, ow, acc.begin());
      for (int k = 1; k < factor; ++k) {
        for (std::int64_t xx = 0; xx < ow; ++xx) acc[xx] += src[k * ow + xx];
      }
      T* dst = gx + r * w;
      for (std::int64_t xx = 0; xx < w; ++xx) {
        T v{0};
        for (int k = 0; k < factor; ++k) v += acc[xx * factor + k];
        dst[xx] += v;
      }
    }
  });
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, int kernel) {
  require_rank("avg_pool", "input", x.shape(), 4);
  if (kernel < 1 || x.dim(2) % kernel || x.dim(3) % kernel) {
    shape_fail("avg_pool", "axes [2,3] of " + shape_str(x.shape()) + " not divisible by kernel " + std::to_string(kernel));
  }
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h / kernel, ow = w / kernel;
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for (std::int64_t p = 0; p < nc; ++p) {
    for (std::int64_t y = 0; y < h; ++y) {
      const T* src = xd + (p * h + y) * w;
      T* dst = od + (p * oh + y / kernel) * ow;
      for (std::int64_t xx = 0; xx < w; ++xx) dst[xx / kernel] += src[xx] * inv;
    }
  }
  const std::size_t xid = x.id();
  return emit(Primitive::kAvgPool, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    for (std::int64_t p = 0; p < nc; ++p) {
      for (std::int64_t y = 0; y < h; ++y) {
        T* dst = gx + (p * h + y) * w;
        const T* src = dy + (p * oh + y / kernel) * ow;
        for (std::int64_t xx = 0; xx < w; ++xx) dst[xx] += src[xx / kernel] * inv;
      }
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  constexpr std::string_view op = "matmul";
  if (a.rank() < 2 || b.rank() < 2) shape_fail(op, "operands need rank >= 2");
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    shape_fail(op, "contraction axes differ: a axis " + std::to_string(a.rank() - 1) + " = " + std::to_string(k) +
                       ", b axis " + std::to_string(b.rank() - 2) + " = " + std::to_string(b.dim(-2)));
  }
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (a.rank() != b.rank()) shape_fail(op, "batched operands need equal rank");
    for (int i = 0; i < a.rank() - 2; ++i) {
      if (a.dim(i) != b.dim(i)) shape_fail(op, "batch axis " + std::to_string(i) + " differs");
    }
  }
  const std::int64_t batch = a.value().numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  const T* ad = a.value().data().data();
  const T* bd = b.value().data().data();
  if (shared_b) {
    MapR<T>(out.data().data(), batch * m, n).noalias() = CMapR<T>(ad, batch * m, k) * CMapR<T>(bd, k, n);
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      MapR<T>(out.data().data() + i * m * n, m, n).noalias() =
          CMapR<T>(ad + i * m * k, m, k) * CMapR<T>(bd + i * k * n, k, n);
    }
  }
  const std::size_t aid = a.id(), bid = b.id();
  return emit(Primitive::kMatmul, {a, b}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const T* dy = out_grad(tape, self);
    T* ga = grad_of(tape, aid);
    T* gb = grad_of(tape, bid);
    const T* av = tape.value(aid).data().data();
    const T* bv = tape.value(bid).data().data();
    if (shared_b) {
      CMapR<T> dym(dy, batch * m, n);
      if (ga) MapR<T>(ga, batch * m, k).noalias() += dym * CMapR<T>(bv, k, n).transpose();
      if (gb) MapR<T>(gb, k, n).noalias() += CMapR<T>(av, batch * m, k).transpose() * dym;
      return;
    }
    for (std::int64_t i = 0; i < batch; ++i) {
      CMapR<T> dym(dy + i * m * n, m, n);
      if (ga) MapR<T>(ga + i * m * k, m, k).noalias() += dym * CMapR<T>(bv + i * k * n, k, n).transpose();
      if (gb) MapR<T>(gb + i * k * n, k, n).noalias() += CMapR<T>(av + i * m * k, m, k).transpose() * dym;
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      T mx = xd[base];
      for (std::int64_t k = 1; k < s.len; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      T total{0};
      for (std::int64_t k = 0; k < s.len; ++k) {
        const T e = std::exp(xd[base + k * s.inner] - mx);
        od[base + k * s.inner] = e;
        total += e;
      }
      for (std::int64_t k = 0; k < s.len; ++k) od[base + k * s.inner] /= total;
    }
  }
  const std::size_t xid = x.id();
  return emit(Primitive::kSoftmax, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    const T* y = tape.value(self).data().data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.len * s.inner + i;
        T dot{0};
        for (std::int64_t k = 0; k < s.len; ++k) dot += dy[base + k * s.inner] * y[base + k * s.inner];
        for (std::int64_t k = 0; k < s.len; ++k) {
          const std::int64_t j = base + k * s.inner;
          gx[j] += y[j] * (dy[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps) {
  if (x.rank() < 1) shape_fail("layer_norm", "input must have rank >= 1");
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.value().numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xd + r * d;
    T mu{0};
    for (std::int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t j = 0; j < d; ++j) od[r * d + j] = (row[j] - mu) * rs;
  }
  const std::size_t xid = x.id();
  return emit(Primitive::kLayerNorm, {x}, std::move(out),
              [=, rstd = std::move(rstd)](Tape<T>& tape, std::size_t self) {
                T* gx = grad_of(tape, xid);
                if (!gx) return;
                const T* dy = out_grad(tape, self);
                const T* y = tape.value(self).data().data();
                for (std::int64_t r = 0; r < rows; ++r) {
                  T mdy{0}, mdyy{0};
                  for (std::int64_t j = 0; j < d; ++j) {
                    mdy += dy[r * d + j];
                    mdyy += dy[r * d + j] * y[r * d + j];
                  }
                  mdy /= static_cast<T>(d);
                  mdyy /= static_cast<T>(d);
                  for (std::int64_t j = 0; j < d; ++j) {
                    gx[r * d + j] += rstd[r] * (dy[r * d + j] - mdy - y[r * d + j] * mdyy);
                  }
                }
              });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(Unary::kRelu, x);
}
template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(Unary::kSigmoid, x);
}
template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary(Unary::kTanh, x);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(Binary::kAdd, a, b);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(Binary::kSub, a, b);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(Binary::kMul, a, b);
}
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(Binary::kDiv, a, b);
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v += s;
  const std::size_t xid = x.id();
  return emit(Primitive::kAddScalar, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const auto dy = tape.node(self).grad.data();
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= s;
  const std::size_t xid = x.id();
  return emit(Primitive::kMulScalar, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const auto dy = tape.node(self).grad.data();
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i] * s;
  });
}

template <typename T>
Var<T> l1_distance(const Var<T>& a, const Var<T>& b) {
  require_same("l1_distance", a.shape(), b.shape());
  const auto av = a.value().data();
  const auto bv = b.value().data();
  T acc{0};
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
  const T inv_n = T{1} / static_cast<T>(av.size());
  const std::size_t aid = a.id(), bid = b.id();
  return emit(Primitive::kL1Distance, {a, b}, Tensor<T>::scalar(acc * inv_n), [=](Tape<T>& tape, std::size_t self) {
    const T g = tape.node(self).grad[0] * inv_n;
    T* ga = grad_of(tape, aid);
    T* gb = grad_of(tape, bid);
    const auto av = tape.value(aid).data();
    const auto bv = tape.value(bid).data();
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = av[i] - bv[i];
      const T sg = d > T{0} ? g : (d < T{0} ? -g : T{0});
      if (ga) ga[i] += sg;
      if (gb) gb[i] -= sg;
    }
  });
}

template <typename T>
Var<T> squared_distance(const Var<T>& a, const Var<T>& b) {
  require_same("squared_distance", a.shape(), b.shape());
  const auto av = a.value().data();
  const auto bv = b.value().data();
  T acc{0};
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T inv_n = T{1} / static_cast<T>(av.size());
  const std::size_t aid = a.id(), bid = b.id();
  return emit(Primitive::kSquaredDistance, {a, b}, Tensor<T>::scalar(acc * inv_n),
              [=](Tape<T>& tape, std::size_t self) {
                const T g = T{2} * tape.node(self).grad[0] * inv_n;
                T* ga = grad_of(tape, aid);
                T* gb = grad_of(tape, bid);
                const auto av = tape.value(aid).data();
                const auto bv = tape.value(bid).data();
                for (std::size_t i = 0; i < av.size(); ++i) {
                  const T d = (av[i] - bv[i]) * g;
                  if (ga) ga[i] += d;
                  if (gb) gb[i] -= d;
                }
              });
}

template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b, int axis, T eps) {
  require_same("cosine_similarity", a.shape(), b.shape());
  const int ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_axis(a.shape(), ax);
  Tensor<T> out(reduced_shape(a.shape(), ax, false));
  const T* ad = a.value().data().data();
  const T* bd = b.value().data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      T dot{0}, na{0}, nb{0};
      for (std::int64_t k = 0; k < s.len; ++k) {
        const T x = ad[base + k * s.inner], y = bd[base + k * s.inner];
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      out[o * s.inner + i] = dot / std::max(std::sqrt(na) * std::sqrt(nb), eps);
    }
  }
  const std::size_t aid = a.id(), bid = b.id();
  return emit(Primitive::kCosineSimilarity, {a, b}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const T* dy = out_grad(tape, self);
    const T* cs = tape.value(self).data().data();
    T* ga = grad_of(tape, aid);
    T* gb = grad_of(tape, bid);
    const T* ad = tape.value(aid).data().data();
    const T* bd = tape.value(bid).data().data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.len * s.inner + i;
        const std::int64_t oi = o * s.inner + i;
        T na{0}, nb{0};
        for (std::int64_t k = 0; k < s.len; ++k) {
          na += ad[base + k * s.inner] * ad[base + k * s.inner];
          nb += bd[base + k * s.inner] * bd[base + k * s.inner];
        }
        const T prod = std::sqrt(na) * std::sqrt(nb);
        const T g = dy[oi];
        for (std::int64_t k = 0; k < s.len; ++k) {
          const std::int64_t j = base + k * s.inner;
          if (prod > eps) {
            if (ga) ga[j] += g * (bd[j] / prod - cs[oi] * ad[j] / na);
            if (gb) gb[j] += g * (ad[j] / prod - cs[oi] * bd[j] / nb);
          } else {
            if (ga) ga[j] += g * bd[j] / eps;
            if (gb) gb[j] += g * ad[j] / eps;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x, int axis, T eps) {
  const int ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor<T> out(x.shape());
  std::vector<T> norms(static_cast<std::size_t>(s.outer * s.inner));
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      T ss{0};
      for (std::int64_t k = 0; k < s.len; ++k) ss += xd[base + k * s.inner] * xd[base + k * s.inner];
      const T n = std::sqrt(ss);
      norms[o * s.inner + i] = n;
      const T den = std::max(n, eps);
      for (std::int64_t k = 0; k < s.len; ++k) od[base + k * s.inner] = xd[base + k * s.inner] / den;
    }
  }
  const std::size_t xid = x.id();
  return emit(Primitive::kL2Normalize, {x}, std::move(out),
              [=, norms = std::move(norms)](Tape<T>& tape, std::size_t self) {
                T* gx = grad_of(tape, xid);
                if (!gx) return;
                const T* dy = out_grad(tape, self);
                const T* y = tape.value(self).data().data();
                for (std::int64_t o = 0; o < s.outer; ++o) {
                  for (std::int64_t i = 0; i < s.inner; ++i) {
                    const std::int64_t base = o * s.len * s.inner + i;
                    const T n = norms[o * s.inner + i];
                    if (n > eps) {
                      T dot{0};
                      for (std::int64_t k = 0; k < s.len; ++k) dot += dy[base + k * s.inner] * y[base + k * s.inner];
                      for (std::int64_t k = 0; k < s.len; ++k) {
                        const std::int64_t j = base + k * s.inner;
                        gx[j] += (dy[j] - y[j] * dot) / n;
                      }
                    } else {
                      for (std::int64_t k = 0; k < s.len; ++k) gx[base + k * s.inner] += dy[base + k * s.inner] / eps;
                    }
                  }
                }
              });
}

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  const Var<T> in[] = {x};
  return x.tape().record(Primitive::kStopGradient, in, x.value(), nullptr, /*propagate=*/false);
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    shape_fail("broadcast", "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const auto sx = broadcast_strides(x.shape(), shape);
  const std::vector<std::int64_t> zero(shape.size(), 0);
  Tensor<T> out(shape);
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for_each_broadcast(shape, sx, zero, [&](auto o, auto i, auto) { od[o] = xd[i]; });
  const std::size_t xid = x.id();
  return emit(Primitive::kBroadcast, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    for_each_broadcast(shape, sx, zero, [&](auto o, auto i, auto) { gx[i] += dy[o]; });
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, const Shape& shape) {
  Tensor<T> out = x.value().reshaped(shape);
  const std::size_t xid = x.id();
  return emit(Primitive::kReshape, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const auto dy = tape.node(self).grad.data();
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
  });
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) shape_fail("permute", "permutation length != rank " + std::to_string(r));
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p]) shape_fail("permute", "invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  std::vector<std::int64_t> in_strides(r), src(r);
  std::int64_t acc = 1;
  for (int d = r - 1; d >= 0; --d) {
    in_strides[d] = acc;
    acc *= x.dim(d);
  }
  for (int d = 0; d < r; ++d) {
    out_shape[d] = x.dim(perm[d]);
    src[d] = in_strides[perm[d]];
  }
  const std::vector<std::int64_t> zero(r, 0);
  Tensor<T> out(out_shape);
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  for_each_broadcast(out_shape, src, zero, [&](auto o, auto i, auto) { od[o] = xd[i]; });
  const std::size_t xid = x.id();
  return emit(Primitive::kPermute, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    for_each_broadcast(out_shape, src, zero, [&](auto o, auto i, auto) { gx[i] += dy[o]; });
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(axis, x.rank());
  if (start < 0 || length < 1 || start + length > x.dim(ax)) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") outside axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  Tensor<T> out(out_shape);
  const T* xd = x.value().data().data();
  T* od = out.data().data();
  const std::int64_t block = length * s.inner;
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(xd + (o * s.len + start) * s.inner, block, od + o * block);
  }
  const std::size_t xid = x.id();
  return emit(Primitive::kSlice, {x}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    T* gx = grad_of(tape, xid);
    if (!gx) return;
    const T* dy = out_grad(tape, self);
    for (std::int64_t o = 0; o < s.outer; ++o) {
      T* dst = gx + (o * s.len + start) * s.inner;
      const T* src = dy + o * block;
      for (std::int64_t k = 0; k < block; ++k) dst[k] += src[k];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x, int axis, bool keepdim) {
  return reduce(Reduce::kSum, x, axis, keepdim);
}
template <typename T>
Var<T> mean(const Var<T>& x, int axis, bool keepdim) {
  return reduce(Reduce::kMean, x, axis, keepdim);
}
template <typename T>
Var<T> min(const Var<T>& x, int axis, bool keepdim) {
  return reduce(Reduce::kMin, x, axis, keepdim);
}
template <typename T>
Var<T> max(const Var<T>& x, int axis, bool keepdim) {
  return reduce(Reduce::kMax, x, axis, keepdim);
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  return reduce(Reduce::kSum, reshape(x, Shape{x.value().numel()}), 0, false);
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return reduce(Reduce::kMean, reshape(x, Shape{x.value().numel()}), 0, false);
}

template <typename T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& h, const GruWeights<T>& w) {
  require_rank("gru_cell", "input", x.shape(), 2);
  require_rank("gru_cell", "hidden", h.shape(), 2);
  if (x.dim(0) != h.dim(0)) shape_fail("gru_cell", "input and hidden differ on axis 0");
  auto gate = [&](const Var<T>& wi, const Var<T>& bi, const Var<T>& wh, const Var<T>& bh) {
    return add(add(matmul(x, wi), bi), add(matmul(h, wh), bh));
  };
  const Var<T> r = sigmoid(gate(w.w_ir, w.b_ir, w.w_hr, w.b_hr));
  const Var<T> z = sigmoid(gate(w.w_iz, w.b_iz, w.w_hz, w.b_hz));
  const Var<T> n = tanh(add(add(matmul(x, w.w_in), w.b_in), mul(r, add(matmul(h, w.w_hn), w.b_hn))));
  return add(n, mul(z, sub(h, n)));
}

template <typename T>
Var<T> apply_primitive(Primitive kind, std::span<const Var<T>> in, const PrimitiveAttrs& at) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(primitive_name(kind)) + " expects " + std::to_string(n) +
                                  " inputs, got " + std::to_string(in.size()));
    }
  };
  const T eps = static_cast<T>(at.eps);
  switch (kind) {
    case Primitive::kConv2d:
      if (in.size() == 3) return conv2d(in[0], in[1], in[2], at.stride, at.padding);
      need(2);
      return conv2d(in[0], in[1], at.stride, at.padding);
    case Primitive::kUpsampleNearest: need(1); return upsample_nearest(in[0], at.factor);
    case Primitive::kAvgPool: need(1); return avg_pool(in[0], at.factor);
    case Primitive::kMatmul: need(2); return matmul(in[0], in[1]);
    case Primitive::kSoftmax: need(1); return softmax(in[0], at.axis);
    case Primitive::kLayerNorm: need(1); return layer_norm(in[0], eps);
    case Primitive::kRelu: need(1); return relu(in[0]);
    case Primitive::kSigmoid: need(1); return sigmoid(in[0]);
    case Primitive::kTanh: need(1); return tanh(in[0]);
    case Primitive::kGruCell:
      need(14);
      return gru_cell(in[0], in[1],
                      GruWeights<T>{in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10], in[11], in[12], in[13]});
    case Primitive::kAdd: need(2); return add(in[0], in[1]);
    case Primitive::kSub: need(2); return sub(in[0], in[1]);
    case Primitive::kMul: need(2); return mul(in[0], in[1]);
    case Primitive::kDiv: need(2); return div(in[0], in[1]);
    case Primitive::kAddScalar: need(1); return add_scalar(in[0], static_cast<T>(at.scalar));
    case Primitive::kMulScalar: need(1); return mul_scalar(in[0], static_cast<T>(at.scalar));
    case Primitive::kL1Distance: need(2); return l1_distance(in[0], in[1]);
    case Primitive::kSquaredDistance: need(2); return squared_distance(in[0], in[1]);
    case Primitive::kCosineSimilarity: need(2); return cosine_similarity(in[0], in[1], at.axis, eps);
    case Primitive::kL2Normalize: need(1); return l2_normalize(in[0], at.axis, eps);
    case Primitive::kStopGradient: need(1); return stop_gradient(in[0]);
    case Primitive::kBroadcast: need(1); return broadcast_to(in[0], at.shape);
    case Primitive::kReshape: need(1); return reshape(in[0], at.shape);
    case Primitive::kPermute: need(1); return permute(in[0], at.perm);
    case Primitive::kSlice: need(1); return slice(in[0], at.axis, at.start, at.length);
    case Primitive::kReduceSum: need(1); return sum(in[0], at.axis, at.keepdim);
    case Primitive::kReduceMean: need(1); return mean(in[0], at.axis, at.keepdim);
    case Primitive::kReduceMin: need(1); return min(in[0], at.axis, at.keepdim);
    case Primitive::kReduceMax: need(1); return max(in[0], at.axis, at.keepdim);
    case Primitive::kLeaf:
    case Primitive::kCount:
      break;
  }
  throw std::invalid_argument("apply_primitive: unknown or non-applicable primitive id " +
                              std::to_string(static_cast<int>(kind)));
}

#define TDG_INSTANTIATE_OPS(T)                                                               \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, int, int);                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);            \
  template Var<T> upsample_nearest(const Var<T>&, int);                                     \
  template Var<T> avg_pool(const Var<T>&, int);                                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> softmax(const Var<T>&, int);                                              \
  template Var<T> layer_norm(const Var<T>&, T);                                             \
  template Var<T> relu(const Var<T>&);                                                      \
  template Var<T> sigmoid(const Var<T>&);                                                   \
  template Var<T> tanh(const Var<T>&);                                                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> div(const Var<T>&, const Var<T>&);                                        \
  template Var<T> add_scalar(const Var<T>&, T);                                             \
  template Var<T> mul_scalar(const Var<T>&, T);                                             \
  template Var<T> l1_distance(const Var<T>&, const Var<T>&);                                \
  template Var<T> squared_distance(const Var<T>&, const Var<T>&);                           \
  template Var<T> cosine_similarity(const Var<T>&, const Var<T>&, int, T);                  \
  template Var<T> l2_normalize(const Var<T>&, int, T);                                      \
  template Var<T> stop_gradient(const Var<T>&);                                             \
  template Var<T> broadcast_to(const Var<T>&, const Shape&);                                \
  template Var<T> reshape(const Var<T>&, const Shape&);                                     \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                          \
  template Var<T> slice(const Var<T>&, int, std::int64_t, std::int64_t);                    \
  template Var<T> sum(const Var<T>&, int, bool);                                            \
  template Var<T> mean(const Var<T>&, int, bool);                                           \
  template Var<T> min(const Var<T>&, int, bool);                                            \
  template Var<T> max(const Var<T>&, int, bool);                                            \
  template Var<T> sum_all(const Var<T>&);                                                   \
  template Var<T> mean_all(const Var<T>&);                                                  \
  template Var<T> gru_cell(const Var<T>&, const Var<T>&, const GruWeights<T>&);             \
  template Var<T> apply_primitive(Primitive, std::span<const Var<T>>, const PrimitiveAttrs&);

TDG_INSTANTIATE_OPS(float)
TDG_INSTANTIATE_OPS(double)

}  // namespace tdg::ad
