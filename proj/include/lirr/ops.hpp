#ifndef LIRR_OPS_HPP
#define LIRR_OPS_HPP

// Differentiable operations over Tensor. Every op takes the Tape it records
// onto as first argument. Broadcasting is limited to scalar-with-tensor
// (numel == 1) and identical shapes.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lirr/tensor.hpp"

namespace lirr {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRow = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapRow = Eigen::Map<const RowMat<T>>;

enum class Broadcast { Same, ScalarB, ScalarA };

template <class T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::ScalarB;
  if (a.numel() == 1) return Broadcast::ScalarA;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

// Elementwise binary op with scalar broadcasting. `fa`/`fb` return the local
// partial derivatives d out / d a and d out / d b at one element.
template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_op(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, const char* name,
                    Fwd fwd, DA da, DB db) {
  const auto kind = broadcast_kind(a, b, name);
  const Shape out_shape = kind == Broadcast::ScalarA ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto at_a = [kind](const std::vector<T>& v, std::size_t i) {
    return kind == Broadcast::ScalarA ? v[0] : v[i];
  };
  auto at_b = [kind](const std::vector<T>& v, std::size_t i) {
    return kind == Broadcast::ScalarB ? v[0] : v[i];
  };
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(at_a(av, i), at_b(bv, i));
  auto an = a.node();
  auto bn = b.node();
  return tape.record(out_shape, std::move(out), {&a, &b},
                     [an, bn, n, kind, da, db, at_a, at_b](std::span<const T> g) {
                       if (an->requires_grad) {
                         an->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const T d = g[i] * da(at_a(an->data, i), at_b(bn->data, i));
                           if (kind == Broadcast::ScalarA) an->grad[0] += d;
                           else an->grad[i] += d;
                         }
                       }
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const T d = g[i] * db(at_a(an->data, i), at_b(bn->data, i));
                           if (kind == Broadcast::ScalarB) bn->grad[0] += d;
                           else bn->grad[i] += d;
                         }
                       }
                     });
}

// Elementwise unary op; `dfn(x, y)` gives d y / d x from input and output.
template <class T, class Fwd, class Dfn>
Tensor<T> unary_op(Tape<T>& tape, const Tensor<T>& a, Fwd fwd, Dfn dfn) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  std::vector<T> y = out;
  return tape.record(a.shape(), std::move(out), {&a},
                     [an, n, dfn, y = std::move(y)](std::span<const T> g) {
                       an->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * dfn(an->data[i], y[i]);
                     });
}

template <class T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// log(1 + exp(z)) without overflow.
template <class T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      tape, a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      tape, a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      tape, a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, T b) {
  return detail::unary_op(
      tape, a, [b](T x) { return x + b; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T s) {
  return detail::unary_op(
      tape, a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> neg(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// max(x, slope * x) for slope in [0, 1); slope 0 is relu.
template <class T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& a, T slope) {
  if (!(slope >= T(0) && slope < T(1))) throw std::invalid_argument("leaky_relu: slope outside [0, 1)");
  return detail::unary_op(
      tape, a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return detail::stable_sigmoid(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  auto an = a.node();
  return tape.record(Shape{}, {s}, {&a}, [an](std::span<const T> g) {
    an->ensure_grad();
    for (auto& v : an->grad) v += g[0];
  });
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  T s = T(0);
  for (T v : a.values()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  auto an = a.node();
  return tape.record(Shape{}, {s * inv}, {&a}, [an, inv](std::span<const T> g) {
    an->ensure_grad();
    for (auto& v : an->grad) v += g[0] * inv;
  });
}

// Forward is the identity; backward multiplies the upstream gradient by
// -lambda.
template <class T>
Tensor<T> grad_reverse(Tape<T>& tape, const Tensor<T>& x, T lambda) {
  if (lambda < T(0)) throw std::invalid_argument("grad_reverse: lambda must be >= 0");
  auto xn = x.node();
  return tape.record(x.shape(), x.values(), {&x}, [xn, lambda](std::span<const T> g) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += -lambda * g[i];
  });
}

// Identity whose backward scales the gradient by *factor, read when the
// backward pass runs (the factor may be set after the forward pass).
template <class T>
Tensor<T> gradient_gate(Tape<T>& tape, const Tensor<T>& x, std::shared_ptr<const T> factor) {
  if (!factor) throw std::invalid_argument("gradient_gate: null factor");
  auto xn = x.node();
  return tape.record(x.shape(), x.values(), {&x}, [xn, factor](std::span<const T> g) {
    const T f = *factor;
    xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += f * g[i];
  });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  auto xn = x.node();
  return tape.record(std::move(shape), x.values(), {&x}, [xn](std::span<const T> g) {
    accumulate_grad(*xn, g);
  });
}

// Rows [begin, end) along dimension 0.
template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<T> out(x.values().begin() + begin * row, x.values().begin() + end * row);
  auto xn = x.node();
  const std::size_t offset = begin * row;
  return tape.record(std::move(shape), std::move(out), {&x}, [xn, offset](std::span<const T> g) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[offset + i] += g[i];
  });
}

// Concatenation along dimension 0; trailing dimensions must agree.
template <class T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat_rows: scalar input");
  std::size_t rows = 0;
  std::vector<T> out;
  std::vector<const Tensor<T>*> inputs;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    inputs.push_back(&p);
  }
  shape[0] = rows;
  std::vector<typename Tape<T>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return tape.record(std::move(shape), std::move(out), inputs, [nodes](std::span<const T> g) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->data.size();
      accumulate_grad(*n, g.subspan(offset, len));
      offset += len;
    }
  });
}

// ---------------------------------------------------------------- linear algebra

// [M x K] * [K x N]. Plain loops: each output is a fixed-order sum over K,
// independent of M and N.
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  auto an = a.node();
  auto bn = b.node();
  return tape.record(Shape{m, n}, std::move(out), {&a, &b},
                     [an, bn, m, k, n](std::span<const T> g) {
                       if (an->requires_grad) {  // dA = dC * B^T
                         an->ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             T s = T(0);
                             for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bn->data[p * n + j];
                             an->grad[i * k + p] += s;
                           }
                       }
                       if (bn->requires_grad) {  // dB = A^T * dC
                         bn->ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const T aip = an->data[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) bn->grad[p * n + j] += aip * g[i * n + j];
                           }
                       }
                     });
}

// Adds bias[C] along dimension 1 of an [N x C] or [N x C x H x W] tensor.
template <class T>
Tensor<T> add_channel_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) +
                         " does not match channels of " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<T> out = x.values();
  const auto& bv = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t s = 0; s < inner; ++s) out[(i * c + j) * inner + s] += bv[j];
  auto xn = x.node();
  auto bn = bias.node();
  return tape.record(x.shape(), std::move(out), {&x, &bias},
                     [xn, bn, n, c, inner](std::span<const T> g) {
                       accumulate_grad(*xn, g);
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < c; ++j) {
                             T s = T(0);
                             for (std::size_t q = 0; q < inner; ++q) s += g[(i * c + j) * inner + q];
                             bn->grad[j] += s;
                           }
                       }
                     });
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t f, kh, kw;       // kernel
  std::size_t stride, padding;
  std::size_t oh, ow;          // output

  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_plane() const { return oh * ow; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& k, std::size_t stride,
                                  std::size_t padding) {
  if (in.size() != 4 || k.size() != 4 || in[1] != k[1]) {
    throw DimensionError("conv2d: input " + shape_str(in) + " incompatible with kernel " +
                         shape_str(k));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (in[2] + 2 * padding < k[2] || in[3] + 2 * padding < k[3]) {
    throw DimensionError("conv2d: kernel " + shape_str(k) + " larger than padded input " +
                         shape_str(in));
  }
  ConvGeometry g{in[0], in[1], in[2], in[3], k[0], k[2], k[3], stride, padding, 0, 0};
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

namespace detail {

// One sample: col[(c, ky, kx), (oy, ox)].
template <class T>
void im2col(const ConvGeometry& g, const T* img, T* col) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ch * g.kh + ky) * g.kw + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? img[(ch * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ch * g.kh + ky) * g.kw + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ch * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

// Reference cross-correlation by direct loops, forward only.
template <class T>
std::vector<T> conv2d_direct(const ConvGeometry& g, std::span<const T> in, std::span<const T> k) {
  std::vector<T> out(g.n * g.f * g.out_plane(), T(0));
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t f = 0; f < g.f; ++f)
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          T s = T(0);
          for (std::size_t ch = 0; ch < g.c; ++ch)
            for (std::size_t ky = 0; ky < g.kh; ++ky)
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.w))
                  continue;
                s += in[((b * g.c + ch) * g.h + iy) * g.w + ix] *
                     k[((f * g.c + ch) * g.kh + ky) * g.kw + kx];
              }
          out[((b * g.f + f) * g.oh + oy) * g.ow + ox] = s;
        }
  return out;
}

}  // namespace detail

// Cross-correlation (no kernel flip) via per-sample im2col + GEMM.
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel,
                 std::size_t stride, std::size_t padding) {
  using namespace detail;
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  const std::size_t patch = g.patch(), plane = g.out_plane();
  const std::size_t in_sample = g.c * g.h * g.w, out_sample = g.f * plane;
  std::vector<T> cols(g.n * patch * plane);
  std::vector<T> out(g.n * out_sample);
  ConstMapRow<T> kmat(kernel.values().data(), g.f, patch);
  for (std::size_t b = 0; b < g.n; ++b) {
    T* col = cols.data() + b * patch * plane;
    im2col(g, input.values().data() + b * in_sample, col);
    MapRow<T>(out.data() + b * out_sample, g.f, plane).noalias() =
        kmat * ConstMapRow<T>(col, patch, plane);
  }
  auto in_n = input.node();
  auto k_n = kernel.node();
  return tape.record(
      Shape{g.n, g.f, g.oh, g.ow}, std::move(out), {&input, &kernel},
      [in_n, k_n, g, cols = std::move(cols)](std::span<const T> grad) {
        const std::size_t patch = g.patch(), plane = g.out_plane();
        const std::size_t in_sample = g.c * g.h * g.w, out_sample = g.f * plane;
        if (k_n->requires_grad) {
          k_n->ensure_grad();
          MapRow<T> dk(k_n->grad.data(), g.f, patch);
          for (std::size_t b = 0; b < g.n; ++b) {
            ConstMapRow<T> dy(grad.data() + b * out_sample, g.f, plane);
            dk.noalias() += dy * ConstMapRow<T>(cols.data() + b * patch * plane, patch, plane).transpose();
          }
        }
        if (in_n->requires_grad) {
          in_n->ensure_grad();
          ConstMapRow<T> kmat(k_n->data.data(), g.f, patch);
          RowMat<T> dcol(patch, plane);
          for (std::size_t b = 0; b < g.n; ++b) {
            ConstMapRow<T> dy(grad.data() + b * out_sample, g.f, plane);
            dcol.noalias() = kmat.transpose() * dy;
            col2im_add(g, dcol.data(), in_n->grad.data() + b * in_sample);
          }
        }
      });
}

// [N x C x H x W] -> [N x C], mean over the spatial plane.
template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(2) == 0 || x.dim(3) == 0) {
    throw DimensionError("global_avg_pool: expected non-empty NCHW, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const T inv = T(1) / static_cast<T>(plane);
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = T(0);
    for (std::size_t p = 0; p < plane; ++p) s += x.values()[i * plane + p];
    out[i] = s * inv;
  }
  auto xn = x.node();
  return tape.record(Shape{n, c}, std::move(out), {&x}, [xn, n, c, plane, inv](std::span<const T> g) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t p = 0; p < plane; ++p) xn->grad[i * plane + p] += g[i] * inv;
  });
}

// ---------------------------------------------------------------- losses

// Mean over rows of -log softmax(logits)[label].
template <class T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) +
                              " outside [0, " + std::to_string(k) + ")");
  std::vector<T> probs(n * k);
  T loss = T(0);
  const auto& z = logits.values();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T denom = T(0);
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx) / denom;
    loss += std::log(denom) - (row[labels[i]] - mx);
  }
  const T inv = T(1) / static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  auto zn = logits.node();
  return tape.record(Shape{}, {loss * inv}, {&logits},
                     [zn, n, k, inv, probs = std::move(probs), lab = std::move(lab)](std::span<const T> g) {
                       zn->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j) {
                           const T onehot = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                           zn->grad[i * k + j] += g[0] * inv * (probs[i * k + j] - onehot);
                         }
                     });
}

// Mean of -[t log s(z) + (1 - t) log(1 - s(z))], targets exactly 0 or 1.
template <class T>
Tensor<T> binary_cross_entropy_logit(Tape<T>& tape, const Tensor<T>& logit, std::span<const T> target) {
  if (logit.numel() != target.size() || target.empty()) {
    throw DimensionError("binary_cross_entropy_logit: " + std::to_string(logit.numel()) +
                         " logits vs " + std::to_string(target.size()) + " targets");
  }
  for (T t : target)
    if (t != T(0) && t != T(1))
      throw std::invalid_argument("binary_cross_entropy_logit: non-binary target");
  const std::size_t n = target.size();
  T loss = T(0);
  const auto& z = logit.values();
  for (std::size_t i = 0; i < n; ++i) loss += detail::softplus(z[i]) - target[i] * z[i];
  const T inv = T(1) / static_cast<T>(n);
  std::vector<T> tv(target.begin(), target.end());
  auto zn = logit.node();
  return tape.record(Shape{}, {loss * inv}, {&logit}, [zn, n, inv, tv = std::move(tv)](std::span<const T> g) {
    zn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      zn->grad[i] += g[0] * inv * (detail::stable_sigmoid(zn->data[i]) - tv[i]);
  });
}

namespace detail {

template <class T>
T smooth_l1_value(T e) {
  const T a = std::abs(e);
  return a < T(1) ? T(0.5) * e * e : a - T(0.5);
}

template <class T>
T smooth_l1_slope(T e) {
  if (e >= T(1)) return T(1);
  if (e <= T(-1)) return T(-1);
  return e;
}

}  // namespace detail

// Mean over elements of 0.5 e^2 (|e| < 1) or |e| - 0.5, e = pred - target.
template <class T>
Tensor<T> smooth_l1(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape() || pred.numel() == 0) {
    throw DimensionError("smooth_l1: shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) loss += detail::smooth_l1_value(pred[i] - target[i]);
  const T inv = T(1) / static_cast<T>(n);
  auto pn = pred.node();
  auto tn = target.node();
  return tape.record(Shape{}, {loss * inv}, {&pred, &target}, [pn, tn, n, inv](std::span<const T> g) {
    for (std::size_t i = 0; i < n; ++i) {
      const T d = g[0] * inv * detail::smooth_l1_slope(pn->data[i] - tn->data[i]);
      if (pn->requires_grad) {
        pn->ensure_grad();
        pn->grad[i] += d;
      }
      if (tn->requires_grad) {
        tn->ensure_grad();
        tn->grad[i] -= d;
      }
    }
  });
}

}  // namespace lirr

#endif  // LIRR_OPS_HPP
