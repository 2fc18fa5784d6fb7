#pragma once

// Differentiable tensor operations.
//
// Broadcasting aligns trailing dimensions; a dimension of size 1 (or a
// missing leading dimension) expands to match the other operand.

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mcsad/tensor.hpp"

namespace mcsad {

enum class BinaryOp { Add, Sub, Mul, Div, Pow };
enum class UnaryOp { Exp, Log, Relu, Sqrt, Neg };
enum class ReduceOp { Sum, Mean, Max };

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Strides of `s` expressed in the index space of `out`; 0 on expanded axes.
inline std::vector<Index> aligned_strides(const Shape& s, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t src = s.size() - 1 - k;
    const std::size_t dst = out.size() - 1 - k;
    strides[dst] = s[src] == 1 ? 0 : stride;
    stride *= s[src];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa,
                        const std::vector<Index>& sb, F&& f) {
  const Index n = shape_numel(out);
  if (n == 0) return;
  if (out.empty()) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  const std::size_t r = out.size();
  const Index inner = out[r - 1];
  const Index ia_step = sa[r - 1];
  const Index ib_step = sb[r - 1];
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0, i = 0;
  while (i < n) {
    for (Index j = 0; j < inner; ++j) f(i++, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::vector<Index> contiguous_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> elementwise(BinaryOp op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  auto sa = detail::aligned_strides(a.shape(), out_shape);
  auto sb = detail::aligned_strides(b.shape(), out_shape);
  std::vector<Scalar> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const Scalar* pa = a.data().data();
  const Scalar* pb = b.data().data();

  auto apply = [&](auto&& fn) {
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(pa[i], pb[i]);
    } else {
      detail::for_each_broadcast(out_shape, sa, sb,
                                 [&](Index i, Index ia, Index ib) { out[i] = fn(pa[ia], pb[ib]); });
    }
  };
  switch (op) {
    case BinaryOp::Add: apply([](Scalar x, Scalar y) { return x + y; }); break;
    case BinaryOp::Sub: apply([](Scalar x, Scalar y) { return x - y; }); break;
    case BinaryOp::Mul: apply([](Scalar x, Scalar y) { return x * y; }); break;
    case BinaryOp::Div: apply([](Scalar x, Scalar y) { return x / y; }); break;
    case BinaryOp::Pow: {
      Index bad = -1;
      detail::for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
        if (pa[ia] < Scalar(0) && std::trunc(pb[ib]) != pb[ib] && bad < 0) bad = ia;
        out[i] = std::pow(pa[ia], pb[ib]);
      });
      if (bad >= 0) throw DomainError("pow of negative base with fractional exponent", bad);
      break;
    }
  }

  auto backward_fn = [op, out_shape, sa, sb](detail::Node<Scalar>& self) {
    const Scalar* g = self.grad.data();
    const Scalar* va = self.inputs[0]->value.data();
    const Scalar* vb = self.inputs[1]->value.data();
    const Scalar* vo = self.value.data();
    Scalar* ga = self.grad_sink(0);
    Scalar* gb = self.grad_sink(1);
    detail::for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
      const Scalar gi = g[i];
      switch (op) {
        case BinaryOp::Add:
          if (ga) ga[ia] += gi;
          if (gb) gb[ib] += gi;
          break;
        case BinaryOp::Sub:
          if (ga) ga[ia] += gi;
          if (gb) gb[ib] -= gi;
          break;
        case BinaryOp::Mul:
          if (ga) ga[ia] += gi * vb[ib];
          if (gb) gb[ib] += gi * va[ia];
          break;
        case BinaryOp::Div:
          if (ga) ga[ia] += gi / vb[ib];
          if (gb) gb[ib] -= gi * va[ia] / (vb[ib] * vb[ib]);
          break;
        case BinaryOp::Pow:
          if (ga) ga[ia] += gi * vb[ib] * std::pow(va[ia], vb[ib] - Scalar(1));
          if (gb && va[ia] > Scalar(0)) gb[ib] += gi * vo[i] * std::log(va[ia]);
          break;
      }
    });
  };
  return Tensor<Scalar>::from_op(std::move(out_shape), std::move(out), {a.node(), b.node()},
                                 std::move(backward_fn));
}

template <typename Scalar>
Tensor<Scalar> elementwise(UnaryOp op, const Tensor<Scalar>& a) {
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    Scalar& v = out[i];
    switch (op) {
      case UnaryOp::Exp: v = std::exp(v); break;
      case UnaryOp::Log:
        if (v < Scalar(0)) throw DomainError("log of negative value", static_cast<Index>(i));
        v = std::log(v);
        break;
      case UnaryOp::Relu: v = v < Scalar(0) ? Scalar(0) : v; break;  // NaN passes through
      case UnaryOp::Sqrt:
        if (v < Scalar(0)) throw DomainError("sqrt of negative value", static_cast<Index>(i));
        v = std::sqrt(v);
        break;
      case UnaryOp::Neg: v = -v; break;
    }
  }
  auto backward_fn = [op](detail::Node<Scalar>& self) {
    Scalar* ga = self.grad_sink(0);
    if (!ga) return;
    const Scalar* g = self.grad.data();
    const Scalar* va = self.inputs[0]->value.data();
    const Scalar* vo = self.value.data();
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      switch (op) {
        case UnaryOp::Exp: ga[i] += g[i] * vo[i]; break;
        case UnaryOp::Log: ga[i] += g[i] / va[i]; break;
        case UnaryOp::Relu: ga[i] += va[i] > Scalar(0) ? g[i] : Scalar(0); break;
        case UnaryOp::Sqrt: ga[i] += g[i] * Scalar(0.5) / vo[i]; break;
        case UnaryOp::Neg: ga[i] -= g[i]; break;
      }
    }
  };
  return Tensor<Scalar>::from_op(a.shape(), std::move(out), {a.node()}, std::move(backward_fn));
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(BinaryOp::Add, a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(BinaryOp::Sub, a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(BinaryOp::Mul, a, b);
}
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(BinaryOp::Div, a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) {
  return elementwise(UnaryOp::Neg, a);
}
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, Scalar s) {
  return a + Tensor<Scalar>::scalar(s);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, Scalar s) {
  return a - Tensor<Scalar>::scalar(s);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) {
  return a * Tensor<Scalar>::scalar(s);
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
  return Tensor<Scalar>::scalar(s) * a;
}
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, Scalar s) {
  return a / Tensor<Scalar>::scalar(s);
}

template <typename Scalar>
Tensor<Scalar> pow(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(BinaryOp::Pow, a, b);
}
template <typename Scalar>
Tensor<Scalar> pow(const Tensor<Scalar>& a, Scalar e) {
  return elementwise(BinaryOp::Pow, a, Tensor<Scalar>::scalar(e));
}
template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  return elementwise(UnaryOp::Exp, a);
}
template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  return elementwise(UnaryOp::Log, a);
}
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return elementwise(UnaryOp::Relu, a);
}
template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& a) {
  return elementwise(UnaryOp::Sqrt, a);
}
template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  return a * a;
}

/// max(x, floor); the gradient passes only where x > floor.
template <typename Scalar>
Tensor<Scalar> clamp_min(const Tensor<Scalar>& x, Scalar floor) {
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  for (Scalar& v : out) v = v < floor ? floor : v;  // NaN passes through
  auto backward_fn = [floor](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    const Scalar* vx = self.inputs[0]->value.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (vx[i] > floor) gx[i] += self.grad[i];
    }
  };
  return Tensor<Scalar>::from_op(x.shape(), std::move(out), {x.node()}, std::move(backward_fn));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  auto backward_fn = [](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  };
  return Tensor<Scalar>::from_op(std::move(shape), x.values(), {x.node()}, std::move(backward_fn));
}

/// Concatenation along axis 0.
template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t split = static_cast<std::size_t>(a.numel());
  auto backward_fn = [split](detail::Node<Scalar>& self) {
    if (Scalar* ga = self.grad_sink(0)) {
      for (std::size_t i = 0; i < split; ++i) ga[i] += self.grad[i];
    }
    if (Scalar* gb = self.grad_sink(1)) {
      for (std::size_t i = split; i < self.grad.size(); ++i) gb[i - split] += self.grad[i];
    }
  };
  return Tensor<Scalar>::from_op(std::move(shape), std::move(out), {a.node(), b.node()},
                                 std::move(backward_fn));
}

/// Rows of a rank-2 tensor selected by index (repeats allowed).
template <typename Scalar>
Tensor<Scalar> select_rows(const Tensor<Scalar>& x, std::vector<Index> rows) {
  if (x.rank() < 1) throw ShapeError("select_rows needs rank >= 1");
  const Index width = x.dim(0) ? x.numel() / x.dim(0) : 0;
  Shape shape = x.shape();
  shape[0] = static_cast<Index>(rows.size());
  std::vector<Scalar> out;
  out.reserve(rows.size() * static_cast<std::size_t>(width));
  for (Index r : rows) {
    if (r < 0 || r >= x.dim(0)) throw ShapeError("row index " + std::to_string(r) + " out of range");
    auto src = x.data().subspan(static_cast<std::size_t>(r * width), static_cast<std::size_t>(width));
    out.insert(out.end(), src.begin(), src.end());
  }
  auto backward_fn = [rows = std::move(rows), width](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (Index j = 0; j < width; ++j) gx[rows[k] * width + j] += self.grad[k * width + j];
    }
  };
  return Tensor<Scalar>::from_op(std::move(shape), std::move(out), {x.node()}, std::move(backward_fn));
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_string(x.shape()));
  const Index m = x.dim(0), n = x.dim(1);
  std::vector<Scalar> out(static_cast<std::size_t>(m * n));
  detail::RowMap<Scalar>(out.data(), n, m) = detail::ConstRowMap<Scalar>(x.data().data(), m, n).transpose();
  auto backward_fn = [m, n](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    detail::RowMap<Scalar>(gx, m, n) += detail::ConstRowMap<Scalar>(self.grad.data(), n, m).transpose();
  };
  return Tensor<Scalar>::from_op({n, m}, std::move(out), {x.node()}, std::move(backward_fn));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Scalar> out(static_cast<std::size_t>(m * n));
  using CMap = detail::ConstRowMap<Scalar>;
  detail::RowMap<Scalar>(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  auto backward_fn = [m, k, n](detail::Node<Scalar>& self) {
    CMap g(self.grad.data(), m, n);
    if (Scalar* ga = self.grad_sink(0)) {
      detail::RowMap<Scalar>(ga, m, k).noalias() += g * CMap(self.inputs[1]->value.data(), k, n).transpose();
    }
    if (Scalar* gb = self.grad_sink(1)) {
      detail::RowMap<Scalar>(gb, k, n).noalias() += CMap(self.inputs[0]->value.data(), m, k).transpose() * g;
    }
  };
  return Tensor<Scalar>::from_op({m, n}, std::move(out), {a.node(), b.node()}, std::move(backward_fn));
}

/// Affine map x·Wᵀ + b with x [B×D], W [K×D], b [K].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1) || bias.rank() != 1 ||
      bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear of input " + shape_string(x.shape()) + " with weight " +
                     shape_string(weight.shape()) + " and bias " + shape_string(bias.shape()));
  }
  const Index rows = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  using CMap = detail::ConstRowMap<Scalar>;
  std::vector<Scalar> out(static_cast<std::size_t>(rows * outd));
  detail::RowMap<Scalar> o(out.data(), rows, outd);
  o.noalias() = CMap(x.data().data(), rows, in) * CMap(weight.data().data(), outd, in).transpose();
  o.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data().data(), outd);
  auto backward_fn = [rows, in, outd](detail::Node<Scalar>& self) {
    CMap g(self.grad.data(), rows, outd);
    if (Scalar* gx = self.grad_sink(0)) {
      detail::RowMap<Scalar>(gx, rows, in).noalias() += g * CMap(self.inputs[1]->value.data(), outd, in);
    }
    if (Scalar* gw = self.grad_sink(1)) {
      detail::RowMap<Scalar>(gw, outd, in).noalias() += g.transpose() * CMap(self.inputs[0]->value.data(), rows, in);
    }
    if (Scalar* gb = self.grad_sink(2)) {
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gb, outd) += g.colwise().sum();
    }
  };
  return Tensor<Scalar>::from_op({rows, outd}, std::move(out), {x.node(), weight.node(), bias.node()},
                                 std::move(backward_fn));
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv2dGeometry {
  Index batch, channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index stride, padding;
  Index out_h, out_w;

  Index patch() const { return channels * kernel_h * kernel_w; }
  Index positions() const { return out_h * out_w; }
};

namespace detail {

/// Unfolds input patches into a (C·kh·kw) × (B·Ho·Wo) row-major matrix.
template <typename Scalar>
void im2col(const Scalar* x, const Conv2dGeometry& g, Scalar* cols) {
  const Index ncols = g.batch * g.positions();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        Scalar* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * ncols;
        for (Index b = 0; b < g.batch; ++b) {
          const Scalar* plane = x + (b * g.channels + c) * g.height * g.width;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride - g.padding + ki;
            Scalar* dst = row + b * g.positions() + oy * g.out_w;
            if (iy < 0 || iy >= g.height) {
              std::fill(dst, dst + g.out_w, Scalar(0));
              continue;
            }
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride - g.padding + kj;
              dst[ox] = (ix < 0 || ix >= g.width) ? Scalar(0) : plane[iy * g.width + ix];
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, const Conv2dGeometry& g, Scalar* dx) {
  const Index ncols = g.batch * g.positions();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Scalar* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * ncols;
        for (Index b = 0; b < g.batch; ++b) {
          Scalar* plane = dx + (b * g.channels + c) * g.height * g.width;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= g.height) continue;
            const Scalar* src = row + b * g.positions() + oy * g.out_w;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride - g.padding + kj;
              if (ix >= 0 && ix < g.width) plane[iy * g.width + ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation of input [B×C×H×W] with kernel [O×C×kh×kw], plus an
/// optional per-output-channel bias [O].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const std::optional<Tensor<Scalar>>& bias, Index stride = 1, Index padding = 0) {
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d of input " + shape_string(input.shape()) + " with kernel " +
                     shape_string(kernel.shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d needs stride >= 1 and padding >= 0");
  Conv2dGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                   kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel_h || g.width + 2 * padding < g.kernel_w) {
    throw ShapeError("conv2d kernel " + shape_string(kernel.shape()) + " larger than padded input " +
                     shape_string(input.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels)) {
    throw ShapeError("conv2d bias " + shape_string(bias->shape()) + " for " +
                     std::to_string(g.out_channels) + " output channels");
  }
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;

  const Index ncols = g.batch * g.positions();
  auto cols = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(g.patch() * ncols));
  detail::im2col(input.data().data(), g, cols->data());

  using CMap = detail::ConstRowMap<Scalar>;
  detail::RowMatrix<Scalar> product =
      CMap(kernel.data().data(), g.out_channels, g.patch()) * CMap(cols->data(), g.patch(), ncols);
  std::vector<Scalar> out(static_cast<std::size_t>(g.batch * g.out_channels * g.positions()));
  for (Index b = 0; b < g.batch; ++b) {
    for (Index o = 0; o < g.out_channels; ++o) {
      const Scalar shift = bias ? bias->data()[static_cast<std::size_t>(o)] : Scalar(0);
      const Scalar* src = product.data() + o * ncols + b * g.positions();
      Scalar* dst = out.data() + (b * g.out_channels + o) * g.positions();
      for (Index p = 0; p < g.positions(); ++p) dst[p] = src[p] + shift;
    }
  }

  std::vector<typename Tensor<Scalar>::NodePtr> inputs{input.node(), kernel.node()};
  if (bias) inputs.push_back(bias->node());
  const bool has_bias = bias.has_value();
  auto backward_fn = [g, cols, has_bias](detail::Node<Scalar>& self) {
    const Index nc = g.batch * g.positions();
    detail::RowMatrix<Scalar> grad(g.out_channels, nc);
    for (Index b = 0; b < g.batch; ++b) {
      for (Index o = 0; o < g.out_channels; ++o) {
        const Scalar* src = self.grad.data() + (b * g.out_channels + o) * g.positions();
        std::copy(src, src + g.positions(), grad.data() + o * nc + b * g.positions());
      }
    }
    if (Scalar* gk = self.grad_sink(1)) {
      detail::RowMap<Scalar>(gk, g.out_channels, g.patch()).noalias() +=
          grad * CMap(cols->data(), g.patch(), nc).transpose();
    }
    if (has_bias) {
      if (Scalar* gb = self.grad_sink(2)) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gb, g.out_channels) += grad.rowwise().sum();
      }
    }
    if (Scalar* gx = self.grad_sink(0)) {
      detail::RowMatrix<Scalar> dcols =
          CMap(self.inputs[1]->value.data(), g.out_channels, g.patch()).transpose() * grad;
      detail::col2im(dcols.data(), g, gx);
    }
  };
  return Tensor<Scalar>::from_op({g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out),
                                 std::move(inputs), std::move(backward_fn));
}

/// Non-overlapping average pooling with a square window.
template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, Index window) {
  if (x.rank() != 4 || window < 1 || x.dim(2) < window || x.dim(3) < window) {
    throw ShapeError("avg_pool2d window " + std::to_string(window) + " on " + shape_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h / window, ow = w / window;
  const Scalar scale = Scalar(1) / static_cast<Scalar>(window * window);
  std::vector<Scalar> out(static_cast<std::size_t>(planes * oh * ow), Scalar(0));
  const Scalar* in = x.data().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Scalar acc(0);
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) acc += in[(p * h + oy * window + i) * w + ox * window + j];
        }
        out[(p * oh + oy) * ow + ox] = acc * scale;
      }
    }
  }
  auto backward_fn = [planes, h, w, oh, ow, window, scale](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    for (Index p = 0; p < planes; ++p) {
      for (Index oy = 0; oy < oh; ++oy) {
        for (Index ox = 0; ox < ow; ++ox) {
          const Scalar gv = self.grad[(p * oh + oy) * ow + ox] * scale;
          for (Index i = 0; i < window; ++i) {
            for (Index j = 0; j < window; ++j) gx[(p * h + oy * window + i) * w + ox * window + j] += gv;
          }
        }
      }
    }
  };
  return Tensor<Scalar>::from_op({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node()},
                                 std::move(backward_fn));
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum, mean or max over `axes` (negative axes count from the back).
/// Max routes the gradient to the first maximal element.
template <typename Scalar>
Tensor<Scalar> reduce(ReduceOp op, const Tensor<Scalar>& x, std::vector<int> axes, bool keepdim = false) {
  const int rank = static_cast<int>(x.rank());
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (int& a : axes) {
    const int norm = a < 0 ? a + rank : a;
    if (norm < 0 || norm >= rank || reduced[static_cast<std::size_t>(norm)]) {
      throw ShapeError("invalid reduction axis " + std::to_string(a) + " for shape " + shape_string(x.shape()));
    }
    reduced[static_cast<std::size_t>(norm)] = true;
  }
  Shape kept = x.shape();
  Shape squeezed;
  Index count = 1;
  for (int d = 0; d < rank; ++d) {
    if (reduced[static_cast<std::size_t>(d)]) {
      count *= kept[static_cast<std::size_t>(d)];
      kept[static_cast<std::size_t>(d)] = 1;
    } else {
      squeezed.push_back(kept[static_cast<std::size_t>(d)]);
    }
  }
  if (op != ReduceOp::Sum && count == 0) {
    throw ContractError("mean/max over an empty slice of " + shape_string(x.shape()));
  }
  const auto sx = detail::contiguous_strides(x.shape());
  const auto sk = detail::aligned_strides(kept, x.shape());
  const Index nout = shape_numel(kept);
  std::vector<Scalar> out(static_cast<std::size_t>(nout),
                          op == ReduceOp::Max ? -std::numeric_limits<Scalar>::infinity() : Scalar(0));
  std::vector<Index> argmax(op == ReduceOp::Max ? static_cast<std::size_t>(nout) : 0, -1);
  const Scalar* px = x.data().data();
  detail::for_each_broadcast(x.shape(), sx, sk, [&](Index i, Index, Index k) {
    if (op == ReduceOp::Max) {
      if (argmax[k] < 0 || px[i] > out[k]) {
        out[k] = px[i];
        argmax[k] = i;
      }
    } else {
      out[k] += px[i];
    }
  });
  const Scalar scale = op == ReduceOp::Mean ? Scalar(1) / static_cast<Scalar>(count) : Scalar(1);
  if (op == ReduceOp::Mean) {
    for (Scalar& v : out) v *= scale;
  }

  Shape xs = x.shape();
  auto backward_fn = [op, xs, sx, sk, scale, argmax = std::move(argmax)](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    const Scalar* g = self.grad.data();
    if (op == ReduceOp::Max) {
      for (std::size_t k = 0; k < argmax.size(); ++k) gx[argmax[k]] += g[k];
      return;
    }
    detail::for_each_broadcast(xs, sx, sk, [&](Index i, Index, Index k) { gx[i] += g[k] * scale; });
  };
  return Tensor<Scalar>::from_op(keepdim ? kept : squeezed, std::move(out), {x.node()}, std::move(backward_fn));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(ReduceOp::Sum, x, axes);
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(ReduceOp::Mean, x, axes);
}

// ---------------------------------------------------------------------------
// Softmax family (over the last axis)

template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax needs rank >= 1");
  const Index width = x.shape().back();
  const Index rows = width ? x.numel() / width : 0;
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  for (Index r = 0; r < rows; ++r) {
    Scalar* row = out.data() + r * width;
    const Scalar mx = *std::max_element(row, row + width);
    Scalar acc(0);
    for (Index j = 0; j < width; ++j) acc += std::exp(row[j] - mx);
    const Scalar lse = mx + std::log(acc);
    for (Index j = 0; j < width; ++j) row[j] -= lse;
  }
  auto backward_fn = [rows, width](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    for (Index r = 0; r < rows; ++r) {
      const Scalar* g = self.grad.data() + r * width;
      const Scalar* lp = self.value.data() + r * width;
      Scalar total(0);
      for (Index j = 0; j < width; ++j) total += g[j];
      for (Index j = 0; j < width; ++j) gx[r * width + j] += g[j] - std::exp(lp[j]) * total;
    }
  };
  return Tensor<Scalar>::from_op(x.shape(), std::move(out), {x.node()}, std::move(backward_fn));
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  return exp(log_softmax(x));
}

/// out[i] = x[i, index[i]] for x [N×K].
template <typename Scalar>
Tensor<Scalar> pick(const Tensor<Scalar>& x, std::span<const int> index) {
  if (x.rank() != 2 || static_cast<Index>(index.size()) != x.dim(0)) {
    throw ShapeError("pick of " + std::to_string(index.size()) + " indices from " + shape_string(x.shape()));
  }
  const Index width = x.dim(1);
  std::vector<Index> flat(index.size());
  std::vector<Scalar> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= width) {
      throw ContractError("index " + std::to_string(index[i]) + " outside [0," + std::to_string(width) + ")");
    }
    flat[i] = static_cast<Index>(i) * width + index[i];
    out[i] = x.data()[static_cast<std::size_t>(flat[i])];
  }
  auto backward_fn = [flat = std::move(flat)](detail::Node<Scalar>& self) {
    Scalar* gx = self.grad_sink(0);
    if (!gx) return;
    for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += self.grad[i];
  };
  return Tensor<Scalar>::from_op({x.dim(0)}, std::move(out), {x.node()}, std::move(backward_fn));
}

/// Rows divided by their L2 norm, sqrt(Σx² + eps²) to stay finite at zero.
template <typename Scalar>
Tensor<Scalar> l2_normalize_rows(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-6)) {
  auto norm = sqrt(reduce(ReduceOp::Sum, square(x), {-1}, true) + eps * eps);
  return x / norm;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
bool all_finite(std::span<const Scalar> values) {
  return std::all_of(values.begin(), values.end(), [](Scalar v) { return std::isfinite(v); });
}

}  // namespace mcsad
