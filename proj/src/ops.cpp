#include "samic/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace samic {

namespace {

using detail::make_result;

template <class Scalar>
void push(const Tensor<Scalar>& t, const Array<Scalar>& g) {
  if (t.defined() && t.requires_grad()) t.storage()->accumulate(g);
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<Index> stride_a, stride_b;
  bool same = false;
};

std::vector<Index> row_major_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  for (std::size_t d = 0; d < r; ++d) {
    const std::ptrdiff_t da = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(r - a.size());
    const std::ptrdiff_t db = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(r - b.size());
    const Index ea = da >= 0 ? a[static_cast<std::size_t>(da)] : 1;
    const Index eb = db >= 0 ? b[static_cast<std::size_t>(db)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.out[d] = std::max(ea, eb);
    if (ea != 1) bc.stride_a[d] = sa[static_cast<std::size_t>(da)];
    if (eb != 1) bc.stride_b[d] = sb[static_cast<std::size_t>(db)];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const Index n = numel(bc.out);
  if (bc.same) {
    for (Index i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = bc.out.size();
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

template <class Scalar, class Fwd, class DA, class DB>
Tensor<Scalar> binary(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b, Fwd fwd,
                      DA da, DB db) {
  Broadcast bc = plan_broadcast(a.shape(), b.shape());
  Array<Scalar> out(numel(bc.out));
  const auto& av = a.value();
  const auto& bv = b.value();
  for_each_broadcast(bc, [&](Index i, Index ia, Index ib) { out[i] = fwd(av[ia], bv[ib]); });
  Shape shape = bc.out;
  return make_result<Scalar>(op, std::move(shape), std::move(out), {&a, &b},
                             [a, b, bc, da, db](const Array<Scalar>& g) {
                               const auto& av = a.value();
                               const auto& bv = b.value();
                               if (a.requires_grad()) {
                                 Array<Scalar> ga = Array<Scalar>::Zero(a.size());
                                 for_each_broadcast(bc, [&](Index i, Index ia, Index ib) {
                                   ga[ia] += g[i] * da(av[ia], bv[ib]);
                                 });
                                 push(a, ga);
                               }
                               if (b.requires_grad()) {
                                 Array<Scalar> gb = Array<Scalar>::Zero(b.size());
                                 for_each_broadcast(bc, [&](Index i, Index ia, Index ib) {
                                   gb[ib] += g[i] * db(av[ia], bv[ib]);
                                 });
                                 push(b, gb);
                               }
                             });
}

template <class Scalar, class Fwd, class Deriv>
Tensor<Scalar> unary(const char* op, const Tensor<Scalar>& x, Fwd fwd, Deriv deriv) {
  Array<Scalar> y = x.value().unaryExpr(fwd);
  Array<Scalar> yk = y;
  return make_result<Scalar>(op, x.shape(), std::move(y), {&x},
                             [x, yk = std::move(yk), deriv](const Array<Scalar>& g) {
                               const auto& xv = x.value();
                               Array<Scalar> gx(xv.size());
                               for (Index i = 0; i < xv.size(); ++i) gx[i] = g[i] * deriv(xv[i], yk[i]);
                               push(x, gx);
                             });
}

template <class Scalar>
Scalar sigmoid_scalar(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::out_of_range("axis out of range");
  AxisSplit sp;
  for (int d = 0; d < axis; ++d) sp.outer *= s[static_cast<std::size_t>(d)];
  sp.extent = s[static_cast<std::size_t>(axis)];
  for (int d = axis + 1; d < r; ++d) sp.inner *= s[static_cast<std::size_t>(d)];
  return sp;
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::out_of_range("axis out of range");
  return axis;
}

void require_rank(const char* op, const Shape& s, std::size_t r) {
  if (s.size() != r) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                ", got " + to_string(s));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <class Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary<Scalar>(
      "add", a, b, [](Scalar x, Scalar y) { return x + y; }, [](Scalar, Scalar) { return Scalar(1); },
      [](Scalar, Scalar) { return Scalar(1); });
}

template <class Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary<Scalar>(
      "sub", a, b, [](Scalar x, Scalar y) { return x - y; }, [](Scalar, Scalar) { return Scalar(1); },
      [](Scalar, Scalar) { return Scalar(-1); });
}

template <class Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary<Scalar>(
      "mul", a, b, [](Scalar x, Scalar y) { return x * y; }, [](Scalar, Scalar y) { return y; },
      [](Scalar x, Scalar) { return x; });
}

template <class Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary<Scalar>(
      "div", a, b, [](Scalar x, Scalar y) { return x / y; },
      [](Scalar, Scalar y) { return Scalar(1) / y; }, [](Scalar x, Scalar y) { return -x / (y * y); });
}

template <class Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar s) {
  Array<Scalar> y = x.value() + s;
  return make_result<Scalar>("add_scalar", x.shape(), std::move(y), {&x},
                             [x](const Array<Scalar>& g) { push(x, g); });
}

template <class Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& x, Scalar s) {
  Array<Scalar> y = x.value() * s;
  return make_result<Scalar>("mul_scalar", x.shape(), std::move(y), {&x},
                             [x, s](const Array<Scalar>& g) { push<Scalar>(x, g * s); });
}

template <class Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& x) {
  return mul_scalar(x, Scalar(-1));
}

template <class Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "exp", x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <class Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "log", x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <class Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "sigmoid", x, [](Scalar v) { return sigmoid_scalar(v); },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <class Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "silu", x, [](Scalar v) { return v * sigmoid_scalar(v); },
      [](Scalar v, Scalar) {
        const Scalar s = sigmoid_scalar(v);
        return s + v * s * (Scalar(1) - s);
      });
}

template <class Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "softplus", x,
      [](Scalar v) { return std::max(v, Scalar(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Scalar v, Scalar) { return sigmoid_scalar(v); });
}

template <class Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "tanh", x, [](Scalar v) { return std::tanh(v); },
      [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

template <class Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "square", x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

template <class Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "sqrt", x, [](Scalar v) { return std::sqrt(v); },
      [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

template <class Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return unary<Scalar>(
      "relu", x, [](Scalar v) { return v > 0 ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
}

template <class Scalar>
Tensor<Scalar> pow(const Tensor<Scalar>& x, Scalar p) {
  return unary<Scalar>(
      "pow", x, [p](Scalar v) { return std::pow(v, p); },
      [p](Scalar v, Scalar) { return p * std::pow(v, p - Scalar(1)); });
}

template <class Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi) {
  return unary<Scalar>(
      "clamp", x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v, Scalar) { return (v > lo && v < hi) ? Scalar(1) : Scalar(0); });
}

template <class Scalar>
Tensor<Scalar> lower_bound(const Tensor<Scalar>& x, Scalar lo) {
  return unary<Scalar>(
      "lower_bound", x, [lo](Scalar v) { return std::max(v, lo); },
      [lo](Scalar v, Scalar) { return v > lo ? Scalar(1) : Scalar(0); });
}

template <class Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& hard, const Tensor<Scalar>& soft) {
  if (hard.shape() != soft.shape()) throw std::invalid_argument("straight_through: shape mismatch");
  Array<Scalar> y = hard.value();
  return make_result<Scalar>("straight_through", hard.shape(), std::move(y), {&soft},
                             [soft](const Array<Scalar>& g) { push(soft, g); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Array<Scalar> y(1);
  y[0] = x.value().sum();
  return make_result<Scalar>("sum", Shape{}, std::move(y), {&x}, [x](const Array<Scalar>& g) {
    push<Scalar>(x, Array<Scalar>::Constant(x.size(), g[0]));
  });
}

template <class Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.size());
  Array<Scalar> y(1);
  y[0] = x.value().sum() * inv;
  return make_result<Scalar>("mean", Shape{}, std::move(y), {&x}, [x, inv](const Array<Scalar>& g) {
    push<Scalar>(x, Array<Scalar>::Constant(x.size(), g[0] * inv));
  });
}

template <class Scalar>
Tensor<Scalar> sum_axis(const Tensor<Scalar>& x, int axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  axis = normalize_axis(axis, x.rank());
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = 1;
  Array<Scalar> y = Array<Scalar>::Zero(sp.outer * sp.inner);
  const auto& xv = x.value();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index a = 0; a < sp.extent; ++a)
      for (Index i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += xv[(o * sp.extent + a) * sp.inner + i];
  return make_result<Scalar>("sum_axis", std::move(shape), std::move(y), {&x},
                             [x, sp](const Array<Scalar>& g) {
                               Array<Scalar> gx(x.size());
                               for (Index o = 0; o < sp.outer; ++o)
                                 for (Index a = 0; a < sp.extent; ++a)
                                   for (Index i = 0; i < sp.inner; ++i)
                                     gx[(o * sp.extent + a) * sp.inner + i] = g[o * sp.inner + i];
                               push(x, gx);
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Array<Scalar> y = x.value();
  return make_result<Scalar>("reshape", std::move(shape), std::move(y), {&x},
                             [x](const Array<Scalar>& g) { push(x, g); });
}

template <class Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  require_rank("transpose", x.shape(), 2);
  const Index rows = x.dim(0), cols = x.dim(1);
  Array<Scalar> y(x.size());
  Eigen::Map<RowMatrix<Scalar>>(y.data(), cols, rows) =
      Eigen::Map<const RowMatrix<Scalar>>(x.value().data(), rows, cols).transpose();
  return make_result<Scalar>("transpose", Shape{cols, rows}, std::move(y), {&x},
                             [x, rows, cols](const Array<Scalar>& g) {
                               Array<Scalar> gx(x.size());
                               Eigen::Map<RowMatrix<Scalar>>(gx.data(), rows, cols) =
                                   Eigen::Map<const RowMatrix<Scalar>>(g.data(), cols, rows).transpose();
                               push(x, gx);
                             });
}

template <class Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  const int r = parts.front().rank();
  axis = normalize_axis(axis, r);
  Shape shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != r) throw std::invalid_argument("concat: rank mismatch");
    total += s[static_cast<std::size_t>(axis)];
    s[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (s != shape) throw std::invalid_argument("concat: extent mismatch off the concat axis");
  }
  shape[static_cast<std::size_t>(axis)] = total;
  const AxisSplit sp = split_axis(shape, axis);
  Array<Scalar> y(numel(shape));
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index e = p.dim(axis);
    const auto& pv = p.value();
    for (Index o = 0; o < sp.outer; ++o)
      y.segment((o * sp.extent + off) * sp.inner, e * sp.inner) = pv.segment(o * e * sp.inner, e * sp.inner);
    off += e;
  }
  return make_result<Scalar>("concat", std::move(shape), std::move(y), parts,
                             [parts, offsets, sp, axis](const Array<Scalar>& g) {
                               for (std::size_t k = 0; k < parts.size(); ++k) {
                                 const auto& p = parts[k];
                                 if (!p.requires_grad()) continue;
                                 const Index e = p.dim(axis);
                                 Array<Scalar> gp(p.size());
                                 for (Index o = 0; o < sp.outer; ++o)
                                   gp.segment(o * e * sp.inner, e * sp.inner) =
                                       g.segment((o * sp.extent + offsets[k]) * sp.inner, e * sp.inner);
                                 push(p, gp);
                               }
                             });
}

template <class Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index begin, Index end) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit sp = split_axis(x.shape(), axis);
  if (begin < 0 || end > sp.extent || begin > end) throw std::out_of_range("slice bounds");
  const Index e = end - begin;
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = e;
  Array<Scalar> y(numel(shape));
  const auto& xv = x.value();
  for (Index o = 0; o < sp.outer; ++o)
    y.segment(o * e * sp.inner, e * sp.inner) = xv.segment((o * sp.extent + begin) * sp.inner, e * sp.inner);
  return make_result<Scalar>("slice", std::move(shape), std::move(y), {&x},
                             [x, sp, begin, e](const Array<Scalar>& g) {
                               Array<Scalar> gx = Array<Scalar>::Zero(x.size());
                               for (Index o = 0; o < sp.outer; ++o)
                                 gx.segment((o * sp.extent + begin) * sp.inner, e * sp.inner) =
                                     g.segment(o * e * sp.inner, e * sp.inner);
                               push(x, gx);
                             });
}

void check_permutation(std::span<const Index> perm, Index n) {
  if (static_cast<Index>(perm.size()) != n) {
    throw std::invalid_argument("permutation length " + std::to_string(perm.size()) +
                                " != " + std::to_string(n));
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (Index p : perm) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) {
      throw std::invalid_argument("index list is not a bijection");
    }
    seen[static_cast<std::size_t>(p)] = 1;
  }
}

std::vector<Index> invert_permutation(std::span<const Index> perm) {
  check_permutation(perm, static_cast<Index>(perm.size()));
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  return inv;
}

template <class Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> perm) {
  if (x.rank() < 1) throw std::invalid_argument("gather_rows on a scalar");
  const Index n = x.dim(0);
  check_permutation(perm, n);
  const Index c = n == 0 ? 0 : x.size() / n;
  Array<Scalar> y(x.size());
  const auto& xv = x.value();
  for (Index i = 0; i < n; ++i) y.segment(i * c, c) = xv.segment(perm[static_cast<std::size_t>(i)] * c, c);
  std::vector<Index> p(perm.begin(), perm.end());
  return make_result<Scalar>("gather_rows", x.shape(), std::move(y), {&x},
                             [x, p = std::move(p), c](const Array<Scalar>& g) {
                               Array<Scalar> gx(x.size());
                               for (std::size_t i = 0; i < p.size(); ++i)
                                 gx.segment(p[i] * c, c) = g.segment(static_cast<Index>(i) * c, c);
                               push(x, gx);
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;
  Array<Scalar> y(m * n);
  MMap(y.data(), m, n).noalias() = CMap(a.value().data(), m, k) * CMap(b.value().data(), k, n);
  return make_result<Scalar>("matmul", Shape{m, n}, std::move(y), {&a, &b},
                             [a, b, m, k, n](const Array<Scalar>& g) {
                               CMap gm(g.data(), m, n);
                               if (a.requires_grad()) {
                                 Array<Scalar> ga(m * k);
                                 MMap(ga.data(), m, k).noalias() = gm * CMap(b.value().data(), k, n).transpose();
                                 push(a, ga);
                               }
                               if (b.requires_grad()) {
                                 Array<Scalar> gb(k * n);
                                 MMap(gb.data(), k, n).noalias() = CMap(a.value().data(), m, k).transpose() * gm;
                                 push(b, gb);
                               }
                             });
}

template <class Scalar>
Tensor<Scalar> channel_matmul(const Tensor<Scalar>& w, const Tensor<Scalar>& x) {
  require_rank("channel_matmul", w.shape(), 3);
  require_rank("channel_matmul", x.shape(), 3);
  const Index c = w.dim(0), f = w.dim(1), gdim = w.dim(2), m = x.dim(2);
  if (x.dim(0) != c || x.dim(1) != gdim) {
    throw std::invalid_argument("channel_matmul " + to_string(w.shape()) + " x " + to_string(x.shape()));
  }
  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;
  Array<Scalar> y(c * f * m);
  for (Index ch = 0; ch < c; ++ch) {
    MMap(y.data() + ch * f * m, f, m).noalias() =
        CMap(w.value().data() + ch * f * gdim, f, gdim) * CMap(x.value().data() + ch * gdim * m, gdim, m);
  }
  return make_result<Scalar>(
      "channel_matmul", Shape{c, f, m}, std::move(y), {&w, &x}, [w, x, c, f, gdim, m](const Array<Scalar>& g) {
        Array<Scalar> gw = Array<Scalar>::Zero(w.size());
        Array<Scalar> gx = Array<Scalar>::Zero(x.size());
        for (Index ch = 0; ch < c; ++ch) {
          CMap gm(g.data() + ch * f * m, f, m);
          MMap(gw.data() + ch * f * gdim, f, gdim).noalias() =
              gm * CMap(x.value().data() + ch * gdim * m, gdim, m).transpose();
          MMap(gx.data() + ch * gdim * m, gdim, m).noalias() =
              CMap(w.value().data() + ch * f * gdim, f, gdim).transpose() * gm;
        }
        push(w, gw);
        push(x, gx);
      });
}

// ---------------------------------------------------------------------------
// Normalization

template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  const auto& xv = x.value();
  Array<Scalar> y(x.size());
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.extent * sp.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index a = 0; a < sp.extent; ++a) mx = std::max(mx, xv[base + a * sp.inner]);
      Scalar s = 0;
      for (Index a = 0; a < sp.extent; ++a) {
        const Scalar e = std::exp(xv[base + a * sp.inner] - mx);
        y[base + a * sp.inner] = e;
        s += e;
      }
      for (Index a = 0; a < sp.extent; ++a) y[base + a * sp.inner] /= s;
    }
  }
  Array<Scalar> yk = y;
  return make_result<Scalar>("softmax", x.shape(), std::move(y), {&x},
                             [x, sp, yk = std::move(yk)](const Array<Scalar>& g) {
                               Array<Scalar> gx(x.size());
                               for (Index o = 0; o < sp.outer; ++o) {
                                 for (Index i = 0; i < sp.inner; ++i) {
                                   const Index base = o * sp.extent * sp.inner + i;
                                   Scalar dot = 0;
                                   for (Index a = 0; a < sp.extent; ++a)
                                     dot += g[base + a * sp.inner] * yk[base + a * sp.inner];
                                   for (Index a = 0; a < sp.extent; ++a) {
                                     const Index j = base + a * sp.inner;
                                     gx[j] = yk[j] * (g[j] - dot);
                                   }
                                 }
                               }
                               push(x, gx);
                             });
}

template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  require_rank("layer_norm", x.shape(), 2);
  const Index n = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c) throw std::invalid_argument("layer_norm: affine size mismatch");
  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  CMap xm(x.value().data(), n, c);
  Array<Scalar> rstd(n);
  RowMatrix<Scalar> xhat(n, c);
  for (Index r = 0; r < n; ++r) {
    const Scalar mu = xm.row(r).mean();
    const Scalar var = (xm.row(r).array() - mu).square().mean();
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xm.row(r).array() - mu) * rstd[r];
  }
  Array<Scalar> y(n * c);
  Eigen::Map<RowMatrix<Scalar>> ym(y.data(), n, c);
  const auto gv = gamma.value().transpose().matrix();
  const auto bv = beta.value().transpose().matrix();
  for (Index r = 0; r < n; ++r) ym.row(r) = (xhat.row(r).array() * gv.array() + bv.array()).matrix();
  return make_result<Scalar>(
      "layer_norm", x.shape(), std::move(y), {&x, &gamma, &beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, c](const Array<Scalar>& g) {
        CMap gm(g.data(), n, c);
        if (gamma.requires_grad()) {
          Array<Scalar> gg = (gm.array() * xhat.array()).colwise().sum().transpose();
          push(gamma, gg);
        }
        if (beta.requires_grad()) {
          Array<Scalar> gb = gm.array().colwise().sum().transpose();
          push(beta, gb);
        }
        if (x.requires_grad()) {
          Array<Scalar> gx(n * c);
          Eigen::Map<RowMatrix<Scalar>> gxm(gx.data(), n, c);
          const auto gam = gamma.value().transpose();
          for (Index r = 0; r < n; ++r) {
            const Eigen::Array<Scalar, 1, Eigen::Dynamic> gh = gm.row(r).array() * gam;
            const Scalar m1 = gh.mean();
            const Scalar m2 = (gh * xhat.row(r).array()).mean();
            gxm.row(r) = ((gh - m1 - xhat.row(r).array() * m2) * rstd[r]).matrix();
          }
          push(x, gx);
        }
      });
}

template <class Scalar>
Tensor<Scalar> normalize_rows(const Tensor<Scalar>& x, Scalar eps) {
  require_rank("normalize_rows", x.shape(), 2);
  const Index n = x.dim(0), c = x.dim(1);
  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  CMap xm(x.value().data(), n, c);
  Array<Scalar> norms = xm.rowwise().norm().array();
  Array<Scalar> y(n * c);
  Eigen::Map<RowMatrix<Scalar>> ym(y.data(), n, c);
  for (Index r = 0; r < n; ++r) ym.row(r) = xm.row(r) / (norms[r] + eps);
  return make_result<Scalar>("normalize_rows", x.shape(), std::move(y), {&x},
                             [x, norms = std::move(norms), n, c, eps](const Array<Scalar>& g) {
                               CMap gm(g.data(), n, c);
                               CMap xm(x.value().data(), n, c);
                               Array<Scalar> gx(n * c);
                               Eigen::Map<RowMatrix<Scalar>> gxm(gx.data(), n, c);
                               for (Index r = 0; r < n; ++r) {
                                 const Scalar d = norms[r] + eps;
                                 gxm.row(r) = gm.row(r) / d;
                                 if (norms[r] > 0) {
                                   const Scalar dot = gm.row(r).dot(xm.row(r));
                                   gxm.row(r) -= xm.row(r) * (dot / (d * d * norms[r]));
                                 }
                               }
                               push(x, gx);
                             });
}

// ---------------------------------------------------------------------------
// Convolution

template <class Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                      int stride, std::span<const Scalar> mask) {
  require_rank("conv2d input", input.shape(), 3);
  require_rank("conv2d kernel", kernel.shape(), 4);
  const Index cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const Index cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    throw std::invalid_argument("conv2d: channel mismatch, input " + to_string(input.shape()) + " kernel " +
                                to_string(kernel.shape()));
  }
  if (kernel.dim(3) != k || k % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square with odd size");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  if (!mask.empty() && static_cast<Index>(mask.size()) != k * k) throw std::invalid_argument("conv2d: mask size");
  if (bias.defined() && bias.size() != cout) throw std::invalid_argument("conv2d: bias size");
  const Index pad = (k - 1) / 2;
  const Index ho = (h + 2 * pad - k) / stride + 1;
  const Index wo = (w + 2 * pad - k) / stride + 1;
  const Index rows = cin * k * k, cols = ho * wo;

  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;

  Array<Scalar> keff = kernel.value();
  if (!mask.empty()) {
    for (Index i = 0; i < keff.size(); ++i) keff[i] *= mask[static_cast<std::size_t>(i % (k * k))];
  }

  const bool pointwise = (k == 1 && stride == 1);
  RowMatrix<Scalar> im2col;
  if (!pointwise) {
    im2col.setZero(rows, cols);
    const auto& xv = input.value();
    for (Index c = 0; c < cin; ++c)
      for (Index ki = 0; ki < k; ++ki)
        for (Index kj = 0; kj < k; ++kj) {
          const Index r = (c * k + ki) * k + kj;
          Scalar* dst = im2col.row(r).data();
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * stride + ki - pad;
            if (iy < 0 || iy >= h) continue;
            const Scalar* src = xv.data() + (c * h + iy) * w;
            for (Index ox = 0; ox < wo; ++ox) {
              const Index ix = ox * stride + kj - pad;
              if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
            }
          }
        }
  }

  Array<Scalar> y(cout * cols);
  MMap ym(y.data(), cout, cols);
  if (pointwise) {
    ym.noalias() = CMap(keff.data(), cout, rows) * CMap(input.value().data(), rows, cols);
  } else {
    ym.noalias() = CMap(keff.data(), cout, rows) * im2col;
  }
  if (bias.defined()) {
    for (Index o = 0; o < cout; ++o) ym.row(o).array() += bias.value()[o];
  }

  std::vector<Scalar> mask_copy(mask.begin(), mask.end());
  return make_result<Scalar>(
      "conv2d", Shape{cout, ho, wo}, std::move(y), {&input, &kernel, &bias},
      [input, kernel, bias, im2col = std::move(im2col), keff = std::move(keff), mask_copy = std::move(mask_copy),
       cin, h, w, cout, k, stride, pad, ho, wo, rows, cols, pointwise](const Array<Scalar>& g) {
        CMap gm(g.data(), cout, cols);
        if (bias.defined() && bias.requires_grad()) {
          Array<Scalar> gb = gm.rowwise().sum().array();
          push(bias, gb);
        }
        if (kernel.requires_grad()) {
          Array<Scalar> gk(cout * rows);
          if (pointwise) {
            MMap(gk.data(), cout, rows).noalias() = gm * CMap(input.value().data(), rows, cols).transpose();
          } else {
            MMap(gk.data(), cout, rows).noalias() = gm * im2col.transpose();
          }
          if (!mask_copy.empty()) {
            for (Index i = 0; i < gk.size(); ++i) gk[i] *= mask_copy[static_cast<std::size_t>(i % (k * k))];
          }
          push(kernel, gk);
        }
        if (input.requires_grad()) {
          if (pointwise) {
            Array<Scalar> gx(rows * cols);
            MMap(gx.data(), rows, cols).noalias() = CMap(keff.data(), cout, rows).transpose() * gm;
            push(input, gx);
          } else {
            RowMatrix<Scalar> gcol(rows, cols);
            gcol.noalias() = CMap(keff.data(), cout, rows).transpose() * gm;
            Array<Scalar> gx = Array<Scalar>::Zero(cin * h * w);
            for (Index c = 0; c < cin; ++c)
              for (Index ki = 0; ki < k; ++ki)
                for (Index kj = 0; kj < k; ++kj) {
                  const Index r = (c * k + ki) * k + kj;
                  const Scalar* src = gcol.row(r).data();
                  for (Index oy = 0; oy < ho; ++oy) {
                    const Index iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    Scalar* dst = gx.data() + (c * h + iy) * w;
                    for (Index ox = 0; ox < wo; ++ox) {
                      const Index ix = ox * stride + kj - pad;
                      if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                    }
                  }
                }
            push(input, gx);
          }
        }
      });
}

template <class Scalar>
Tensor<Scalar> depthwise_conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                                Padding padding) {
  require_rank("depthwise_conv2d input", input.shape(), 3);
  require_rank("depthwise_conv2d kernel", kernel.shape(), 3);
  const Index c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const Index kh = kernel.dim(1), kw = kernel.dim(2);
  if (kernel.dim(0) != c) throw std::invalid_argument("depthwise_conv2d: channel mismatch");
  if (bias.defined() && bias.size() != c) throw std::invalid_argument("depthwise_conv2d: bias size");
  Index ph = 0, pw = 0, ho = h - kh + 1, wo = w - kw + 1;
  if (padding == Padding::kSame) {
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("depthwise_conv2d: same padding needs odd kernel");
    ph = (kh - 1) / 2;
    pw = (kw - 1) / 2;
    ho = h;
    wo = w;
  }
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("depthwise_conv2d: kernel larger than input");
  const auto& xv = input.value();
  const auto& kv = kernel.value();
  Array<Scalar> y = Array<Scalar>::Zero(c * ho * wo);
  for (Index ch = 0; ch < c; ++ch) {
    const Scalar b = bias.defined() ? bias.value()[ch] : Scalar(0);
    Scalar* out = y.data() + ch * ho * wo;
    for (Index i = 0; i < ho * wo; ++i) out[i] = b;
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const Scalar kval = kv[(ch * kh + ki) * kw + kj];
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy + ki - ph;
          if (iy < 0 || iy >= h) continue;
          const Scalar* src = xv.data() + (ch * h + iy) * w;
          Scalar* dst = out + oy * wo;
          const Index ox0 = std::max<Index>(0, pw - kj), ox1 = std::min<Index>(wo, w + pw - kj);
          for (Index ox = ox0; ox < ox1; ++ox) dst[ox] += kval * src[ox + kj - pw];
        }
      }
  }
  return make_result<Scalar>(
      "depthwise_conv2d", Shape{c, ho, wo}, std::move(y), {&input, &kernel, &bias},
      [input, kernel, bias, c, h, w, kh, kw, ph, pw, ho, wo](const Array<Scalar>& g) {
        const auto& xv = input.value();
        const auto& kv = kernel.value();
        Array<Scalar> gx = Array<Scalar>::Zero(input.size());
        Array<Scalar> gk = Array<Scalar>::Zero(kernel.size());
        Array<Scalar> gb = Array<Scalar>::Zero(c);
        for (Index ch = 0; ch < c; ++ch) {
          const Scalar* go = g.data() + ch * ho * wo;
          for (Index i = 0; i < ho * wo; ++i) gb[ch] += go[i];
          for (Index ki = 0; ki < kh; ++ki)
            for (Index kj = 0; kj < kw; ++kj) {
              const Scalar kval = kv[(ch * kh + ki) * kw + kj];
              Scalar acc = 0;
              for (Index oy = 0; oy < ho; ++oy) {
                const Index iy = oy + ki - ph;
                if (iy < 0 || iy >= h) continue;
                const Scalar* src = xv.data() + (ch * h + iy) * w;
                Scalar* gdst = gx.data() + (ch * h + iy) * w;
                const Scalar* grow = go + oy * wo;
                const Index ox0 = std::max<Index>(0, pw - kj), ox1 = std::min<Index>(wo, w + pw - kj);
                for (Index ox = ox0; ox < ox1; ++ox) {
                  acc += grow[ox] * src[ox + kj - pw];
                  gdst[ox + kj - pw] += grow[ox] * kval;
                }
              }
              gk[(ch * kh + ki) * kw + kj] = acc;
            }
        }
        push(input, gx);
        push(kernel, gk);
        if (bias.defined()) push(bias, gb);
      });
}

template <class Scalar>
Tensor<Scalar> pixel_shuffle(const Tensor<Scalar>& x, int r) {
  require_rank("pixel_shuffle", x.shape(), 3);
  const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (r < 1 || cin % (r * r) != 0) throw std::invalid_argument("pixel_shuffle: channels not divisible by r^2");
  const Index c = cin / (r * r);
  const Index ho = h * r, wo = w * r;
  std::vector<Index> src(static_cast<std::size_t>(c * ho * wo));
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < ho; ++y)
      for (Index xx = 0; xx < wo; ++xx) {
        const Index i = y % r, j = xx % r;
        const Index sc = (ch * r + i) * r + j;
        src[static_cast<std::size_t>((ch * ho + y) * wo + xx)] = (sc * h + y / r) * w + xx / r;
      }
  const auto& xv = x.value();
  Array<Scalar> out(x.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[static_cast<Index>(i)] = xv[src[i]];
  return make_result<Scalar>("pixel_shuffle", Shape{c, ho, wo}, std::move(out), {&x},
                             [x, src = std::move(src)](const Array<Scalar>& g) {
                               Array<Scalar> gx(x.size());
                               for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] = g[static_cast<Index>(i)];
                               push(x, gx);
                             });
}

template <class Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x) {
  require_rank("avg_pool2", x.shape(), 3);
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw std::invalid_argument("avg_pool2: input too small");
  const auto& xv = x.value();
  Array<Scalar> y(c * ho * wo);
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        const Index b = (ch * h + 2 * i) * w + 2 * j;
        y[(ch * ho + i) * wo + j] = Scalar(0.25) * (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]);
      }
  return make_result<Scalar>("avg_pool2", Shape{c, ho, wo}, std::move(y), {&x},
                             [x, c, h, w, ho, wo](const Array<Scalar>& g) {
                               Array<Scalar> gx = Array<Scalar>::Zero(x.size());
                               for (Index ch = 0; ch < c; ++ch)
                                 for (Index i = 0; i < ho; ++i)
                                   for (Index j = 0; j < wo; ++j) {
                                     const Index b = (ch * h + 2 * i) * w + 2 * j;
                                     const Scalar v = Scalar(0.25) * g[(ch * ho + i) * wo + j];
                                     gx[b] += v;
                                     gx[b + 1] += v;
                                     gx[b + w] += v;
                                     gx[b + w + 1] += v;
                                   }
                               push(x, gx);
                             });
}

// ---------------------------------------------------------------------------
// Fused kernels

template <class Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& x, const Tensor<Scalar>& delta, const Tensor<Scalar>& a,
                              const Tensor<Scalar>& b, const Tensor<Scalar>& c, const Tensor<Scalar>& d) {
  require_rank("selective_scan x", x.shape(), 2);
  const Index n = x.dim(0), e = x.dim(1);
  require_rank("selective_scan A", a.shape(), 2);
  const Index s = a.dim(1);
  if (n < 1) throw std::invalid_argument("selective_scan: empty sequence");
  if (delta.shape() != x.shape() || a.dim(0) != e || b.shape() != Shape{n, s} || c.shape() != Shape{n, s} ||
      d.size() != e) {
    throw std::invalid_argument("selective_scan: inconsistent parameter shapes");
  }
  if (!a.value().allFinite() || !d.value().allFinite() || !delta.value().allFinite() ||
      !b.value().allFinite() || !c.value().allFinite()) {
    throw NonFiniteError("selective_scan: non-finite parameters");
  }
  const auto& xv = x.value();
  const auto& dv = delta.value();
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto& cv = c.value();
  const auto& skip = d.value();

  const bool record = Tape<Scalar>::current() != nullptr &&
                      (x.requires_grad() || delta.requires_grad() || a.requires_grad() || b.requires_grad() ||
                       c.requires_grad() || d.requires_grad());
  // states[t] holds h_t (E x S) when recording.
  Array<Scalar> states;
  if (record) states.resize(n * e * s);
  Array<Scalar> h = Array<Scalar>::Zero(e * s);
  Array<Scalar> y(n * e);
  for (Index t = 0; t < n; ++t) {
    const Scalar* bt = bv.data() + t * s;
    const Scalar* ct = cv.data() + t * s;
    for (Index ch = 0; ch < e; ++ch) {
      const Scalar dt = dv[t * e + ch];
      const Scalar xt = xv[t * e + ch];
      Scalar* hc = h.data() + ch * s;
      const Scalar* ac = av.data() + ch * s;
      Scalar acc = 0;
      for (Index k = 0; k < s; ++k) {
        hc[k] = std::exp(dt * ac[k]) * hc[k] + dt * bt[k] * xt;
        acc += ct[k] * hc[k];
      }
      y[t * e + ch] = acc + skip[ch] * xt;
    }
    if (record) states.segment(t * e * s, e * s) = h;
  }

  return make_result<Scalar>(
      "selective_scan", Shape{n, e}, std::move(y), {&x, &delta, &a, &b, &c, &d},
      [x, delta, a, b, c, d, states = std::move(states), n, e, s](const Array<Scalar>& g) {
        const auto& xv = x.value();
        const auto& dv = delta.value();
        const auto& av = a.value();
        const auto& bv = b.value();
        const auto& cv = c.value();
        const auto& skip = d.value();
        Array<Scalar> gx = Array<Scalar>::Zero(n * e);
        Array<Scalar> gdelta = Array<Scalar>::Zero(n * e);
        Array<Scalar> ga = Array<Scalar>::Zero(e * s);
        Array<Scalar> gb = Array<Scalar>::Zero(n * s);
        Array<Scalar> gc = Array<Scalar>::Zero(n * s);
        Array<Scalar> gd = Array<Scalar>::Zero(e);
        Array<Scalar> dh = Array<Scalar>::Zero(e * s);
        for (Index t = n; t-- > 0;) {
          const Scalar* ht = states.data() + t * e * s;
          const Scalar* hprev = t > 0 ? states.data() + (t - 1) * e * s : nullptr;
          const Scalar* bt = bv.data() + t * s;
          const Scalar* ct = cv.data() + t * s;
          for (Index ch = 0; ch < e; ++ch) {
            const Scalar gy = g[t * e + ch];
            const Scalar dt = dv[t * e + ch];
            const Scalar xt = xv[t * e + ch];
            gd[ch] += gy * xt;
            Scalar gxt = gy * skip[ch];
            Scalar gdt = 0;
            Scalar* dhc = dh.data() + ch * s;
            const Scalar* ac = av.data() + ch * s;
            for (Index k = 0; k < s; ++k) {
              const Scalar hv = ht[ch * s + k];
              gc[t * s + k] += gy * hv;
              dhc[k] += gy * ct[k];
              const Scalar decay = std::exp(dt * ac[k]);
              const Scalar hp = hprev ? hprev[ch * s + k] : Scalar(0);
              const Scalar gdecay = dhc[k] * hp * decay;
              gdt += gdecay * ac[k] + dhc[k] * bt[k] * xt;
              ga[ch * s + k] += gdecay * dt;
              gb[t * s + k] += dhc[k] * dt * xt;
              gxt += dhc[k] * dt * bt[k];
              dhc[k] *= decay;
            }
            gx[t * e + ch] = gxt;
            gdelta[t * e + ch] = gdt;
          }
        }
        push(x, gx);
        push(delta, gdelta);
        push(a, ga);
        push(b, gb);
        push(c, gc);
        push(d, gd);
      });
}

template <class Scalar>
Tensor<Scalar> window_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                Index height, Index width, Index window) {
  require_rank("window_attention", q.shape(), 2);
  const Index n = q.dim(0), dim = q.dim(1);
  if (n != height * width || k.shape() != q.shape() || v.dim(0) != n) {
    throw std::invalid_argument("window_attention: shape mismatch");
  }
  if (window < 1) throw std::invalid_argument("window_attention: window must be positive");
  const Index dv = v.dim(1);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dim));

  struct Win {
    std::vector<Index> tokens;
    RowMatrix<Scalar> probs;
  };
  std::vector<Win> wins;
  for (Index wy = 0; wy < height; wy += window)
    for (Index wx = 0; wx < width; wx += window) {
      Win wn;
      for (Index y = wy; y < std::min(height, wy + window); ++y)
        for (Index x = wx; x < std::min(width, wx + window); ++x) wn.tokens.push_back(y * width + x);
      wins.push_back(std::move(wn));
    }

  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  CMap qm(q.value().data(), n, dim), km(k.value().data(), n, dim), vm(v.value().data(), n, dv);
  Array<Scalar> out(n * dv);
  Eigen::Map<RowMatrix<Scalar>> om(out.data(), n, dv);
  for (auto& wn : wins) {
    const Index m = static_cast<Index>(wn.tokens.size());
    RowMatrix<Scalar> qw(m, dim), kw(m, dim), vw(m, dv);
    for (Index i = 0; i < m; ++i) {
      qw.row(i) = qm.row(wn.tokens[static_cast<std::size_t>(i)]);
      kw.row(i) = km.row(wn.tokens[static_cast<std::size_t>(i)]);
      vw.row(i) = vm.row(wn.tokens[static_cast<std::size_t>(i)]);
    }
    RowMatrix<Scalar> sc = (qw * kw.transpose()) * scale;
    for (Index i = 0; i < m; ++i) {
      const Scalar mx = sc.row(i).maxCoeff();
      sc.row(i) = (sc.row(i).array() - mx).exp().matrix();
      sc.row(i) /= sc.row(i).sum();
    }
    RowMatrix<Scalar> ow = sc * vw;
    for (Index i = 0; i < m; ++i) om.row(wn.tokens[static_cast<std::size_t>(i)]) = ow.row(i);
    wn.probs = std::move(sc);
  }
  return make_result<Scalar>(
      "window_attention", Shape{n, dv}, std::move(out), {&q, &k, &v},
      [q, k, v, wins = std::move(wins), n, dim, dv, scale](const Array<Scalar>& g) {
        CMap qm(q.value().data(), n, dim), km(k.value().data(), n, dim), vm(v.value().data(), n, dv);
        CMap gm(g.data(), n, dv);
        Array<Scalar> gq = Array<Scalar>::Zero(n * dim), gk = Array<Scalar>::Zero(n * dim),
                      gv = Array<Scalar>::Zero(n * dv);
        Eigen::Map<RowMatrix<Scalar>> gqm(gq.data(), n, dim), gkm(gk.data(), n, dim), gvm(gv.data(), n, dv);
        for (const auto& wn : wins) {
          const Index m = static_cast<Index>(wn.tokens.size());
          RowMatrix<Scalar> qw(m, dim), kw(m, dim), vw(m, dv), gw(m, dv);
          for (Index i = 0; i < m; ++i) {
            const Index tkn = wn.tokens[static_cast<std::size_t>(i)];
            qw.row(i) = qm.row(tkn);
            kw.row(i) = km.row(tkn);
            vw.row(i) = vm.row(tkn);
            gw.row(i) = gm.row(tkn);
          }
          const RowMatrix<Scalar>& p = wn.probs;
          RowMatrix<Scalar> gvw = p.transpose() * gw;
          RowMatrix<Scalar> gp = gw * vw.transpose();
          RowMatrix<Scalar> gs(m, m);
          for (Index i = 0; i < m; ++i) {
            const Scalar dot = (gp.row(i).array() * p.row(i).array()).sum();
            gs.row(i) = (p.row(i).array() * (gp.row(i).array() - dot)).matrix();
          }
          gs *= scale;
          RowMatrix<Scalar> gqw = gs * kw;
          RowMatrix<Scalar> gkw = gs.transpose() * qw;
          for (Index i = 0; i < m; ++i) {
            const Index tkn = wn.tokens[static_cast<std::size_t>(i)];
            gqm.row(tkn) += gqw.row(i);
            gkm.row(tkn) += gkw.row(i);
            gvm.row(tkn) += gvw.row(i);
          }
        }
        push(q, gq);
        push(k, gk);
        push(v, gv);
      });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

template <class Scalar>
Tensor<Scalar> gaussian_likelihood(const Tensor<Scalar>& y, const Tensor<Scalar>& mu, const Tensor<Scalar>& sigma,
                                   Scalar p_min) {
  if (mu.shape() != y.shape() || sigma.shape() != y.shape()) {
    throw std::invalid_argument("gaussian_likelihood: shape mismatch");
  }
  const Index n = y.size();
  const auto& yv = y.value();
  const auto& mv = mu.value();
  const auto& sv = sigma.value();
  Array<Scalar> p(n);
  for (Index i = 0; i < n; ++i) {
    // Evaluate on the lower tail for accuracy; the bin mass is symmetric in |y - mu|.
    const double dist = std::abs(static_cast<double>(yv[i]) - static_cast<double>(mv[i]));
    const double s = static_cast<double>(sv[i]);
    const double mass = normal_cdf((0.5 - dist) / s) - normal_cdf((-0.5 - dist) / s);
    p[i] = static_cast<Scalar>(std::max(mass, static_cast<double>(p_min)));
  }
  Array<Scalar> pk = p;
  return make_result<Scalar>(
      "gaussian_likelihood", y.shape(), std::move(p), {&y, &mu, &sigma},
      [y, mu, sigma, pk = std::move(pk), p_min](const Array<Scalar>& g) {
        const Index n = y.size();
        const auto& yv = y.value();
        const auto& mv = mu.value();
        const auto& sv = sigma.value();
        Array<Scalar> gy = Array<Scalar>::Zero(n), gs = Array<Scalar>::Zero(n);
        constexpr double kInvSqrt2Pi = 0.3989422804014327;
        for (Index i = 0; i < n; ++i) {
          if (pk[i] <= p_min) continue;
          const double s = sv[i];
          const double upper = (yv[i] - mv[i] + 0.5) / s;
          const double lower = (yv[i] - mv[i] - 0.5) / s;
          const double pu = kInvSqrt2Pi * std::exp(-0.5 * upper * upper);
          const double pl = kInvSqrt2Pi * std::exp(-0.5 * lower * lower);
          gy[i] = static_cast<Scalar>(g[i] * (pu - pl) / s);
          gs[i] = static_cast<Scalar>(g[i] * (-upper * pu + lower * pl) / s);
        }
        push(y, gy);
        push<Scalar>(mu, -gy);
        push(sigma, gs);
      });
}

#define SAMIC_INSTANTIATE_OPS(T)                                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                          \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                          \
  template Tensor<T> neg(const Tensor<T>&);                                                                    \
  template Tensor<T> exp(const Tensor<T>&);                                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
  template Tensor<T> silu(const Tensor<T>&);                                                                   \
  template Tensor<T> softplus(const Tensor<T>&);                                                               \
  template Tensor<T> tanh(const Tensor<T>&);                                                                   \
  template Tensor<T> square(const Tensor<T>&);                                                                 \
  template Tensor<T> sqrt(const Tensor<T>&);                                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                                   \
  template Tensor<T> pow(const Tensor<T>&, T);                                                                 \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                            \
  template Tensor<T> lower_bound(const Tensor<T>&, T);                                                         \
  template Tensor<T> straight_through(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                                   \
  template Tensor<T> sum_axis(const Tensor<T>&, int);                                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                                              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                               \
  template Tensor<T> slice(const Tensor<T>&, int, Index, Index);                                               \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const Index>);                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> channel_matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> normalize_rows(const Tensor<T>&, T);                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, std::span<const T>);    \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Padding);          \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                                                     \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                              \
  template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                    const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> window_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, Index,      \
                                      Index);                                                                  \
  template Tensor<T> gaussian_likelihood(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

SAMIC_INSTANTIATE_OPS(float)
SAMIC_INSTANTIATE_OPS(double)

}  // namespace samic
