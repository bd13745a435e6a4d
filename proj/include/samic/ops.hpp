#pragma once

#include "samic/tensor.hpp"

#include <span>
#include <vector>

namespace samic {

// Elementwise. Binary ops broadcast numpy-style (right-aligned, extents equal or 1).
template <class Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <class Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <class Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <class Scalar> Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <class Scalar> Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar s);
template <class Scalar> Tensor<Scalar> mul_scalar(const Tensor<Scalar>& x, Scalar s);

template <class Scalar> Tensor<Scalar> neg(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> exp(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> log(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> silu(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> softplus(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> tanh(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> square(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> sqrt(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& x);
/// x^p for x > 0.
template <class Scalar> Tensor<Scalar> pow(const Tensor<Scalar>& x, Scalar p);
/// Clamp; gradient passes where lo < x < hi.
template <class Scalar> Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi);
/// max(x, lo); gradient passes where x > lo.
template <class Scalar> Tensor<Scalar> lower_bound(const Tensor<Scalar>& x, Scalar lo);
/// Forward value of `hard`, gradient routed to `soft` (straight-through estimator).
template <class Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& hard, const Tensor<Scalar>& soft);

// Reductions.
template <class Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <class Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& x);
/// Sum over one axis, keeping it with extent 1.
template <class Scalar> Tensor<Scalar> sum_axis(const Tensor<Scalar>& x, int axis);

// Shape manipulation.
template <class Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);
template <class Scalar> Tensor<Scalar> transpose(const Tensor<Scalar>& x);  // rank 2
template <class Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);
template <class Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index begin, Index end);
/// out[i] = x[perm[i]] for rows of an N x C tensor; perm must be a bijection on [0, N).
template <class Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> perm);

// Linear algebra.
template <class Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// Batched per-channel product: (C x F x G) * (C x G x M) -> C x F x M.
template <class Scalar>
Tensor<Scalar> channel_matmul(const Tensor<Scalar>& w, const Tensor<Scalar>& x);

// Normalization.
template <class Scalar> Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis);
/// Layer norm over the last axis of an N x C tensor; gamma, beta are 1 x C.
template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5));
/// Row-wise x / (||x|| + eps) for an N x C tensor.
template <class Scalar>
Tensor<Scalar> normalize_rows(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-8));

// Convolution on C x H x W maps.

/// Dense 2-D convolution with zero padding (k - 1) / 2. The kernel is C' x C x k x k, k odd.
/// A non-empty k*k `mask` (row-major, entries 0/1) zeroes kernel taps before use.
/// `bias` may be an undefined tensor.
template <class Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias = {}, int stride = 1,
                      std::span<const Scalar> mask = {});

enum class Padding { kSame, kValid };

/// Per-channel convolution; kernel is C x kh x kw with odd extents for kSame.
template <class Scalar>
Tensor<Scalar> depthwise_conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                                const Tensor<Scalar>& bias = {}, Padding padding = Padding::kSame);

/// (C*r*r) x H x W -> C x (H*r) x (W*r).
template <class Scalar> Tensor<Scalar> pixel_shuffle(const Tensor<Scalar>& x, int r);
/// 2x2 average pooling, odd trailing row/column dropped.
template <class Scalar> Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x);

// Fused kernels with hand-written backward rules.

/// Selective state-space recurrence over N steps and E channels with state size S:
///   h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * x_t,   y_t = C_t . h_t + D * x_t
/// x, delta: N x E; A: E x S; B, C: N x S; D: 1 x E.
template <class Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& x, const Tensor<Scalar>& delta,
                              const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                              const Tensor<Scalar>& c, const Tensor<Scalar>& d);

/// Single-head attention within non-overlapping window x window tiles of an
/// H x W token grid (raster order). q, k, v: (H*W) x D.
template <class Scalar>
Tensor<Scalar> window_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                const Tensor<Scalar>& v, Index height, Index width,
                                Index window);

/// Probability mass of the unit bin around y under N(mu, sigma^2), floored at p_min.
template <class Scalar>
Tensor<Scalar> gaussian_likelihood(const Tensor<Scalar>& y, const Tensor<Scalar>& mu,
                                   const Tensor<Scalar>& sigma, Scalar p_min);

// Operator sugar.
template <class Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <class Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <class Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <class Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <class Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& x) { return neg(x); }

/// Standard normal CDF.
double normal_cdf(double x);

/// Checks that perm is a bijection on [0, n); throws std::invalid_argument otherwise.
void check_permutation(std::span<const Index> perm, Index n);
std::vector<Index> invert_permutation(std::span<const Index> perm);

}  // namespace samic
