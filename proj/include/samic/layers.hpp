#pragma once

#include "samic/ops.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace samic {

using Rng = std::mt19937_64;

/// Named parameter handles. Handles share storage with the owning module.
using ParamList = std::vector<std::pair<std::string, Tensord>>;

Tensord uniform_init(Shape shape, double bound, Rng& rng);
Tensord normal_init(Shape shape, double stddev, Rng& rng);

struct Conv2dLayer {
  Tensord weight;  // cout x cin x k x k
  Tensord bias;    // cout
  int stride = 1;

  static Conv2dLayer make(Index cin, Index cout, Index k, int stride, Rng& rng);
  Tensord operator()(const Tensord& x) const { return conv2d(x, weight, bias, stride); }
  void collect(const std::string& prefix, ParamList& out) const;
  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }
};

/// Row-vector affine map on an N x F tensor: x W + b.
struct LinearLayer {
  Tensord weight;  // fin x fout
  Tensord bias;    // 1 x fout, undefined when disabled

  static LinearLayer make(Index fin, Index fout, Rng& rng, bool with_bias = true);
  Tensord operator()(const Tensord& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNormParams {
  Tensord gamma, beta;  // 1 x C
  static LayerNormParams make(Index c);
  Tensord operator()(const Tensord& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// C x H x W map as an (H*W) x C token matrix and back.
Tensord to_tokens(const Tensord& map);
Tensord from_tokens(const Tensord& tokens, Index height, Index width);

}  // namespace samic
