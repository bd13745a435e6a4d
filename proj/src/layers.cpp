#include "samic/layers.hpp"

#include <cmath>

namespace samic {

Tensord uniform_init(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensord t(std::move(shape));
  for (auto& v : t.mutable_value()) v = dist(rng);
  return t;
}

Tensord normal_init(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensord t(std::move(shape));
  for (auto& v : t.mutable_value()) v = dist(rng);
  return t;
}

Conv2dLayer Conv2dLayer::make(Index cin, Index cout, Index k, int stride, Rng& rng) {
  Conv2dLayer c;
  c.weight = uniform_init({cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin * k * k)), rng);
  c.bias = Tensord({cout});
  c.stride = stride;
  return c;
}

void Conv2dLayer::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LinearLayer LinearLayer::make(Index fin, Index fout, Rng& rng, bool with_bias) {
  LinearLayer l;
  l.weight = uniform_init({fin, fout}, 1.0 / std::sqrt(static_cast<double>(fin)), rng);
  if (with_bias) l.bias = Tensord({1, fout});
  return l;
}

Tensord LinearLayer::operator()(const Tensord& x) const {
  Tensord y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void LinearLayer::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNormParams LayerNormParams::make(Index c) {
  return {Tensord::constant({1, c}, 1.0), Tensord({1, c})};
}

void LayerNormParams::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Tensord to_tokens(const Tensord& map) {
  const Index c = map.dim(0);
  return transpose(reshape(map, {c, map.size() / c}));
}

Tensord from_tokens(const Tensord& tokens, Index height, Index width) {
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

}  // namespace samic
