#include "samic/entropy_model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace samic {

Tensord quantize(const Tensord& x, QuantMode mode, std::uint64_t seed) {
  if (mode == QuantMode::kEval) {
    return Tensord(x.shape(), x.value().unaryExpr([](double v) { return std::round(v); }));
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(-0.5, 0.5);
  Tensord noise(x.shape());
  for (auto& v : noise.mutable_value()) v = unif(rng);
  return add(x, noise);
}

Tensord ste_round(const Tensord& x) {
  return straight_through(Tensord(x.shape(), x.value().unaryExpr([](double v) { return std::round(v); })), x);
}

// ---------------------------------------------------------------------------

FactorizedPrior FactorizedPrior::make(Index channels, Rng& rng) {
  constexpr Index kFilters[] = {1, 3, 3, 3, 1};
  constexpr double kInitScale = 10.0;
  const double scale = std::pow(kInitScale, 1.0 / 4.0);
  FactorizedPrior p;
  std::uniform_real_distribution<double> unif(-0.5, 0.5);
  for (int i = 0; i < 4; ++i) {
    const Index in = kFilters[i], out = kFilters[i + 1];
    p.matrices.push_back(Tensord::constant({channels, out, in}, std::log(std::expm1(1.0 / scale / static_cast<double>(out)))));
    Tensord b({channels, out, 1});
    for (auto& v : b.mutable_value()) v = unif(rng);
    p.biases.push_back(b);
    if (i < 3) p.factors.push_back(Tensord({channels, out, 1}));
  }
  return p;
}

void FactorizedPrior::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    out.emplace_back(prefix + ".matrix" + std::to_string(i), matrices[i]);
    out.emplace_back(prefix + ".bias" + std::to_string(i), biases[i]);
    if (i < factors.size()) out.emplace_back(prefix + ".factor" + std::to_string(i), factors[i]);
  }
}

Tensord FactorizedPrior::logits_cumulative(const Tensord& v) const {
  Tensord x = v;
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    x = add(channel_matmul(softplus(matrices[i]), x), biases[i]);
    if (i < factors.size()) x = add(x, mul(tanh(factors[i]), tanh(x)));
  }
  return x;
}

Tensord FactorizedPrior::likelihood(const Tensord& zhat) const {
  const Index c = zhat.dim(0);
  if (c != channels()) throw std::invalid_argument("factorized prior channel mismatch");
  const Index m = zhat.size() / c;
  Tensord v = reshape(zhat, {c, 1, m});
  Tensord lower = logits_cumulative(add_scalar(v, -0.5));
  Tensord upper = logits_cumulative(add_scalar(v, 0.5));
  // Evaluate on the side of the sigmoid where it is not saturated.
  Tensord sign(lower.shape());
  for (Index i = 0; i < sign.size(); ++i) sign.mutable_value()[i] = lower.value()[i] + upper.value()[i] > 0 ? -1.0 : 1.0;
  Tensord p = mul(sign, sub(sigmoid(mul(sign, upper)), sigmoid(mul(sign, lower))));
  return reshape(lower_bound(p, kLikelihoodFloor), zhat.shape());
}

Eigen::ArrayXXd FactorizedPrior::cdf(const std::vector<double>& points) const {
  NoGradScope<double> off;
  const Index c = channels(), n = static_cast<Index>(points.size());
  Tensord v({c, 1, n});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < n; ++i) v.mutable_value()[ch * n + i] = points[static_cast<std::size_t>(i)];
  Tensord s = sigmoid(logits_cumulative(v));
  Eigen::ArrayXXd out(c, n);
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < n; ++i) out(ch, i) = s.value()[ch * n + i];
  return out;
}

// ---------------------------------------------------------------------------

WindowAttentionLayer WindowAttentionLayer::make(Index channels, Index window, Rng& rng) {
  WindowAttentionLayer l;
  l.q = LinearLayer::make(channels, channels, rng, false);
  l.k = LinearLayer::make(channels, channels, rng, false);
  l.v = LinearLayer::make(channels, channels, rng, false);
  l.o = LinearLayer::make(channels, channels, rng, true);
  l.window = window;
  return l;
}

Tensord WindowAttentionLayer::operator()(const Tensord& map) const {
  const Index h = map.dim(1), w = map.dim(2);
  Tensord t = to_tokens(map);
  Tensord attn = window_attention(q(t), k(t), v(t), h, w, window);
  return from_tokens(add(t, o(attn)), h, w);
}

void WindowAttentionLayer::collect(const std::string& prefix, ParamList& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

void EntropyConfig::validate() const {
  if (chunks < 1 || latent_channels % chunks != 0) {
    throw std::invalid_argument("latent channels must split evenly into chunks");
  }
  if (context_channels < 2 || hidden_channels < 1 || window < 1) throw std::invalid_argument("bad entropy model widths");
  cluster.validate();
}

std::vector<double> anchor_mask(Index height, Index width) {
  std::vector<double> m(static_cast<std::size_t>(height * width));
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c) m[static_cast<std::size_t>(r * width + c)] = (r + c) % 2 == 0 ? 1.0 : 0.0;
  return m;
}

namespace {

std::vector<double> invert_mask(const std::vector<double>& m) {
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] != 0.0 ? 0.0 : 1.0;
  return out;
}

std::vector<double> checkerboard_taps(Index k) {
  std::vector<double> m(static_cast<std::size_t>(k * k));
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) m[static_cast<std::size_t>(i * k + j)] = (i + j) % 2 == 1 ? 1.0 : 0.0;
  return m;
}

}  // namespace

Tensord keep_where(const Tensord& x, const std::vector<double>& mask) {
  const Index plane = static_cast<Index>(mask.size());
  if (plane == 0 || x.size() % plane != 0) throw std::invalid_argument("mask does not tile the tensor");
  Array<double> y(x.size());
  for (Index i = 0; i < x.size(); ++i) y[i] = mask[static_cast<std::size_t>(i % plane)] != 0.0 ? x.value()[i] : 0.0;
  return detail::make_result<double>("keep_where", x.shape(), std::move(y), {&x},
                                     [x, mask, plane](const Array<double>& g) {
                                       Array<double> gx(g.size());
                                       for (Index i = 0; i < g.size(); ++i)
                                         gx[i] = mask[static_cast<std::size_t>(i % plane)] != 0.0 ? g[i] : 0.0;
                                       detail::push_grad<double>(x.storage(), gx);
                                     });
}

Tensord select_where(const Tensord& on, const Tensord& off, const std::vector<double>& mask) {
  if (on.shape() != off.shape()) throw std::invalid_argument("select_where shape mismatch");
  const Index plane = static_cast<Index>(mask.size());
  if (plane == 0 || on.size() % plane != 0) throw std::invalid_argument("mask does not tile the tensor");
  Array<double> y(on.size());
  for (Index i = 0; i < on.size(); ++i)
    y[i] = mask[static_cast<std::size_t>(i % plane)] != 0.0 ? on.value()[i] : off.value()[i];
  return detail::make_result<double>("select_where", on.shape(), std::move(y), {&on, &off},
                                     [on, off, mask, plane](const Array<double>& g) {
                                       Array<double> gon(g.size()), goff(g.size());
                                       for (Index i = 0; i < g.size(); ++i) {
                                         const bool m = mask[static_cast<std::size_t>(i % plane)] != 0.0;
                                         gon[i] = m ? g[i] : 0.0;
                                         goff[i] = m ? 0.0 : g[i];
                                       }
                                       detail::push_grad<double>(on.storage(), gon);
                                       detail::push_grad<double>(off.storage(), goff);
                                     });
}

EntropyModel EntropyModel::make(const EntropyConfig& config, Rng& rng) {
  config.validate();
  EntropyModel m;
  m.config = config;
  m.prior = FactorizedPrior::make(config.hyper_channels, rng);
  const Index cs = config.chunk_size(), cc = config.context_channels, hid = config.hidden_channels;
  for (int j = 0; j < config.chunks; ++j) {
    ChunkModel cm;
    cm.constant_context = Tensord({cc, 1, 1});
    if (j > 0) {
      cm.channel_in = Conv2dLayer::make(j * cs, cc, 1, 1, rng);
      cm.channel_samb = SambBlock::make(cc, config.cluster, rng);
    }
    cm.spatial_conv = Conv2dLayer::make(cs, cc, 5, 1, rng);
    cm.spatial_attn = WindowAttentionLayer::make(cc, config.window, rng);
    cm.agg_in = Conv2dLayer::make(2 * cc + config.psi_channels, hid, 1, 1, rng);
    cm.agg_mid = Conv2dLayer::make(hid, hid, 1, 1, rng);
    cm.agg_attn = WindowAttentionLayer::make(hid, config.window, rng);
    cm.agg_out = Conv2dLayer::make(hid, 2 * cs, 1, 1, rng);
    m.chunk_models.push_back(std::move(cm));
  }
  return m;
}

void EntropyModel::collect(const std::string& prefix, ParamList& out) const {
  prior.collect(prefix + ".prior", out);
  for (std::size_t j = 0; j < chunk_models.size(); ++j) {
    const auto& cm = chunk_models[j];
    const std::string p = prefix + ".chunk" + std::to_string(j);
    if (j == 0) {
      out.emplace_back(p + ".constant_context", cm.constant_context);
    } else {
      cm.channel_in.collect(p + ".channel_in", out);
      cm.channel_samb.collect(p + ".channel_samb", out);
    }
    cm.spatial_conv.collect(p + ".spatial_conv", out);
    cm.spatial_attn.collect(p + ".spatial_attn", out);
    cm.agg_in.collect(p + ".agg_in", out);
    cm.agg_mid.collect(p + ".agg_mid", out);
    cm.agg_attn.collect(p + ".agg_attn", out);
    cm.agg_out.collect(p + ".agg_out", out);
  }
}

Tensord EntropyModel::channel_context(int j, const Tensord& decoded, Index height, Index width,
                                      const ContextOptions& options) const {
  if (j < 0 || j >= config.chunks) throw std::out_of_range("chunk index out of range");
  const auto& cm = chunk_models[static_cast<std::size_t>(j)];
  if (j == 0) return add(cm.constant_context, Tensord({config.context_channels, height, width}));
  if (decoded.dim(0) != j * config.chunk_size() || decoded.dim(1) != height || decoded.dim(2) != width) {
    throw std::invalid_argument("channel context expects the chunks decoded so far, got " + to_string(decoded.shape()));
  }
  SambOptions so;
  so.training = options.training;
  so.seed = options.seed * 1315423911ULL + static_cast<std::uint64_t>(j);
  return samb_forward(cm.channel_in(decoded), cm.channel_samb, so);
}

Tensord EntropyModel::spatial_context(int j, const Tensord& anchors_only) const {
  const auto& cm = chunk_models.at(static_cast<std::size_t>(j));
  static const std::vector<double> taps = checkerboard_taps(5);
  Tensord ctx = conv2d(anchors_only, cm.spatial_conv.weight, cm.spatial_conv.bias, 1, std::span<const double>(taps));
  ctx = cm.spatial_attn(ctx);
  return keep_where(ctx, invert_mask(anchor_mask(anchors_only.dim(1), anchors_only.dim(2))));
}

std::pair<Tensord, Tensord> EntropyModel::aggregate_params(int j, const Tensord& channel_ctx, const Tensord& spatial_ctx,
                                                           const Tensord& psi) const {
  const auto& cm = chunk_models.at(static_cast<std::size_t>(j));
  if (channel_ctx.dim(1) != psi.dim(1) || channel_ctx.dim(2) != psi.dim(2) || spatial_ctx.shape() != channel_ctx.shape()) {
    throw std::invalid_argument("context maps are not aligned");
  }
  Tensord x = concat<double>({channel_ctx, spatial_ctx, psi}, 0);
  Tensord h = silu(cm.agg_in(x));
  h = silu(cm.agg_mid(h));
  h = cm.agg_attn(h);
  Tensord out = cm.agg_out(h);
  const Index cs = config.chunk_size();
  return {slice(out, 0, 0, cs), lower_bound(exp(slice(out, 0, cs, 2 * cs)), kSigmaMin)};
}

GaussianParams EntropyModel::predict(const Tensord& yhat, const Tensord& psi, const ContextOptions& options) const {
  const Index h = yhat.dim(1), w = yhat.dim(2), cs = config.chunk_size();
  if (yhat.dim(0) != config.latent_channels) throw std::invalid_argument("latent channel mismatch");
  const auto anchors = anchor_mask(h, w);
  std::vector<Tensord> mus, sigmas;
  for (int j = 0; j < config.chunks; ++j) {
    Tensord decoded = j > 0 ? slice(yhat, 0, 0, j * cs) : Tensord{};
    Tensord ch = channel_context(j, decoded, h, w, options);
    auto [mu_a, sigma_a] = aggregate_params(j, ch, Tensord({config.context_channels, h, w}), psi);
    Tensord current = slice(yhat, 0, j * cs, (j + 1) * cs);
    Tensord sp = spatial_context(j, keep_where(current, anchors));
    auto [mu_n, sigma_n] = aggregate_params(j, ch, sp, psi);
    mus.push_back(select_where(mu_a, mu_n, anchors));
    sigmas.push_back(select_where(sigma_a, sigma_n, anchors));
  }
  return {concat(mus, 0), concat(sigmas, 0)};
}

Tensord estimate_rate(const Tensord& likelihood_y, const Tensord& likelihood_z, double pixels) {
  Tensord total = add(sum(log(likelihood_y)), sum(log(likelihood_z)));
  return mul_scalar(total, -1.0 / (std::numbers::ln2 * pixels));
}

}  // namespace samic
