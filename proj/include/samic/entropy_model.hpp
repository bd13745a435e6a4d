#pragma once

#include "samic/sass.hpp"

#include <Eigen/Core>

namespace samic {

inline constexpr double kSigmaMin = 0.11;
inline constexpr double kLikelihoodFloor = 1.0 / 65536.0;

enum class QuantMode { kTrain, kEval };

/// Eval: round half away from zero, no gradient. Train: x + u with
/// u ~ U[-0.5, 0.5) drawn from `seed`, identity gradient.
Tensord quantize(const Tensord& x, QuantMode mode, std::uint64_t seed);
/// Rounds in the forward pass, identity gradient.
Tensord ste_round(const Tensord& x);

/// Per-channel monotone CDF built from 1-3-3-3-1 affine maps with positive
/// weights and tanh gates, squashed by a sigmoid.
struct FactorizedPrior {
  std::vector<Tensord> matrices;  // C x out x in, passed through softplus
  std::vector<Tensord> biases;    // C x out x 1
  std::vector<Tensord> factors;   // C x out x 1, gates for all but the last layer

  static FactorizedPrior make(Index channels, Rng& rng);
  Index channels() const { return matrices.front().dim(0); }
  void collect(const std::string& prefix, ParamList& out) const;

  /// Logits of the CDF at v (C x 1 x M).
  Tensord logits_cumulative(const Tensord& v) const;
  /// Unit-bin probability of every element of zhat (C x h x w), floored at p_min.
  Tensord likelihood(const Tensord& zhat) const;
  /// CDF at the given points for every channel (C x points), no gradient.
  Eigen::ArrayXXd cdf(const std::vector<double>& points) const;
};

/// Single-head attention inside non-overlapping windows with a residual path.
struct WindowAttentionLayer {
  LinearLayer q, k, v, o;
  Index window = 8;

  static WindowAttentionLayer make(Index channels, Index window, Rng& rng);
  Tensord operator()(const Tensord& map) const;  // C x H x W -> C x H x W
  void collect(const std::string& prefix, ParamList& out) const;
};

struct EntropyConfig {
  Index latent_channels = 48;
  Index psi_channels = 48;
  Index hyper_channels = 16;
  int chunks = 4;
  Index context_channels = 32;
  Index hidden_channels = 64;
  Index window = 8;
  ClusterConfig cluster;

  Index chunk_size() const { return latent_channels / chunks; }
  void validate() const;
};

struct ChunkModel {
  Tensord constant_context;  // context_channels x 1 x 1, used by chunk 0
  Conv2dLayer channel_in;    // j * chunk -> context_channels (j >= 1)
  SambBlock channel_samb;    // (j >= 1)
  Conv2dLayer spatial_conv;  // chunk -> context_channels, 5x5 checkerboard-masked
  WindowAttentionLayer spatial_attn;
  Conv2dLayer agg_in, agg_mid;
  WindowAttentionLayer agg_attn;
  Conv2dLayer agg_out;  // -> 2 * chunk (mu, log sigma)
};

struct ContextOptions {
  bool training = false;
  std::uint64_t seed = 0;
};

struct GaussianParams {
  Tensord mu, sigma;  // latent_channels x h x w
};

/// 1 where (row + col) is even.
std::vector<double> anchor_mask(Index height, Index width);
/// Copies x at the positions where mask is 1 and writes +0 elsewhere; the plane mask broadcasts over channels.
Tensord keep_where(const Tensord& x, const std::vector<double>& mask);
/// Takes `on` where mask is 1 and `off` elsewhere.
Tensord select_where(const Tensord& on, const Tensord& off, const std::vector<double>& mask);

struct EntropyModel {
  EntropyConfig config;
  FactorizedPrior prior;
  std::vector<ChunkModel> chunk_models;

  static EntropyModel make(const EntropyConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;

  /// Context from the fully decoded chunks < j (decoded: j*chunk x h x w; ignored for j = 0).
  Tensord channel_context(int j, const Tensord& decoded, Index height, Index width,
                          const ContextOptions& options) const;
  /// Context for the non-anchor positions of chunk j from its anchors (anchors_only has zeros elsewhere).
  Tensord spatial_context(int j, const Tensord& anchors_only) const;
  /// (mu, sigma) for chunk j; sigma >= kSigmaMin.
  std::pair<Tensord, Tensord> aggregate_params(int j, const Tensord& channel_ctx, const Tensord& spatial_ctx,
                                               const Tensord& psi) const;
  /// Both passes for every chunk, evaluated in the decoder's order from a fully known yhat.
  GaussianParams predict(const Tensord& yhat, const Tensord& psi, const ContextOptions& options) const;
};

/// Bits per pixel: sum(-log2 p) over both likelihood tensors divided by pixel count.
Tensord estimate_rate(const Tensord& likelihood_y, const Tensord& likelihood_z, double pixels);

}  // namespace samic
