#pragma once

#include "samic/coder.hpp"
#include "samic/entropy_model.hpp"
#include "samic/svd_rrm.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>

namespace samic {

inline constexpr std::array<double, 4> kLambdaGrid = {0.0035, 0.0067, 0.013, 0.025};
inline constexpr Index kPadMultiple = 64;

/// A bitstream whose header does not match the loaded model.
class ModelMismatch : public CorruptStream {
 public:
  using CorruptStream::CorruptStream;
};

struct ModelConfig {
  std::string preset = "toy";
  /// widths[0..2]: analysis stages (mirrored by synthesis); widths[3]: hyper-synthesis output;
  /// widths[4]: hyper hidden width; widths[5]: entropy aggregation width.
  std::array<Index, 6> widths = {32, 32, 32, 48, 32, 48};
  Index latent_channels = 48;
  Index hyper_channels = 16;
  int clusters = 16;
  Index semantic_dim = 8;
  double temperature = 0.1;
  Index ssm_state = 8;
  Index ssm_expand = 2;
  int samb_per_stage = 1;  // SAMB blocks after every resampling stage of the analysis/synthesis transforms
  int chunks = 4;
  Index context_channels = 16;
  Index window = 8;
  int lambda_index = 0;
  double lambda_override = -1.0;  // used instead of the grid when >= 0
  double beta = 3.5;
  bool use_rrm = true;
  std::uint64_t seed = 0;

  static ModelConfig toy();
  static ModelConfig paper();
  double lambda() const;
  void validate() const;
  EntropyConfig entropy_config() const;
  ClusterConfig cluster_config() const;
  /// Canonical JSON (sorted keys, fixed formatting).
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct Model {
  ModelConfig config;
  std::array<Conv2dLayer, 4> analysis_conv;
  std::array<std::vector<SambBlock>, 3> analysis_samb;
  RrmParams rrm;
  std::array<Conv2dLayer, 3> hyper_analysis;
  std::array<Conv2dLayer, 3> hyper_synthesis;
  std::array<Conv2dLayer, 4> synthesis_conv;
  std::array<std::vector<SambBlock>, 3> synthesis_samb;
  EntropyModel entropy;
  std::int64_t step = 0;

  /// Seeded initialization. With `calibrate`, the RRM threshold starts at 1% of the
  /// mean singular value of the analysis features of a fixed probe image.
  static Model make(const ModelConfig& config, bool calibrate = true);
  ParamList parameters() const;
  Index parameter_count() const;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t seed = 0;
};

/// 3 x H x W (H, W multiples of 16) -> latent_channels x H/16 x W/16, before RRM.
Tensord analysis_features(const Model& m, const Tensord& x, const ForwardOptions& opt = {});
/// analysis_features followed by RRM when enabled.
Tensord analysis_transform(const Model& m, const Tensord& x, const ForwardOptions& opt = {}, RrmTrace* trace = nullptr);
/// Latent -> image, clamped to [0, 1].
Tensord synthesis_transform(const Model& m, const Tensord& yhat, const ForwardOptions& opt = {});
Tensord hyper_analysis(const Model& m, const Tensord& y);
Tensord hyper_synthesis(const Model& m, const Tensord& zhat);

struct LossTerms {
  Tensord loss, rate, distortion, perceptual;
};

/// loss = lambda * rate + MSE + beta * (1 - MS-SSIM).
LossTerms rd_loss(const Tensord& x, const Tensord& x_hat, const Tensord& rate, double lambda, double beta);

struct ForwardResult {
  Tensord y, y_tilde, z_tilde, mu, sigma, x_hat;
  LossTerms terms;
};

/// Full differentiable pass. Training: noise proxy for both latents; eval: rounding.
ForwardResult forward(const Model& m, const Tensord& x, const ForwardOptions& opt);

Tensord mse(const Tensord& a, const Tensord& b);
/// 5-scale MS-SSIM with the standard weights, per channel then averaged; differentiable.
Tensord ms_ssim(const Tensord& a, const Tensord& b);
/// -10 log10(MSE), 100 dB when MSE = 0.
double psnr(const Tensord& a, const Tensord& b);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 1.0;
  std::int64_t t = 0;
  std::vector<Array<double>> m, v;
};

struct StepReport {
  double loss = 0, rate = 0, distortion = 0, perceptual = 0, grad_norm = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One clipped Adam update on a single image. Parameters are untouched when the loss is non-finite.
StepReport train_step(Model& m, AdamState& adam, const Tensord& image, std::uint64_t seed);

std::vector<std::uint8_t> serialize_checkpoint(const Model& m);
Model deserialize_checkpoint(std::span<const std::uint8_t> bytes);
/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// Mirror-reflects a C x H x W image out to the given extents (no gradient).
Tensord reflect_pad(const Tensord& x, Index height, Index width);
Tensord crop(const Tensord& x, Index height, Index width);

struct EncodeResult {
  std::vector<std::uint8_t> bytes;
  Tensord reconstruction;  // g_s(round(y)) cropped to the input size
  double bpp_estimated = 0;  // model rate of the coded symbols
  double bpp_actual = 0;     // payload bits over pixels
};

EncodeResult encode_image(const Model& m, const Tensord& image);
Tensord decode_image(const Model& m, std::span<const std::uint8_t> bytes);

/// Two textured regions split by a random line, values in [0, 1].
Tensord synthetic_two_texture(Index height, Index width, std::uint64_t seed);

struct MetricsRow {
  std::string image;
  double bpp_estimated, bpp_actual, psnr, ms_ssim;
};
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

/// |d(centre latent element, summed over channels) / d(input)| summed over input channels (H x W).
Eigen::ArrayXXd effective_receptive_field(const Model& m, const Tensord& image);
/// Mean absolute correlation of (y - mu) / sigma between positions at horizontal/vertical lag 1..max_lag.
std::vector<double> latent_correlation(const Model& m, const Tensord& image, int max_lag = 8);
/// Scan order chosen by the first analysis SAMB block for this image (eval mode).
SemanticAssignment scan_assignment(const Model& m, const Tensord& image);
/// Lag correlation of an arbitrary C x h x w map.
std::vector<double> lag_correlation(const Tensord& map, int max_lag);

}  // namespace samic
