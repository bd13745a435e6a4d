#include "samic/codec.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

namespace samic {

namespace {

constexpr std::uint64_t kProbeSeed = 0x5eed;
constexpr double kMsSsimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

SambOptions samb_options(const ForwardOptions& opt, std::uint64_t block) {
  SambOptions so;
  so.training = opt.training;
  so.seed = opt.seed * 0x9E3779B97F4A7C15ULL + block;
  return so;
}

Index pad_to(Index n) { return (n + kPadMultiple - 1) / kPadMultiple * kPadMultiple; }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.preset = "paper";
  c.widths = {128, 128, 128, 192, 128, 192};
  c.latent_channels = 192;
  c.hyper_channels = 64;
  c.clusters = 16;
  c.semantic_dim = 16;
  c.ssm_state = 16;
  c.context_channels = 128;
  c.samb_per_stage = 21;
  return c;
}

double ModelConfig::lambda() const {
  if (lambda_override >= 0.0) return lambda_override;
  return kLambdaGrid.at(static_cast<std::size_t>(lambda_index));
}

void ModelConfig::validate() const {
  for (Index w : widths)
    if (w <= 0) throw std::invalid_argument("model widths must be positive");
  if (latent_channels <= 0 || hyper_channels <= 0) throw std::invalid_argument("latent widths must be positive");
  if (lambda_index < 0 || lambda_index > 3) throw std::invalid_argument("lambda index must be in 0..3");
  if (clusters < 1 || clusters > 255 || chunks < 1 || chunks > 255) throw std::invalid_argument("K and J must fit in a byte");
  if (samb_per_stage < 0) throw std::invalid_argument("samb_per_stage must be non-negative");
  if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
  entropy_config().validate();
}

ClusterConfig ModelConfig::cluster_config() const {
  ClusterConfig c;
  c.clusters = clusters;
  c.semantic_dim = semantic_dim;
  c.temperature = temperature;
  return c;
}

EntropyConfig ModelConfig::entropy_config() const {
  EntropyConfig e;
  e.latent_channels = latent_channels;
  e.psi_channels = widths[3];
  e.hyper_channels = hyper_channels;
  e.chunks = chunks;
  e.context_channels = context_channels;
  e.hidden_channels = widths[5];
  e.window = window;
  e.cluster = cluster_config();
  return e;
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["preset"] = preset;
  j["widths"] = widths;
  j["latent_channels"] = latent_channels;
  j["hyper_channels"] = hyper_channels;
  j["clusters"] = clusters;
  j["semantic_dim"] = semantic_dim;
  j["temperature"] = temperature;
  j["ssm_state"] = ssm_state;
  j["ssm_expand"] = ssm_expand;
  j["samb_per_stage"] = samb_per_stage;
  j["chunks"] = chunks;
  j["context_channels"] = context_channels;
  j["window"] = window;
  j["lambda_index"] = lambda_index;
  j["lambda_override"] = lambda_override;
  j["beta"] = beta;
  j["use_rrm"] = use_rrm;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  j.at("preset").get_to(c.preset);
  j.at("widths").get_to(c.widths);
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("hyper_channels").get_to(c.hyper_channels);
  j.at("clusters").get_to(c.clusters);
  j.at("semantic_dim").get_to(c.semantic_dim);
  j.at("temperature").get_to(c.temperature);
  j.at("ssm_state").get_to(c.ssm_state);
  j.at("ssm_expand").get_to(c.ssm_expand);
  j.at("samb_per_stage").get_to(c.samb_per_stage);
  j.at("chunks").get_to(c.chunks);
  j.at("context_channels").get_to(c.context_channels);
  j.at("window").get_to(c.window);
  j.at("lambda_index").get_to(c.lambda_index);
  j.at("lambda_override").get_to(c.lambda_override);
  j.at("beta").get_to(c.beta);
  j.at("use_rrm").get_to(c.use_rrm);
  j.at("seed").get_to(c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model

Model Model::make(const ModelConfig& config, bool calibrate) {
  config.validate();
  Model m;
  m.config = config;
  Rng rng(config.seed);
  const auto& w = config.widths;
  const Index cy = config.latent_channels, cz = config.hyper_channels;
  const ClusterConfig cluster = config.cluster_config();
  auto samb = [&](Index c) {
    std::vector<SambBlock> blocks;
    for (int i = 0; i < config.samb_per_stage; ++i)
      blocks.push_back(SambBlock::make(c, cluster, rng, config.ssm_expand, config.ssm_state));
    return blocks;
  };

  m.analysis_conv[0] = Conv2dLayer::make(3, w[0], 5, 2, rng);
  m.analysis_samb[0] = samb(w[0]);
  m.analysis_conv[1] = Conv2dLayer::make(w[0], w[1], 3, 2, rng);
  m.analysis_samb[1] = samb(w[1]);
  m.analysis_conv[2] = Conv2dLayer::make(w[1], w[2], 3, 2, rng);
  m.analysis_samb[2] = samb(w[2]);
  m.analysis_conv[3] = Conv2dLayer::make(w[2], cy, 3, 2, rng);

  m.hyper_analysis[0] = Conv2dLayer::make(cy, w[4], 3, 1, rng);
  m.hyper_analysis[1] = Conv2dLayer::make(w[4], w[4], 3, 2, rng);
  m.hyper_analysis[2] = Conv2dLayer::make(w[4], cz, 3, 2, rng);
  m.hyper_synthesis[0] = Conv2dLayer::make(cz, 4 * w[4], 3, 1, rng);
  m.hyper_synthesis[1] = Conv2dLayer::make(w[4], 4 * w[3], 3, 1, rng);
  m.hyper_synthesis[2] = Conv2dLayer::make(w[3], w[3], 3, 1, rng);

  m.synthesis_conv[0] = Conv2dLayer::make(cy, 4 * w[2], 3, 1, rng);
  m.synthesis_samb[0] = samb(w[2]);
  m.synthesis_conv[1] = Conv2dLayer::make(w[2], 4 * w[1], 3, 1, rng);
  m.synthesis_samb[1] = samb(w[1]);
  m.synthesis_conv[2] = Conv2dLayer::make(w[1], 4 * w[0], 3, 1, rng);
  m.synthesis_samb[2] = samb(w[0]);
  m.synthesis_conv[3] = Conv2dLayer::make(w[0], 4 * 3, 3, 1, rng);
  // Start mid-range so the output clamp is inactive at initialization.
  m.synthesis_conv[3].bias.mutable_value().setConstant(0.5);

  m.entropy = EntropyModel::make(config.entropy_config(), rng);

  m.rrm = RrmParams::make();
  if (calibrate) {
    NoGradScope<double> off;
    Tensord h = analysis_features(m, synthetic_two_texture(kPadMultiple, kPadMultiple, kProbeSeed));
    const Eigen::Map<const RowMatrix<double>> flat(h.value().data(), h.dim(0), h.dim(1) * h.dim(2));
    const SvdFactors f = svd(flat);
    m.rrm = RrmParams::make(f.s.mean());
  }
  return m;
}

ParamList Model::parameters() const {
  ParamList out;
  for (int i = 0; i < 4; ++i) analysis_conv[i].collect("analysis.conv" + std::to_string(i), out);
  for (int i = 0; i < 3; ++i)
    for (std::size_t b = 0; b < analysis_samb[i].size(); ++b)
      analysis_samb[i][b].collect("analysis.samb" + std::to_string(i) + "_" + std::to_string(b), out);
  rrm.collect("rrm", out);
  for (int i = 0; i < 3; ++i) hyper_analysis[i].collect("hyper_analysis.conv" + std::to_string(i), out);
  for (int i = 0; i < 3; ++i) hyper_synthesis[i].collect("hyper_synthesis.conv" + std::to_string(i), out);
  for (int i = 0; i < 4; ++i) synthesis_conv[i].collect("synthesis.conv" + std::to_string(i), out);
  for (int i = 0; i < 3; ++i)
    for (std::size_t b = 0; b < synthesis_samb[i].size(); ++b)
      synthesis_samb[i][b].collect("synthesis.samb" + std::to_string(i) + "_" + std::to_string(b), out);
  entropy.collect("entropy", out);
  return out;
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------
// Transforms

Tensord analysis_features(const Model& m, const Tensord& x, const ForwardOptions& opt) {
  if (x.rank() != 3 || x.dim(0) != 3 || x.size() == 0) throw std::invalid_argument("expected a non-empty 3 x H x W image");
  if (x.dim(1) % 16 != 0 || x.dim(2) % 16 != 0) throw std::invalid_argument("image extents must be multiples of 16");
  Tensord h = x;
  for (int i = 0; i < 3; ++i) {
    h = m.analysis_conv[i](h);
    for (std::size_t b = 0; b < m.analysis_samb[i].size(); ++b)
      h = samb_forward(h, m.analysis_samb[i][b], samb_options(opt, 64 * i + b));
  }
  return m.analysis_conv[3](h);
}

Tensord analysis_transform(const Model& m, const Tensord& x, const ForwardOptions& opt, RrmTrace* trace) {
  Tensord h = analysis_features(m, x, opt);
  return m.config.use_rrm ? rrm_forward(h, m.rrm, trace) : h;
}

Tensord synthesis_transform(const Model& m, const Tensord& yhat, const ForwardOptions& opt) {
  Tensord h = yhat;
  for (int i = 0; i < 3; ++i) {
    h = pixel_shuffle(m.synthesis_conv[i](h), 2);
    for (std::size_t b = 0; b < m.synthesis_samb[i].size(); ++b)
      h = samb_forward(h, m.synthesis_samb[i][b], samb_options(opt, 1024 + 64 * i + b));
  }
  return clamp(pixel_shuffle(m.synthesis_conv[3](h), 2), 0.0, 1.0);
}

Tensord hyper_analysis(const Model& m, const Tensord& y) {
  Tensord h = silu(m.hyper_analysis[0](y));
  h = silu(m.hyper_analysis[1](h));
  return m.hyper_analysis[2](h);
}

Tensord hyper_synthesis(const Model& m, const Tensord& zhat) {
  Tensord h = silu(pixel_shuffle(m.hyper_synthesis[0](zhat), 2));
  h = silu(pixel_shuffle(m.hyper_synthesis[1](h), 2));
  return m.hyper_synthesis[2](h);
}

// ---------------------------------------------------------------------------
// Metrics and loss

Tensord mse(const Tensord& a, const Tensord& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mse: shape mismatch");
  return mean(square(sub(a, b)));
}

double psnr(const Tensord& a, const Tensord& b) {
  NoGradScope<double> off;
  const double e = mse(a, b).value()[0];
  if (e <= 0.0) return 100.0;
  return std::min(100.0, -10.0 * std::log10(e));
}

namespace {

Tensord gaussian_window(Index channels, Index size) {
  constexpr double kSigma = 1.5;
  std::vector<double> g(static_cast<std::size_t>(size));
  double total = 0;
  for (Index i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(size - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * kSigma * kSigma));
    total += g[static_cast<std::size_t>(i)];
  }
  Tensord k({channels, size, size});
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < size; ++i)
      for (Index j = 0; j < size; ++j)
        k.mutable_value()[(c * size + i) * size + j] =
            g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)] / (total * total);
  return k;
}

// Per-channel spatial mean: C x H x W -> C x 1.
Tensord channel_mean(const Tensord& x) {
  const Index c = x.dim(0), n = x.size() / c;
  return mul_scalar(sum_axis(reshape(x, {c, n}), 1), 1.0 / static_cast<double>(n));
}

}  // namespace

Tensord ms_ssim(const Tensord& a, const Tensord& b) {
  if (a.shape() != b.shape() || a.rank() != 3) throw std::invalid_argument("ms_ssim: shape mismatch");
  if (a.dim(1) < 16 || a.dim(2) < 16) throw std::invalid_argument("ms_ssim needs at least 16 x 16 pixels");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Index channels = a.dim(0);
  Tensord x = a, y = b, product;
  for (int scale = 0; scale < 5; ++scale) {
    // The 11-tap window shrinks to the largest odd size that fits the coarse scales.
    Index size = std::min<Index>({11, x.dim(1), x.dim(2)});
    if (size % 2 == 0) --size;
    const Tensord win = gaussian_window(channels, size);
    auto blur = [&](const Tensord& t) { return depthwise_conv2d(t, win, Tensord{}, Padding::kValid); };
    Tensord mx = blur(x), my = blur(y);
    Tensord sxx = sub(blur(square(x)), square(mx));
    Tensord syy = sub(blur(square(y)), square(my));
    Tensord sxy = sub(blur(mul(x, y)), mul(mx, my));
    Tensord cs = div(add_scalar(mul_scalar(sxy, 2.0), c2), add_scalar(add(sxx, syy), c2));
    Tensord term = cs;
    if (scale == 4) {
      Tensord l = div(add_scalar(mul_scalar(mul(mx, my), 2.0), c1), add_scalar(add(square(mx), square(my)), c1));
      term = mul(l, cs);
    }
    Tensord factor = pow(lower_bound(channel_mean(term), 1e-6), kMsSsimWeights[scale]);
    product = scale == 0 ? factor : mul(product, factor);
    if (scale < 4) {
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
  }
  return mean(product);
}

LossTerms rd_loss(const Tensord& x, const Tensord& x_hat, const Tensord& rate, double lambda, double beta) {
  LossTerms t;
  t.rate = rate;
  t.distortion = mse(x, x_hat);
  t.perceptual = add_scalar(neg(ms_ssim(x, x_hat)), 1.0);
  t.loss = add(add(mul_scalar(rate, lambda), t.distortion), mul_scalar(t.perceptual, beta));
  return t;
}

ForwardResult forward(const Model& m, const Tensord& x, const ForwardOptions& opt) {
  ForwardResult r;
  r.y = analysis_transform(m, x, opt);
  Tensord z = hyper_analysis(m, r.y);
  // Rates see the noise proxy; context and synthesis see straight-through rounding.
  Tensord y_ctx, z_ctx;
  if (opt.training) {
    r.y_tilde = quantize(r.y, QuantMode::kTrain, opt.seed * 2 + 1);
    r.z_tilde = quantize(z, QuantMode::kTrain, opt.seed * 2 + 2);
    y_ctx = ste_round(r.y);
    z_ctx = ste_round(z);
  } else {
    r.y_tilde = y_ctx = quantize(r.y, QuantMode::kEval, 0);
    r.z_tilde = z_ctx = quantize(z, QuantMode::kEval, 0);
  }
  Tensord psi = hyper_synthesis(m, z_ctx);
  GaussianParams gp = m.entropy.predict(y_ctx, psi, {opt.training, opt.seed});
  r.mu = gp.mu;
  r.sigma = gp.sigma;
  Tensord py = gaussian_likelihood(r.y_tilde, gp.mu, gp.sigma, kLikelihoodFloor);
  Tensord pz = m.entropy.prior.likelihood(r.z_tilde);
  Tensord rate = estimate_rate(py, pz, static_cast<double>(x.dim(1) * x.dim(2)));
  r.x_hat = synthesis_transform(m, y_ctx, opt);
  r.terms = rd_loss(x, r.x_hat, rate, m.config.lambda(), m.config.beta);
  return r;
}

// ---------------------------------------------------------------------------
// Training

StepReport train_step(Model& m, AdamState& adam, const Tensord& image, std::uint64_t seed) {
  ParamList params = m.parameters();
  if (adam.m.empty()) {
    for (const auto& [name, t] : params) {
      adam.m.push_back(Array<double>::Zero(t.size()));
      adam.v.push_back(Array<double>::Zero(t.size()));
    }
  }
  if (adam.m.size() != params.size()) throw std::invalid_argument("optimizer state does not match the model");
  for (auto& [name, t] : params) {
    t.zero_grad();
    t.set_requires_grad(true);
  }

  StepReport rep;
  std::vector<Array<double>> grads;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    ForwardResult fr;
    try {
      fr = forward(m, image, {true, seed});
    } catch (const NonFiniteError& e) {
      throw TrainingError(std::string("non-finite value in forward pass: ") + e.what());
    }
    rep.loss = fr.terms.loss.value()[0];
    rep.rate = fr.terms.rate.value()[0];
    rep.distortion = fr.terms.distortion.value()[0];
    rep.perceptual = fr.terms.perceptual.value()[0];
    if (!std::isfinite(rep.loss)) throw TrainingError("non-finite loss");
    tape.backward(fr.terms.loss);
  }
  double sq = 0;
  for (auto& [name, t] : params) {
    grads.push_back(t.has_grad() ? t.grad() : Array<double>::Zero(t.size()));
    sq += grads.back().square().sum();
  }
  rep.grad_norm = std::sqrt(sq);
  if (!std::isfinite(rep.grad_norm)) throw TrainingError("non-finite gradient");
  const double scale = rep.grad_norm > adam.clip_norm ? adam.clip_norm / rep.grad_norm : 1.0;

  ++adam.t;
  const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Array<double> g = grads[i] * scale;
    adam.m[i] = adam.beta1 * adam.m[i] + (1 - adam.beta1) * g;
    adam.v[i] = adam.beta2 * adam.v[i] + (1 - adam.beta2) * g.square();
    Tensord p = params[i].second;
    p.mutable_value() -= adam.lr * (adam.m[i] / bc1) / ((adam.v[i] / bc2).sqrt() + adam.eps);
    p.zero_grad();
    p.set_requires_grad(false);
  }
  ++m.step;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr const char* kCheckpointMagic = "SAMIC-CHECKPOINT 1";
}

std::vector<std::uint8_t> serialize_checkpoint(const Model& m) {
  std::ostringstream os(std::ios::binary);
  const ParamList params = m.parameters();
  os << kCheckpointMagic << '\n' << "config " << m.config.to_json() << '\n' << "step " << m.step << '\n';
  os << "tensors " << params.size() << '\n';
  for (const auto& [name, t] : params) {
    os << name << ' ' << t.rank();
    for (Index e : t.shape()) os << ' ' << e;
    os << '\n';
  }
  os << "data\n";
  for (const auto& [name, t] : params) write_tensor(os, t);
  const std::string s = os.str();
  return {s.begin(), s.end()};
}

Model deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  auto fail = [](const std::string& why) { return std::runtime_error("bad checkpoint: " + why); };
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw fail("missing header");
  if (!std::getline(is, line) || line.rfind("config ", 0) != 0) throw fail("missing config");
  Model m = Model::make(ModelConfig::from_json(line.substr(7)), false);
  std::string word;
  std::size_t count = 0;
  if (!(is >> word >> m.step) || word != "step") throw fail("missing step");
  if (!(is >> word >> count) || word != "tensors") throw fail("missing manifest");
  ParamList params = m.parameters();
  if (count != params.size()) throw fail("manifest lists " + std::to_string(count) + " tensors, model has " +
                                        std::to_string(params.size()));
  for (auto& [name, t] : params) {
    std::string got;
    std::size_t rank = 0;
    if (!(is >> got >> rank) || got != name) throw fail("manifest entry '" + got + "' where '" + name + "' expected");
    Shape shape(rank);
    for (auto& e : shape) is >> e;
    if (shape != t.shape()) throw fail("shape mismatch for " + name);
  }
  if (!(is >> word) || word != "data" || is.get() != '\n') throw fail("missing data marker");
  for (auto& [name, t] : params) {
    Tensord v = read_tensor<double>(is);
    if (v.shape() != t.shape()) throw fail("record shape mismatch for " + name);
    t.mutable_value() = v.value();
  }
  if (is.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes");
  return m;
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(m);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Transport

Tensord reflect_pad(const Tensord& x, Index height, Index width) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height < h || width < w) throw std::invalid_argument("reflect_pad cannot shrink");
  auto fold = [](Index i, Index n) {
    if (n == 1) return Index{0};
    const Index period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Tensord out({c, height, width});
  for (Index ch = 0; ch < c; ++ch)
    for (Index r = 0; r < height; ++r)
      for (Index col = 0; col < width; ++col)
        out.mutable_value()[(ch * height + r) * width + col] = x.value()[(ch * h + fold(r, h)) * w + fold(col, w)];
  return out;
}

Tensord crop(const Tensord& x, Index height, Index width) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height > h || width > w) throw std::invalid_argument("crop larger than the input");
  Tensord out({c, height, width});
  for (Index ch = 0; ch < c; ++ch)
    for (Index r = 0; r < height; ++r)
      for (Index col = 0; col < width; ++col)
        out.mutable_value()[(ch * height + r) * width + col] = x.value()[(ch * h + r) * w + col];
  return out;
}

namespace {

std::uint64_t header_salt(const Bitstream& b) {
  return (static_cast<std::uint64_t>(b.width) << 40) | (static_cast<std::uint64_t>(b.height) << 24) |
         (static_cast<std::uint64_t>(b.lambda_index) << 16) | (static_cast<std::uint64_t>(b.clusters) << 8) | b.chunks;
}

// The single end-of-bitstream sentinel sits in the latent section and covers the
// header fields and the hyper symbols too. The hyper section is still pinned by
// its canonical flush, so a change there surfaces as different symbols.
std::uint64_t latent_salt(const Bitstream& b, const Tensord& zhat) {
  std::vector<int> z(static_cast<std::size_t>(zhat.size()));
  for (Index i = 0; i < zhat.size(); ++i) z[static_cast<std::size_t>(i)] = static_cast<int>(zhat.value()[i]);
  return symbol_hash(z, header_salt(b));
}

// One table per hyper-latent channel from the factorized prior.
std::vector<FrequencyTable> hyper_tables(const Model& m) {
  std::vector<double> points;
  for (int k = -kDefaultAlphabetRadius; k <= kDefaultAlphabetRadius + 1; ++k) points.push_back(k - 0.5);
  const Eigen::ArrayXXd cdf = m.entropy.prior.cdf(points);
  std::vector<FrequencyTable> tables;
  for (Index c = 0; c < cdf.rows(); ++c) {
    std::vector<double> probs(points.size() - 1);
    for (std::size_t i = 0; i + 1 < points.size(); ++i)
      probs[i] = cdf(c, static_cast<Index>(i + 1)) - cdf(c, static_cast<Index>(i));
    tables.push_back(table_from_masses(-kDefaultAlphabetRadius, probs, cdf(c, 0) + 1.0 - cdf(c, cdf.cols() - 1)));
  }
  return tables;
}

// Drives the decoder's causal order: for chunk j, the anchor pass then the
// non-anchor pass. `visit(j, anchors, mu, sigma)` must make the symbols of that
// pass available in yhat before returning.
template <class Visit>
void run_context_loop(const Model& m, const Tensord& yhat, const Tensord& psi, Visit&& visit) {
  const EntropyModel& em = m.entropy;
  const Index h = yhat.dim(1), w = yhat.dim(2), cs = em.config.chunk_size();
  const auto anchors = anchor_mask(h, w);
  for (int j = 0; j < em.config.chunks; ++j) {
    Tensord decoded = j > 0 ? slice(yhat, 0, 0, j * cs) : Tensord{};
    Tensord ch = em.channel_context(j, decoded, h, w, {});
    auto [mu_a, sigma_a] = em.aggregate_params(j, ch, Tensord({em.config.context_channels, h, w}), psi);
    visit(j, true, mu_a, sigma_a);
    Tensord sp = em.spatial_context(j, keep_where(slice(yhat, 0, j * cs, (j + 1) * cs), anchors));
    auto [mu_n, sigma_n] = em.aggregate_params(j, ch, sp, psi);
    visit(j, false, mu_n, sigma_n);
  }
}

// Positions of one pass of chunk j, channel-major raster, with their (mu, sigma) offsets.
template <class Fn>
void for_pass(Index cs, Index h, Index w, int j, bool anchors, Fn&& fn) {
  for (Index c = 0; c < cs; ++c)
    for (Index r = 0; r < h; ++r)
      for (Index col = 0; col < w; ++col) {
        if (((r + col) % 2 == 0) != anchors) continue;
        fn(((j * cs + c) * h + r) * w + col, (c * h + r) * w + col);
      }
}

}  // namespace

EncodeResult encode_image(const Model& m, const Tensord& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.size() == 0) throw std::invalid_argument("expected a 3 x H x W image");
  const Index height = image.dim(1), width = image.dim(2);
  if (height > 65535 || width > 65535) throw std::invalid_argument("image dimensions exceed the header range");
  NoGradScope<double> off;
  const Tensord x = reflect_pad(image, pad_to(height), pad_to(width));

  Bitstream bs;
  bs.width = static_cast<std::uint16_t>(width);
  bs.height = static_cast<std::uint16_t>(height);
  bs.lambda_index = static_cast<std::uint8_t>(m.config.lambda_index);
  bs.clusters = static_cast<std::uint8_t>(m.config.clusters);
  bs.chunks = static_cast<std::uint8_t>(m.config.chunks);

  const Tensord y = analysis_transform(m, x);
  const Tensord zhat = quantize(hyper_analysis(m, y), QuantMode::kEval, 0);
  {
    RangeEncoder enc(0, false);
    const auto tables = hyper_tables(m);
    const Index plane = zhat.dim(1) * zhat.dim(2);
    for (Index i = 0; i < zhat.size(); ++i)
      enc.encode_symbol(static_cast<int>(zhat.value()[i]), tables[static_cast<std::size_t>(i / plane)]);
    bs.hyper_payload = enc.finish();
  }

  const Tensord psi = hyper_synthesis(m, zhat);
  const Tensord yhat = quantize(y, QuantMode::kEval, 0);
  const Index h = yhat.dim(1), w = yhat.dim(2), cs = m.entropy.config.chunk_size();
  RangeEncoder enc(latent_salt(bs, zhat));
  run_context_loop(m, yhat, psi, [&](int j, bool anchors, const Tensord& mu, const Tensord& sigma) {
    for_pass(cs, h, w, j, anchors, [&](Index yi, Index pi) {
      const double shift = std::round(mu.value()[pi]);
      enc.encode_symbol(static_cast<int>(yhat.value()[yi] - shift), build_table(mu.value()[pi] - shift, sigma.value()[pi]));
    });
  });
  bs.latent_payload = enc.finish();

  EncodeResult res;
  res.bytes = bs.serialize();
  const double pixels = static_cast<double>(height * width);
  res.bpp_actual = 8.0 * static_cast<double>(bs.payload_bytes()) / pixels;
  const GaussianParams gp = m.entropy.predict(yhat, psi, {});
  res.bpp_estimated = estimate_rate(gaussian_likelihood(yhat, gp.mu, gp.sigma, kLikelihoodFloor),
                                    m.entropy.prior.likelihood(zhat), pixels)
                          .value()[0];
  res.reconstruction = crop(synthesis_transform(m, yhat), height, width);
  return res;
}

Tensord decode_image(const Model& m, std::span<const std::uint8_t> bytes) {
  const Bitstream bs = Bitstream::parse(bytes);
  if (bs.lambda_index != m.config.lambda_index || bs.clusters != m.config.clusters || bs.chunks != m.config.chunks) {
    throw ModelMismatch("bitstream was produced by a different model configuration");
  }
  NoGradScope<double> off;
  const Index ph = pad_to(bs.height), pw = pad_to(bs.width);
  const Index h = ph / 16, w = pw / 16;

  Tensord zhat({m.config.hyper_channels, h / 4, w / 4});
  {
    RangeDecoder dec(bs.hyper_payload, 0, false);
    const auto tables = hyper_tables(m);
    const Index plane = zhat.dim(1) * zhat.dim(2);
    for (Index i = 0; i < zhat.size(); ++i) zhat.mutable_value()[i] = dec.decode_symbol(tables[static_cast<std::size_t>(i / plane)]);
    dec.finish();
  }

  const Tensord psi = hyper_synthesis(m, zhat);
  Tensord yhat({m.config.latent_channels, h, w});
  const Index cs = m.entropy.config.chunk_size();
  RangeDecoder dec(bs.latent_payload, latent_salt(bs, zhat));
  run_context_loop(m, yhat, psi, [&](int j, bool anchors, const Tensord& mu, const Tensord& sigma) {
    for_pass(cs, h, w, j, anchors, [&](Index yi, Index pi) {
      const double shift = std::round(mu.value()[pi]);
      yhat.mutable_value()[yi] = dec.decode_symbol(build_table(mu.value()[pi] - shift, sigma.value()[pi])) + shift;
    });
  });
  dec.finish();
  return crop(synthesis_transform(m, yhat), bs.height, bs.width);
}

// ---------------------------------------------------------------------------
// Data and analysis

Tensord synthetic_two_texture(Index height, Index width, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double angle = std::numbers::pi * unif(rng);
  const double offset = (unif(rng) - 0.5) * 0.5 * static_cast<double>(std::min(height, width));
  const double nx = std::cos(angle), ny = std::sin(angle);
  // Region A: oriented stripes. Region B: a product of two sinusoids (checker-like).
  const double fa = 1.0 / (6.0 + 10.0 * unif(rng)), phi = std::numbers::pi * unif(rng);
  const double fb1 = 1.0 / (4.0 + 8.0 * unif(rng)), fb2 = 1.0 / (4.0 + 8.0 * unif(rng));
  double base_a[3], amp_a[3], base_b[3], amp_b[3];
  for (int c = 0; c < 3; ++c) {
    base_a[c] = 0.2 + 0.6 * unif(rng);
    amp_a[c] = 0.1 + 0.25 * unif(rng);
    base_b[c] = 0.2 + 0.6 * unif(rng);
    amp_b[c] = 0.1 + 0.25 * unif(rng);
  }
  std::normal_distribution<double> noise(0.0, 0.02);
  Tensord img({3, height, width});
  const double cy = static_cast<double>(height) / 2, cx = static_cast<double>(width) / 2;
  for (Index r = 0; r < height; ++r)
    for (Index col = 0; col < width; ++col) {
      const double px = static_cast<double>(col) - cx, py = static_cast<double>(r) - cy;
      const bool in_a = px * nx + py * ny > offset;
      const double sa = std::sin(2 * std::numbers::pi * fa * (px * std::cos(phi) + py * std::sin(phi)));
      const double sb = std::sin(2 * std::numbers::pi * fb1 * px) * std::sin(2 * std::numbers::pi * fb2 * py);
      for (int c = 0; c < 3; ++c) {
        const double v = in_a ? base_a[c] + amp_a[c] * sa : base_b[c] + amp_b[c] * sb;
        img.mutable_value()[(c * height + r) * width + col] = std::clamp(v + noise(rng), 0.0, 1.0);
      }
    }
  return img;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << "image,bpp_estimated,bpp_actual,psnr,ms_ssim\n";
  os << std::setprecision(8);
  for (const auto& r : rows) os << r.image << ',' << r.bpp_estimated << ',' << r.bpp_actual << ',' << r.psnr << ',' << r.ms_ssim << '\n';
}

Eigen::ArrayXXd effective_receptive_field(const Model& m, const Tensord& image) {
  const Index height = image.dim(1), width = image.dim(2);
  Tensord x = reflect_pad(image, pad_to(height), pad_to(width));
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensord y = analysis_transform(m, x);
  const Index c = y.dim(0), h = y.dim(1), w = y.dim(2);
  Tensord pick({c, h, w});
  for (Index ch = 0; ch < c; ++ch) pick.mutable_value()[(ch * h + h / 2) * w + w / 2] = 1.0;
  tape.backward(sum(mul(y, pick)));
  const Array<double> g = x.has_grad() ? x.grad() : Array<double>::Zero(x.size());
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(height, width);
  const Index ph = x.dim(1), pw = x.dim(2);
  for (Index ch = 0; ch < 3; ++ch)
    for (Index r = 0; r < height; ++r)
      for (Index col = 0; col < width; ++col) out(r, col) += std::abs(g[(ch * ph + r) * pw + col]);
  return out;
}

SemanticAssignment scan_assignment(const Model& m, const Tensord& image) {
  if (m.analysis_samb[0].empty()) throw std::invalid_argument("model has no SAMB blocks to trace");
  NoGradScope<double> off;
  const Tensord x = reflect_pad(image, pad_to(image.dim(1)), pad_to(image.dim(2)));
  return compute_assignment(m.analysis_conv[0](x), m.analysis_samb[0][0], false, 0);
}

std::vector<double> lag_correlation(const Tensord& map, int max_lag) {
  const Index c = map.dim(0), h = map.dim(1), w = map.dim(2);
  std::vector<double> out;
  for (int lag = 1; lag <= max_lag; ++lag) {
    double total = 0;
    int terms = 0;
    for (Index ch = 0; ch < c; ++ch) {
      for (int dir = 0; dir < 2; ++dir) {
        const Index dr = dir == 0 ? 0 : lag, dc = dir == 0 ? lag : 0;
        if (dr >= h || dc >= w) continue;
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0, n = 0;
        for (Index r = 0; r + dr < h; ++r)
          for (Index col = 0; col + dc < w; ++col) {
            const double a = map.value()[(ch * h + r) * w + col];
            const double b = map.value()[(ch * h + r + dr) * w + col + dc];
            sa += a, sb += b, saa += a * a, sbb += b * b, sab += a * b, n += 1;
          }
        const double va = saa - sa * sa / n, vb = sbb - sb * sb / n;
        if (n < 2 || va <= 0 || vb <= 0) continue;
        total += std::abs((sab - sa * sb / n) / std::sqrt(va * vb));
        ++terms;
      }
    }
    out.push_back(terms > 0 ? total / terms : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

std::vector<double> latent_correlation(const Model& m, const Tensord& image, int max_lag) {
  NoGradScope<double> off;
  const Tensord x = reflect_pad(image, pad_to(image.dim(1)), pad_to(image.dim(2)));
  const ForwardResult fr = forward(m, x, {});
  return lag_correlation(div(sub(fr.y, fr.mu), fr.sigma), max_lag);
}

}  // namespace samic
