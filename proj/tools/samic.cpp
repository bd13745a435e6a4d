#include "image_io.hpp"
#include "samic/codec.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace samic;

namespace {

struct RunConfig {
  std::string input;
  std::string out;
  std::string recon;
  std::string checkpoint;
  std::string preset = "toy";
  std::string mode = "erf";
  int lambda_index = 0;
  int clusters = -1;  // preset default
  std::uint64_t seed = 0;
  // train
  int steps = 500;
  int crop = 64;
  double lr = 1e-3;
  bool resume = false;
  bool no_rrm = false;
  std::string log;
  // synth
  int count = 8;
  int size = 64;
};

void log_line(const std::string& s) { std::cerr << "[samic] " << s << '\n'; }

// Output files are staged beside their target and renamed into place once
// complete; anything still staged when the command fails is deleted.
class Outputs {
 public:
  ~Outputs() {
    for (const auto& p : staged_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }
  void write(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".partial";
    staged_.push_back(tmp);
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw std::runtime_error("cannot write " + path.string());
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw std::runtime_error("write failed for " + path.string());
    }
    pending_.emplace_back(tmp, path);
  }
  void commit() {
    for (const auto& [tmp, path] : pending_) fs::rename(tmp, path);
    pending_.clear();
    staged_.clear();
  }

 private:
  std::vector<fs::path> staged_;
  std::vector<std::pair<fs::path, fs::path>> pending_;
};

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void require_file(const std::string& p, const char* what) {
  if (p.empty()) throw std::runtime_error(std::string("missing ") + what);
  if (!fs::is_regular_file(p)) throw std::runtime_error(std::string(what) + " not found: " + p);
}

void require_out(const std::string& p) {
  if (p.empty()) throw std::runtime_error("missing --out");
  const fs::path parent = fs::path(p).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw std::runtime_error("output directory does not exist: " + parent.string());
}

unsigned worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SAMIC_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

std::vector<fs::path> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir);
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::runtime_error("no .ppm images in " + dir);
  return out;
}

ModelConfig config_from(const RunConfig& rc) {
  ModelConfig c;
  if (rc.preset == "toy") c = ModelConfig::toy();
  else if (rc.preset == "paper") c = ModelConfig::paper();
  else throw std::runtime_error("unknown preset " + rc.preset);
  c.lambda_index = rc.lambda_index;
  if (rc.clusters > 0) c.clusters = rc.clusters;
  c.seed = rc.seed;
  c.use_rrm = !rc.no_rrm;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

int cmd_encode(const RunConfig& rc) {
  require_file(rc.input, "input image");
  require_file(rc.checkpoint, "checkpoint");
  require_out(rc.out);
  const Model m = load_checkpoint(rc.checkpoint);
  const Tensord x = read_ppm(rc.input);
  const EncodeResult r = encode_image(m, x);
  Outputs out;
  out.write(rc.out, std::string(r.bytes.begin(), r.bytes.end()));
  if (!rc.recon.empty()) {
    require_out(rc.recon);
    out.write(rc.recon, encode_ppm(r.reconstruction));
  }
  out.commit();
  std::cout << std::setprecision(6) << "bpp_actual=" << r.bpp_actual << " bpp_estimated=" << r.bpp_estimated
            << " bytes=" << r.bytes.size() << " psnr=" << psnr(x, r.reconstruction) << '\n';
  return 0;
}

int cmd_decode(const RunConfig& rc) {
  require_file(rc.input, "bitstream");
  require_file(rc.checkpoint, "checkpoint");
  require_out(rc.out);
  const Model m = load_checkpoint(rc.checkpoint);
  const std::string bytes = read_file(rc.input);
  const Tensord x = decode_image(m, std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  Outputs out;
  out.write(rc.out, encode_ppm(x));
  out.commit();
  std::cout << "decoded " << x.dim(2) << "x" << x.dim(1) << '\n';
  return 0;
}

// Random crop (reflect-padded when the image is smaller than the crop).
Tensord random_crop(const Tensord& img, Index size, Rng& rng) {
  Tensord src = img;
  if (img.dim(1) < size || img.dim(2) < size)
    src = reflect_pad(img, std::max(img.dim(1), size), std::max(img.dim(2), size));
  std::uniform_int_distribution<Index> dr(0, src.dim(1) - size), dc(0, src.dim(2) - size);
  const Index r0 = dr(rng), c0 = dc(rng);
  Tensord out({3, size, size});
  for (Index c = 0; c < 3; ++c)
    for (Index r = 0; r < size; ++r)
      for (Index col = 0; col < size; ++col)
        out.mutable_value()[(c * size + r) * size + col] = src.value()[(c * src.dim(1) + r0 + r) * src.dim(2) + c0 + col];
  return out;
}

int cmd_train(const RunConfig& rc) {
  require_out(rc.checkpoint);
  if (rc.crop % 16 != 0 || rc.crop < 16) throw std::runtime_error("--crop must be a positive multiple of 16");
  std::vector<Tensord> data;
  for (const auto& p : list_images(rc.input)) data.push_back(read_ppm(p));
  Model m = rc.resume ? load_checkpoint(rc.checkpoint) : Model::make(config_from(rc));
  log_line("seed " + std::to_string(rc.seed) + ", " + std::to_string(data.size()) + " images, " +
           std::to_string(m.parameter_count()) + " parameters, starting at step " + std::to_string(m.step));
  AdamState adam;
  adam.lr = rc.lr;
  Rng rng(rc.seed ^ (static_cast<std::uint64_t>(m.step) * 0x9E3779B97F4A7C15ULL));
  std::ostringstream csv;
  csv << std::setprecision(10);
  if (m.step == 0 || !rc.resume) csv << "step,loss,rate,distortion,perceptual\n";
  for (int i = 0; i < rc.steps; ++i) {
    const std::int64_t step = m.step;
    const Tensord& img = data[static_cast<std::size_t>(step) % data.size()];
    const StepReport r = train_step(m, adam, random_crop(img, rc.crop, rng), rc.seed * 1000003ULL + static_cast<std::uint64_t>(step));
    csv << step << ',' << r.loss << ',' << r.rate << ',' << r.distortion << ',' << r.perceptual << '\n';
    if ((i + 1) % 100 == 0 || i + 1 == rc.steps)
      log_line("step " + std::to_string(m.step) + " loss " + std::to_string(r.loss));
  }
  Outputs out;
  out.write(rc.checkpoint, [&] {
    const auto b = serialize_checkpoint(m);
    return std::string(b.begin(), b.end());
  }());
  if (!rc.log.empty()) {
    std::string text = csv.str();
    if (rc.resume && fs::exists(rc.log)) text = read_file(rc.log) + text;
    out.write(rc.log, text);
  }
  out.commit();
  return 0;
}

int cmd_analyze(const RunConfig& rc) {
  require_file(rc.checkpoint, "checkpoint");
  require_file(rc.input, "input image");
  require_out(rc.out);
  const Model m = load_checkpoint(rc.checkpoint);
  const Tensord x = read_ppm(rc.input);
  Outputs out;
  if (rc.mode == "erf") {
    out.write(rc.out, encode_pgm(log_normalized(effective_receptive_field(m, x))));
  } else if (rc.mode == "latcorr") {
    std::ostringstream os;
    os << "lag,correlation\n" << std::setprecision(8);
    const auto corr = latent_correlation(m, x, 8);
    for (std::size_t i = 0; i < corr.size(); ++i) os << i + 1 << ',' << corr[i] << '\n';
    out.write(rc.out, os.str());
  } else if (rc.mode == "scantrace") {
    std::ostringstream os;
    write_scan_trace(os, scan_assignment(m, x));
    out.write(rc.out, os.str());
  } else {
    throw std::runtime_error("unknown analysis mode " + rc.mode + " (erf, latcorr, scantrace)");
  }
  out.commit();
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  require_file(rc.checkpoint, "checkpoint");
  require_out(rc.out);
  const Model m = load_checkpoint(rc.checkpoint);
  const auto images = list_images(rc.input);
  std::vector<MetricsRow> rows(images.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::string first_error;
  auto work = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        const Tensord x = read_ppm(images[i]);
        const EncodeResult r = encode_image(m, x);
        rows[i] = {images[i].filename().string(), r.bpp_estimated, r.bpp_actual, psnr(x, r.reconstruction),
                   ms_ssim(x, r.reconstruction).item()};
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        if (first_error.empty()) first_error = images[i].string() + ": " + e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned n = worker_count(images.size());
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (!first_error.empty()) throw std::runtime_error(first_error);
  std::ostringstream os;
  write_metrics_csv(os, rows);
  Outputs out;
  out.write(rc.out, os.str());
  out.commit();
  return 0;
}

int cmd_synth(const RunConfig& rc) {
  if (rc.out.empty()) throw std::runtime_error("missing --out");
  fs::create_directories(rc.out);
  Outputs out;
  for (int i = 0; i < rc.count; ++i) {
    std::ostringstream name;
    name << "synth_" << std::setw(4) << std::setfill('0') << i << ".ppm";
    out.write(fs::path(rc.out) / name.str(), encode_ppm(synthetic_two_texture(rc.size, rc.size, rc.seed + static_cast<std::uint64_t>(i))));
  }
  out.commit();
  log_line("seed " + std::to_string(rc.seed) + ", wrote " + std::to_string(rc.count) + " images");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAMIC learned image codec"};
  app.require_subcommand(1);
  RunConfig rc;

  auto model_flags = [&](CLI::App* c) {
    c->add_option("--preset", rc.preset, "Model size")->check(CLI::IsMember({"toy", "paper"}));
    c->add_option("--lambda-index", rc.lambda_index, "Rate weight index into {0.0035, 0.0067, 0.013, 0.025}")->check(CLI::Range(0, 3));
    c->add_option("--clusters", rc.clusters, "Semantic clusters K (1 = raster scan)")->check(CLI::Range(1, 255));
    c->add_flag("--no-rrm", rc.no_rrm, "Disable the SVD redundancy-reduction module");
  };

  auto* enc = app.add_subcommand("encode", "Compress a PPM image");
  enc->add_option("input", rc.input, "Input PPM")->required();
  enc->add_option("--checkpoint", rc.checkpoint)->required();
  enc->add_option("--out", rc.out)->required();
  enc->add_option("--recon", rc.recon, "Also write the encoder-side reconstruction as PPM");

  auto* dec = app.add_subcommand("decode", "Decompress to a PPM image");
  dec->add_option("input", rc.input, "Bitstream file")->required();
  dec->add_option("--checkpoint", rc.checkpoint)->required();
  dec->add_option("--out", rc.out)->required();

  auto* train = app.add_subcommand("train", "Train on a directory of PPM images");
  train->add_option("input", rc.input, "Dataset directory")->required();
  train->add_option("--checkpoint", rc.checkpoint, "Checkpoint to write (and read with --resume)")->required();
  train->add_option("--steps", rc.steps)->check(CLI::PositiveNumber);
  train->add_option("--crop", rc.crop, "Training patch size");
  train->add_option("--lr", rc.lr, "Adam learning rate");
  train->add_option("--seed", rc.seed);
  train->add_option("--log", rc.log, "Per-step CSV (step, loss, rate, distortion, perceptual)");
  train->add_flag("--resume", rc.resume, "Continue from --checkpoint");
  model_flags(train);

  auto* analyze = app.add_subcommand("analyze", "Export receptive-field, latent-correlation or scan-order data");
  analyze->add_option("input", rc.input, "Input PPM")->required();
  analyze->add_option("--checkpoint", rc.checkpoint)->required();
  analyze->add_option("--mode", rc.mode)->check(CLI::IsMember({"erf", "latcorr", "scantrace"}));
  analyze->add_option("--out", rc.out)->required();

  auto* eval = app.add_subcommand("eval", "Encode every PPM in a directory and write a metrics CSV");
  eval->add_option("input", rc.input, "Image directory")->required();
  eval->add_option("--checkpoint", rc.checkpoint)->required();
  eval->add_option("--out", rc.out)->required();

  auto* synth = app.add_subcommand("synth", "Write synthetic two-texture PPM images");
  synth->add_option("--out", rc.out, "Output directory")->required();
  synth->add_option("--count", rc.count)->check(CLI::PositiveNumber);
  synth->add_option("--size", rc.size)->check(CLI::PositiveNumber);
  synth->add_option("--seed", rc.seed);

  auto* init = app.add_subcommand("init", "Write a freshly initialized checkpoint");
  init->add_option("--out", rc.out)->required();
  init->add_option("--seed", rc.seed);
  model_flags(init);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*enc) return cmd_encode(rc);
    if (*dec) return cmd_decode(rc);
    if (*train) return cmd_train(rc);
    if (*analyze) return cmd_analyze(rc);
    if (*eval) return cmd_eval(rc);
    if (*synth) return cmd_synth(rc);
    if (*init) {
      require_out(rc.out);
      const Model m = Model::make(config_from(rc));
      log_line("seed " + std::to_string(rc.seed) + ", " + std::to_string(m.parameter_count()) + " parameters");
      const auto b = serialize_checkpoint(m);
      Outputs out;
      out.write(rc.out, std::string(b.begin(), b.end()));
      out.commit();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "samic: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
