#include "image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace samic {

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

struct HeaderReader {
  const std::string& s;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < s.size()) {
      if (std::isspace(static_cast<unsigned char>(s[pos]))) {
        ++pos;
      } else if (s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }
  long number() {
    skip_space_and_comments();
    const std::size_t start = pos;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
    if (start == pos || pos - start > 9) throw std::runtime_error("malformed PPM header");
    return std::stol(s.substr(start, pos - start));
  }
};

}  // namespace

Tensord decode_ppm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw std::runtime_error("not a binary PPM (P6) image");
  HeaderReader h{bytes, 2};
  const long width = h.number(), height = h.number(), maxval = h.number();
  if (width <= 0 || height <= 0) throw std::runtime_error("PPM has empty dimensions");
  if (maxval < 1 || maxval > 255) throw std::runtime_error("only 8-bit PPM images are supported");
  if (h.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[h.pos]))) throw std::runtime_error("malformed PPM header");
  const std::size_t start = h.pos + 1;
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3;
  if (bytes.size() - start < n) throw std::runtime_error("PPM pixel data truncated");
  Tensord img({3, height, width});
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c)
      for (Index ch = 0; ch < 3; ++ch) {
        const auto v = static_cast<unsigned char>(bytes[start + static_cast<std::size_t>((r * width + c) * 3 + ch)]);
        img.mutable_value()[(ch * height + r) * width + c] = static_cast<double>(v) / static_cast<double>(maxval);
      }
  return img;
}

Tensord read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read image " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  try {
    return decode_ppm(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string encode_ppm(const Tensord& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("expected a 3 x H x W image");
  const Index h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t start = out.size();
  out.resize(start + static_cast<std::size_t>(h * w * 3));
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c)
      for (Index ch = 0; ch < 3; ++ch)
        out[start + static_cast<std::size_t>((r * w + c) * 3 + ch)] =
            static_cast<char>(to_byte(image.value()[(ch * h + r) * w + c]));
  return out;
}

std::string encode_pgm(const Eigen::ArrayXXd& gray) {
  std::string out = "P5\n" + std::to_string(gray.cols()) + " " + std::to_string(gray.rows()) + "\n255\n";
  for (Index r = 0; r < gray.rows(); ++r)
    for (Index c = 0; c < gray.cols(); ++c) out.push_back(static_cast<char>(to_byte(gray(r, c))));
  return out;
}

Eigen::ArrayXXd log_normalized(const Eigen::ArrayXXd& v) {
  const double peak = v.abs().maxCoeff();
  if (!(peak > 0)) return Eigen::ArrayXXd::Zero(v.rows(), v.cols());
  return (1.0 + v.abs() / peak).log() / std::log(2.0);
}

}  // namespace samic
