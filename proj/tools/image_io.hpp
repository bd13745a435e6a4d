#pragma once

#include "samic/tensor.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <string>

namespace samic {

/// Binary PPM (P6, maxval <= 255) to a 3 x H x W tensor in [0, 1].
Tensord decode_ppm(const std::string& bytes);
Tensord read_ppm(const std::filesystem::path& path);
/// 3 x H x W tensor to P6 with maxval 255; values are clamped and rounded.
std::string encode_ppm(const Tensord& image);
/// H x W values in [0, 1] to P5 with maxval 255.
std::string encode_pgm(const Eigen::ArrayXXd& gray);
/// log(1 + v / max) / log 2, so the largest entry maps to 1. All-zero input stays zero.
Eigen::ArrayXXd log_normalized(const Eigen::ArrayXXd& v);

}  // namespace samic
