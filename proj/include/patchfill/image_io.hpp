#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "patchfill/grid.hpp"
#include "patchfill/imaging.hpp"

namespace patchfill {

/// 8-bit interleaved pixel buffer (row-major, channels fastest).
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Decode PNG/JPEG/BMP by file content. Throws std::runtime_error on failure.
RawImage decode_image_file(const std::string& path);

/// Write an 8-bit PNG (grayscale or RGB).
void encode_png_file(const std::string& path, const RawImage& image);

template <typename Scalar>
Grid<Scalar> to_grid(const RawImage& raw) {
  Grid<Scalar> g(raw.height, raw.width, raw.channels);
  for (Eigen::Index p = 0; p < g.positions(); ++p)
    for (int c = 0; c < raw.channels; ++c)
      g.data(p, c) = static_cast<Scalar>(raw.pixels[static_cast<std::size_t>(p) * raw.channels + c]) / Scalar(255);
  return g;
}

template <typename Scalar>
RawImage from_grid(const Grid<Scalar>& g) {
  RawImage raw;
  raw.height = g.height;
  raw.width = g.width;
  raw.channels = g.channels;
  raw.pixels.resize(static_cast<std::size_t>(g.size()));
  for (Eigen::Index p = 0; p < g.positions(); ++p)
    for (int c = 0; c < g.channels; ++c) {
      const double v = std::clamp(static_cast<double>(g.data(p, c)), 0.0, 1.0);
      raw.pixels[static_cast<std::size_t>(p) * g.channels + c] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return raw;
}

template <typename Scalar>
Grid<Scalar> expand_to_rgb(const Grid<Scalar>& g) {
  if (g.channels == 3) return g;
  require(g.channels == 1, "expand_to_rgb: expected 1 or 3 channels");
  Grid<Scalar> out(g.height, g.width, 3);
  out.data.col(0) = g.data.col(0);
  out.data.col(1) = g.data.col(0);
  out.data.col(2) = g.data.col(0);
  return out;
}

template <typename Scalar>
void save_image(const std::string& path, const Grid<Scalar>& image) {
  encode_png_file(path, from_grid(image));
}

/// Load an inpainting mask from a single-channel image file: pixel value 0
/// means missing, anything else known.
template <typename Scalar>
Grid<Scalar> load_mask(const std::string& path) {
  const RawImage raw = decode_image_file(path);
  Grid<Scalar> mask(raw.height, raw.width, 1);
  for (Eigen::Index p = 0; p < mask.positions(); ++p)
    mask.data(p, 0) = raw.pixels[static_cast<std::size_t>(p) * raw.channels] == 0 ? Scalar(0) : Scalar(1);
  return mask;
}

/// Decode every raster image in `directory` (lexicographic by filename),
/// center-crop to square and resize to resolution x resolution RGB in [0,1].
/// Undecodable files are skipped with a warning; an empty result is an error.
template <typename Scalar>
std::vector<Grid<Scalar>> load_dataset(const std::string& directory, int resolution) {
  namespace fs = std::filesystem;
  require(resolution > 0, "load_dataset: resolution must be positive");
  if (!fs::is_directory(directory))
    throw std::runtime_error("load_dataset: not a directory: " + directory);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(directory))
    if (entry.is_regular_file()) files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  std::vector<Grid<Scalar>> images;
  for (const auto& file : files) {
    RawImage raw;
    try {
      raw = decode_image_file(file);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << file << ": " << e.what() << "\n";
      continue;
    }
    Grid<Scalar> g = expand_to_rgb(to_grid<Scalar>(raw));
    images.push_back(resize_bilinear(center_crop_square(g), resolution, resolution));
  }
  if (images.empty()) throw std::runtime_error("load_dataset: no images found in " + directory);
  return images;
}

}  // namespace patchfill
