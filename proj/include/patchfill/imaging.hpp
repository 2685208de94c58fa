#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "patchfill/grid.hpp"
#include "patchfill/rng.hpp"

namespace patchfill {

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

inline int log2_int(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  return l;
}

/// Non-overlapped r x r patches, flattened row-major with channel fastest:
/// element ((py*r)+px)*C + c of patch (i,j) is pixel (i*r+py, j*r+px, c).
template <typename Scalar>
Grid<Scalar> partition(const Grid<Scalar>& image, int r) {
  require(r > 0, "partition: patch size must be positive");
  require(image.height % r == 0 && image.width % r == 0,
          "partition: image dimensions must be divisible by the patch size");
  const int gh = image.height / r;
  const int gw = image.width / r;
  const int c = image.channels;
  Grid<Scalar> patches(gh, gw, r * r * c);
  for (int i = 0; i < gh; ++i)
    for (int j = 0; j < gw; ++j) {
      auto dst = patches.row(i, j);
      for (int py = 0; py < r; ++py)
        for (int px = 0; px < r; ++px)
          dst.segment((py * r + px) * c, c) = image.row(i * r + py, j * r + px);
    }
  return patches;
}

/// Inverse of partition; bit-exact round trip.
template <typename Scalar>
Grid<Scalar> assemble(const Grid<Scalar>& patches, int r, int channels) {
  require(patches.channels == r * r * channels, "assemble: patch vector length mismatch");
  Grid<Scalar> image(patches.height * r, patches.width * r, channels);
  for (int i = 0; i < patches.height; ++i)
    for (int j = 0; j < patches.width; ++j) {
      auto src = patches.row(i, j);
      for (int py = 0; py < r; ++py)
        for (int px = 0; px < r; ++px)
          image.row(i * r + py, j * r + px) = src.segment((py * r + px) * channels, channels);
    }
  return image;
}

/// Entry (i,j) is 1 iff every pixel of patch (i,j) is known (mask value 1).
template <typename Scalar>
IndicatorMask indicator_mask(const Grid<Scalar>& mask, int r) {
  require(mask.channels == 1, "indicator_mask: mask must be single channel");
  require(mask.height % r == 0 && mask.width % r == 0,
          "indicator_mask: mask dimensions must be divisible by the patch size");
  IndicatorMask ind;
  ind.level = log2_int(r);
  ind.data = BinaryGrid::Zero(mask.height / r, mask.width / r);
  for (int i = 0; i < mask.height / r; ++i)
    for (int j = 0; j < mask.width / r; ++j) {
      bool all_known = true;
      for (int py = 0; py < r && all_known; ++py)
        for (int px = 0; px < r; ++px)
          if (mask.at(i * r + py, j * r + px, 0) == Scalar(0)) {
            all_known = false;
            break;
          }
      ind.data(i, j) = all_known ? 1 : 0;
    }
  return ind;
}

inline IndicatorMask min_pool2(const IndicatorMask& m) {
  IndicatorMask out;
  out.level = m.level + 1;
  out.data = BinaryGrid::Zero(m.data.rows() / 2, m.data.cols() / 2);
  for (Eigen::Index i = 0; i < out.data.rows(); ++i)
    for (Eigen::Index j = 0; j < out.data.cols(); ++j)
      out.data(i, j) = std::min(std::min(m.data(2 * i, 2 * j), m.data(2 * i, 2 * j + 1)),
                                std::min(m.data(2 * i + 1, 2 * j), m.data(2 * i + 1, 2 * j + 1)));
  return out;
}

/// Indicator pyramid for levels l = 0..log2(r). Level 0 is the pixel mask;
/// each coarser level is a 2x2 min-pool of the previous one, so an entry is 1
/// iff all covered pixels are known.
template <typename Scalar>
std::vector<IndicatorMask> multiscale_masks(const Grid<Scalar>& mask, int r) {
  require(is_power_of_two(r), "multiscale_masks: patch size must be a power of two");
  require(mask.channels == 1, "multiscale_masks: mask must be single channel");
  require(mask.height % r == 0 && mask.width % r == 0,
          "multiscale_masks: mask dimensions must be divisible by the patch size");
  std::vector<IndicatorMask> levels;
  IndicatorMask base;
  base.level = 0;
  base.data = BinaryGrid::Zero(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      base.data(y, x) = mask.at(y, x, 0) != Scalar(0) ? 1 : 0;
  levels.push_back(std::move(base));
  for (int l = 1; l <= log2_int(r); ++l) levels.push_back(min_pool2(levels.back()));
  return levels;
}

/// Elementwise product; missing pixels become 0. Mask is broadcast over
/// channels.
template <typename Scalar>
Grid<Scalar> apply_mask(const Grid<Scalar>& image, const Grid<Scalar>& mask) {
  require(mask.channels == 1, "apply_mask: mask must be single channel");
  require(image.height == mask.height && image.width == mask.width,
          "apply_mask: image and mask sizes differ");
  Grid<Scalar> out = image;
  for (Eigen::Index p = 0; p < image.positions(); ++p) out.data.row(p) *= mask.data(p, 0);
  return out;
}

template <typename Scalar>
Grid<Scalar> elementwise_mask_product(const Grid<Scalar>& a, const Grid<Scalar>& b) {
  require(a.channels == 1 && b.channels == 1 && a.height == b.height && a.width == b.width,
          "mask product: shape mismatch");
  Grid<Scalar> out = a;
  out.data = a.data.cwiseProduct(b.data);
  return out;
}

template <typename Scalar>
double mask_zero_fraction(const Grid<Scalar>& mask) {
  return static_cast<double>((mask.data.array() == Scalar(0)).count()) /
         static_cast<double>(mask.data.size());
}

namespace detail {

template <typename Scalar>
void stamp_disc(Grid<Scalar>& mask, double cy, double cx, double radius) {
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int y1 = std::min(mask.height - 1, static_cast<int>(std::ceil(cy + radius)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int x1 = std::min(mask.width - 1, static_cast<int>(std::ceil(cx + radius)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= radius * radius) mask.at(y, x, 0) = Scalar(0);
}

template <typename Scalar>
void stamp_stroke(Grid<Scalar>& mask, CounterRng& rng, double max_radius) {
  double y = rng.uniform(0.0, mask.height);
  double x = rng.uniform(0.0, mask.width);
  const int segments = 2 + static_cast<int>(rng.below(5));
  double radius = std::max(1.5, rng.uniform(0.3, 1.0) * max_radius);
  double angle = rng.uniform(0.0, 6.2831853071795864769);
  for (int s = 0; s < segments; ++s) {
    angle += rng.uniform(-1.0, 1.0);
    const double len = rng.uniform(0.5, 2.5) * max_radius;
    const double ny = std::clamp(y + len * std::sin(angle), 0.0, static_cast<double>(mask.height - 1));
    const double nx = std::clamp(x + len * std::cos(angle), 0.0, static_cast<double>(mask.width - 1));
    const int steps = 1 + static_cast<int>(std::hypot(ny - y, nx - x));
    for (int t = 0; t <= steps; ++t) {
      const double f = static_cast<double>(t) / steps;
      stamp_disc(mask, y + f * (ny - y), x + f * (nx - x), radius);
    }
    y = ny;
    x = nx;
  }
}

template <typename Scalar>
void stamp_rect(Grid<Scalar>& mask, CounterRng& rng, double max_side) {
  const int h = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(2.0, max_side))));
  const int w = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(2.0, max_side))));
  const int y0 = static_cast<int>(rng.below(std::max(1, mask.height - h)));
  const int x0 = static_cast<int>(rng.below(std::max(1, mask.width - w)));
  for (int y = y0; y < std::min(mask.height, y0 + h); ++y)
    for (int x = x0; x < std::min(mask.width, x0 + w); ++x) mask.at(y, x, 0) = Scalar(0);
}

}  // namespace detail

/// Procedural irregular mask: a union of thick brush strokes and rectangles,
/// grown until the zero-pixel fraction enters [lo, hi]. Deterministic given
/// the seed. Throws if the range cannot be hit within bounded retries.
template <typename Scalar>
Grid<Scalar> gen_mask(int resolution, double lo, double hi, std::uint64_t seed) {
  require(resolution > 0, "gen_mask: resolution must be positive");
  require(lo >= 0.0 && lo < hi && hi <= 1.0, "gen_mask: invalid ratio range");
  const int max_attempts = 64;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    CounterRng rng(seed, static_cast<std::uint64_t>(attempt));
    Grid<Scalar> mask(resolution, resolution, 1);
    mask.data.setOnes();
    // Shrink the brush as the remaining budget tightens so a single element
    // rarely overshoots hi.
    int guard = 0;
    while (mask_zero_fraction(mask) < lo) {
      if (++guard > 4096) break;
      const double remaining = hi - mask_zero_fraction(mask);
      const double max_radius =
          std::clamp(resolution * std::sqrt(std::max(remaining, 1e-4)) / 6.0, 1.5, resolution / 8.0);
      if (rng.bernoulli(0.7))
        detail::stamp_stroke(mask, rng, max_radius);
      else
        detail::stamp_rect(mask, rng, 2.0 * max_radius);
    }
    const double ratio = mask_zero_fraction(mask);
    if (ratio >= lo && ratio <= hi) return mask;
  }
  throw std::runtime_error("gen_mask: could not reach the requested mask ratio range");
}

/// Largest centered square crop.
template <typename Scalar>
Grid<Scalar> center_crop_square(const Grid<Scalar>& image) {
  const int side = std::min(image.height, image.width);
  const int y0 = (image.height - side) / 2;
  const int x0 = (image.width - side) / 2;
  Grid<Scalar> out(side, side, image.channels);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) out.row(y, x) = image.row(y0 + y, x0 + x);
  return out;
}

/// Bilinear resize with the half-pixel-center convention.
template <typename Scalar>
Grid<Scalar> resize_bilinear(const Grid<Scalar>& image, int out_h, int out_w) {
  require(out_h > 0 && out_w > 0, "resize: output size must be positive");
  if (out_h == image.height && out_w == image.width) return image;
  Grid<Scalar> out(out_h, out_w, image.channels);
  const double sy = static_cast<double>(image.height) / out_h;
  const double sx = static_cast<double>(image.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      out.row(y, x) = ((image.row(y0, x0) * (1 - wx) + image.row(y0, x1) * wx) * (1 - wy) +
                       (image.row(y1, x0) * (1 - wx) + image.row(y1, x1) * wx) * wy)
                          .template cast<Scalar>();
    }
  }
  return out;
}

}  // namespace patchfill
