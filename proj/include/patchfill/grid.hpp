#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace patchfill {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Patch- or pixel-resolution binary map, rows = height, cols = width.
using BinaryGrid = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using TokenArray = Eigen::Array<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense H x W x C grid. Row p = y*width + x of `data` holds the C channel
/// values of pixel/patch (y, x). Images use C=3 with values in [0,1], masks
/// C=1 with values in {0,1}.
template <typename Scalar>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 0;
  MatrixX<Scalar> data;

  Grid() = default;
  Grid(int h, int w, int c) : height(h), width(w), channels(c), data(MatrixX<Scalar>::Zero(h * w, c)) {}

  Eigen::Index positions() const { return static_cast<Eigen::Index>(height) * width; }
  Eigen::Index size() const { return positions() * channels; }

  Scalar& at(int y, int x, int c) { return data(static_cast<Eigen::Index>(y) * width + x, c); }
  Scalar at(int y, int x, int c) const { return data(static_cast<Eigen::Index>(y) * width + x, c); }

  auto row(int y, int x) { return data.row(static_cast<Eigen::Index>(y) * width + x); }
  auto row(int y, int x) const { return data.row(static_cast<Eigen::Index>(y) * width + x); }

  bool same_shape(const Grid& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  template <typename T>
  Grid<T> cast() const {
    Grid<T> g;
    g.height = height;
    g.width = width;
    g.channels = channels;
    g.data = data.template cast<T>();
    return g;
  }
};

/// Patch-level (or coarser/finer) knownness map. Entry 1 means every covered
/// pixel is known, 0 means at least one covered pixel is missing. `level` l
/// corresponds to spatial size (H/2^l) x (W/2^l); level 0 is pixel resolution.
struct IndicatorMask {
  int level = 0;
  BinaryGrid data;

  int height() const { return static_cast<int>(data.rows()); }
  int width() const { return static_cast<int>(data.cols()); }
  Eigen::Index count_masked() const {
    return static_cast<Eigen::Index>((data == 0).count());
  }
};

/// Integer token indices plus which codebook bank each entry indexes
/// (bank entry 1 = unmasked bank e, 0 = masked bank e').
struct TokenGrid {
  TokenArray data;
  BinaryGrid bank;

  int height() const { return static_cast<int>(data.rows()); }
  int width() const { return static_cast<int>(data.cols()); }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace patchfill
