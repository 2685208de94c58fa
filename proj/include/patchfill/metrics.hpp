#pragma once

#include <cmath>

#include "patchfill/grid.hpp"

namespace patchfill {

/// Peak signal-to-noise ratio in decibels for unit dynamic range, capped at
/// 100 dB (identical images).
template <typename Scalar>
double psnr(const Grid<Scalar>& a, const Grid<Scalar>& b) {
  require(a.same_shape(b), "psnr: shape mismatch");
  const double mse = (a.data - b.data).template cast<double>().squaredNorm() /
                     static_cast<double>(a.size());
  if (mse <= 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

/// Mean absolute difference over all pixels and channels.
template <typename Scalar>
double mae(const Grid<Scalar>& a, const Grid<Scalar>& b) {
  require(a.same_shape(b), "mae: shape mismatch");
  return (a.data - b.data).template cast<double>().cwiseAbs().sum() / static_cast<double>(a.size());
}

/// sum|a-b| / sum|a| variant for callers that want a scale-relative error.
template <typename Scalar>
double relative_mae(const Grid<Scalar>& a, const Grid<Scalar>& b) {
  require(a.same_shape(b), "relative_mae: shape mismatch");
  const double denom = a.data.template cast<double>().cwiseAbs().sum();
  if (denom == 0.0) return 0.0;
  return (a.data - b.data).template cast<double>().cwiseAbs().sum() / denom;
}

namespace detail {

inline std::vector<double> gaussian_kernel(int taps, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(taps));
  const double c = (taps - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < taps; ++i) {
    k[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable valid-mode filtering of one channel held as an h x w row-major
// matrix of doubles.
inline Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& img, const std::vector<double>& k) {
  const int taps = static_cast<int>(k.size());
  const int oh = static_cast<int>(img.rows()) - taps + 1;
  const int ow = static_cast<int>(img.cols()) - taps + 1;
  Eigen::MatrixXd tmp(img.rows(), ow);
  tmp.setZero();
  for (int t = 0; t < taps; ++t) tmp += k[static_cast<std::size_t>(t)] * img.middleCols(t, ow);
  Eigen::MatrixXd out(oh, ow);
  out.setZero();
  for (int t = 0; t < taps; ++t) out += k[static_cast<std::size_t>(t)] * tmp.middleRows(t, oh);
  return out;
}

}  // namespace detail

/// Windowed SSIM with an 11x11 Gaussian window (sigma 1.5) and stabilizers
/// C1=0.01^2, C2=0.03^2 for unit dynamic range, averaged over channels and
/// window positions. Images smaller than the window use the largest odd
/// window that fits.
template <typename Scalar>
double ssim(const Grid<Scalar>& a, const Grid<Scalar>& b) {
  require(a.same_shape(b), "ssim: shape mismatch");
  int taps = std::min(11, std::min(a.height, a.width));
  if (taps % 2 == 0) --taps;
  require(taps >= 1, "ssim: empty image");
  const auto kernel = detail::gaussian_kernel(taps, 1.5);
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  double acc = 0;
  for (int ch = 0; ch < a.channels; ++ch) {
    Eigen::MatrixXd ia(a.height, a.width), ib(a.height, a.width);
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        ia(y, x) = static_cast<double>(a.at(y, x, ch));
        ib(y, x) = static_cast<double>(b.at(y, x, ch));
      }
    const Eigen::MatrixXd mu_a = detail::filter_valid(ia, kernel);
    const Eigen::MatrixXd mu_b = detail::filter_valid(ib, kernel);
    const Eigen::MatrixXd var_a =
        detail::filter_valid(ia.cwiseProduct(ia), kernel) - mu_a.cwiseProduct(mu_a);
    const Eigen::MatrixXd var_b =
        detail::filter_valid(ib.cwiseProduct(ib), kernel) - mu_b.cwiseProduct(mu_b);
    const Eigen::MatrixXd cov =
        detail::filter_valid(ia.cwiseProduct(ib), kernel) - mu_a.cwiseProduct(mu_b);
    const Eigen::ArrayXXd num = (2 * mu_a.cwiseProduct(mu_b).array() + c1) * (2 * cov.array() + c2);
    const Eigen::ArrayXXd den = (mu_a.array().square() + mu_b.array().square() + c1) *
                                (var_a.array() + var_b.array() + c2);
    acc += (num / den).mean();
  }
  return acc / a.channels;
}

}  // namespace patchfill
