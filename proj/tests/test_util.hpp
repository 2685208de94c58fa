#pragma once

#include <patchfill/grid.hpp>
#include <patchfill/rng.hpp>

namespace patchfill::testing {

template <typename Scalar>
Grid<Scalar> random_image(int h, int w, int c, std::uint64_t seed) {
  Grid<Scalar> g(h, w, c);
  CounterRng rng(seed);
  for (Eigen::Index p = 0; p < g.positions(); ++p)
    for (int ch = 0; ch < c; ++ch) g.data(p, ch) = static_cast<Scalar>(rng.uniform());
  return g;
}

template <typename Scalar>
Grid<Scalar> random_features(int h, int w, int c, std::uint64_t seed, double sd = 1.0) {
  Grid<Scalar> g(h, w, c);
  CounterRng rng(seed);
  for (Eigen::Index p = 0; p < g.positions(); ++p)
    for (int ch = 0; ch < c; ++ch) g.data(p, ch) = static_cast<Scalar>(sd * rng.gaussian());
  return g;
}

template <typename Scalar>
Grid<Scalar> random_binary_mask(int h, int w, double p_known, std::uint64_t seed) {
  Grid<Scalar> g(h, w, 1);
  CounterRng rng(seed);
  for (Eigen::Index p = 0; p < g.positions(); ++p)
    g.data(p, 0) = rng.bernoulli(p_known) ? Scalar(1) : Scalar(0);
  return g;
}

inline IndicatorMask random_indicator(int h, int w, double p_known, std::uint64_t seed, int level = 3) {
  IndicatorMask ind;
  ind.level = level;
  ind.data = BinaryGrid::Zero(h, w);
  CounterRng rng(seed);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) ind.data(i, j) = rng.bernoulli(p_known) ? 1 : 0;
  return ind;
}

}  // namespace patchfill::testing
