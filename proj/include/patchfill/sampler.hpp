#pragma once

#include <algorithm>
#include <numeric>
#include <utility>

#include "patchfill/codebook.hpp"
#include "patchfill/losses.hpp"
#include "patchfill/transformer.hpp"

namespace patchfill {

struct SamplerConfig {
  int top_k = 50;
  bool deterministic = false;
  std::uint64_t seed = 0;
};

/// Frozen model bundle used for inference.
template <typename Scalar>
struct InpaintModel {
  PatchEncoder<Scalar> encoder;
  MaskGuidedDecoder<Scalar> decoder;
  DualCodebook<Scalar> book;
  TokenTransformer<Scalar> transformer;
};

namespace detail {

/// Selection and sampling core of one Gibbs iteration: pick the masked
/// position whose distribution has the highest peak (ties to the smallest
/// row-major index), then draw a token from the top-K entries of that row
/// renormalized to sum 1 (ties in the top-K ordering also to the smallest
/// index). Exactly one uniform draw is consumed.
template <typename Scalar>
std::pair<std::pair<int, int>, int> select_and_sample(const Grid<Scalar>& probs,
                                                      const IndicatorMask& indicator, int top_k,
                                                      CounterRng& rng) {
  require(top_k >= 1 && top_k <= probs.channels, "gibbs_step: top_k out of range");
  require(indicator.height() == probs.height && indicator.width() == probs.width,
          "gibbs_step: indicator shape mismatch");
  int best_i = -1, best_j = -1;
  Scalar best_peak = Scalar(0);
  for (int i = 0; i < probs.height; ++i)
    for (int j = 0; j < probs.width; ++j) {
      if (indicator.data(i, j)) continue;
      const Scalar peak = probs.row(i, j).maxCoeff();
      if (best_i < 0 || peak > best_peak) {
        best_peak = peak;
        best_i = i;
        best_j = j;
      }
    }
  require(best_i >= 0, "gibbs_step: no masked positions remain");

  const auto row = probs.row(best_i, best_j);
  std::vector<int> order(static_cast<std::size_t>(probs.channels));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                    [&](int a, int b) { return row(a) > row(b) || (row(a) == row(b) && a < b); });
  double total = 0;
  for (int t = 0; t < top_k; ++t) total += static_cast<double>(row(order[static_cast<std::size_t>(t)]));
  const double u = rng.uniform() * total;
  double cum = 0;
  int token = order[static_cast<std::size_t>(top_k - 1)];
  for (int t = 0; t < top_k; ++t) {
    cum += static_cast<double>(row(order[static_cast<std::size_t>(t)]));
    if (u < cum) {
      token = order[static_cast<std::size_t>(t)];
      break;
    }
  }
  return {{best_i, best_j}, token};
}

}  // namespace detail

/// One Gibbs iteration: transformer forward on the current features, then
/// select-and-sample over the remaining masked positions.
template <typename Scalar>
std::pair<std::pair<int, int>, int> gibbs_step(const Grid<Scalar>& features,
                                               const IndicatorMask& indicator,
                                               const TokenTransformer<Scalar>& transformer,
                                               const SamplerConfig& cfg, CounterRng& rng) {
  require(indicator.count_masked() > 0, "gibbs_step: no masked positions");
  const Grid<Scalar> probs = transformer.forward(features);
  return detail::select_and_sample(probs, indicator, cfg.top_k, rng);
}

/// Iterative top-K sampling: one masked patch resolved per transformer
/// forward. After each draw the sampled position's token is fixed, its
/// indicator flipped to known and its feature replaced by the codebook entry.
template <typename Scalar>
Grid<Scalar> inpaint_pluralistic(const Grid<Scalar>& masked_image, const Grid<Scalar>& mask,
                                 const InpaintModel<Scalar>& model, const SamplerConfig& cfg) {
  IndicatorMask indicator = indicator_mask(mask, model.encoder.patch);
  Grid<Scalar> features = model.encoder.forward(masked_image);
  TokenGrid tokens = quantize(features, indicator, model.book).second;
  CounterRng rng(cfg.seed, 0x6b5);
  while (indicator.count_masked() > 0) {
    const Grid<Scalar> probs = model.transformer.forward(features);
    const auto [pos, token] = detail::select_and_sample(probs, indicator, cfg.top_k, rng);
    tokens.data(pos.first, pos.second) = token;
    tokens.bank(pos.first, pos.second) = 1;
    indicator.data(pos.first, pos.second) = 1;
    features.row(pos.first, pos.second) = model.book.e.row(token);
  }
  const Grid<Scalar> vectors = tokens_to_vectors(tokens, model.book, Bank::unmasked);
  return model.decoder.forward(vectors, mask, masked_image);
}

/// Deterministic variant: a single transformer forward, argmax tokens for all
/// masked positions at once.
template <typename Scalar>
Grid<Scalar> inpaint_deterministic(const Grid<Scalar>& masked_image, const Grid<Scalar>& mask,
                                   const InpaintModel<Scalar>& model) {
  IndicatorMask indicator = indicator_mask(mask, model.encoder.patch);
  const Grid<Scalar> features = model.encoder.forward(masked_image);
  TokenGrid tokens = quantize(features, indicator, model.book).second;
  if (indicator.count_masked() > 0) {
    const Grid<Scalar> probs = model.transformer.forward(features);
    for (int i = 0; i < indicator.height(); ++i)
      for (int j = 0; j < indicator.width(); ++j) {
        if (indicator.data(i, j)) continue;
        Eigen::Index best = 0;
        probs.row(i, j).maxCoeff(&best);
        tokens.data(i, j) = static_cast<std::int32_t>(best);
        tokens.bank(i, j) = 1;
      }
  }
  const Grid<Scalar> vectors = tokens_to_vectors(tokens, model.book, Bank::unmasked);
  return model.decoder.forward(vectors, mask, masked_image);
}

}  // namespace patchfill
