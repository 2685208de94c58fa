#pragma once

#include "patchfill/pvqvae.hpp"

namespace patchfill {

template <typename Scalar>
struct VaeLossConfig {
  Scalar beta = Scalar(0.25);
  Scalar lambda_g = Scalar(5);
  Scalar lambda_a = Scalar(0.1);
  Scalar lambda_p = Scalar(0.1);
  Scalar lambda_s = Scalar(250);
  bool adversarial_enabled = false;
  bool perceptual_enabled = false;
};

template <typename Scalar>
struct LossParts {
  Scalar pixel = 0, grad = 0, adv = 0, perc = 0, style = 0;
  Scalar commitment = 0;  // reported by vae-level losses, zero otherwise
  Scalar total = 0;
};

namespace detail {

template <typename Scalar>
MatrixX<Scalar> sign_matrix(const MatrixX<Scalar>& m) {
  return ((m.array() > Scalar(0)).template cast<Scalar>() -
          (m.array() < Scalar(0)).template cast<Scalar>())
      .matrix();
}

/// Forward differences with replicate edge handling; the trailing row/column
/// of each direction is identically zero.
template <typename Scalar>
std::pair<Grid<Scalar>, Grid<Scalar>> image_gradients(const Grid<Scalar>& img) {
  Grid<Scalar> gx(img.height, img.width, img.channels);
  Grid<Scalar> gy(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x + 1 < img.width; ++x) gx.row(y, x) = img.row(y, x + 1) - img.row(y, x);
  for (int y = 0; y + 1 < img.height; ++y)
    for (int x = 0; x < img.width; ++x) gy.row(y, x) = img.row(y + 1, x) - img.row(y, x);
  return {std::move(gx), std::move(gy)};
}

template <typename Scalar>
MatrixX<Scalar> gram(const Grid<Scalar>& act) {
  return act.data.transpose() * act.data /
         static_cast<Scalar>(act.positions() * act.channels);
}

}  // namespace detail

/// Mean absolute difference of pixel values.
template <typename Scalar>
Scalar pixel_loss(const Grid<Scalar>& target, const Grid<Scalar>& recon) {
  require(target.same_shape(recon), "pixel_loss: shape mismatch");
  return (recon.data - target.data).cwiseAbs().sum() / static_cast<Scalar>(target.size());
}

/// Mean absolute difference of forward-difference image gradients, averaged
/// over both directions.
template <typename Scalar>
Scalar gradient_loss(const Grid<Scalar>& target, const Grid<Scalar>& recon) {
  require(target.same_shape(recon), "gradient_loss: shape mismatch");
  auto [gxa, gya] = detail::image_gradients(target);
  auto [gxb, gyb] = detail::image_gradients(recon);
  return ((gxb.data - gxa.data).cwiseAbs().sum() + (gyb.data - gya.data).cwiseAbs().sum()) /
         static_cast<Scalar>(2 * target.size());
}

/// Two-term non-saturating discriminator objective: real images pushed toward
/// score 1, reconstructions toward 0. Scores are clamped away from {0,1} by
/// 1e-7 before the logarithm. With `train_params` the discriminator's
/// gradients are accumulated.
template <typename Scalar>
Scalar discriminator_loss(const Grid<Scalar>& real, const Grid<Scalar>& fake,
                          PatchDiscriminator<Scalar>& disc, bool train_params = false) {
  require(real.same_shape(fake), "discriminator_loss: shape mismatch");
  const Scalar eps = Scalar(1e-7);
  typename PatchDiscriminator<Scalar>::Cache cr, cf;
  Grid<Scalar> sr = disc.forward(real, &cr);
  Grid<Scalar> sf = disc.forward(fake, &cf);
  const auto r = sr.data.array().max(eps).min(Scalar(1) - eps);
  const auto f = sf.data.array().max(eps).min(Scalar(1) - eps);
  const Scalar n_r = static_cast<Scalar>(sr.data.size());
  const Scalar n_f = static_cast<Scalar>(sf.data.size());
  const Scalar loss = -r.log().sum() / n_r - (Scalar(1) - f).log().sum() / n_f;
  if (train_params) {
    Grid<Scalar> dr = sr;
    dr.data = (-(r.inverse()) / n_r *
               ((sr.data.array() > eps) && (sr.data.array() < Scalar(1) - eps)).template cast<Scalar>())
                  .matrix();
    Grid<Scalar> df = sf;
    df.data = (((Scalar(1) - f).inverse()) / n_f *
               ((sf.data.array() > eps) && (sf.data.array() < Scalar(1) - eps)).template cast<Scalar>())
                  .matrix();
    disc.backward(cr, dr, true);
    disc.backward(cf, df, true);
  }
  return loss;
}

/// Weighted sum of the reconstruction terms. Disabled terms contribute zero.
/// When `d_recon` is given, the gradient w.r.t. the reconstruction is written
/// there (the discriminator, if any, is used frozen).
template <typename Scalar>
LossParts<Scalar> reconstruction_loss(const Grid<Scalar>& target, const Grid<Scalar>& recon,
                                      const VaeLossConfig<Scalar>& cfg,
                                      PatchDiscriminator<Scalar>* disc = nullptr,
                                      const FeatureExtractor<Scalar>* fx = nullptr,
                                      Grid<Scalar>* d_recon = nullptr) {
  require(target.same_shape(recon), "reconstruction_loss: shape mismatch");
  LossParts<Scalar> parts;
  const Scalar n = static_cast<Scalar>(target.size());
  if (d_recon) *d_recon = Grid<Scalar>(recon.height, recon.width, recon.channels);

  parts.pixel = pixel_loss(target, recon);
  if (d_recon) d_recon->data += detail::sign_matrix<Scalar>(recon.data - target.data) / n;

  {
    auto [gxa, gya] = detail::image_gradients(target);
    auto [gxb, gyb] = detail::image_gradients(recon);
    parts.grad = ((gxb.data - gxa.data).cwiseAbs().sum() + (gyb.data - gya.data).cwiseAbs().sum()) /
                 (Scalar(2) * n);
    if (d_recon) {
      const MatrixX<Scalar> sx = detail::sign_matrix<Scalar>(gxb.data - gxa.data) / (Scalar(2) * n);
      const MatrixX<Scalar> sy = detail::sign_matrix<Scalar>(gyb.data - gya.data) / (Scalar(2) * n);
      Grid<Scalar>& d = *d_recon;
      for (int y = 0; y < recon.height; ++y)
        for (int x = 0; x + 1 < recon.width; ++x) {
          const Eigen::Index p = static_cast<Eigen::Index>(y) * recon.width + x;
          d.data.row(p) -= cfg.lambda_g * sx.row(p);
          d.row(y, x + 1) += cfg.lambda_g * sx.row(p);
        }
      for (int y = 0; y + 1 < recon.height; ++y)
        for (int x = 0; x < recon.width; ++x) {
          const Eigen::Index p = static_cast<Eigen::Index>(y) * recon.width + x;
          d.data.row(p) -= cfg.lambda_g * sy.row(p);
          d.row(y + 1, x) += cfg.lambda_g * sy.row(p);
        }
    }
  }

  if (cfg.adversarial_enabled && disc) {
    // Generator side of the adversarial objective.
    const Scalar eps = Scalar(1e-7);
    typename PatchDiscriminator<Scalar>::Cache c;
    Grid<Scalar> scores = disc->forward(recon, &c);
    const auto s = scores.data.array().max(eps).min(Scalar(1) - eps);
    const Scalar ns = static_cast<Scalar>(scores.data.size());
    parts.adv = -s.log().sum() / ns;
    if (d_recon) {
      Grid<Scalar> ds = scores;
      ds.data = (-(s.inverse()) / ns *
                 ((scores.data.array() > eps) && (scores.data.array() < Scalar(1) - eps))
                     .template cast<Scalar>())
                    .matrix();
      d_recon->data += cfg.lambda_a * disc->backward(c, ds, false).data;
    }
  }

  if (cfg.perceptual_enabled && fx) {
    const std::vector<Grid<Scalar>> at = fx->extract(target);
    const std::vector<Grid<Scalar>> ar = fx->extract(recon);
    std::vector<Grid<Scalar>> dstages(ar.size());
    for (std::size_t l = 0; l < ar.size(); ++l) {
      const Scalar nl = static_cast<Scalar>(ar[l].size());
      parts.perc += (ar[l].data - at[l].data).cwiseAbs().sum() / nl;
      if (d_recon) {
        dstages[l] = Grid<Scalar>(ar[l].height, ar[l].width, ar[l].channels);
        dstages[l].data = cfg.lambda_p * detail::sign_matrix<Scalar>(ar[l].data - at[l].data) / nl;
      }
      if (l > 0) {  // style skips the full-resolution stage
        const MatrixX<Scalar> ga = detail::gram(at[l]);
        const MatrixX<Scalar> gr = detail::gram(ar[l]);
        const Scalar ng = static_cast<Scalar>(ga.size());
        parts.style += (gr - ga).cwiseAbs().sum() / ng;
        if (d_recon) {
          const MatrixX<Scalar> dg = detail::sign_matrix<Scalar>(gr - ga) / ng;
          dstages[l].data += cfg.lambda_s * ar[l].data * (dg + dg.transpose()) /
                             static_cast<Scalar>(ar[l].positions() * ar[l].channels);
        }
      }
    }
    if (d_recon) d_recon->data += fx->backward(recon, dstages).data;
  }

  parts.total = parts.pixel + cfg.lambda_g * parts.grad + cfg.lambda_a * parts.adv +
                cfg.lambda_p * parts.perc + cfg.lambda_s * parts.style;
  return parts;
}

/// Commitment term: beta-weighted mean squared distance between encoder
/// features and their (stop-gradient) quantized vectors.
template <typename Scalar>
Scalar commitment_loss(const Grid<Scalar>& features, const Grid<Scalar>& quantized, Scalar beta) {
  require(features.same_shape(quantized), "commitment_loss: shape mismatch");
  return beta * (features.data - quantized.data).squaredNorm() /
         static_cast<Scalar>(features.size());
}

/// Total auto-encoder objective: reconstruction terms plus the commitment
/// term. The codebook term is optimized by EMA and contributes no gradient;
/// its value is not part of the returned total.
template <typename Scalar>
LossParts<Scalar> vae_loss(const Grid<Scalar>& input_masked, const Grid<Scalar>& recon,
                           const Grid<Scalar>& features, const Grid<Scalar>& quantized,
                           const VaeLossConfig<Scalar>& cfg, PatchDiscriminator<Scalar>* disc = nullptr,
                           const FeatureExtractor<Scalar>* fx = nullptr) {
  LossParts<Scalar> parts = reconstruction_loss(input_masked, recon, cfg, disc, fx);
  parts.commitment = commitment_loss(features, quantized, cfg.beta);
  parts.total += parts.commitment;
  return parts;
}

/// Auto-encoder training triple: the input keeps pixels known under m, the
/// reference additionally drops pixels under m', and the decoder mask is the
/// product of both.
template <typename Scalar>
struct TrainingPair {
  Grid<Scalar> input;
  Grid<Scalar> reference;
  Grid<Scalar> decode_mask;
};

template <typename Scalar>
TrainingPair<Scalar> make_training_pair(const Grid<Scalar>& image, const Grid<Scalar>& mask_m,
                                        const Grid<Scalar>& mask_mprime) {
  require(image.height == mask_m.height && image.width == mask_m.width,
          "make_training_pair: image/mask size mismatch");
  require(mask_m.height == mask_mprime.height && mask_m.width == mask_mprime.width,
          "make_training_pair: mask size mismatch");
  TrainingPair<Scalar> pair;
  pair.input = apply_mask(image, mask_m);
  pair.reference = apply_mask(pair.input, mask_mprime);
  pair.decode_mask = elementwise_mask_product(mask_m, mask_mprime);
  return pair;
}

/// One auto-encoder forward pass with losses, optionally followed by the
/// backward pass. The decoder gradient reaches the encoder by the
/// straight-through copy from the quantized vectors to the features; the
/// commitment gradient reaches only the encoder.
template <typename Scalar>
struct VaeStepResult {
  LossParts<Scalar> parts;
  Grid<Scalar> features;
  Grid<Scalar> quantized;
  TokenGrid tokens;
  Grid<Scalar> recon;
};

template <typename Scalar>
VaeStepResult<Scalar> vae_step(PatchEncoder<Scalar>& encoder, MaskGuidedDecoder<Scalar>& decoder,
                               const DualCodebook<Scalar>& book, const Grid<Scalar>& image,
                               const Grid<Scalar>& mask_m, const Grid<Scalar>& mask_mprime,
                               const VaeLossConfig<Scalar>& cfg,
                               PatchDiscriminator<Scalar>* disc = nullptr,
                               const FeatureExtractor<Scalar>* fx = nullptr,
                               bool compute_grads = true) {
  VaeStepResult<Scalar> result;
  const TrainingPair<Scalar> pair = make_training_pair(image, mask_m, mask_mprime);
  const IndicatorMask indicator = indicator_mask(mask_m, encoder.patch);

  typename PatchEncoder<Scalar>::Cache ec;
  result.features = encoder.forward(pair.input, compute_grads ? &ec : nullptr);
  auto [quantized, tokens] = quantize(result.features, indicator, book);
  result.quantized = std::move(quantized);
  result.tokens = std::move(tokens);

  typename MaskGuidedDecoder<Scalar>::Cache dc;
  result.recon = decoder.forward(result.quantized, pair.decode_mask, pair.reference,
                                 compute_grads ? &dc : nullptr);

  Grid<Scalar> d_recon;
  result.parts = reconstruction_loss(pair.input, result.recon, cfg, disc, fx,
                                     compute_grads ? &d_recon : nullptr);
  result.parts.commitment = commitment_loss(result.features, result.quantized, cfg.beta);
  result.parts.total += result.parts.commitment;

  if (compute_grads) {
    Grid<Scalar> d_quantized = decoder.backward(dc, d_recon);
    MatrixX<Scalar> d_features = d_quantized.data;  // straight-through copy
    d_features += (Scalar(2) * cfg.beta / static_cast<Scalar>(result.features.size())) *
                  (result.features.data - result.quantized.data);
    encoder.backward(ec, d_features);
  }
  return result;
}

}  // namespace patchfill
