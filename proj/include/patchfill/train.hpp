#pragma once

#include <cstdio>
#include <iostream>
#include <optional>

#include "patchfill/checkpoint.hpp"
#include "patchfill/metrics.hpp"
#include "patchfill/optim.hpp"

namespace patchfill {

// Stage defaults: warmup to these peaks over the first 5000 steps, then
// cosine decay; the auto-encoder uses moments (0, 0.9), the transformer
// (0.9, 0.95) with decoupled weight decay.
inline constexpr double kVaePeakLr = 2e-4;
inline constexpr double kTransformerPeakLr = 3e-4;
inline constexpr double kVaeBeta1 = 0.0, kVaeBeta2 = 0.9;
inline constexpr double kTransformerBeta1 = 0.9, kTransformerBeta2 = 0.95;

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Order-sensitive hash of every auto-encoder and codebook value; used to
/// prove the first stage stays frozen while the transformer trains.
template <typename Scalar>
std::uint64_t vae_param_hash(InpaintModel<Scalar>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto fold = [&](const std::string&, Tensor<Scalar>& t) {
    h = detail::fnv1a(h, t.v.data(), static_cast<std::size_t>(t.v.size()) * sizeof(Scalar));
  };
  model.encoder.visit("e", fold);
  model.decoder.visit("d", fold);
  h = detail::fnv1a(h, model.book.e.data(), static_cast<std::size_t>(model.book.e.size()) * sizeof(Scalar));
  h = detail::fnv1a(h, model.book.e_prime.data(),
                    static_cast<std::size_t>(model.book.e_prime.size()) * sizeof(Scalar));
  return h;
}

template <typename Scalar>
VaeLossConfig<Scalar> make_loss_config(const TrainSettings& ts) {
  VaeLossConfig<Scalar> cfg;
  cfg.beta = static_cast<Scalar>(ts.beta);
  cfg.lambda_g = static_cast<Scalar>(ts.lambda_g);
  cfg.lambda_a = static_cast<Scalar>(ts.lambda_a);
  cfg.lambda_p = static_cast<Scalar>(ts.lambda_p);
  cfg.lambda_s = static_cast<Scalar>(ts.lambda_s);
  cfg.adversarial_enabled = ts.adversarial;
  cfg.perceptual_enabled = ts.perceptual;
  return cfg;
}

/// Builds a freshly initialized model bundle for the given architecture.
template <typename Scalar>
InpaintModel<Scalar> init_model(const ModelConfig& mc, std::uint64_t seed) {
  InpaintModel<Scalar> model;
  CounterRng enc_rng(seed, 1), dec_rng(seed, 2), t_rng(seed, 3);
  model.encoder.setup(mc.patch, mc.channels, mc.enc_blocks, enc_rng);
  model.decoder.setup(mc.patch, mc.channels, mc.dec_blocks, dec_rng);
  model.book = init_codebook<Scalar>(mc.codebook_size, mc.codebook_size_prime, mc.channels,
                                     static_cast<Scalar>(mc.gamma), seed + 17);
  TransformerConfig tc;
  tc.n_blocks = mc.t_blocks;
  tc.n_heads = mc.t_heads;
  tc.model_dim = mc.t_model_dim;
  tc.head_dim = mc.t_head_dim;
  tc.grid_h = mc.grid_h();
  tc.grid_w = mc.grid_w();
  tc.feat_dim = mc.channels;
  tc.vocab = mc.codebook_size;
  model.transformer.setup(tc, t_rng);
  return model;
}

/// First stage: auto-encoder plus codebook. Per step, every sample draws two
/// independent masks, runs the reconstruction objective with straight-through
/// gradients, then the codebook takes one pooled EMA update; the
/// discriminator (when enabled) takes its own alternating step.
template <typename Scalar>
TrainState<Scalar> train_vae(const ModelConfig& mc, const TrainSettings& ts,
                             const std::vector<Grid<Scalar>>& data, const std::string& out_path,
                             InpaintModel<Scalar>* model_out = nullptr) {
  require(!data.empty(), "train_vae: dataset is empty");
  for (const auto& img : data)
    require(img.height == mc.resolution && img.width == mc.resolution,
            "train_vae: dataset resolution does not match the config");
  InpaintModel<Scalar> local = init_model<Scalar>(mc, ts.seed);
  InpaintModel<Scalar>& model = model_out ? *model_out : local;
  if (model_out) model = std::move(local);

  PatchDiscriminator<Scalar> disc;
  std::unique_ptr<FeatureExtractor<Scalar>> fx;
  if (ts.adversarial) {
    CounterRng disc_rng(ts.seed, 4);
    disc.setup(mc.disc_base, disc_rng);
  }
  if (ts.perceptual) fx = std::make_unique<ConvPyramidExtractor<Scalar>>(mc.extractor_seed);
  const VaeLossConfig<Scalar> loss_cfg = make_loss_config<Scalar>(ts);
  const double peak_lr = ts.peak_lr > 0 ? ts.peak_lr : kVaePeakLr;

  AdamOptimizer<Scalar> opt(kVaeBeta1, kVaeBeta2);
  AdamOptimizer<Scalar> disc_opt(kVaeBeta1, kVaeBeta2);
  auto visit_gen = [&](auto&& f) {
    model.encoder.visit("pvqvae.encoder", f);
    model.decoder.visit("pvqvae.decoder", f);
  };
  auto visit_disc = [&](auto&& f) { disc.visit("pvqvae.disc", f); };

  CounterRng rng(ts.seed, 100);
  TrainState<Scalar> state;
  state.stage = "vae";
  state.rng_seed = ts.seed;
  for (long step = 0; step < ts.max_steps; ++step) {
    visit_gen([](const std::string&, Tensor<Scalar>& p) { p.zero_grad(); });
    std::vector<Grid<Scalar>> feats;
    std::vector<TokenGrid> toks;
    double total = 0;
    LossParts<Scalar> last_parts;
    std::vector<std::pair<Grid<Scalar>, Grid<Scalar>>> disc_pairs;
    for (int b = 0; b < ts.batch_size; ++b) {
      const auto& image = data[rng.below(data.size())];
      const Grid<Scalar> m = gen_mask<Scalar>(mc.resolution, ts.mask_lo, ts.mask_hi, rng.next_u64());
      const Grid<Scalar> mp = gen_mask<Scalar>(mc.resolution, ts.mask_lo, ts.mask_hi, rng.next_u64());
      VaeStepResult<Scalar> r = vae_step(model.encoder, model.decoder, model.book, image, m, mp,
                                         loss_cfg, ts.adversarial ? &disc : nullptr, fx.get(), true);
      total += static_cast<double>(r.parts.total);
      last_parts = r.parts;
      feats.push_back(std::move(r.features));
      toks.push_back(std::move(r.tokens));
      if (ts.adversarial)
        disc_pairs.emplace_back(apply_mask(image, m), std::move(r.recon));
    }
    total /= ts.batch_size;
    if (!std::isfinite(total))
      throw std::runtime_error("train_vae: non-finite loss at step " + std::to_string(step) +
                               " (pixel=" + std::to_string(static_cast<double>(last_parts.pixel)) +
                               ", grad=" + std::to_string(static_cast<double>(last_parts.grad)) + ")");
    const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(ts.batch_size);
    visit_gen([&](const std::string&, Tensor<Scalar>& p) { p.g *= inv_batch; });
    const double lr = lr_schedule(step, ts.warmup_steps, peak_lr, ts.max_steps);
    opt.step(visit_gen, lr);

    std::vector<const Grid<Scalar>*> fp;
    std::vector<const TokenGrid*> tp;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      fp.push_back(&feats[i]);
      tp.push_back(&toks[i]);
    }
    ema_update(model.book, std::span<const Grid<Scalar>* const>(fp),
               std::span<const TokenGrid* const>(tp));

    if (ts.adversarial) {
      visit_disc([](const std::string&, Tensor<Scalar>& p) { p.zero_grad(); });
      for (auto& [real, fake] : disc_pairs) discriminator_loss(real, fake, disc, true);
      visit_disc([&](const std::string&, Tensor<Scalar>& p) { p.g *= inv_batch; });
      disc_opt.step(visit_disc, lr);
    }

    state.step = step + 1;
    state.rng_counter = rng.counter();
    if (ts.log_every > 0 && (step % ts.log_every == 0 || step + 1 == ts.max_steps))
      std::cout << "[vae] step " << step << " loss " << total << " lr " << lr << "\n";
    if (!out_path.empty() && ts.checkpoint_every > 0 && (step + 1) % ts.checkpoint_every == 0)
      save_checkpoint(out_path, mc, model, ts.adversarial ? &disc : nullptr, state, false);
  }
  if (!out_path.empty())
    save_checkpoint(out_path, mc, model, ts.adversarial ? &disc : nullptr, state, false);
  return state;
}

/// Second stage: the transformer learns to predict ground-truth tokens at
/// masked positions from (randomly re-quantized) features of the masked
/// image. The auto-encoder and codebook stay frozen; a value hash before and
/// after proves it.
template <typename Scalar>
TrainState<Scalar> train_transformer(const ModelConfig& mc, const TrainSettings& ts,
                                     InpaintModel<Scalar>& model,
                                     const std::vector<Grid<Scalar>>& data,
                                     const std::string& out_path) {
  require(!data.empty(), "train_transformer: dataset is empty");
  const std::uint64_t frozen_hash = vae_param_hash(model);
  const double peak_lr = ts.peak_lr > 0 ? ts.peak_lr : kTransformerPeakLr;
  AdamOptimizer<Scalar> opt(kTransformerBeta1, kTransformerBeta2, ts.weight_decay);
  auto visit_t = [&](auto&& f) { model.transformer.visit("transformer", f); };

  CounterRng rng(ts.seed, 200);
  TrainState<Scalar> state;
  state.stage = "transformer";
  state.rng_seed = ts.seed;
  for (long step = 0; step < ts.max_steps; ++step) {
    visit_t([](const std::string&, Tensor<Scalar>& p) { p.zero_grad(); });
    double total = 0;
    for (int b = 0; b < ts.batch_size; ++b) {
      const auto& image = data[rng.below(data.size())];
      // The objective is undefined for a mask with no masked patches, so
      // resample until one appears.
      Grid<Scalar> m;
      IndicatorMask ind;
      for (int tries = 0;; ++tries) {
        m = gen_mask<Scalar>(mc.resolution, ts.mask_lo, ts.mask_hi, rng.next_u64());
        ind = indicator_mask(m, mc.patch);
        if (ind.count_masked() > 0) break;
        require(tries < 64, "train_transformer: could not draw a mask with masked patches");
      }
      const Grid<Scalar> masked = apply_mask(image, m);
      Grid<Scalar> features = model.encoder.forward(masked);
      features = random_quantize(features, ind, model.book, ts.random_quantize_prob, rng.next_u64());
      const TokenGrid targets = ground_truth_tokens(image, model.encoder, model.book);
      typename TokenTransformer<Scalar>::Cache cache;
      const Grid<Scalar> probs = model.transformer.forward(features, &cache);
      MatrixX<Scalar> dprobs;
      total += static_cast<double>(masked_ce_loss(probs, targets, ind, &dprobs));
      model.transformer.backward(cache, dprobs);
    }
    total /= ts.batch_size;
    if (!std::isfinite(total))
      throw std::runtime_error("train_transformer: non-finite loss at step " + std::to_string(step));
    const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(ts.batch_size);
    visit_t([&](const std::string&, Tensor<Scalar>& p) { p.g *= inv_batch; });
    opt.step(visit_t, lr_schedule(step, ts.warmup_steps, peak_lr, ts.max_steps));

    state.step = step + 1;
    state.rng_counter = rng.counter();
    if (ts.log_every > 0 && (step % ts.log_every == 0 || step + 1 == ts.max_steps))
      std::cout << "[transformer] step " << step << " ce " << total << "\n";
    if (!out_path.empty() && ts.checkpoint_every > 0 && (step + 1) % ts.checkpoint_every == 0)
      save_checkpoint(out_path, mc, model, nullptr, state, true);
  }
  if (vae_param_hash(model) != frozen_hash)
    throw std::runtime_error("train_transformer: frozen auto-encoder parameters changed");
  if (!out_path.empty()) save_checkpoint(out_path, mc, model, nullptr, state, true);
  return state;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct MetricBucket {
  double lo = 0.2, hi = 0.4;
};

struct MetricRow {
  MetricBucket bucket;
  double psnr = 0, ssim = 0, mae = 0;
  int n = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  std::string to_csv() const {
    char line[160];
    std::string out = "bucket,psnr,ssim,mae,n\n";
    for (const auto& r : rows) {
      std::snprintf(line, sizeof(line), "%.2f-%.2f,%.6f,%.6f,%.6f,%d\n", r.bucket.lo, r.bucket.hi,
                    r.psnr, r.ssim, r.mae, r.n);
      out += line;
    }
    return out;
  }
};

/// Per bucket and image: draw a mask in the bucket, inpaint, score against
/// the ground truth. Masks and sampling seeds derive from (seed, bucket,
/// image index), so reports are reproducible.
template <typename Scalar>
MetricReport evaluate(const InpaintModel<Scalar>& model, const ModelConfig& mc,
                      const std::vector<Grid<Scalar>>& data, const std::vector<MetricBucket>& buckets,
                      const SamplerConfig& scfg, std::uint64_t seed) {
  require(!data.empty(), "evaluate: dataset is empty");
  MetricReport report;
  for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
    MetricRow row;
    row.bucket = buckets[bi];
    for (std::size_t i = 0; i < data.size(); ++i) {
      CounterRng derive(seed, (bi << 32) | i);
      const Grid<Scalar> mask =
          gen_mask<Scalar>(mc.resolution, buckets[bi].lo, buckets[bi].hi, derive.next_u64());
      const Grid<Scalar> masked = apply_mask(data[i], mask);
      Grid<Scalar> result;
      if (scfg.deterministic) {
        result = inpaint_deterministic(masked, mask, model);
      } else {
        SamplerConfig one = scfg;
        one.seed = derive.next_u64();
        result = inpaint_pluralistic(masked, mask, model, one);
      }
      row.psnr += psnr(data[i], result);
      row.ssim += ssim(data[i], result);
      row.mae += mae(data[i], result);
      ++row.n;
    }
    row.psnr /= row.n;
    row.ssim /= row.n;
    row.mae /= row.n;
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace patchfill
