#pragma once

#include <string>
#include <vector>

#include "patchfill/codebook.hpp"
#include "patchfill/nn.hpp"
#include "patchfill/pvqvae.hpp"

namespace patchfill {

struct TransformerConfig {
  int n_blocks = 2;
  int n_heads = 2;
  int model_dim = 64;
  int head_dim = 32;
  int grid_h = 8;
  int grid_w = 8;
  int feat_dim = 64;  // encoder feature dimension C
  int vocab = 512;    // K, the unmasked-bank size
  int mlp_hidden() const { return 4 * model_dim; }
  int positions() const { return grid_h * grid_w; }
};

/// Transformer over the full patch grid (no causal mask): continuous encoder
/// features in, per-patch categorical distributions over the unmasked bank
/// out.
template <typename Scalar>
class TokenTransformer {
 public:
  TransformerConfig cfg;

  struct Block {
    LayerNorm<Scalar> ln1, ln2;
    Tensor<Scalar> wq, wk, wv;  // D x (h*D')
    Tensor<Scalar> wo;          // (h*D') x D
    Linear<Scalar> mlp_in;      // D -> 4D
    Linear<Scalar> mlp_out;     // 4D -> D
  };

  Linear<Scalar> input_proj;  // C -> D
  Tensor<Scalar> pos_embed;   // P x D
  std::vector<Block> blocks;
  Linear<Scalar> head;  // D -> K

  void setup(const TransformerConfig& config, CounterRng& rng) {
    require(config.n_blocks >= 1 && config.n_heads >= 1, "TokenTransformer: bad block/head count");
    cfg = config;
    const int D = cfg.model_dim;
    const int HD = cfg.n_heads * cfg.head_dim;
    input_proj.setup(cfg.feat_dim, D, rng);
    pos_embed.setup(cfg.positions(), D);
    pos_embed.fill_gaussian(0.02, rng);
    blocks.resize(cfg.n_blocks);
    const double attn_sd = 1.0 / std::sqrt(static_cast<double>(D));
    for (auto& b : blocks) {
      b.ln1.setup(D);
      b.ln2.setup(D);
      b.wq.setup(D, HD);
      b.wq.fill_gaussian(attn_sd, rng);
      b.wk.setup(D, HD);
      b.wk.fill_gaussian(attn_sd, rng);
      b.wv.setup(D, HD);
      b.wv.fill_gaussian(attn_sd, rng);
      b.wo.setup(HD, D);
      b.wo.fill_gaussian(1.0 / std::sqrt(static_cast<double>(HD)), rng);
      b.mlp_in.setup(D, cfg.mlp_hidden(), rng);
      b.mlp_out.setup(cfg.mlp_hidden(), D, rng);
    }
    // Small-scale head so the initial distributions are close to uniform.
    head.setup(D, cfg.vocab, rng, 0.02);
  }

  struct Cache {
    MatrixX<Scalar> feats;  // P x C input
    MatrixX<Scalar> x0;     // post projection + position embedding
    struct Blk {
      MatrixX<Scalar> x_in;  // block input
      typename LayerNorm<Scalar>::Cache ln1c;
      MatrixX<Scalar> n1;
      MatrixX<Scalar> q, k, v;            // P x (h*D')
      std::vector<MatrixX<Scalar>> attn;  // per head P x P softmax
      MatrixX<Scalar> heads;              // P x (h*D')
      MatrixX<Scalar> x_mid;              // after attention residual
      typename LayerNorm<Scalar>::Cache ln2c;
      MatrixX<Scalar> n2;
      MatrixX<Scalar> u;  // mlp hidden pre-activation
      MatrixX<Scalar> g;  // post gelu
    };
    std::vector<Blk> blk;
    MatrixX<Scalar> x_final;
    MatrixX<Scalar> probs;  // P x K
  };

  /// Probabilities over the unmasked bank for every patch position.
  Grid<Scalar> forward(const Grid<Scalar>& features, Cache* cache = nullptr) const {
    require(features.channels == cfg.feat_dim, "transformer: feature dimension mismatch");
    require(features.height == cfg.grid_h && features.width == cfg.grid_w,
            "transformer: grid does not match the configured positions");
    const int D_p = cfg.head_dim;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(D_p));
    Cache scratch;
    Cache& c = cache ? *cache : scratch;
    c.feats = features.data;
    MatrixX<Scalar> x = input_proj.forward(features.data) + pos_embed.v;
    c.x0 = x;
    c.blk.resize(blocks.size());
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const Block& b = blocks[bi];
      auto& bc = c.blk[bi];
      bc.x_in = x;
      bc.n1 = b.ln1.forward(x, &bc.ln1c);
      bc.q.noalias() = bc.n1 * b.wq.v;
      bc.k.noalias() = bc.n1 * b.wk.v;
      bc.v.noalias() = bc.n1 * b.wv.v;
      bc.attn.resize(cfg.n_heads);
      bc.heads.resize(x.rows(), cfg.n_heads * D_p);
      for (int h = 0; h < cfg.n_heads; ++h) {
        auto qh = bc.q.middleCols(h * D_p, D_p);
        auto kh = bc.k.middleCols(h * D_p, D_p);
        auto vh = bc.v.middleCols(h * D_p, D_p);
        MatrixX<Scalar> scores = (qh * kh.transpose()) * scale;
        bc.attn[h] = softmax_rows(scores);
        bc.heads.middleCols(h * D_p, D_p).noalias() = bc.attn[h] * vh;
      }
      x += bc.heads * blocks[bi].wo.v;
      bc.x_mid = x;
      bc.n2 = b.ln2.forward(x, &bc.ln2c);
      bc.u = b.mlp_in.forward(bc.n2);
      bc.g = gelu(bc.u);
      x += b.mlp_out.forward(bc.g);
    }
    c.x_final = x;
    c.probs = softmax_rows(head.forward(x).eval());
    Grid<Scalar> out(cfg.grid_h, cfg.grid_w, cfg.vocab);
    out.data = c.probs;
    return out;
  }

  /// Backward from a gradient on the output probabilities; accumulates
  /// parameter gradients and returns the gradient on the input features.
  Grid<Scalar> backward(const Cache& c, const MatrixX<Scalar>& dprobs) {
    const int D_p = cfg.head_dim;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(D_p));
    MatrixX<Scalar> dlogits = softmax_rows_backward(dprobs, c.probs);
    MatrixX<Scalar> dx = head.backward(c.x_final, dlogits);
    for (std::size_t bi = blocks.size(); bi-- > 0;) {
      Block& b = blocks[bi];
      const auto& bc = c.blk[bi];
      // MLP sub-block.
      MatrixX<Scalar> dg = b.mlp_out.backward(bc.g, dx);
      MatrixX<Scalar> du = gelu_backward(dg, bc.u);
      MatrixX<Scalar> dn2 = b.mlp_in.backward(bc.n2, du);
      dx += b.ln2.backward(bc.ln2c, dn2);
      // Attention sub-block.
      MatrixX<Scalar> dheads = dx * b.wo.v.transpose();
      b.wo.g.noalias() += bc.heads.transpose() * dx;
      MatrixX<Scalar> dq(bc.q.rows(), bc.q.cols());
      MatrixX<Scalar> dk(bc.k.rows(), bc.k.cols());
      MatrixX<Scalar> dv(bc.v.rows(), bc.v.cols());
      for (int h = 0; h < cfg.n_heads; ++h) {
        auto qh = bc.q.middleCols(h * D_p, D_p);
        auto kh = bc.k.middleCols(h * D_p, D_p);
        auto vh = bc.v.middleCols(h * D_p, D_p);
        auto dh = dheads.middleCols(h * D_p, D_p);
        MatrixX<Scalar> dattn = dh * vh.transpose();
        dv.middleCols(h * D_p, D_p).noalias() = bc.attn[h].transpose() * dh;
        MatrixX<Scalar> dscores = softmax_rows_backward(dattn, bc.attn[h]) * scale;
        dq.middleCols(h * D_p, D_p).noalias() = dscores * kh;
        dk.middleCols(h * D_p, D_p).noalias() = dscores.transpose() * qh;
      }
      MatrixX<Scalar> dn1 = dq * b.wq.v.transpose() + dk * b.wk.v.transpose() + dv * b.wv.v.transpose();
      b.wq.g.noalias() += bc.n1.transpose() * dq;
      b.wk.g.noalias() += bc.n1.transpose() * dk;
      b.wv.g.noalias() += bc.n1.transpose() * dv;
      dx += b.ln1.backward(bc.ln1c, dn1);
    }
    pos_embed.g += dx;
    MatrixX<Scalar> dfeats = input_proj.backward(c.feats, dx);
    Grid<Scalar> out(cfg.grid_h, cfg.grid_w, cfg.feat_dim);
    out.data = std::move(dfeats);
    return out;
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    input_proj.visit(name + ".input_proj", f);
    f(name + ".pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string bn = name + ".block" + std::to_string(i);
      blocks[i].ln1.visit(bn + ".ln1", f);
      f(bn + ".wq", blocks[i].wq);
      f(bn + ".wk", blocks[i].wk);
      f(bn + ".wv", blocks[i].wv);
      f(bn + ".wo", blocks[i].wo);
      blocks[i].ln2.visit(bn + ".ln2", f);
      blocks[i].mlp_in.visit(bn + ".mlp_in", f);
      blocks[i].mlp_out.visit(bn + ".mlp_out", f);
    }
    head.visit(name + ".head", f);
  }
};

/// Cross-entropy over masked positions only, averaged by the masked count.
/// Probabilities are floored at 1e-12 inside the logarithm.
template <typename Scalar>
Scalar masked_ce_loss(const Grid<Scalar>& probs, const TokenGrid& targets,
                      const IndicatorMask& indicator, MatrixX<Scalar>* dprobs = nullptr) {
  require(probs.height == targets.height() && probs.width == targets.width(),
          "masked_ce_loss: probability/target shape mismatch");
  require(indicator.height() == probs.height && indicator.width() == probs.width,
          "masked_ce_loss: indicator shape mismatch");
  const Eigen::Index n_masked = indicator.count_masked();
  require(n_masked > 0, "masked_ce_loss: no masked positions (undefined objective)");
  const Scalar floor = Scalar(1e-12);
  Scalar loss = 0;
  if (dprobs) dprobs->setZero(probs.positions(), probs.channels);
  for (int i = 0; i < probs.height; ++i)
    for (int j = 0; j < probs.width; ++j) {
      if (indicator.data(i, j)) continue;
      const int t = targets.data(i, j);
      require(t >= 0 && t < probs.channels, "masked_ce_loss: target token out of range");
      const Eigen::Index p = static_cast<Eigen::Index>(i) * probs.width + j;
      const Scalar pv = probs.data(p, t);
      loss -= std::log(std::max(pv, floor));
      if (dprobs && pv > floor)
        (*dprobs)(p, t) = -Scalar(1) / (pv * static_cast<Scalar>(n_masked));
    }
  return loss / static_cast<Scalar>(n_masked);
}

/// Tokens of the fully-known image: every position quantized against the
/// unmasked bank.
template <typename Scalar>
TokenGrid ground_truth_tokens(const Grid<Scalar>& image, const PatchEncoder<Scalar>& encoder,
                              const DualCodebook<Scalar>& book) {
  const Grid<Scalar> features = encoder.forward(image);
  IndicatorMask all_known;
  all_known.level = log2_int(encoder.patch);
  all_known.data = BinaryGrid::Ones(features.height, features.width);
  return quantize(features, all_known, book).second;
}

/// Independently per position, replace the feature vector by its quantized
/// vector with the given probability. Deterministic given the seed.
template <typename Scalar>
Grid<Scalar> random_quantize(const Grid<Scalar>& features, const IndicatorMask& indicator,
                             const DualCodebook<Scalar>& book, double prob, std::uint64_t seed) {
  require(prob >= 0.0 && prob <= 1.0, "random_quantize: probability out of [0,1]");
  Grid<Scalar> out = features;
  if (prob == 0.0) return out;
  const auto [quantized, tokens] = quantize(features, indicator, book);
  CounterRng rng(seed, 0x52c1);
  for (int i = 0; i < features.height; ++i)
    for (int j = 0; j < features.width; ++j)
      if (rng.bernoulli(prob)) out.row(i, j) = quantized.row(i, j);
  return out;
}

}  // namespace patchfill
