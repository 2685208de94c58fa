#pragma once

#include <memory>
#include <tuple>
#include <vector>

#include "patchfill/codebook.hpp"
#include "patchfill/imaging.hpp"
#include "patchfill/nn.hpp"

namespace patchfill {

// ---------------------------------------------------------------------------
// Patch encoder: partitions the image into non-overlapped r x r patches and
// maps each patch independently through a linear stack, so features of
// different patches never interact.

template <typename Scalar>
class PatchEncoder {
 public:
  int patch = 8;
  int channels = 256;

  struct ResBlock {
    Linear<Scalar> reduce;  // C -> C/2
    Linear<Scalar> expand;  // C/2 -> C
  };

  Linear<Scalar> input_proj;  // r*r*3 -> C
  std::vector<ResBlock> blocks;
  Linear<Scalar> output_proj;  // C -> C

  void setup(int patch_size, int feat_channels, int n_blocks, CounterRng& rng) {
    require(feat_channels % 2 == 0, "PatchEncoder: feature dimension must be even");
    patch = patch_size;
    channels = feat_channels;
    input_proj.setup(patch * patch * 3, channels, rng);
    blocks.resize(n_blocks);
    for (auto& b : blocks) {
      b.reduce.setup(channels, channels / 2, rng);
      b.expand.setup(channels / 2, channels, rng);
    }
    output_proj.setup(channels, channels, rng);
  }

  struct Cache {
    MatrixX<Scalar> patches;  // P x (r*r*3)
    MatrixX<Scalar> a_pre;    // input_proj output, pre-activation
    struct Blk {
      MatrixX<Scalar> in;     // block input (post previous activation)
      MatrixX<Scalar> h_pre;  // reduce output, pre-activation
      MatrixX<Scalar> h;      // post activation
      MatrixX<Scalar> s_pre;  // in + expand(h), pre-activation
    };
    std::vector<Blk> blk;
    MatrixX<Scalar> mid;      // input to output_proj
    MatrixX<Scalar> out_pre;  // output_proj output, pre-activation
  };

  Grid<Scalar> forward(const Grid<Scalar>& image, Cache* cache = nullptr) const {
    Grid<Scalar> patches = partition(image, patch);
    MatrixX<Scalar> a_pre = input_proj.forward(patches.data);
    MatrixX<Scalar> x = relu(a_pre);
    Cache scratch;
    Cache& c = cache ? *cache : scratch;
    c.blk.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& bc = c.blk[i];
      bc.in = x;
      bc.h_pre = blocks[i].reduce.forward(x);
      bc.h = relu(bc.h_pre);
      bc.s_pre = bc.in + blocks[i].expand.forward(bc.h);
      x = relu(bc.s_pre);
    }
    MatrixX<Scalar> out_pre = output_proj.forward(x);
    Grid<Scalar> features(patches.height, patches.width, channels);
    features.data = relu(out_pre);
    if (cache) {
      c.patches = std::move(patches.data);
      c.a_pre = std::move(a_pre);
      c.mid = std::move(x);
      c.out_pre = std::move(out_pre);
    }
    return features;
  }

  /// Accumulates parameter gradients from a gradient on the feature grid.
  void backward(const Cache& c, const MatrixX<Scalar>& dfeatures) {
    MatrixX<Scalar> dx = output_proj.backward(c.mid, relu_backward(dfeatures, c.out_pre));
    for (std::size_t i = blocks.size(); i-- > 0;) {
      const auto& bc = c.blk[i];
      MatrixX<Scalar> ds = relu_backward(dx, bc.s_pre);
      MatrixX<Scalar> dh = blocks[i].expand.backward(bc.h, ds);
      dx = ds + blocks[i].reduce.backward(bc.in, relu_backward(dh, bc.h_pre));
    }
    input_proj.backward(c.patches, relu_backward(dx, c.a_pre));
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    input_proj.visit(name + ".input_proj", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].reduce.visit(name + ".block" + std::to_string(i) + ".reduce", f);
      blocks[i].expand.visit(name + ".block" + std::to_string(i) + ".expand", f);
    }
    output_proj.visit(name + ".output_proj", f);
  }
};

// ---------------------------------------------------------------------------
// Mask-guided addition: positionwise mixture gated by the indicator at the
// feature scale. Where the indicator is 1 the reference-branch feature wins,
// elsewhere the main-branch feature.

template <typename Scalar>
Grid<Scalar> mga_mix(const Grid<Scalar>& main_feat, const Grid<Scalar>& ref_feat,
                     const IndicatorMask& indicator) {
  require(main_feat.same_shape(ref_feat), "mga_mix: branch shapes differ");
  require(indicator.height() == main_feat.height && indicator.width() == main_feat.width,
          "mga_mix: indicator scale mismatch");
  Grid<Scalar> out(main_feat.height, main_feat.width, main_feat.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.row(y, x) = indicator.data(y, x) ? ref_feat.row(y, x) : main_feat.row(y, x);
  return out;
}

// ---------------------------------------------------------------------------
// Decoder: a main branch that upsamples quantized patch vectors back to pixel
// resolution and a reference branch that extracts multi-scale features from
// the masked input image. The branches are fused by mask-guided addition
// before each upsampling convolution; the final 3x3 convolution has no
// activation and the output is clamped to [0,1].

template <typename Scalar>
class MaskGuidedDecoder {
 public:
  int patch = 8;
  int channels = 256;

  struct ResBlock {
    Conv2d<Scalar> reduce;
    Conv2d<Scalar> expand;
  };

  Conv2d<Scalar> main_in;  // C -> ch(L), 3x3
  std::vector<ResBlock> blocks;
  std::vector<ConvTranspose2d<Scalar>> ups;  // index u handles level L-u -> L-u-1
  Conv2d<Scalar> out_conv;                   // ch(0) -> 3, 3x3, no activation
  Conv2d<Scalar> ref_in;                     // 3 -> ch(0), 3x3
  std::vector<Conv2d<Scalar>> ref_downs;     // index d maps level d -> d+1, 4x4 stride 2

  int levels() const { return log2_int(patch); }
  /// Channel widths per scale level: C/4 at pixel resolution, doubling per
  /// level, capped at C.
  int level_channels(int level) const { return std::min(channels, (channels / 4) << level); }

  void setup(int patch_size, int feat_channels, int n_blocks, CounterRng& rng) {
    require(is_power_of_two(patch_size) && patch_size >= 2, "MaskGuidedDecoder: patch size must be a power of two >= 2");
    require(feat_channels % 4 == 0, "MaskGuidedDecoder: feature dimension must be divisible by 4");
    patch = patch_size;
    channels = feat_channels;
    const int L = levels();
    main_in.setup(channels, level_channels(L), 3, 1, 1, rng);
    blocks.resize(n_blocks);
    for (auto& b : blocks) {
      b.reduce.setup(level_channels(L), level_channels(L) / 2, 3, 1, 1, rng);
      b.expand.setup(level_channels(L) / 2, level_channels(L), 3, 1, 1, rng);
    }
    ups.clear();
    for (int l = L; l >= 1; --l) {
      ConvTranspose2d<Scalar> up;
      up.setup(level_channels(l), level_channels(l - 1), 4, 2, 1, rng);
      ups.push_back(std::move(up));
    }
    out_conv.setup(level_channels(0), 3, 3, 1, 1, rng);
    // Mid-range output at init keeps early training inside the [0,1] clamp.
    out_conv.b.v.setConstant(Scalar(0.5));
    ref_in.setup(3, level_channels(0), 3, 1, 1, rng);
    ref_downs.clear();
    for (int l = 0; l < L; ++l) {
      Conv2d<Scalar> down;
      down.setup(level_channels(l), level_channels(l + 1), 4, 2, 1, rng);
      ref_downs.push_back(std::move(down));
    }
  }

  struct Cache {
    std::vector<IndicatorMask> ms;                              // levels 0..L
    std::vector<Grid<Scalar>> ref;                              // post-activation, per level
    std::vector<Grid<Scalar>> ref_pre;                          // pre-activation
    typename Conv2d<Scalar>::Cache ref_in_cache;
    std::vector<typename Conv2d<Scalar>::Cache> ref_down_caches;
    typename Conv2d<Scalar>::Cache main_in_cache;
    Grid<Scalar> main_in_pre;
    struct Blk {
      Grid<Scalar> in;
      typename Conv2d<Scalar>::Cache c1, c2;
      Grid<Scalar> h_pre, h, s_pre;
    };
    std::vector<Blk> blk;
    std::vector<Grid<Scalar>> main;                             // main-branch feature per level L..1 order
    std::vector<typename ConvTranspose2d<Scalar>::Cache> up_caches;
    std::vector<Grid<Scalar>> up_pre;                           // deconv outputs pre-activation
    typename Conv2d<Scalar>::Cache out_cache;
    Grid<Scalar> out_pre;                                       // final conv output pre-clamp
  };

  /// Fusion followed by the scale's upsampling convolution (the final 3x3
  /// convolution at pixel scale). Activation handling is the caller's.
  Grid<Scalar> mga_fuse(const Grid<Scalar>& main_feat, const Grid<Scalar>& ref_feat,
                        const IndicatorMask& indicator) const {
    const Grid<Scalar> mixed = mga_mix(main_feat, ref_feat, indicator);
    if (indicator.level == 0) return out_conv.forward(mixed);
    return ups[static_cast<std::size_t>(levels() - indicator.level)].forward(mixed);
  }

  Grid<Scalar> forward(const Grid<Scalar>& quantized, const Grid<Scalar>& mask,
                       const Grid<Scalar>& reference, Cache* cache = nullptr) const {
    require(quantized.channels == channels, "decode: feature dimension mismatch");
    require(reference.height == quantized.height * patch && reference.width == quantized.width * patch,
            "decode: reference resolution does not match the feature grid");
    require(mask.height == reference.height && mask.width == reference.width,
            "decode: mask and reference sizes differ");
    const int L = levels();
    Cache scratch;
    Cache& c = cache ? *cache : scratch;
    c.ms = multiscale_masks(mask, patch);

    // Reference branch, pixel scale up to the feature scale.
    c.ref.resize(L + 1);
    c.ref_pre.resize(L + 1);
    c.ref_down_caches.resize(L);
    c.ref_pre[0] = ref_in.forward(reference, cache ? &c.ref_in_cache : nullptr);
    c.ref[0] = c.ref_pre[0];
    c.ref[0].data = relu(c.ref_pre[0].data);
    for (int l = 1; l <= L; ++l) {
      c.ref_pre[l] = ref_downs[l - 1].forward(c.ref[l - 1], cache ? &c.ref_down_caches[l - 1] : nullptr);
      c.ref[l] = c.ref_pre[l];
      c.ref[l].data = relu(c.ref_pre[l].data);
    }

    // Main branch at the feature scale.
    c.main_in_pre = main_in.forward(quantized, cache ? &c.main_in_cache : nullptr);
    Grid<Scalar> x = c.main_in_pre;
    x.data = relu(c.main_in_pre.data);
    c.blk.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& bc = c.blk[i];
      bc.in = x;
      bc.h_pre = blocks[i].reduce.forward(x, cache ? &bc.c1 : nullptr);
      bc.h = bc.h_pre;
      bc.h.data = relu(bc.h_pre.data);
      bc.s_pre = blocks[i].expand.forward(bc.h, cache ? &bc.c2 : nullptr);
      bc.s_pre.data += bc.in.data;
      x = bc.s_pre;
      x.data = relu(bc.s_pre.data);
    }

    // Fuse and upsample from the feature scale down to pixel scale.
    c.main.clear();
    c.up_caches.resize(L);
    c.up_pre.resize(L);
    for (int l = L; l >= 1; --l) {
      c.main.push_back(x);
      const Grid<Scalar> mixed = mga_mix(x, c.ref[l], c.ms[l]);
      c.up_pre[L - l] = ups[L - l].forward(mixed, cache ? &c.up_caches[L - l] : nullptr);
      x = c.up_pre[L - l];
      x.data = relu(c.up_pre[L - l].data);
    }
    c.main.push_back(x);
    const Grid<Scalar> mixed0 = mga_mix(x, c.ref[0], c.ms[0]);
    c.out_pre = out_conv.forward(mixed0, cache ? &c.out_cache : nullptr);
    Grid<Scalar> out = c.out_pre;
    out.data = c.out_pre.data.cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
    return out;
  }

  /// Backward from a gradient on the clamped output image; accumulates
  /// parameter gradients and returns the gradient on the quantized input.
  Grid<Scalar> backward(const Cache& c, const Grid<Scalar>& dout) {
    const int L = levels();
    Grid<Scalar> dpre = dout;
    dpre.data = (dout.data.array() * ((c.out_pre.data.array() >= Scalar(0)) &&
                                      (c.out_pre.data.array() <= Scalar(1)))
                                         .template cast<Scalar>())
                    .matrix();
    Grid<Scalar> dmixed0 = out_conv.backward(c.out_cache, dpre);
    std::vector<Grid<Scalar>> dref(L + 1);
    for (int l = 0; l <= L; ++l) {
      dref[l] = Grid<Scalar>(c.ref[l].height, c.ref[l].width, c.ref[l].channels);
    }
    Grid<Scalar> dx(c.main.back().height, c.main.back().width, c.main.back().channels);
    split_mix_gradient(dmixed0, c.ms[0], dx, dref[0]);
    for (int l = 1; l <= L; ++l) {
      Grid<Scalar> dup = dx;
      dup.data = relu_backward(dx.data, c.up_pre[L - l].data);
      Grid<Scalar> dmixed = ups[L - l].backward(c.up_caches[L - l], dup);
      dx = Grid<Scalar>(c.main[L - l].height, c.main[L - l].width, c.main[L - l].channels);
      split_mix_gradient(dmixed, c.ms[l], dx, dref[l]);
    }

    // Reference branch: level l receives gradient from its fusion plus the
    // downsampling convolution toward level l+1.
    for (int l = L; l >= 1; --l) {
      Grid<Scalar> dpre_l = dref[l];
      dpre_l.data = relu_backward(dref[l].data, c.ref_pre[l].data);
      dref[l - 1].data += ref_downs[l - 1].backward(c.ref_down_caches[l - 1], dpre_l).data;
    }
    Grid<Scalar> dref0_pre = dref[0];
    dref0_pre.data = relu_backward(dref[0].data, c.ref_pre[0].data);
    ref_in.backward(c.ref_in_cache, dref0_pre);  // input gradient discarded (data)

    // Main branch back through the residual blocks to the quantized vectors.
    for (std::size_t i = blocks.size(); i-- > 0;) {
      const auto& bc = c.blk[i];
      Grid<Scalar> ds = dx;
      ds.data = relu_backward(dx.data, bc.s_pre.data);
      Grid<Scalar> dh = blocks[i].expand.backward(bc.c2, ds);
      dh.data = relu_backward(dh.data, bc.h_pre.data);
      dx = blocks[i].reduce.backward(bc.c1, dh);
      dx.data += ds.data;
    }
    Grid<Scalar> dmain_pre = dx;
    dmain_pre.data = relu_backward(dx.data, c.main_in_pre.data);
    return main_in.backward(c.main_in_cache, dmain_pre);
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    main_in.visit(name + ".main_in", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].reduce.visit(name + ".block" + std::to_string(i) + ".reduce", f);
      blocks[i].expand.visit(name + ".block" + std::to_string(i) + ".expand", f);
    }
    for (std::size_t i = 0; i < ups.size(); ++i) ups[i].visit(name + ".up" + std::to_string(i), f);
    out_conv.visit(name + ".out_conv", f);
    ref_in.visit(name + ".ref_in", f);
    for (std::size_t i = 0; i < ref_downs.size(); ++i)
      ref_downs[i].visit(name + ".ref_down" + std::to_string(i), f);
  }

 private:
  static void split_mix_gradient(const Grid<Scalar>& dmixed, const IndicatorMask& indicator,
                                 Grid<Scalar>& dmain, Grid<Scalar>& dref) {
    for (int y = 0; y < dmixed.height; ++y)
      for (int x = 0; x < dmixed.width; ++x) {
        if (indicator.data(y, x))
          dref.row(y, x) = dmixed.row(y, x);
        else
          dmain.row(y, x) = dmixed.row(y, x);
      }
  }
};

// ---------------------------------------------------------------------------
// Discriminator: strided 4x4 convolution stack with leaky rectifier and a
// sigmoid patch-score head.

template <typename Scalar>
class PatchDiscriminator {
 public:
  static constexpr Scalar kSlope = Scalar(0.2);
  std::vector<Conv2d<Scalar>> convs;

  void setup(int base_channels, CounterRng& rng) {
    convs.resize(5);
    int in = 3;
    int out = base_channels;
    for (int i = 0; i < 4; ++i) {
      convs[i].setup(in, out, 4, 2, 1, rng);
      in = out;
      out *= 2;
    }
    convs[4].setup(in, 1, 4, 2, 1, rng);
  }

  struct Cache {
    std::vector<typename Conv2d<Scalar>::Cache> conv_caches;
    std::vector<Grid<Scalar>> pre;  // pre-activation per layer
    Grid<Scalar> scores;            // post sigmoid
  };

  Grid<Scalar> forward(const Grid<Scalar>& image, Cache* cache = nullptr) const {
    Cache scratch;
    Cache& c = cache ? *cache : scratch;
    c.conv_caches.resize(convs.size());
    c.pre.resize(convs.size());
    Grid<Scalar> x = image;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      c.pre[i] = convs[i].forward(x, cache ? &c.conv_caches[i] : nullptr);
      x = c.pre[i];
      if (i + 1 < convs.size())
        x.data = leaky_relu(c.pre[i].data, kSlope);
      else
        x.data = sigmoid(c.pre[i].data);
    }
    c.scores = x;
    return x;
  }

  /// Backward from a gradient on the sigmoid scores. When `train_params` is
  /// false only the input gradient is produced (generator pass).
  Grid<Scalar> backward(Cache& c, const Grid<Scalar>& dscores, bool train_params) {
    Grid<Scalar> dx = dscores;
    dx.data = sigmoid_backward(dscores.data, c.scores.data);
    for (std::size_t i = convs.size(); i-- > 0;) {
      if (i + 1 < convs.size()) dx.data = leaky_relu_backward(dx.data, c.pre[i].data, kSlope);
      dx = convs[i].backward(c.conv_caches[i], dx, train_params);
    }
    return dx;
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].visit(name + ".conv" + std::to_string(i), f);
  }
};

// ---------------------------------------------------------------------------
// Fixed multi-scale feature extractor for perceptual/style losses. The
// default is an untrained, seeded convolution pyramid so the artifact stays
// self-contained; any implementation providing per-stage activations works.

template <typename Scalar>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int stages() const = 0;
  virtual std::vector<Grid<Scalar>> extract(const Grid<Scalar>& image) const = 0;
  /// Gradient of a functional of the stage activations w.r.t. the image.
  virtual Grid<Scalar> backward(const Grid<Scalar>& image,
                                const std::vector<Grid<Scalar>>& dstages) const = 0;
};

template <typename Scalar>
class ConvPyramidExtractor : public FeatureExtractor<Scalar> {
 public:
  explicit ConvPyramidExtractor(std::uint64_t seed = 11, int base_channels = 8) {
    CounterRng rng(seed, 0x9a7e);
    convs_.resize(5);
    int in = 3;
    int out = base_channels;
    for (int i = 0; i < 5; ++i) {
      convs_[i].setup(in, out, 3, i == 0 ? 1 : 2, 1, rng);
      in = out;
      out = std::min(out * 2, base_channels * 8);
    }
  }

  int stages() const override { return static_cast<int>(convs_.size()); }

  std::vector<Grid<Scalar>> extract(const Grid<Scalar>& image) const override {
    std::vector<Grid<Scalar>> acts(convs_.size());
    Grid<Scalar> x = image;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      Grid<Scalar> pre = convs_[i].forward(x);
      acts[i] = pre;
      acts[i].data = relu(pre.data);
      x = acts[i];
    }
    return acts;
  }

  Grid<Scalar> backward(const Grid<Scalar>& image,
                        const std::vector<Grid<Scalar>>& dstages) const override {
    // Recompute the forward pass with caches, then fold the per-stage
    // gradients in from the top. The pyramid is frozen, so only the data
    // path is needed.
    const std::size_t n = convs_.size();
    std::vector<typename Conv2d<Scalar>::Cache> caches(n);
    std::vector<Grid<Scalar>> pre(n);
    Grid<Scalar> x = image;
    for (std::size_t i = 0; i < n; ++i) {
      pre[i] = convs_[i].forward(x, &caches[i]);
      x = pre[i];
      x.data = relu(pre[i].data);
    }
    Grid<Scalar> dx(0, 0, 0);
    for (std::size_t i = n; i-- > 0;) {
      Grid<Scalar> d = dstages[i];
      if (dx.height > 0) d.data += dx.data;
      d.data = relu_backward(d.data, pre[i].data);
      dx = convs_[i].backward_data(caches[i], d);
    }
    return dx;
  }

 private:
  std::vector<Conv2d<Scalar>> convs_;
};

}  // namespace patchfill
