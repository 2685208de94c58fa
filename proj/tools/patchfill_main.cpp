// Command-line front end: two-stage training, inpainting, evaluation and
// checkpoint inspection. Every flag overrides the matching config-file key.

#include <CLI11.hpp>

#include <iostream>
#include <map>

#include <patchfill/checkpoint.hpp>
#include <patchfill/image_io.hpp>
#include <patchfill/metrics.hpp>
#include <patchfill/train.hpp>

namespace {

using Scalar = float;
using namespace patchfill;

struct CommonArgs {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

KeyValueConfig resolve_config(const CommonArgs& args) {
  KeyValueConfig kv;
  if (!args.config_path.empty()) kv = KeyValueConfig::from_file(args.config_path);
  for (const auto& [k, v] : args.overrides) kv.set(k, v);
  return kv;
}

void add_config_flags(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value config file");
  static const std::vector<std::string> keys = {
      "resolution",    "patch",        "channels",     "enc_blocks",   "dec_blocks",
      "codebook_size", "codebook_size_prime",          "gamma",        "disc_base",
      "t_blocks",      "t_heads",      "t_model_dim",  "t_head_dim",   "extractor_seed",
      "batch_size",    "warmup_steps", "peak_lr",      "max_steps",    "weight_decay",
      "random_quantize_prob",          "mask_lo",      "mask_hi",      "seed",
      "checkpoint_every",              "log_every",    "adversarial",  "perceptual",
      "beta",          "lambda_g",     "lambda_a",     "lambda_p",     "lambda_s"};
  for (const auto& key : keys) {
    cmd->add_option_function<std::string>(
        "--" + key, [&args, key](const std::string& v) { args.overrides[key] = v; },
        "override config key '" + key + "'");
  }
}

std::vector<MetricBucket> parse_buckets(const std::string& text) {
  std::vector<MetricBucket> buckets;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw std::runtime_error("bucket '" + item + "' is not of the form lo:hi");
    buckets.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
  }
  if (buckets.empty()) throw std::runtime_error("no mask-ratio buckets given");
  return buckets;
}

int run_train_vae(const CommonArgs& args, const std::string& data_dir, const std::string& out) {
  KeyValueConfig kv = resolve_config(args);
  const ModelConfig mc = ModelConfig::from(kv);
  const TrainSettings ts = TrainSettings::from(kv);
  kv.check_all_consumed();
  const auto data = load_dataset<Scalar>(data_dir, mc.resolution);
  std::cout << "training auto-encoder on " << data.size() << " images at " << mc.resolution << "x"
            << mc.resolution << " for " << ts.max_steps << " steps\n";
  train_vae(mc, ts, data, out);
  std::cout << "saved checkpoint to " << out << "\n";
  return 0;
}

int run_train_transformer(const CommonArgs& args, const std::string& vae_ckpt,
                          const std::string& data_dir, const std::string& out) {
  KeyValueConfig kv = resolve_config(args);
  const TrainSettings ts = TrainSettings::from(kv);
  InpaintModel<Scalar> model;
  ModelConfig mc;
  load_checkpoint<Scalar>(vae_ckpt, model, nullptr, mc, /*need_transformer=*/false);
  // architecture comes from the checkpoint; only transformer dims may differ
  mc.t_blocks = kv.get_int("t_blocks", mc.t_blocks);
  mc.t_heads = kv.get_int("t_heads", mc.t_heads);
  mc.t_model_dim = kv.get_int("t_model_dim", mc.t_model_dim);
  mc.t_head_dim = kv.get_int("t_head_dim", mc.t_head_dim);
  kv.check_all_consumed();
  {
    CounterRng t_rng(ts.seed, 3);
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
  }
  const auto data = load_dataset<Scalar>(data_dir, mc.resolution);
  std::cout << "training transformer on " << data.size() << " images for " << ts.max_steps
            << " steps (auto-encoder frozen)\n";
  train_transformer(mc, ts, model, data, out);
  std::cout << "saved checkpoint to " << out << "\n";
  return 0;
}

int run_inpaint(const std::string& ckpt, const std::string& image_path, const std::string& mask_path,
                double mask_lo, double mask_hi, std::uint64_t mask_seed, const std::string& out_prefix,
                int num_samples, int top_k, std::uint64_t seed, bool deterministic) {
  InpaintModel<Scalar> model;
  ModelConfig mc;
  load_checkpoint<Scalar>(ckpt, model, nullptr, mc, /*need_transformer=*/true);

  Grid<Scalar> image = expand_to_rgb(to_grid<Scalar>(decode_image_file(image_path)));
  image = resize_bilinear(center_crop_square(image), mc.resolution, mc.resolution);

  Grid<Scalar> mask;
  if (!mask_path.empty()) {
    mask = load_mask<Scalar>(mask_path);
    require(mask.height == mc.resolution && mask.width == mc.resolution,
            "mask resolution does not match the model resolution");
  } else {
    mask = gen_mask<Scalar>(mc.resolution, mask_lo, mask_hi, mask_seed);
  }
  const Grid<Scalar> masked = apply_mask(image, mask);
  save_image(out_prefix + "_input.png", masked);
  save_image(out_prefix + "_mask.png", mask);

  SamplerConfig cfg;
  cfg.top_k = top_k;
  cfg.deterministic = deterministic;
  if (deterministic) {
    const auto result = inpaint_deterministic(masked, mask, model);
    save_image(out_prefix + "_det.png", result);
    std::cout << "wrote " << out_prefix << "_det.png\n";
    return 0;
  }
  for (int s = 0; s < num_samples; ++s) {
    cfg.seed = seed + static_cast<std::uint64_t>(s);
    const auto result = inpaint_pluralistic(masked, mask, model, cfg);
    char name[32];
    std::snprintf(name, sizeof(name), "_%03d.png", s);
    save_image(out_prefix + name, result);
    std::cout << "wrote " << out_prefix << name << "\n";
  }
  return 0;
}

int run_evaluate(const std::string& ckpt, const std::string& data_dir, const std::string& buckets_text,
                 const std::string& csv_path, int top_k, std::uint64_t seed, bool deterministic) {
  InpaintModel<Scalar> model;
  ModelConfig mc;
  load_checkpoint<Scalar>(ckpt, model, nullptr, mc, /*need_transformer=*/true);
  const auto data = load_dataset<Scalar>(data_dir, mc.resolution);
  SamplerConfig cfg;
  cfg.top_k = top_k;
  cfg.deterministic = deterministic;
  const MetricReport report = evaluate(model, mc, data, parse_buckets(buckets_text), cfg, seed);
  const std::string csv = report.to_csv();
  if (csv_path.empty() || csv_path == "-") {
    std::cout << csv;
  } else {
    std::ofstream f(csv_path);
    f << csv;
    std::cout << "wrote " << csv_path << "\n";
  }
  return 0;
}

int run_inspect(const std::string& ckpt) {
  ArchiveReader reader(ckpt);
  std::cout << reader.manifest().dump(2) << "\n";
  long long total = 0;
  for (const auto& entry : reader.manifest().at("arrays")) {
    const auto rows = entry.at("rows").get<long long>();
    const auto cols = entry.at("cols").get<long long>();
    std::cout << entry.at("name").get<std::string>() << "  " << rows << "x" << cols << "\n";
    total += rows * cols;
  }
  std::cout << "total parameters: " << total << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchfill: pluralistic image inpainting with a patch vector-quantized auto-encoder "
               "and a token-predicting transformer"};
  app.require_subcommand(1);

  CommonArgs vae_args, tr_args;
  std::string data_dir, out_path, vae_ckpt;

  auto* cmd_vae = app.add_subcommand("train-vae", "stage 1: train the auto-encoder and codebook");
  add_config_flags(cmd_vae, vae_args);
  cmd_vae->add_option("--data", data_dir, "directory of training images")->required();
  cmd_vae->add_option("--out", out_path, "output checkpoint path")->required();

  auto* cmd_tr = app.add_subcommand("train-transformer", "stage 2: train the token predictor");
  add_config_flags(cmd_tr, tr_args);
  cmd_tr->add_option("--vae", vae_ckpt, "stage-1 checkpoint")->required();
  cmd_tr->add_option("--data", data_dir, "directory of training images")->required();
  cmd_tr->add_option("--out", out_path, "output checkpoint path")->required();

  std::string ckpt, image_path, mask_path, out_prefix = "inpaint";
  std::string buckets = "0.2:0.4,0.4:0.6,0.1:0.6";
  std::string csv_path;
  double mask_lo = 0.2, mask_hi = 0.4;
  std::uint64_t mask_seed = 1, seed = 1;
  int num_samples = 1, top_k = 50;
  bool deterministic = false;

  auto* cmd_in = app.add_subcommand("inpaint", "inpaint one image with a trained checkpoint");
  cmd_in->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  cmd_in->add_option("--image", image_path, "input image (PNG/JPEG/BMP)")->required();
  cmd_in->add_option("--mask", mask_path, "mask PNG, 0 = missing (otherwise procedural)");
  cmd_in->add_option("--mask-lo", mask_lo, "procedural mask ratio lower bound");
  cmd_in->add_option("--mask-hi", mask_hi, "procedural mask ratio upper bound");
  cmd_in->add_option("--mask-seed", mask_seed, "procedural mask seed");
  cmd_in->add_option("--out", out_prefix, "output file prefix");
  cmd_in->add_option("--num-samples", num_samples, "number of diverse samples");
  cmd_in->add_option("--top-k", top_k, "sample from the K most probable tokens");
  cmd_in->add_option("--seed", seed, "sampling seed (sample i uses seed+i)");
  cmd_in->add_flag("--deterministic", deterministic, "argmax for all masked patches at once");

  auto* cmd_ev = app.add_subcommand("evaluate", "PSNR/SSIM/MAE over mask-ratio buckets");
  cmd_ev->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  cmd_ev->add_option("--data", data_dir, "directory of evaluation images")->required();
  cmd_ev->add_option("--buckets", buckets, "comma-separated lo:hi mask-ratio buckets");
  cmd_ev->add_option("--csv", csv_path, "output CSV path ('-' for stdout)");
  cmd_ev->add_option("--top-k", top_k, "sampling cutoff for the pluralistic sampler");
  cmd_ev->add_option("--seed", seed, "evaluation seed");
  cmd_ev->add_flag("--deterministic", deterministic, "use the one-shot argmax sampler");

  std::string inspect_path;
  auto* cmd_ins = app.add_subcommand("inspect-checkpoint", "dump a checkpoint manifest");
  cmd_ins->add_option("checkpoint", inspect_path, "checkpoint path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_vae->parsed()) return run_train_vae(vae_args, data_dir, out_path);
    if (cmd_tr->parsed()) return run_train_transformer(tr_args, vae_ckpt, data_dir, out_path);
    if (cmd_in->parsed())
      return run_inpaint(ckpt, image_path, mask_path, mask_lo, mask_hi, mask_seed, out_prefix,
                         num_samples, top_k, seed, deterministic);
    if (cmd_ev->parsed())
      return run_evaluate(ckpt, data_dir, buckets, csv_path, top_k, seed, deterministic);
    if (cmd_ins->parsed()) return run_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
