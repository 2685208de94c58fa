#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <patchfill/metrics.hpp>
#include <patchfill/train.hpp>

#include "test_util.hpp"

using namespace patchfill;
namespace fs = std::filesystem;

TEST_CASE("psnr closed forms") {
  const auto a = testing::random_image<double>(32, 32, 3, 1);
  CHECK(psnr(a, a) == 100.0);

  Grid<double> b = a;
  b.data.array() *= 0.9;
  Grid<double> c = b;
  c.data.array() += 0.1;
  CHECK(psnr(b, c) == doctest::Approx(20.0).epsilon(1e-9));

  Grid<double> checker(16, 16, 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) checker.at(y, x, 0) = (x + y) % 2;
  Grid<double> zeros(16, 16, 1);
  CHECK(psnr(checker, zeros) == doctest::Approx(10.0 * std::log10(2.0)).epsilon(1e-9));

  CHECK_THROWS(psnr(a, zeros));
}

TEST_CASE("ssim identical, symmetric, constant closed form") {
  const auto a = testing::random_image<double>(32, 32, 3, 2);
  const auto b = testing::random_image<double>(32, 32, 3, 3);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

  Grid<double> zeros(24, 24, 1);
  Grid<double> ones(24, 24, 1);
  ones.data.setOnes();
  // constant images: luminance term C1/(1+C1), structure term 1
  const double c1 = 0.01 * 0.01;
  CHECK(ssim(zeros, ones) == doctest::Approx(c1 / (1.0 + c1)).epsilon(1e-9));
}

TEST_CASE("mae and the relative variant") {
  const auto a = testing::random_image<double>(16, 16, 3, 4);
  CHECK(mae(a, a) == 0.0);
  Grid<double> b = a;
  b.data.array() *= 0.9;
  Grid<double> c = b;
  c.data.array() += 0.1;
  CHECK(mae(b, c) == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(relative_mae(b, c) == doctest::Approx(0.1 * b.data.size() / b.data.cwiseAbs().sum()));
}

TEST_CASE("learning-rate schedule shape") {
  const double peak = 2e-4;
  CHECK(lr_schedule(0, 5000, peak, 100000) == 0.0);
  CHECK(lr_schedule(2500, 5000, peak, 100000) == doctest::Approx(peak / 2));
  CHECK(lr_schedule(5000, 5000, peak, 100000) == doctest::Approx(peak));
  // continuity at the joint
  CHECK(std::abs(lr_schedule(4999, 5000, peak, 100000) - lr_schedule(5001, 5000, peak, 100000)) <
        peak * 1e-3);
  // cosine midpoint and endpoint
  CHECK(lr_schedule(52500, 5000, peak, 100000) == doctest::Approx(peak / 2).epsilon(1e-9));
  CHECK(lr_schedule(100000, 5000, peak, 100000) == 0.0);
  CHECK(kVaePeakLr == doctest::Approx(2e-4));
  CHECK(kTransformerPeakLr == doctest::Approx(3e-4));
  CHECK(kVaeBeta1 == 0.0);
  CHECK(kVaeBeta2 == doctest::Approx(0.9));
  CHECK(kTransformerBeta1 == doctest::Approx(0.9));
  CHECK(kTransformerBeta2 == doctest::Approx(0.95));
}

TEST_CASE("adam against the constant-gradient closed form") {
  Tensor<double> p;
  p.setup(1, 1);
  p.v(0, 0) = 1.0;
  auto visit = [&](auto&& f) { f(std::string("p"), p); };
  AdamOptimizer<double> opt(0.0, 0.9);
  const double lr = 0.1;
  // with beta1 = 0 and constant unit gradients, vhat is exactly 1 every step
  for (int s = 0; s < 3; ++s) {
    p.g(0, 0) = 1.0;
    opt.step(visit, lr);
  }
  CHECK(p.v(0, 0) == doctest::Approx(1.0 - 3 * lr).epsilon(1e-6));
}

TEST_CASE("adamw applies decoupled weight decay") {
  Tensor<double> p;
  p.setup(1, 1);
  p.v(0, 0) = 2.0;
  auto visit = [&](auto&& f) { f(std::string("p"), p); };
  AdamOptimizer<double> opt(0.9, 0.95, 0.5);
  p.g(0, 0) = 0.0;
  opt.step(visit, 0.1);
  CHECK(p.v(0, 0) == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
}

TEST_CASE("key-value config parsing, overrides, unknown keys") {
  const fs::path path = fs::temp_directory_path() / "patchfill_test.cfg";
  {
    std::ofstream f(path);
    f << "# architecture\n";
    f << "resolution = 32\n";
    f << "channels=16   # inline comment\n";
    f << "adversarial = true\n";
  }
  auto kv = KeyValueConfig::from_file(path.string());
  CHECK(kv.get_int("resolution", 0) == 32);
  CHECK(kv.get_int("channels", 0) == 16);
  CHECK(kv.get_bool("adversarial", false));
  kv.set("resolution", "64");  // CLI-style override
  CHECK(kv.get_int("resolution", 0) == 64);
  kv.check_all_consumed();

  kv.set("typo_key", "1");
  CHECK_THROWS(kv.check_all_consumed());

  {
    std::ofstream f(path);
    f << "broken line without equals\n";
  }
  CHECK_THROWS(KeyValueConfig::from_file(path.string()));
  fs::remove(path);
}

namespace {

ModelConfig harness_mc() {
  ModelConfig mc;
  mc.resolution = 32;
  mc.patch = 8;
  mc.channels = 16;
  mc.enc_blocks = 1;
  mc.dec_blocks = 1;
  mc.codebook_size = 24;
  mc.codebook_size_prime = 24;
  mc.disc_base = 4;
  mc.t_blocks = 1;
  mc.t_heads = 2;
  mc.t_model_dim = 32;
  mc.t_head_dim = 16;
  return mc;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact and forward-identical") {
  const ModelConfig mc = harness_mc();
  InpaintModel<float> model = init_model<float>(mc, 7);
  const fs::path path = fs::temp_directory_path() / "patchfill_test.ckpt";
  TrainState<float> state;
  state.step = 123;
  state.rng_seed = 9;
  state.rng_counter = 77;
  state.stage = "transformer";
  save_checkpoint(path.string(), mc, model, nullptr, state, true);

  InpaintModel<float> loaded;
  ModelConfig mc2;
  const auto state2 = load_checkpoint<float>(path.string(), loaded, nullptr, mc2, true);
  CHECK(state2.step == 123);
  CHECK(state2.rng_seed == 9);
  CHECK(state2.rng_counter == 77);
  CHECK(state2.stage == "transformer");
  CHECK(mc2.channels == mc.channels);

  CHECK(loaded.book.e == model.book.e);
  CHECK(loaded.book.ema_sums_e_prime == model.book.ema_sums_e_prime);
  bool all_equal = true;
  model.encoder.visit("pvqvae.encoder", [&](const std::string& n, Tensor<float>& t) {
    loaded.encoder.visit("pvqvae.encoder", [&](const std::string& n2, Tensor<float>& t2) {
      if (n == n2 && t.v != t2.v) all_equal = false;
    });
  });
  CHECK(all_equal);

  const auto img = testing::random_image<float>(32, 32, 3, 8);
  const auto mask = testing::random_binary_mask<float>(32, 32, 0.8, 9);
  const auto masked = apply_mask(img, mask);
  const auto f1 = model.encoder.forward(masked);
  const auto f2 = loaded.encoder.forward(masked);
  CHECK(f1.data == f2.data);
  CHECK(model.transformer.forward(f1).data == loaded.transformer.forward(f2).data);
  const auto q = quantize(f1, indicator_mask(mask, 8), model.book).first;
  CHECK(model.decoder.forward(q, mask, masked).data == loaded.decoder.forward(q, mask, masked).data);

  // manifest records the architecture
  ArchiveReader reader(path.string());
  CHECK(reader.manifest().at("model").at("patch").get<int>() == 8);
  CHECK(reader.manifest().at("model").at("channels").get<int>() == 16);
  CHECK(reader.manifest().at("model").at("codebook_size").get<int>() == 24);
  CHECK(reader.manifest().at("model").at("t_model_dim").get<int>() == 32);
  CHECK(reader.manifest().at("codebook.gamma").get<double>() == doctest::Approx(0.99));
  fs::remove(path);
}

TEST_CASE("checkpoint errors: missing arrays and config mismatches") {
  const ModelConfig mc = harness_mc();
  InpaintModel<float> model = init_model<float>(mc, 17);
  const fs::path path = fs::temp_directory_path() / "patchfill_test2.ckpt";
  TrainState<float> state;
  save_checkpoint(path.string(), mc, model, nullptr, state, /*include_transformer=*/false);

  InpaintModel<float> loaded;
  ModelConfig mc2;
  try {
    load_checkpoint<float>(path.string(), loaded, nullptr, mc2, /*need_transformer=*/true);
    FAIL("expected a missing-array error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("transformer") != std::string::npos);
  }

  ModelConfig wrong = mc;
  wrong.channels = 999;
  wrong.codebook_size = 1000;
  try {
    load_checkpoint<float>(path.string(), loaded, nullptr, mc2, false, &wrong);
    FAIL("expected a config mismatch error");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find("channels") != std::string::npos);
    CHECK(msg.find("codebook_size") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("vae hash is stable and sensitive") {
  const ModelConfig mc = harness_mc();
  InpaintModel<float> model = init_model<float>(mc, 27);
  const auto h1 = vae_param_hash(model);
  CHECK(h1 == vae_param_hash(model));
  model.decoder.out_conv.b.v(0, 0) += 1e-3f;
  CHECK(h1 != vae_param_hash(model));
}

TEST_CASE("short training runs: finite losses, frozen stage-1, initial CE near ln K") {
  ModelConfig mc = harness_mc();
  mc.codebook_size = 512;  // so the initial cross-entropy target is ln 512
  std::vector<Grid<float>> data;
  for (int i = 0; i < 2; ++i) data.push_back(testing::random_image<float>(32, 32, 3, 100 + i));

  TrainSettings ts;
  ts.batch_size = 2;
  ts.max_steps = 3;
  ts.warmup_steps = 2;
  ts.mask_lo = 0.2;
  ts.mask_hi = 0.5;
  ts.log_every = 0;
  ts.seed = 5;

  InpaintModel<float> model;
  const auto state = train_vae(mc, ts, data, "", &model);
  CHECK(state.step == 3);

  // fresh transformer: masked CE at random init is close to uniform
  const auto mask = gen_mask<float>(32, 0.3, 0.6, 6);
  const auto ind = indicator_mask(mask, 8);
  REQUIRE(ind.count_masked() > 0);
  const auto feats = model.encoder.forward(apply_mask(data[0], mask));
  const auto probs = model.transformer.forward(feats);
  const auto targets = ground_truth_tokens(data[0], model.encoder, model.book);
  const double ce = masked_ce_loss(probs, targets, ind);
  CHECK(ce == doctest::Approx(std::log(512.0)).epsilon(0.5 / std::log(512.0)));

  const auto hash_before = vae_param_hash(model);
  train_transformer(mc, ts, model, data, "");
  CHECK(vae_param_hash(model) == hash_before);
}

TEST_CASE("evaluate: rows per bucket, determinism, csv format") {
  const ModelConfig mc = harness_mc();
  InpaintModel<float> model = init_model<float>(mc, 37);
  std::vector<Grid<float>> data;
  data.push_back(testing::random_image<float>(32, 32, 3, 38));
  data.push_back(testing::random_image<float>(32, 32, 3, 39));

  const std::vector<MetricBucket> buckets = {{0.2, 0.4}, {0.4, 0.6}, {0.1, 0.6}};
  SamplerConfig scfg;
  scfg.top_k = 5;
  const auto report = evaluate(model, mc, data, buckets, scfg, 99);
  REQUIRE(report.rows.size() == 3);
  for (const auto& row : report.rows) {
    CHECK(row.n == 2);
    CHECK(row.psnr > 0.0);
    CHECK(row.ssim <= 1.0);
    CHECK(row.mae >= 0.0);
  }
  const auto again = evaluate(model, mc, data, buckets, scfg, 99);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(report.rows[i].psnr == again.rows[i].psnr);
    CHECK(report.rows[i].mae == again.rows[i].mae);
  }

  const std::string csv = report.to_csv();
  CHECK(csv.rfind("bucket,psnr,ssim,mae,n\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.find("0.20-0.40") != std::string::npos);
}
