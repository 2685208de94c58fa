#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "patchfill/grid.hpp"

namespace patchfill {

/// Flat `key = value` document with '#' comments. Typed getters record which
/// keys were read so unknown keys can be rejected after parsing.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    KeyValueConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    read_.insert(key);
    return it->second;
  }

  long get_long(const std::string& key, long def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    read_.insert(key);
    return std::stol(it->second);
  }

  int get_int(const std::string& key, int def) const {
    return static_cast<int>(get_long(key, def));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    read_.insert(key);
    return std::stoull(it->second);
  }

  double get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    read_.insert(key);
    return std::stod(it->second);
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    read_.insert(key);
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::runtime_error("config key " + key + ": expected true/false, got " + it->second);
  }

  /// Rejects keys that no getter consumed (usually typos).
  void check_all_consumed() const {
    std::string unknown;
    for (const auto& [k, v] : values_)
      if (!read_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    if (!unknown.empty()) throw std::runtime_error("unknown config keys: " + unknown);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> read_;
};

/// Architecture hyperparameters shared by training and inference. Defaults
/// are the desk-scale 64x64 setup; the paper-scale values live in config
/// files under configs/.
struct ModelConfig {
  int resolution = 64;
  int patch = 8;  // r
  int channels = 64;
  int enc_blocks = 2;
  int dec_blocks = 2;
  int codebook_size = 512;        // K
  int codebook_size_prime = 512;  // K'
  double gamma = 0.99;
  int disc_base = 16;
  int t_blocks = 2;
  int t_heads = 4;
  int t_model_dim = 128;
  int t_head_dim = 32;
  std::uint64_t extractor_seed = 11;

  int grid_h() const { return resolution / patch; }
  int grid_w() const { return resolution / patch; }

  static ModelConfig from(const KeyValueConfig& kv) {
    ModelConfig m;
    m.resolution = kv.get_int("resolution", m.resolution);
    m.patch = kv.get_int("patch", m.patch);
    m.channels = kv.get_int("channels", m.channels);
    m.enc_blocks = kv.get_int("enc_blocks", m.enc_blocks);
    m.dec_blocks = kv.get_int("dec_blocks", m.dec_blocks);
    m.codebook_size = kv.get_int("codebook_size", m.codebook_size);
    m.codebook_size_prime = kv.get_int("codebook_size_prime", m.codebook_size_prime);
    m.gamma = kv.get_double("gamma", m.gamma);
    m.disc_base = kv.get_int("disc_base", m.disc_base);
    m.t_blocks = kv.get_int("t_blocks", m.t_blocks);
    m.t_heads = kv.get_int("t_heads", m.t_heads);
    m.t_model_dim = kv.get_int("t_model_dim", m.t_model_dim);
    m.t_head_dim = kv.get_int("t_head_dim", m.t_head_dim);
    m.extractor_seed = kv.get_u64("extractor_seed", m.extractor_seed);
    require(m.resolution % m.patch == 0, "config: resolution must be divisible by patch");
    return m;
  }
};

/// Optimization settings for either training stage.
struct TrainSettings {
  int batch_size = 4;
  long warmup_steps = 5000;
  double peak_lr = 0.0;  // 0 = stage default (2e-4 auto-encoder, 3e-4 transformer)
  long max_steps = 10000;
  double weight_decay = 0.01;  // transformer stage only
  double random_quantize_prob = 0.3;
  double mask_lo = 0.1, mask_hi = 0.6;
  std::uint64_t seed = 1;
  long checkpoint_every = 0;  // 0 = final checkpoint only
  long log_every = 500;
  bool adversarial = false;
  bool perceptual = false;
  double beta = 0.25;
  double lambda_g = 5.0, lambda_a = 0.1, lambda_p = 0.1, lambda_s = 250.0;

  static TrainSettings from(const KeyValueConfig& kv) {
    TrainSettings t;
    t.batch_size = kv.get_int("batch_size", t.batch_size);
    t.warmup_steps = kv.get_long("warmup_steps", t.warmup_steps);
    t.peak_lr = kv.get_double("peak_lr", t.peak_lr);
    t.max_steps = kv.get_long("max_steps", t.max_steps);
    t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
    t.random_quantize_prob = kv.get_double("random_quantize_prob", t.random_quantize_prob);
    t.mask_lo = kv.get_double("mask_lo", t.mask_lo);
    t.mask_hi = kv.get_double("mask_hi", t.mask_hi);
    t.seed = kv.get_u64("seed", t.seed);
    t.checkpoint_every = kv.get_long("checkpoint_every", t.checkpoint_every);
    t.log_every = kv.get_long("log_every", t.log_every);
    t.adversarial = kv.get_bool("adversarial", t.adversarial);
    t.perceptual = kv.get_bool("perceptual", t.perceptual);
    t.beta = kv.get_double("beta", t.beta);
    t.lambda_g = kv.get_double("lambda_g", t.lambda_g);
    t.lambda_a = kv.get_double("lambda_a", t.lambda_a);
    t.lambda_p = kv.get_double("lambda_p", t.lambda_p);
    t.lambda_s = kv.get_double("lambda_s", t.lambda_s);
    return t;
  }
};

}  // namespace patchfill
