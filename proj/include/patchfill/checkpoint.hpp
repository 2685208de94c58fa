#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <type_traits>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchfill/config.hpp"
#include "patchfill/sampler.hpp"

namespace patchfill {

// Archive layout: 8-byte magic, u64 manifest length, JSON manifest, then the
// raw little-endian array blobs in manifest order.
inline constexpr char kCheckpointMagic[8] = {'P', 'F', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

template <typename Scalar>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
  return "f32";
}
template <>
inline const char* dtype_name<double>() {
  return "f64";
}

}  // namespace detail

class ArchiveWriter {
 public:
  template <typename Scalar>
  void add(const std::string& name, const MatrixX<Scalar>& m) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["dtype"] = detail::dtype_name<Scalar>();
    entry["rows"] = m.rows();
    entry["cols"] = m.cols();
    arrays_.push_back(entry);
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(Scalar);
    const std::size_t at = blob_.size();
    blob_.resize(at + bytes);
    std::memcpy(blob_.data() + at, m.data(), bytes);
  }

  template <typename Scalar>
  void add_vector(const std::string& name, const VectorX<Scalar>& v) {
    MatrixX<Scalar> m(v.size(), 1);
    m.col(0) = v;
    add(name, m);
  }

  void write(const std::string& path, nlohmann::json manifest) const {
    manifest["format_version"] = 1;
    manifest["arrays"] = arrays_;
    const std::string text = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = text.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.write(reinterpret_cast<const char*>(blob_.data()), static_cast<std::streamsize>(blob_.size()));
    if (!f) throw std::runtime_error("failed to write " + path);
  }

 private:
  nlohmann::json arrays_ = nlohmann::json::array();
  std::vector<std::uint8_t> blob_;
};

class ArchiveReader {
 public:
  explicit ArchiveReader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
      throw std::runtime_error(path + " is not a checkpoint archive");
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    f.read(text.data(), static_cast<std::streamsize>(len));
    if (!f) throw std::runtime_error("truncated checkpoint manifest in " + path);
    manifest_ = nlohmann::json::parse(text);
    std::size_t offset = 0;
    for (const auto& entry : manifest_.at("arrays")) {
      Info info;
      info.dtype = entry.at("dtype").get<std::string>();
      info.rows = entry.at("rows").get<Eigen::Index>();
      info.cols = entry.at("cols").get<Eigen::Index>();
      info.offset = offset;
      const std::size_t elem = info.dtype == "f64" ? 8 : 4;
      offset += static_cast<std::size_t>(info.rows * info.cols) * elem;
      index_[entry.at("name").get<std::string>()] = info;
    }
    blob_.resize(offset);
    f.read(reinterpret_cast<char*>(blob_.data()), static_cast<std::streamsize>(offset));
    if (!f) throw std::runtime_error("truncated checkpoint data in " + path);
    path_ = path;
  }

  const nlohmann::json& manifest() const { return manifest_; }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  template <typename Scalar>
  MatrixX<Scalar> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::runtime_error(path_ + ": missing checkpoint array '" + name + "'");
    const Info& info = it->second;
    if (info.dtype != detail::dtype_name<Scalar>())
      throw std::runtime_error(path_ + ": array '" + name + "' has dtype " + info.dtype +
                               ", expected " + detail::dtype_name<Scalar>());
    MatrixX<Scalar> m(info.rows, info.cols);
    std::memcpy(m.data(), blob_.data() + info.offset,
                static_cast<std::size_t>(m.size()) * sizeof(Scalar));
    return m;
  }

  template <typename Scalar>
  VectorX<Scalar> get_vector(const std::string& name) const {
    MatrixX<Scalar> m = get<Scalar>(name);
    require(m.cols() == 1, "checkpoint array '" + name + "' is not a vector");
    return m.col(0);
  }

 private:
  struct Info {
    std::string dtype;
    Eigen::Index rows = 0, cols = 0;
    std::size_t offset = 0;
  };
  std::string path_;
  nlohmann::json manifest_;
  std::map<std::string, Info> index_;
  std::vector<std::uint8_t> blob_;
};

// ---------------------------------------------------------------------------
// Whole-model persistence.

inline nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"resolution", m.resolution},
          {"patch", m.patch},
          {"channels", m.channels},
          {"enc_blocks", m.enc_blocks},
          {"dec_blocks", m.dec_blocks},
          {"codebook_size", m.codebook_size},
          {"codebook_size_prime", m.codebook_size_prime},
          {"gamma", m.gamma},
          {"disc_base", m.disc_base},
          {"t_blocks", m.t_blocks},
          {"t_heads", m.t_heads},
          {"t_model_dim", m.t_model_dim},
          {"t_head_dim", m.t_head_dim},
          {"extractor_seed", m.extractor_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.resolution = j.at("resolution").get<int>();
  m.patch = j.at("patch").get<int>();
  m.channels = j.at("channels").get<int>();
  m.enc_blocks = j.at("enc_blocks").get<int>();
  m.dec_blocks = j.at("dec_blocks").get<int>();
  m.codebook_size = j.at("codebook_size").get<int>();
  m.codebook_size_prime = j.at("codebook_size_prime").get<int>();
  m.gamma = j.at("gamma").get<double>();
  m.disc_base = j.at("disc_base").get<int>();
  m.t_blocks = j.at("t_blocks").get<int>();
  m.t_heads = j.at("t_heads").get<int>();
  m.t_model_dim = j.at("t_model_dim").get<int>();
  m.t_head_dim = j.at("t_head_dim").get<int>();
  m.extractor_seed = j.at("extractor_seed").get<std::uint64_t>();
  return m;
}

/// Errors listing every field that differs between the manifest's
/// architecture and the expected one.
inline void check_model_config(const nlohmann::json& manifest, const ModelConfig& expected) {
  const nlohmann::json want = model_config_json(expected);
  const nlohmann::json& got = manifest.at("model");
  std::string mismatches;
  for (const auto& [key, value] : want.items())
    if (!got.contains(key) || got.at(key) != value)
      mismatches += (mismatches.empty() ? "" : ", ") + key + " (checkpoint " +
                    (got.contains(key) ? got.at(key).dump() : "absent") + ", expected " +
                    value.dump() + ")";
  if (!mismatches.empty())
    throw std::runtime_error("checkpoint config mismatch: " + mismatches);
}

template <typename Scalar>
struct TrainState {
  long step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::string stage = "vae";
};

template <typename Scalar>
void save_checkpoint(const std::string& path, const ModelConfig& mc, InpaintModel<Scalar>& model,
                     std::type_identity_t<PatchDiscriminator<Scalar>*> disc,
                     const TrainState<Scalar>& state, bool include_transformer) {
  ArchiveWriter w;
  w.add(std::string("codebook.e"), model.book.e);
  w.add(std::string("codebook.e_prime"), model.book.e_prime);
  // EMA statistics for both banks, bank e first.
  VectorX<Scalar> counts(model.book.entries() + model.book.entries_prime());
  counts << model.book.ema_counts_e, model.book.ema_counts_e_prime;
  MatrixX<Scalar> sums(model.book.entries() + model.book.entries_prime(), model.book.dim());
  sums << model.book.ema_sums_e, model.book.ema_sums_e_prime;
  w.add_vector(std::string("codebook.ema_counts"), counts);
  w.add(std::string("codebook.ema_sums"), sums);
  model.encoder.visit("pvqvae.encoder", [&](const std::string& n, Tensor<Scalar>& t) { w.add(n, t.v); });
  model.decoder.visit("pvqvae.decoder", [&](const std::string& n, Tensor<Scalar>& t) { w.add(n, t.v); });
  if (disc)
    disc->visit("pvqvae.disc", [&](const std::string& n, Tensor<Scalar>& t) { w.add(n, t.v); });
  if (include_transformer)
    model.transformer.visit("transformer", [&](const std::string& n, Tensor<Scalar>& t) { w.add(n, t.v); });

  nlohmann::json manifest;
  manifest["model"] = model_config_json(mc);
  manifest["codebook.gamma"] = static_cast<double>(model.book.gamma);
  manifest["dtype"] = detail::dtype_name<Scalar>();
  manifest["step"] = state.step;
  manifest["stage"] = state.stage;
  manifest["rng"] = {{"seed", state.rng_seed}, {"counter", state.rng_counter}};
  manifest["has_transformer"] = include_transformer;
  manifest["has_discriminator"] = disc != nullptr;
  w.write(path, manifest);
}

/// Rebuilds the model bundle from an archive. Architecture comes from the
/// manifest; when `expected` is given it is validated first. The transformer
/// is required only when `need_transformer` is set.
template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::string& path, InpaintModel<Scalar>& model,
                                   std::type_identity_t<PatchDiscriminator<Scalar>*> disc,
                                   ModelConfig& mc_out, bool need_transformer,
                                   const ModelConfig* expected = nullptr) {
  ArchiveReader r(path);
  if (expected) check_model_config(r.manifest(), *expected);
  const ModelConfig mc = model_config_from_json(r.manifest().at("model"));
  mc_out = mc;
  CounterRng init_rng(0);  // shapes are overwritten below
  model.encoder.setup(mc.patch, mc.channels, mc.enc_blocks, init_rng);
  model.decoder.setup(mc.patch, mc.channels, mc.dec_blocks, init_rng);
  model.book = init_codebook<Scalar>(mc.codebook_size, mc.codebook_size_prime, mc.channels,
                                     static_cast<Scalar>(mc.gamma), 0);
  model.book.gamma = static_cast<Scalar>(r.manifest().at("codebook.gamma").get<double>());

  model.book.e = r.get<Scalar>("codebook.e");
  model.book.e_prime = r.get<Scalar>("codebook.e_prime");
  const VectorX<Scalar> counts = r.get_vector<Scalar>("codebook.ema_counts");
  const MatrixX<Scalar> sums = r.get<Scalar>("codebook.ema_sums");
  require(counts.size() == mc.codebook_size + mc.codebook_size_prime,
          "checkpoint: codebook.ema_counts has the wrong length");
  require(sums.rows() == mc.codebook_size + mc.codebook_size_prime && sums.cols() == mc.channels,
          "checkpoint: codebook.ema_sums has the wrong shape");
  model.book.ema_counts_e = counts.head(mc.codebook_size);
  model.book.ema_counts_e_prime = counts.tail(mc.codebook_size_prime);
  model.book.ema_sums_e = sums.topRows(mc.codebook_size);
  model.book.ema_sums_e_prime = sums.bottomRows(mc.codebook_size_prime);

  auto restore = [&](const std::string& n, Tensor<Scalar>& t) {
    MatrixX<Scalar> v = r.get<Scalar>(n);
    require(v.rows() == t.v.rows() && v.cols() == t.v.cols(),
            "checkpoint array '" + n + "' has the wrong shape");
    t.v = std::move(v);
  };
  model.encoder.visit("pvqvae.encoder", restore);
  model.decoder.visit("pvqvae.decoder", restore);
  if (disc) {
    disc->setup(mc.disc_base, init_rng);
    if (r.manifest().value("has_discriminator", false)) disc->visit("pvqvae.disc", restore);
  }
  TransformerConfig tc;
  tc.n_blocks = mc.t_blocks;
  tc.n_heads = mc.t_heads;
  tc.model_dim = mc.t_model_dim;
  tc.head_dim = mc.t_head_dim;
  tc.grid_h = mc.grid_h();
  tc.grid_w = mc.grid_w();
  tc.feat_dim = mc.channels;
  tc.vocab = mc.codebook_size;
  model.transformer.setup(tc, init_rng);
  if (need_transformer || r.manifest().value("has_transformer", false))
    model.transformer.visit("transformer", restore);

  TrainState<Scalar> state;
  state.step = r.manifest().value("step", 0L);
  state.stage = r.manifest().value("stage", std::string("vae"));
  if (r.manifest().contains("rng")) {
    state.rng_seed = r.manifest()["rng"].value("seed", std::uint64_t(0));
    state.rng_counter = r.manifest()["rng"].value("counter", std::uint64_t(0));
  }
  return state;
}

}  // namespace patchfill
