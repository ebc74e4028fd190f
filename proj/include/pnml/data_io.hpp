#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pnml/dataset.hpp"
#include "pnml/errors.hpp"
#include "pnml/model.hpp"
#include "pnml/rng.hpp"
#include "pnml/trainer.hpp"

namespace pnml {

// ---------------------------------------------------------------------------
// IDX files

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw ParseError(what + ": truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label file pair. Pixels map linearly from [0, 255] to [-1, 1].
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        std::optional<std::size_t> limit = std::nullopt,
                        std::size_t num_classes = 10) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw ParseError("cannot open " + images_path.string());
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw ParseError("cannot open " + labels_path.string());

  const auto img_name = images_path.string();
  const auto lab_name = labels_path.string();
  if (const auto m = detail::read_be32(img, img_name); m != kIdxImageMagic) {
    throw ParseError(img_name + ": bad magic " + std::to_string(m));
  }
  if (const auto m = detail::read_be32(lab, lab_name); m != kIdxLabelMagic) {
    throw ParseError(lab_name + ": bad magic " + std::to_string(m));
  }
  const std::size_t n_img = detail::read_be32(img, img_name);
  const std::size_t rows = detail::read_be32(img, img_name);
  const std::size_t cols = detail::read_be32(img, img_name);
  const std::size_t n_lab = detail::read_be32(lab, lab_name);
  if (n_img != n_lab) {
    throw ParseError("image count " + std::to_string(n_img) + " != label count " +
                     std::to_string(n_lab));
  }
  const std::size_t n = limit ? std::min(*limit, n_img) : n_img;
  const std::size_t d = rows * cols;

  Dataset ds;
  ds.num_classes = num_classes;
  std::vector<unsigned char> pixels(n * d);
  if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()))) {
    throw ParseError(img_name + ": truncated pixel data");
  }
  std::vector<unsigned char> labels(n);
  if (!lab.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(n))) {
    throw ParseError(lab_name + ": truncated label data");
  }
  std::vector<double> feats(n * d);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    feats[i] = static_cast<double>(pixels[i]) / 255.0 * 2.0 - 1.0;
  }
  ds.features = Matrix(n, d, std::move(feats));
  ds.labels.assign(labels.begin(), labels.end());
  ds.validate();
  return ds;
}

/// $PNML_DATA_DIR, or ./data when unset.
inline std::filesystem::path data_dir() {
  if (const char* env = std::getenv("PNML_DATA_DIR"); env && *env) return env;
  return "data";
}

/// Standard MNIST file names inside `dir`; `train` selects the 60k split.
inline Dataset load_mnist(const std::filesystem::path& dir, bool train,
                          std::optional<std::size_t> limit = std::nullopt) {
  const std::string prefix = train ? "train" : "t10k";
  return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"),
                  limit);
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Isotropic Gaussian blobs. Centers are uniform in [-0.5, 0.5]^d and the noise
/// standard deviation is 1 / separation. Samples are interleaved by class and
/// clamped to [-1, 1].
inline Dataset synth_blobs(std::size_t n_per_class, std::size_t classes, std::size_t d,
                           double separation, std::uint64_t seed) {
  if (classes == 0 || d == 0) throw UsageError("synth_blobs: need at least one class and feature");
  if (!(separation > 0.0)) throw UsageError("synth_blobs: separation must be positive");
  Rng rng(derive_seed(seed, 0xB10B5ULL));
  Matrix centers(classes, d);
  for (double& c : centers.data()) c = rng.uniform(-0.5, 0.5);
  const double sigma = 1.0 / separation;
  Dataset ds;
  ds.num_classes = classes;
  ds.features = Matrix(n_per_class * classes, d);
  ds.labels.resize(n_per_class * classes);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t k = 0; k < classes; ++k) {
      const std::size_t r = i * classes + k;
      for (std::size_t j = 0; j < d; ++j) {
        ds.features(r, j) = std::clamp(centers(k, j) + sigma * rng.normal(), -1.0, 1.0);
      }
      ds.labels[r] = static_cast<Label>(k);
    }
  }
  return ds;
}

/// i.i.d. standard normal entries clamped to [-1, 1].
inline Matrix gaussian_noise_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x701CEULL));
  Matrix m(n, d);
  for (double& v : m.data()) v = std::clamp(rng.normal(), -1.0, 1.0);
  return m;
}

/// Each label is independently redrawn, with probability p, uniformly over all
/// classes (the original class included).
inline Dataset randomize_labels(const Dataset& ds, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw UsageError("randomize_labels: p outside [0, 1]");
  Dataset out = ds;
  Rng rng(derive_seed(seed, 0x1ABE1ULL));
  for (auto& y : out.labels) {
    const double u = rng.uniform();
    const auto redraw = static_cast<Label>(rng.index(ds.num_classes));
    if (u < p) y = redraw;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON helpers shared by checkpoints and experiment configs

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& j, const std::string& key,
                                   const std::string& path) {
  if (!j.is_object()) throw ParseError(path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError(path + "." + key + ": missing field");
  return *it;
}

template <class T>
T get_as(const nlohmann::json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(path + ": wrong type");
  }
}

template <class T>
T get_field(const nlohmann::json& j, const std::string& key, const std::string& path) {
  return get_as<T>(field(j, key, path), path + "." + key);
}

}  // namespace detail

inline nlohmann::json hyper_to_json(const HyperParams& h) {
  auto sched = nlohmann::json::array();
  for (const auto& [epoch, lr] : h.lr_schedule) sched.push_back({epoch, lr});
  return {{"lr_schedule", sched}, {"weight_decay", h.weight_decay}, {"momentum", h.momentum},
          {"batch_size", h.batch_size}, {"epochs", h.epochs},       {"seed", h.seed}};
}

/// Missing keys keep the values from `defaults`; unknown keys are errors.
inline HyperParams hyper_from_json(const nlohmann::json& j, const std::string& path,
                                   HyperParams defaults = {}) {
  if (!j.is_object()) throw ParseError(path + ": expected an object");
  HyperParams h = std::move(defaults);
  for (const auto& [key, value] : j.items()) {
    const std::string p = path + "." + key;
    if (key == "lr_schedule") {
      h.lr_schedule.clear();
      if (!value.is_array()) throw ParseError(p + ": expected an array");
      for (std::size_t i = 0; i < value.size(); ++i) {
        const auto& e = value[i];
        const std::string ep = p + "[" + std::to_string(i) + "]";
        if (!e.is_array() || e.size() != 2) throw ParseError(ep + ": expected [epoch, rate]");
        h.lr_schedule.emplace_back(detail::get_as<std::size_t>(e[0], ep),
                                   detail::get_as<double>(e[1], ep));
      }
    } else if (key == "weight_decay") {
      h.weight_decay = detail::get_as<double>(value, p);
    } else if (key == "momentum") {
      h.momentum = detail::get_as<double>(value, p);
    } else if (key == "batch_size") {
      h.batch_size = detail::get_as<std::size_t>(value, p);
    } else if (key == "epochs") {
      h.epochs = detail::get_as<std::size_t>(value, p);
    } else if (key == "seed") {
      h.seed = detail::get_as<std::uint64_t>(value, p);
    } else {
      throw ParseError(p + ": unknown key");
    }
  }
  try {
    h.validate();
  } catch (const UsageError& e) {
    throw ParseError(path + ": " + e.what());
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelParams params;
  std::uint64_t seed = 0;
  std::optional<HyperParams> hyper;
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["arch"] = ck.params.arch();
  auto layers = nlohmann::json::array();
  for (const auto& l : ck.params.layers) {
    layers.push_back({{"rows", l.weight.rows()},
                      {"cols", l.weight.cols()},
                      {"weight", l.weight.data()},
                      {"bias", l.bias}});
  }
  j["layers"] = std::move(layers);
  j["seed"] = ck.seed;
  if (ck.hyper) j["hyper"] = hyper_to_json(*ck.hyper);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  using detail::field;
  using detail::get_field;
  Checkpoint ck;
  const auto& layers = field(j, "layers", "checkpoint");
  if (!layers.is_array()) throw ParseError("checkpoint.layers: expected an array");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::string p = "checkpoint.layers[" + std::to_string(k) + "]";
    const auto rows = get_field<std::size_t>(layers[k], "rows", p);
    const auto cols = get_field<std::size_t>(layers[k], "cols", p);
    auto weight = get_field<std::vector<double>>(layers[k], "weight", p);
    auto bias = get_field<std::vector<double>>(layers[k], "bias", p);
    if (weight.size() != rows * cols) {
      throw ParseError(p + ".weight: expected " + std::to_string(rows * cols) + " values, got " +
                       std::to_string(weight.size()));
    }
    if (bias.size() != rows) throw ParseError(p + ".bias: expected " + std::to_string(rows) + " values");
    ck.params.layers.push_back({Matrix(rows, cols, std::move(weight)), std::move(bias)});
  }
  try {
    ck.params.validate();
  } catch (const ShapeError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  if (j.contains("arch")) {
    const auto arch = get_field<std::vector<std::size_t>>(j, "arch", "checkpoint");
    if (arch != ck.params.arch()) throw ParseError("checkpoint.arch: does not match layer shapes");
  }
  if (j.contains("seed")) ck.seed = get_field<std::uint64_t>(j, "seed", "checkpoint");
  if (j.contains("hyper")) ck.hyper = hyper_from_json(j.at("hyper"), "checkpoint.hyper");
  return ck;
}

/// Doubles are written in shortest round-trip form, so load(save(p)) == p bit for bit.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp);
    out << checkpoint_to_json(ck).dump() << '\n';
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  save_checkpoint(Checkpoint{params, 0, std::nullopt}, path);
}

inline Checkpoint load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint_file(path).params;
}

}  // namespace pnml
