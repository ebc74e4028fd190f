#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "pnml/experiment.hpp"

namespace pnml::testing {

namespace fs = std::filesystem;

/// Fresh scratch directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("pnml_test_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  std::string operator/(const std::string& sub) const { return (path_ / sub).string(); }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline HyperParams quick_hyper(double lr, std::size_t epochs, std::size_t batch = 8) {
  HyperParams h;
  h.lr_schedule = {{0, lr}};
  h.momentum = 0.9;
  h.batch_size = batch;
  h.epochs = epochs;
  return h;
}

/// Small synthetic config that exercises every runner in well under a second.
inline experiment::ExperimentConfig blobs_config(const std::string& out) {
  experiment::ExperimentConfig c;
  c.seed = 11;
  c.dataset.kind = "blobs";
  c.dataset.classes = 3;
  c.dataset.dim = 6;
  c.dataset.train_per_class = 20;
  c.dataset.test_per_class = 6;
  c.dataset.separation = 4.0;
  c.arch = {6, 5, 3};
  c.train = quick_hyper(0.1, 20);
  HypothesisClassSpec all{"all layers", FreezeSpec::all(2), quick_hyper(0.05, 3)};
  HypothesisClassSpec last{"last layer", FreezeSpec::last(1), quick_hyper(0.05, 3)};
  HypothesisClassSpec erm{"0 layers", FreezeSpec::none(), quick_hyper(0.05, 0)};
  c.classes = {all, last, erm};
  c.test_size = 12;
  c.attack.epsilons = {0.0, 0.05, 0.2};
  c.attack.source_arch = {6, 8, 3};
  c.attack.source_train = quick_hyper(0.1, 20);
  c.random_labels.probabilities = {0.0, 1.0};
  c.random_labels.max_epochs = 15;
  c.ood.noise_count = 8;
  c.output_dir = out;
  return c;
}

}  // namespace pnml::testing
