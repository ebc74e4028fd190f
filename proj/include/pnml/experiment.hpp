#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pnml/adversarial.hpp"
#include "pnml/csv.hpp"
#include "pnml/data_io.hpp"
#include "pnml/metrics.hpp"
#include "pnml/pnml.hpp"
#include "pnml/trainer.hpp"

namespace pnml::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSpec {
  std::string kind = "mnist";  // "mnist" or "blobs"
  std::string data_dir;        // mnist; empty means PNML_DATA_DIR
  std::size_t train_limit = 4000;
  std::size_t test_limit = 10000;
  // blobs
  std::size_t classes = 3;
  std::size_t dim = 8;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 20;
  double separation = 4.0;
};

struct HistogramSpec {
  std::size_t bins = 50;
  double smoothing = 1e-10;
};

struct AttackConfig {
  std::vector<double> epsilons{0.0, 0.05, 0.2};
  std::vector<std::size_t> source_arch;  // empty: same as the evaluated model
  HyperParams source_train;
};

struct RandomLabelsConfig {
  std::vector<double> probabilities{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::size_t max_epochs = 200;
};

struct OodConfig {
  std::size_t noise_count = 100;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  std::vector<std::size_t> arch;
  HyperParams train;
  std::vector<HypothesisClassSpec> classes;
  std::size_t test_size = 200;
  std::vector<double> thresholds;  // empty: 0.05, 0.10, ..., log10 |Y|
  HistogramSpec histogram;
  AttackConfig attack;
  RandomLabelsConfig random_labels;
  OodConfig ood;
  std::string output_dir = "results";

  void validate() const {
    if (schema_version != kSchemaVersion) {
      throw UsageError("config: unsupported schema_version " + std::to_string(schema_version));
    }
    if (dataset.kind != "mnist" && dataset.kind != "blobs") {
      throw UsageError("config: dataset.kind must be \"mnist\" or \"blobs\"");
    }
    if (arch.size() < 2) throw UsageError("config: arch needs at least input and output widths");
    for (auto w : arch) {
      if (w == 0) throw UsageError("config: arch widths must be positive");
    }
    train.validate();
    if (classes.empty()) throw UsageError("config: at least one hypothesis class is required");
    for (const auto& c : classes) {
      c.freeze.validate(arch.size() - 1);
      c.fine_tune.validate();
    }
    if (test_size == 0) throw UsageError("config: test_size must be positive");
    if (histogram.bins < 2) throw UsageError("config: histogram.bins must be >= 2");
    if (!(histogram.smoothing >= 0.0)) throw UsageError("config: histogram.smoothing must be >= 0");
    for (double e : attack.epsilons) {
      if (!(e >= 0.0)) throw UsageError("config: attack epsilons must be >= 0");
    }
    attack.source_train.validate();
    for (double p : random_labels.probabilities) {
      if (!(p >= 0.0 && p <= 1.0)) throw UsageError("config: random label p outside [0, 1]");
    }
    if (dataset.kind == "blobs" && arch.front() != dataset.dim) {
      throw UsageError("config: arch input width must equal dataset.dim");
    }
    if (dataset.kind == "blobs" && arch.back() != dataset.classes) {
      throw UsageError("config: arch output width must equal dataset.classes");
    }
  }
};

namespace detail {

using pnml::detail::get_as;

template <class F>
void for_keys(const json& j, const std::string& path, F&& on_key) {
  if (!j.is_object()) throw ParseError(path + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!on_key(key, value, path + "." + key)) throw ParseError(path + "." + key + ": unknown key");
  }
}

inline void require(const json& j, const std::string& path,
                    std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    if (!j.contains(k)) throw ParseError(path + "." + k + ": missing field");
  }
}

inline DatasetSpec dataset_from_json(const json& j, const std::string& path) {
  DatasetSpec d;
  require(j, path, {"kind"});
  for_keys(j, path, [&](const std::string& k, const json& v, const std::string& p) {
    if (k == "kind") d.kind = get_as<std::string>(v, p);
    else if (k == "data_dir") d.data_dir = get_as<std::string>(v, p);
    else if (k == "train_limit") d.train_limit = get_as<std::size_t>(v, p);
    else if (k == "test_limit") d.test_limit = get_as<std::size_t>(v, p);
    else if (k == "classes") d.classes = get_as<std::size_t>(v, p);
    else if (k == "dim") d.dim = get_as<std::size_t>(v, p);
    else if (k == "train_per_class") d.train_per_class = get_as<std::size_t>(v, p);
    else if (k == "test_per_class") d.test_per_class = get_as<std::size_t>(v, p);
    else if (k == "separation") d.separation = get_as<double>(v, p);
    else return false;
    return true;
  });
  return d;
}

inline json dataset_to_json(const DatasetSpec& d) {
  json j{{"kind", d.kind}};
  if (d.kind == "mnist") {
    j["data_dir"] = d.data_dir;
    j["train_limit"] = d.train_limit;
    j["test_limit"] = d.test_limit;
  } else {
    j["classes"] = d.classes;
    j["dim"] = d.dim;
    j["train_per_class"] = d.train_per_class;
    j["test_per_class"] = d.test_per_class;
    j["separation"] = d.separation;
  }
  return j;
}

inline HypothesisClassSpec class_from_json(const json& j, const std::string& path) {
  HypothesisClassSpec c;
  require(j, path, {"name", "trainable_layers", "fine_tune"});
  for_keys(j, path, [&](const std::string& k, const json& v, const std::string& p) {
    if (k == "name") {
      c.name = get_as<std::string>(v, p);
    } else if (k == "trainable_layers") {
      for (auto i : get_as<std::vector<std::size_t>>(v, p)) c.freeze.trainable_layer_indices.insert(i);
    } else if (k == "fine_tune") {
      c.fine_tune = hyper_from_json(v, p);
    } else {
      return false;
    }
    return true;
  });
  return c;
}

inline json class_to_json(const HypothesisClassSpec& c) {
  return {{"name", c.name},
          {"trainable_layers", std::vector<std::size_t>(c.freeze.trainable_layer_indices.begin(),
                                                        c.freeze.trainable_layer_indices.end())},
          {"fine_tune", hyper_to_json(c.fine_tune)}};
}

}  // namespace detail

/// Required keys: schema_version, seed, dataset, arch, train, classes.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::get_as;
  ExperimentConfig c;
  const std::string root = "config";
  detail::require(j, root, {"schema_version", "seed", "dataset", "arch", "train", "classes"});
  detail::for_keys(j, root, [&](const std::string& k, const json& v, const std::string& p) {
    if (k == "schema_version") {
      c.schema_version = get_as<int>(v, p);
      if (c.schema_version != kSchemaVersion) {
        throw ParseError(p + ": unsupported version " + std::to_string(c.schema_version));
      }
    } else if (k == "seed") {
      c.seed = get_as<std::uint64_t>(v, p);
    } else if (k == "dataset") {
      c.dataset = detail::dataset_from_json(v, p);
    } else if (k == "arch") {
      c.arch = get_as<std::vector<std::size_t>>(v, p);
    } else if (k == "train") {
      c.train = hyper_from_json(v, p);
    } else if (k == "classes") {
      if (!v.is_array()) throw ParseError(p + ": expected an array");
      for (std::size_t i = 0; i < v.size(); ++i) {
        c.classes.push_back(detail::class_from_json(v[i], p + "[" + std::to_string(i) + "]"));
      }
    } else if (k == "test_size") {
      c.test_size = get_as<std::size_t>(v, p);
    } else if (k == "thresholds") {
      c.thresholds = get_as<std::vector<double>>(v, p);
    } else if (k == "histogram") {
      detail::for_keys(v, p, [&](const std::string& hk, const json& hv, const std::string& hp) {
        if (hk == "bins") c.histogram.bins = get_as<std::size_t>(hv, hp);
        else if (hk == "smoothing") c.histogram.smoothing = get_as<double>(hv, hp);
        else return false;
        return true;
      });
    } else if (k == "attack") {
      detail::for_keys(v, p, [&](const std::string& ak, const json& av, const std::string& ap) {
        if (ak == "epsilons") c.attack.epsilons = get_as<std::vector<double>>(av, ap);
        else if (ak == "source_arch") c.attack.source_arch = get_as<std::vector<std::size_t>>(av, ap);
        else if (ak == "source_train") c.attack.source_train = hyper_from_json(av, ap);
        else return false;
        return true;
      });
    } else if (k == "random_labels") {
      detail::for_keys(v, p, [&](const std::string& rk, const json& rv, const std::string& rp) {
        if (rk == "probabilities") c.random_labels.probabilities = get_as<std::vector<double>>(rv, rp);
        else if (rk == "max_epochs") c.random_labels.max_epochs = get_as<std::size_t>(rv, rp);
        else return false;
        return true;
      });
    } else if (k == "ood") {
      detail::for_keys(v, p, [&](const std::string& ok, const json& ov, const std::string& op) {
        if (ok == "noise_count") c.ood.noise_count = get_as<std::size_t>(ov, op);
        else return false;
        return true;
      });
    } else if (k == "output_dir") {
      c.output_dir = get_as<std::string>(v, p);
    } else {
      return false;
    }
    return true;
  });
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw ParseError(e.what());
  }
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  auto classes = json::array();
  for (const auto& k : c.classes) classes.push_back(detail::class_to_json(k));
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"dataset", detail::dataset_to_json(c.dataset)},
          {"arch", c.arch},
          {"train", hyper_to_json(c.train)},
          {"classes", classes},
          {"test_size", c.test_size},
          {"thresholds", c.thresholds},
          {"histogram", {{"bins", c.histogram.bins}, {"smoothing", c.histogram.smoothing}}},
          {"attack",
           {{"epsilons", c.attack.epsilons},
            {"source_arch", c.attack.source_arch},
            {"source_train", hyper_to_json(c.attack.source_train)}}},
          {"random_labels",
           {{"probabilities", c.random_labels.probabilities},
            {"max_epochs", c.random_labels.max_epochs}}},
          {"ood", {{"noise_count", c.ood.noise_count}}},
          {"output_dir", c.output_dir}};
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Seeds

/// Every seed in a run derives from the base seed and a fixed stream tag.
namespace stream {
inline constexpr std::uint64_t kTrain = 0x7121;
inline constexpr std::uint64_t kFineTune = 0xF17E;
inline constexpr std::uint64_t kBlobs = 0xB10B;
inline constexpr std::uint64_t kNoise = 0x0015E;
inline constexpr std::uint64_t kLabels = 0x1ABE;
inline constexpr std::uint64_t kSource = 0x5012CE;
}  // namespace stream

inline HyperParams seeded(const HyperParams& h, std::uint64_t base, std::uint64_t tag) {
  HyperParams out = h;
  out.seed = derive_seed(derive_seed(base, tag), h.seed);
  return out;
}

inline HypothesisClassSpec seeded(const HypothesisClassSpec& c, std::uint64_t base) {
  HypothesisClassSpec out = c;
  out.fine_tune = seeded(c.fine_tune, base, stream::kFineTune);
  return out;
}

// ---------------------------------------------------------------------------
// Data

struct Data {
  Dataset train;
  Dataset test;
};

inline Dataset rows_of(const Dataset& ds, std::size_t begin, std::size_t end) {
  Dataset out;
  out.num_classes = ds.num_classes;
  out.features = Matrix(end - begin, ds.dim());
  for (std::size_t r = begin; r < end; ++r) {
    std::copy(ds.sample(r).begin(), ds.sample(r).end(), out.features.row(r - begin).begin());
    out.labels.push_back(ds.label(r));
  }
  return out;
}

inline Data load_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  Data out;
  if (d.kind == "mnist") {
    const fs::path dir = d.data_dir.empty() ? data_dir() : fs::path(d.data_dir);
    out.train = load_mnist(dir, true, d.train_limit);
    out.test = load_mnist(dir, false, d.test_limit);
  } else {
    const Dataset all = synth_blobs(d.train_per_class + d.test_per_class, d.classes, d.dim,
                                    d.separation, derive_seed(cfg.seed, stream::kBlobs));
    const std::size_t n_train = d.train_per_class * d.classes;
    out.train = rows_of(all, 0, n_train);
    out.test = rows_of(all, n_train, all.size());
  }
  if (out.train.dim() != cfg.arch.front()) {
    throw UsageError("config: arch input width " + std::to_string(cfg.arch.front()) +
                     " != dataset width " + std::to_string(out.train.dim()));
  }
  if (out.train.num_classes != cfg.arch.back()) {
    throw UsageError("config: arch output width != number of classes");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run directory bookkeeping

struct RunOptions {
  std::size_t workers = 1;
  std::ostream* log = nullptr;
};

inline void log_line(const RunOptions& opt, const std::string& msg) {
  if (opt.log) *opt.log << "[pnml] " << msg << std::endl;
}

inline void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    out << text;
    if (!out) throw Error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Records the resolved config in the output directory. A directory written by a
/// different config is refused so cached models and journals are never mixed.
inline void claim_output_dir(const ExperimentConfig& cfg) {
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  json manifest = config_to_json(cfg);
  manifest.erase("output_dir");
  const auto path = dir / "manifest.json";
  if (fs::exists(path)) {
    std::ifstream in(path);
    json existing;
    try {
      existing = json::parse(in);
    } catch (const json::parse_error&) {
      throw UsageError(path.string() + " is unreadable; use a fresh output directory");
    }
    if (existing != manifest) {
      throw UsageError(dir.string() +
                       " holds results of a different config or seed; use a fresh --out");
    }
    return;
  }
  write_json(path, manifest);
}

/// Loads `path` if present, otherwise calls `fit` and saves the result.
template <class Fit>
ModelParams cached_model(const fs::path& path, const HyperParams& hyper, Fit&& fit,
                         const RunOptions& opt) {
  if (fs::exists(path)) {
    auto ck = load_checkpoint_file(path);
    if (!ck.hyper || !(*ck.hyper == hyper)) {
      throw UsageError(path.string() + " was trained with different hyperparameters");
    }
    log_line(opt, "loaded " + path.string());
    return std::move(ck.params);
  }
  ModelParams m = fit();
  save_checkpoint(Checkpoint{m, hyper.seed, hyper}, path);
  log_line(opt, "saved " + path.string());
  return m;
}

inline ModelParams erm_model(const ExperimentConfig& cfg, const Dataset& train,
                             const fs::path& dir, const RunOptions& opt) {
  const HyperParams h = seeded(cfg.train, cfg.seed, stream::kTrain);
  return cached_model(dir / "erm.json", h, [&] {
    log_line(opt, "training ERM on " + std::to_string(train.size()) + " samples");
    return erm_fit(train, cfg.arch, h);
  }, opt);
}

// ---------------------------------------------------------------------------
// Resumable per-sample evaluation

/// Evaluates `job(id)` for ids [0, n) and writes the rows, sorted by id, to
/// `path`. Finished rows are appended to `path`.partial as they complete; a
/// rerun reuses them and computes only the missing ids. Rows do not depend on
/// the number of workers or on completion order.
inline csv::Table run_samples(const fs::path& path, const csv::Row& header, std::size_t n,
                              const std::function<csv::Row(std::size_t)>& job,
                              const RunOptions& opt) {
  if (header.empty() || header.front() != "sample_id") {
    throw UsageError("run_samples: first column must be sample_id");
  }
  if (fs::exists(path)) {
    auto done = csv::read(path);
    bool complete = done.header == header && done.rows.size() == n;
    for (std::size_t i = 0; complete && i < n; ++i) {
      complete = done.rows[i][0] == std::to_string(i);
    }
    if (complete) {
      log_line(opt, "reusing " + path.string());
      return done;
    }
    throw UsageError(path.string() + " exists but does not match this run");
  }

  const fs::path journal = path.string() + ".partial";
  std::map<std::size_t, csv::Row> rows;
  if (fs::exists(journal)) {
    const auto partial = csv::read(journal, true);
    if (partial.header != header) throw UsageError(journal.string() + ": header mismatch");
    for (const auto& r : partial.rows) {
      std::int64_t id = -1;
      try {
        id = csv::parse_int(r[0]);
      } catch (const ParseError&) {
        continue;
      }
      if (id >= 0 && static_cast<std::size_t>(id) < n) rows[static_cast<std::size_t>(id)] = r;
    }
    log_line(opt, "resuming " + path.string() + ": " + std::to_string(rows.size()) + "/" +
                      std::to_string(n) + " rows journaled");
  }
  // Rewrite the journal from its valid rows so a torn final line is dropped.
  {
    csv::Table clean{header, {}};
    for (const auto& [id, r] : rows) clean.rows.push_back(r);
    csv::write(journal, clean);
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows.contains(i)) todo.push_back(i);
  }
  std::ofstream out(journal, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot append to " + journal.string());
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::size_t finished = rows.size();
  const std::size_t report_every = std::max<std::size_t>(1, n / 10);

  auto worker = [&] {
    while (!failed) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      try {
        csv::Row r = job(todo[k]);
        if (r.size() != header.size() || r[0] != std::to_string(todo[k])) {
          throw Error("run_samples: job returned a malformed row");
        }
        std::lock_guard lock(mu);
        out << csv::join(r) << '\n';
        out.flush();
        rows[todo[k]] = std::move(r);
        if (++finished % report_every == 0 || finished == n) {
          log_line(opt, path.filename().string() + ": " + std::to_string(finished) + "/" +
                            std::to_string(n));
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  const std::size_t nthreads = std::clamp<std::size_t>(opt.workers, 1, std::max<std::size_t>(1, todo.size()));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  out.close();
  if (error) std::rethrow_exception(error);

  csv::Table table{header, {}};
  for (auto& [id, r] : rows) table.rows.push_back(std::move(r));
  csv::write(path, table);
  fs::remove(journal);
  return table;
}

// ---------------------------------------------------------------------------
// Output tables

inline void write_histogram(const fs::path& path, const ScoreHistogram& h) {
  csv::Table t{{"bin_lo", "bin_hi", "count", "pmf"}, {}};
  for (std::size_t i = 0; i < h.bins(); ++i) {
    t.rows.push_back({csv::format(h.bin_edges[i]), csv::format(h.bin_edges[i + 1]),
                      csv::format(h.counts[i]), csv::format(h.smoothed_pmf[i])});
  }
  csv::write(path, t);
}

inline json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.stddev}}; }

inline const csv::Row kSampleHeader{"sample_id", "true_label", "erm_pred",   "pnml_pred",
                                    "erm_loss",  "pnml_loss",  "genie_loss", "regret",
                                    "erm_correct", "pnml_correct"};

inline csv::Row sample_row(const SampleRecord& r) {
  return {csv::format(r.sample_id), csv::format(r.true_label), csv::format(r.erm_pred()),
          csv::format(r.pnml_pred()), csv::format(r.erm_loss), csv::format(r.pnml_loss),
          csv::format(r.genie_loss), csv::format(r.regret()), csv::format(r.erm_correct),
          csv::format(r.pnml_correct)};
}

/// Aggregates of a per-sample table; losses and regret in log10 units.
struct EvalSummary {
  std::size_t n = 0;
  double erm_accuracy = 0.0;
  double pnml_accuracy = 0.0;
  MeanStd erm_loss;
  MeanStd pnml_loss;
  MeanStd genie_loss;
  MeanStd regret;
  /// max |pnml_loss - genie_loss - regret| over the rows.
  double max_identity_error = 0.0;

  json to_json() const {
    return {{"n", n},
            {"erm_accuracy", erm_accuracy},
            {"pnml_accuracy", pnml_accuracy},
            {"erm_loss", mean_std_json(erm_loss)},
            {"pnml_loss", mean_std_json(pnml_loss)},
            {"genie_loss", mean_std_json(genie_loss)},
            {"regret", mean_std_json(regret)},
            {"max_identity_error", max_identity_error},
            {"units", {{"loss", "log10"}, {"regret", "log10"}}}};
  }
};

inline double mean_of(std::span<const double> v) { return mean_std(v).mean; }

inline EvalSummary summarize(const csv::Table& t) {
  EvalSummary s;
  s.n = t.rows.size();
  if (s.n == 0) return s;
  const auto erm = t.numbers("erm_loss");
  const auto pn = t.numbers("pnml_loss");
  const auto genie = t.numbers("genie_loss");
  const auto regret = t.numbers("regret");
  s.erm_accuracy = mean_of(t.numbers("erm_correct"));
  s.pnml_accuracy = mean_of(t.numbers("pnml_correct"));
  s.erm_loss = mean_std(erm);
  s.pnml_loss = mean_std(pn);
  s.genie_loss = mean_std(genie);
  s.regret = mean_std(regret);
  for (std::size_t i = 0; i < s.n; ++i) {
    s.max_identity_error = std::max(s.max_identity_error, std::abs(pn[i] - genie[i] - regret[i]));
  }
  return s;
}

/// Rows rebuilt from a per-sample table; enough for threshold_report.
inline std::vector<SampleRecord> records_of(const csv::Table& t) {
  const auto id = t.column("sample_id"), ec = t.column("erm_correct"),
             pc = t.column("pnml_correct"), el = t.column("erm_loss"), pl = t.column("pnml_loss"),
             rg = t.column("regret");
  std::vector<SampleRecord> out;
  for (const auto& r : t.rows) {
    SampleRecord s;
    s.sample_id = static_cast<std::size_t>(csv::parse_int(r[id]));
    s.erm_correct = r[ec] == "1";
    s.pnml_correct = r[pc] == "1";
    s.erm_loss = csv::parse_double(r[el]);
    s.pnml_loss = csv::parse_double(r[pl]);
    s.pnml.regret_gamma = csv::parse_double(r[rg]);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<double> default_thresholds(std::size_t num_labels) {
  std::vector<double> t;
  const double top = std::log10(static_cast<double>(num_labels));
  for (int k = 1; 0.05 * k <= top + 1e-12; ++k) t.push_back(0.05 * k);
  return t;
}

struct EvalResult {
  EvalSummary summary;
  csv::Table table;
};

/// pNML evaluation of labelled inputs; writes samples.csv, summary.json,
/// regret histograms split by pNML correctness, and thresholds.csv into `dir`.
inline EvalResult evaluate_set(const fs::path& dir, const ExperimentConfig& cfg,
                               const ModelParams& erm, const Dataset& trainset,
                               const HypothesisClassSpec& cls, const Dataset& inputs,
                               const RunOptions& opt) {
  fs::create_directories(dir);
  const PnmlEngine<Dataset> engine(erm, trainset, seeded(cls, cfg.seed));
  auto job = [&](std::size_t i) {
    const auto x = inputs.sample(i);
    return sample_row(make_record(i, inputs.label(i), forward(erm, x), engine.predict(x)));
  };
  EvalResult res;
  res.table = run_samples(dir / "samples.csv", kSampleHeader, inputs.size(), job, opt);
  res.summary = summarize(res.table);

  const double top = std::log10(static_cast<double>(erm.output_dim()));
  const auto regret = res.table.numbers("regret");
  const auto correct = res.table.numbers("pnml_correct");
  std::vector<double> ok, bad;
  for (std::size_t i = 0; i < regret.size(); ++i) (correct[i] != 0.0 ? ok : bad).push_back(regret[i]);
  const auto& hs = cfg.histogram;
  if (!ok.empty()) {
    write_histogram(dir / "regret_hist_correct.csv", build_histogram(ok, 0.0, top, hs.bins, hs.smoothing));
  }
  if (!bad.empty()) {
    write_histogram(dir / "regret_hist_incorrect.csv", build_histogram(bad, 0.0, top, hs.bins, hs.smoothing));
  }

  const auto thresholds = cfg.thresholds.empty() ? default_thresholds(erm.output_dim()) : cfg.thresholds;
  const auto records = records_of(res.table);
  csv::Table tr{{"threshold", "retained", "fraction", "erm_accuracy", "pnml_accuracy",
                 "erm_mean_loss", "pnml_mean_loss", "empty"},
                {}};
  for (const auto& row : threshold_report(records, thresholds)) {
    tr.rows.push_back({csv::format(row.threshold), csv::format(row.retained),
                       csv::format(row.fraction), csv::format(row.erm_accuracy),
                       csv::format(row.pnml_accuracy), csv::format(row.erm_mean_loss),
                       csv::format(row.pnml_mean_loss), csv::format(row.empty)});
  }
  csv::write(dir / "thresholds.csv", tr);

  json summary = res.summary.to_json();
  summary["hypothesis_class"] = cls.name;
  write_json(dir / "summary.json", summary);
  return res;
}

inline Dataset test_subset(const ExperimentConfig& cfg, const Data& data) {
  return data.test.head(cfg.test_size);
}

// ---------------------------------------------------------------------------
// Subcommands

struct TrainResult {
  EvalStats train;
  EvalStats test;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

/// Trains (or reloads) the ERM model and scores it on the train and test splits.
inline TrainResult run_train(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  claim_output_dir(cfg);
  const Data data = load_data(cfg);
  const ModelParams erm = erm_model(cfg, data.train, cfg.output_dir, opt);
  TrainResult r;
  r.train = evaluate(erm, data.train);
  r.test = evaluate(erm, data.test);
  r.n_train = data.train.size();
  r.n_test = data.test.size();
  const double to_log10 = 1.0 / std::log(10.0);
  write_json(fs::path(cfg.output_dir) / "train_summary.json",
             {{"n_train", r.n_train},
              {"n_test", r.n_test},
              {"train_accuracy", r.train.accuracy},
              {"train_mean_loss", r.train.mean_nll * to_log10},
              {"test_accuracy", r.test.accuracy},
              {"test_mean_loss", r.test.mean_nll * to_log10},
              {"units", {{"loss", "log10"}}}});
  log_line(opt, "test accuracy " + csv::format(r.test.accuracy));
  return r;
}

/// pNML vs ERM vs genie on the test subset using the first hypothesis class.
inline EvalResult run_pnml_eval(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  claim_output_dir(cfg);
  const Data data = load_data(cfg);
  const ModelParams erm = erm_model(cfg, data.train, cfg.output_dir, opt);
  return evaluate_set(fs::path(cfg.output_dir) / "pnml", cfg, erm, data.train, cfg.classes.front(),
                      test_subset(cfg, data), opt);
}

struct RandomLabelsRow {
  double p = 0.0;
  std::size_t epochs_run = 0;
  double train_accuracy = 0.0;
  bool reached_full_fit = false;
  EvalSummary summary;
};

inline std::string tag_of(double v) { return csv::format(v); }

/// Trains from scratch until every train label is fit or the epoch cap is hit.
inline std::pair<ModelParams, std::size_t> fit_until_memorized(const Dataset& train,
                                                               std::span<const std::size_t> arch,
                                                               const HyperParams& h,
                                                               std::size_t max_epochs,
                                                               const RunOptions& opt) {
  SgdTrainer trainer(random_init(arch, h.seed), h, FreezeSpec::all(arch.size() - 1));
  std::size_t e = 0;
  while (e < max_epochs) {
    trainer.run_epoch(train);
    ++e;
    const double acc = evaluate(trainer.params(), train).accuracy;
    if (e % 10 == 0) log_line(opt, "epoch " + std::to_string(e) + ": train accuracy " + csv::format(acc));
    if (acc == 1.0) break;
  }
  return {std::move(trainer).release(), e};
}

/// For each p: corrupt the train labels, refit, then evaluate pNML on clean test labels.
inline std::vector<RandomLabelsRow> run_random_labels(const ExperimentConfig& cfg,
                                                      const RunOptions& opt = {}) {
  claim_output_dir(cfg);
  const Data data = load_data(cfg);
  const Dataset tests = test_subset(cfg, data);
  std::vector<RandomLabelsRow> out;
  csv::Table table{{"p", "epochs_run", "train_accuracy", "reached_full_fit", "erm_accuracy",
                    "pnml_accuracy", "erm_mean_loss", "pnml_mean_loss", "genie_mean_loss",
                    "mean_regret"},
                   {}};
  for (double p : cfg.random_labels.probabilities) {
    const fs::path dir = fs::path(cfg.output_dir) / ("p_" + tag_of(p));
    fs::create_directories(dir);
    const Dataset train = randomize_labels(data.train, p, derive_seed(cfg.seed, stream::kLabels));
    HyperParams h = seeded(cfg.train, cfg.seed, stream::kTrain);
    h.epochs = cfg.random_labels.max_epochs;
    RandomLabelsRow row;
    row.p = p;
    const auto fit_path = dir / "fit.json";
    const ModelParams erm = cached_model(dir / "erm.json", h, [&] {
      log_line(opt, "p=" + tag_of(p) + ": fitting " + std::to_string(train.size()) + " labels");
      auto [m, epochs] = fit_until_memorized(train, cfg.arch, h, cfg.random_labels.max_epochs, opt);
      write_json(fit_path, {{"epochs_run", epochs}});
      return m;
    }, opt);
    {
      std::ifstream in(fit_path);
      if (!in) throw Error(fit_path.string() + " missing next to a cached model");
      row.epochs_run = json::parse(in).at("epochs_run").get<std::size_t>();
    }
    row.train_accuracy = evaluate(erm, train).accuracy;
    row.reached_full_fit = row.train_accuracy == 1.0;
    if (!row.reached_full_fit) {
      log_line(opt, "warning: p=" + tag_of(p) + " stopped at the epoch cap with train accuracy " +
                        csv::format(row.train_accuracy));
    }
    row.summary = evaluate_set(dir, cfg, erm, train, cfg.classes.front(), tests, opt).summary;
    const auto& s = row.summary;
    table.rows.push_back({csv::format(p), csv::format(row.epochs_run),
                          csv::format(row.train_accuracy), csv::format(row.reached_full_fit),
                          csv::format(s.erm_accuracy), csv::format(s.pnml_accuracy),
                          csv::format(s.erm_loss.mean), csv::format(s.pnml_loss.mean),
                          csv::format(s.genie_loss.mean), csv::format(s.regret.mean)});
    out.push_back(row);
  }
  csv::write(fs::path(cfg.output_dir) / "random_labels.csv", table);
  return out;
}

struct Separation {
  double d_kl = 0.0;
  LrtDistance lrt;
};

/// Distance between the score histograms of two sample sets.
inline Separation separation(std::span<const double> in, std::span<const double> out, double lo,
                             double hi, const HistogramSpec& hs) {
  const auto h_in = build_histogram(in, lo, hi, hs.bins, hs.smoothing);
  const auto h_out = build_histogram(out, lo, hi, hs.bins, hs.smoothing);
  return {d_kl(h_in.smoothed_pmf, h_out.smoothed_pmf), d_lrt(h_in.smoothed_pmf, h_out.smoothed_pmf)};
}

struct OodMethodRow {
  std::string method;
  Separation sep;
};

inline const std::vector<std::string> kOodMethods{"regret", "max_prob", "ratio"};

/// Regret, ERM max-probability and 1 - p2/p1 scores for the test subset (is_ood = 0)
/// and for Gaussian noise inputs (is_ood = 1), with their histogram distances.
inline std::vector<OodMethodRow> run_ood_eval(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  claim_output_dir(cfg);
  const Data data = load_data(cfg);
  const ModelParams erm = erm_model(cfg, data.train, cfg.output_dir, opt);
  const Dataset tests = test_subset(cfg, data);
  const Matrix noise = gaussian_noise_inputs(cfg.ood.noise_count, data.train.dim(),
                                             derive_seed(cfg.seed, stream::kNoise));
  const fs::path dir = fs::path(cfg.output_dir) / "ood";
  fs::create_directories(dir);
  const PnmlEngine<Dataset> engine(erm, data.train, seeded(cfg.classes.front(), cfg.seed));
  const std::size_t n_in = tests.size();
  auto job = [&](std::size_t i) {
    const bool ood = i >= n_in;
    const auto x = ood ? noise.row(i - n_in) : tests.sample(i);
    const ProbVector q = forward(erm, x);
    const PnmlResult r = engine.predict(x);
    return csv::Row{csv::format(i), csv::format(ood), csv::format(r.regret_gamma),
                    csv::format(max_prob_score(q)), csv::format(ratio_score(q))};
  };
  const auto table = run_samples(dir / "scores.csv",
                                 {"sample_id", "is_ood", "regret", "max_prob", "ratio"},
                                 n_in + noise.rows(), job, opt);

  const auto is_ood = table.numbers("is_ood");
  const double top = std::log10(static_cast<double>(erm.output_dim()));
  std::vector<OodMethodRow> rows;
  csv::Table metrics{{"method", "d_kl", "d_lrt", "lambda_star"}, {}};
  for (const auto& method : kOodMethods) {
    const auto scores = table.numbers(method);
    std::vector<double> in, out;
    for (std::size_t i = 0; i < scores.size(); ++i) (is_ood[i] != 0.0 ? out : in).push_back(scores[i]);
    const double hi = method == "regret" ? top : 1.0;
    const auto& hs = cfg.histogram;
    write_histogram(dir / ("hist_" + method + "_in.csv"), build_histogram(in, 0.0, hi, hs.bins, hs.smoothing));
    write_histogram(dir / ("hist_" + method + "_out.csv"), build_histogram(out, 0.0, hi, hs.bins, hs.smoothing));
    const auto sep = separation(in, out, 0.0, hi, hs);
    rows.push_back({method, sep});
    metrics.rows.push_back({method, csv::format(sep.d_kl), csv::format(sep.lrt.distance),
                            csv::format(sep.lrt.lambda_star)});
  }
  csv::write(dir / "metrics.csv", metrics);
  json summary{{"n_in", n_in}, {"n_out", noise.rows()}, {"units", {{"d_kl", "nats"}, {"d_lrt", "nats"}, {"regret", "log10"}}}};
  for (const auto& r : rows) summary[r.method] = {{"d_kl", r.sep.d_kl}, {"d_lrt", r.sep.lrt.distance}};
  write_json(dir / "summary.json", summary);
  return rows;
}

struct AdvRow {
  double epsilon = 0.0;
  double max_linf = 0.0;
  EvalSummary summary;
  Separation vs_clean;
};

/// FGSM inputs from a separately trained source model, one pNML evaluation per epsilon.
inline std::vector<AdvRow> run_adv_eval(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  claim_output_dir(cfg);
  const Data data = load_data(cfg);
  const fs::path root(cfg.output_dir);
  const ModelParams erm = erm_model(cfg, data.train, root, opt);
  const Dataset tests = test_subset(cfg, data);
  const auto source_arch = cfg.attack.source_arch.empty() ? cfg.arch : cfg.attack.source_arch;
  if (source_arch.front() != cfg.arch.front() || source_arch.back() != cfg.arch.back()) {
    throw UsageError("config: attack.source_arch must share input and output widths");
  }
  const HyperParams sh = seeded(cfg.attack.source_train, cfg.seed, stream::kSource);
  const ModelParams source = cached_model(root / "source.json", sh, [&] {
    log_line(opt, "training attack source model");
    return erm_fit(data.train, source_arch, sh);
  }, opt);

  const auto& cls = cfg.classes.front();
  // Same directory and arguments as run_pnml_eval, so either run reuses the other.
  const auto clean = evaluate_set(root / "pnml", cfg, erm, data.train, cls, tests, opt);
  const auto clean_regret = clean.table.numbers("regret");
  const double top = std::log10(static_cast<double>(erm.output_dim()));

  std::vector<AdvRow> out;
  csv::Table table{{"epsilon", "max_linf", "erm_accuracy", "pnml_accuracy", "erm_mean_loss",
                    "pnml_mean_loss", "genie_mean_loss", "mean_regret", "d_kl", "d_lrt"},
                   {}};
  for (double eps : cfg.attack.epsilons) {
    Dataset attacked = tests;
    AdvRow row;
    row.epsilon = eps;
    const AttackSpec spec{eps, &source};
    for (std::size_t i = 0; i < tests.size(); ++i) {
      const Vector adv = fgsm(spec, tests.sample(i), tests.label(i));
      auto dst = attacked.features.row(i);
      for (std::size_t j = 0; j < adv.size(); ++j) {
        row.max_linf = std::max(row.max_linf, std::abs(adv[j] - tests.sample(i)[j]));
        dst[j] = adv[j];
      }
    }
    const auto res = evaluate_set(root / ("adv_eps_" + tag_of(eps)), cfg, erm, data.train, cls,
                                  attacked, opt);
    row.summary = res.summary;
    row.vs_clean = separation(clean_regret, res.table.numbers("regret"), 0.0, top, cfg.histogram);
    const auto& s = row.summary;
    table.rows.push_back({csv::format(eps), csv::format(row.max_linf), csv::format(s.erm_accuracy),
                          csv::format(s.pnml_accuracy), csv::format(s.erm_loss.mean),
                          csv::format(s.pnml_loss.mean), csv::format(s.genie_loss.mean),
                          csv::format(s.regret.mean), csv::format(row.vs_clean.d_kl),
                          csv::format(row.vs_clean.lrt.distance)});
    out.push_back(row);
  }
  csv::write(root / "adv.csv", table);
  return out;
}

struct ClassScore {
  std::string name;
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

struct TwiceUniversalResult {
  std::vector<ClassScore> classes;
  ClassScore combined;
  /// max over samples of tu_loss - min_k loss_k - log10 K; never positive.
  double max_bound_slack = 0.0;
  csv::Table table;
};

/// One pNML per hypothesis class, combined per sample by label-wise maxima.
inline TwiceUniversalResult run_twice_universal(const ExperimentConfig& cfg,
                                                const RunOptions& opt = {}) {
  claim_output_dir(cfg);
  const Data data = load_data(cfg);
  const ModelParams erm = erm_model(cfg, data.train, cfg.output_dir, opt);
  const Dataset tests = test_subset(cfg, data);
  std::vector<PnmlEngine<Dataset>> engines;
  for (const auto& c : cfg.classes) engines.emplace_back(erm, data.train, seeded(c, cfg.seed));
  const std::size_t K = engines.size();

  csv::Row header{"sample_id", "true_label"};
  for (std::size_t k = 0; k < K; ++k) {
    header.push_back("loss_" + std::to_string(k));
    header.push_back("pred_" + std::to_string(k));
  }
  for (const char* c : {"tu_loss", "tu_pred", "tu_c"}) header.push_back(c);

  auto job = [&](std::size_t i) {
    const auto x = tests.sample(i);
    const Label y = tests.label(i);
    std::vector<ProbVector> qs;
    csv::Row row{csv::format(i), csv::format(y)};
    for (const auto& e : engines) {
      qs.push_back(e.predict(x).q_pnml);
      row.push_back(csv::format(log_loss(qs.back(), y)));
      row.push_back(csv::format(static_cast<Label>(argmax(qs.back()))));
    }
    const auto tu = twice_universal(qs);
    row.push_back(csv::format(log_loss(tu.q, y)));
    row.push_back(csv::format(static_cast<Label>(argmax(tu.q))));
    row.push_back(csv::format(tu.c));
    return row;
  };
  const fs::path dir = fs::path(cfg.output_dir) / "twice_universal";
  fs::create_directories(dir);
  TwiceUniversalResult res;
  res.table = run_samples(dir / "samples.csv", header, tests.size(), job, opt);

  const auto labels = res.table.numbers("true_label");
  auto score = [&](const std::string& name, const std::string& loss_col, const std::string& pred_col) {
    const auto loss = res.table.numbers(loss_col);
    const auto pred = res.table.numbers(pred_col);
    ClassScore s{name, 0.0, mean_of(loss)};
    for (std::size_t i = 0; i < pred.size(); ++i) s.accuracy += pred[i] == labels[i];
    s.accuracy /= static_cast<double>(std::max<std::size_t>(1, pred.size()));
    return s;
  };
  for (std::size_t k = 0; k < K; ++k) {
    res.classes.push_back(score(cfg.classes[k].name, "loss_" + std::to_string(k), "pred_" + std::to_string(k)));
  }
  res.combined = score("twice universal", "tu_loss", "tu_pred");
  const auto tu_loss = res.table.numbers("tu_loss");
  const double slack = std::log10(static_cast<double>(K));
  res.max_bound_slack = -slack;
  for (std::size_t i = 0; i < tu_loss.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      best = std::min(best, csv::parse_double(res.table.rows[i][res.table.column("loss_" + std::to_string(k))]));
    }
    res.max_bound_slack = std::max(res.max_bound_slack, tu_loss[i] - best - slack);
  }

  json summary{{"n", tu_loss.size()}, {"units", {{"loss", "log10"}}}, {"max_bound_slack", res.max_bound_slack}};
  auto classes = json::array();
  for (std::size_t k = 0; k < K; ++k) {
    classes.push_back({{"index", k}, {"name", res.classes[k].name},
                       {"accuracy", res.classes[k].accuracy}, {"mean_loss", res.classes[k].mean_loss}});
  }
  summary["classes"] = classes;
  summary["combined"] = {{"accuracy", res.combined.accuracy}, {"mean_loss", res.combined.mean_loss}};
  write_json(dir / "summary.json", summary);
  return res;
}

}  // namespace pnml::experiment
