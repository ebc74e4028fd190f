#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "experiment_fixture.hpp"
#include "pnml/experiment.hpp"

namespace pnml {
namespace {

namespace ex = experiment;
using testing::blobs_config;
using testing::ScratchDir;
using testing::slurp;

// ---------------------------------------------------------------------------
// Config

nlohmann::json minimal_config_json() {
  return nlohmann::json::parse(R"({
    "schema_version": 1,
    "seed": 5,
    "dataset": {"kind": "blobs", "classes": 3, "dim": 4},
    "arch": [4, 3, 3],
    "train": {"lr_schedule": [[0, 0.1]], "epochs": 2},
    "classes": [{"name": "last", "trainable_layers": [0], "fine_tune": {"epochs": 1}}]
  })");
}

TEST(Config, MinimalDocumentParses) {
  const auto c = ex::config_from_json(minimal_config_json());
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.arch, (std::vector<std::size_t>{4, 3, 3}));
  EXPECT_EQ(c.test_size, 200u);
  ASSERT_EQ(c.classes.size(), 1u);
  EXPECT_EQ(c.classes[0].freeze, FreezeSpec::last(1));
}

TEST(Config, RoundTripsThroughJson) {
  const auto c = blobs_config("somewhere");
  const auto j = ex::config_to_json(c);
  EXPECT_EQ(ex::config_to_json(ex::config_from_json(j)), j);
}

TEST(Config, UnknownTopLevelKeyIsAnError) {
  auto j = minimal_config_json();
  j["learning_rate"] = 0.1;
  try {
    ex::config_from_json(j);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("config.learning_rate"), std::string::npos);
  }
}

TEST(Config, UnknownNestedKeyNamesItsPath) {
  auto j = minimal_config_json();
  j["classes"][0]["fine_tune"]["epoch"] = 3;
  try {
    ex::config_from_json(j);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("config.classes[0].fine_tune.epoch"), std::string::npos);
  }
}

TEST(Config, SeedIsRequired) {
  auto j = minimal_config_json();
  j.erase("seed");
  EXPECT_THROW(ex::config_from_json(j), ParseError);
}

TEST(Config, SchemaVersionIsChecked) {
  auto j = minimal_config_json();
  j["schema_version"] = 2;
  EXPECT_THROW(ex::config_from_json(j), ParseError);
}

TEST(Config, InvalidReferencesAreRejected) {
  auto j = minimal_config_json();
  j["classes"][0]["trainable_layers"] = {5};
  EXPECT_THROW(ex::config_from_json(j), ParseError);
  j = minimal_config_json();
  j["arch"] = {5, 3, 3};
  EXPECT_THROW(ex::config_from_json(j), ParseError);
  j = minimal_config_json();
  j["random_labels"] = {{"probabilities", {1.5}}};
  EXPECT_THROW(ex::config_from_json(j), ParseError);
  j = minimal_config_json();
  j["dataset"]["kind"] = "cifar";
  EXPECT_THROW(ex::config_from_json(j), ParseError);
}

TEST(Config, LoadsFromFile) {
  ScratchDir dir("config_file");
  {
    std::ofstream out(dir / "c.json");
    out << minimal_config_json().dump();
  }
  EXPECT_EQ(ex::load_config(dir / "c.json").seed, 5u);
  {
    std::ofstream out(dir / "bad.json");
    out << "{ not json";
  }
  EXPECT_THROW(ex::load_config(dir / "bad.json"), ParseError);
}

// ---------------------------------------------------------------------------
// run_samples

csv::Row square_row(std::size_t i) {
  return {csv::format(i), csv::format(std::sqrt(static_cast<double>(i)) / 3.0)};
}

TEST(RunSamples, RowsAreSortedAndJournalRemoved) {
  ScratchDir dir("run_samples_sorted");
  const auto path = dir.path() / "t.csv";
  const auto t = ex::run_samples(path, {"sample_id", "v"}, 25, square_row, {4, nullptr});
  ASSERT_EQ(t.rows.size(), 25u);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(t.rows[i], square_row(i));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".partial"));
  EXPECT_EQ(csv::read(path).rows, t.rows);
}

TEST(RunSamples, WorkerCountDoesNotChangeOutput) {
  ScratchDir dir("run_samples_workers");
  ex::run_samples(dir.path() / "a.csv", {"sample_id", "v"}, 40, square_row, {1, nullptr});
  ex::run_samples(dir.path() / "b.csv", {"sample_id", "v"}, 40, square_row, {5, nullptr});
  EXPECT_EQ(slurp(dir.path() / "a.csv"), slurp(dir.path() / "b.csv"));
}

TEST(RunSamples, InterruptedRunResumesOnlyMissingIds) {
  ScratchDir dir("run_samples_resume");
  const csv::Row header{"sample_id", "v"};
  ex::run_samples(dir.path() / "ref.csv", header, 20, square_row, {});

  const auto path = dir.path() / "t.csv";
  auto failing = [](std::size_t i) -> csv::Row {
    if (i == 7) throw Error("interrupted");
    return square_row(i);
  };
  EXPECT_THROW(ex::run_samples(path, header, 20, failing, {1, nullptr}), Error);
  EXPECT_FALSE(std::filesystem::exists(path));
  ASSERT_TRUE(std::filesystem::exists(path.string() + ".partial"));

  std::vector<std::size_t> recomputed;
  auto counting = [&](std::size_t i) {
    recomputed.push_back(i);
    return square_row(i);
  };
  ex::run_samples(path, header, 20, counting, {1, nullptr});
  EXPECT_EQ(recomputed.size(), 13u);
  EXPECT_EQ(recomputed.front(), 7u);
  EXPECT_EQ(slurp(path), slurp(dir.path() / "ref.csv"));
}

TEST(RunSamples, TornJournalLineIsRecomputed) {
  ScratchDir dir("run_samples_torn");
  const csv::Row header{"sample_id", "v"};
  const auto path = dir.path() / "t.csv";
  ex::run_samples(dir.path() / "ref.csv", header, 10, square_row, {});
  {
    std::ofstream j(path.string() + ".partial", std::ios::binary);
    j << "sample_id,v\n" << csv::join(square_row(3)) << '\n' << csv::join(square_row(0)) << '\n'
      << "5,0.74";
  }
  std::vector<std::size_t> recomputed;
  ex::run_samples(path, header, 10, [&](std::size_t i) {
    recomputed.push_back(i);
    return square_row(i);
  }, {});
  EXPECT_EQ(recomputed, (std::vector<std::size_t>{1, 2, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(slurp(path), slurp(dir.path() / "ref.csv"));
}

TEST(RunSamples, CompleteOutputIsReused) {
  ScratchDir dir("run_samples_reuse");
  const auto path = dir.path() / "t.csv";
  ex::run_samples(path, {"sample_id", "v"}, 5, square_row, {});
  bool called = false;
  ex::run_samples(path, {"sample_id", "v"}, 5, [&](std::size_t i) {
    called = true;
    return square_row(i);
  }, {});
  EXPECT_FALSE(called);
  EXPECT_THROW(ex::run_samples(path, {"sample_id", "w"}, 5, square_row, {}), UsageError);
}

TEST(RunSamples, HeaderMustStartWithSampleId) {
  ScratchDir dir("run_samples_header");
  EXPECT_THROW(ex::run_samples(dir.path() / "t.csv", {"id", "v"}, 1, square_row, {}), UsageError);
}

// ---------------------------------------------------------------------------
// Runners on synthetic data

TEST(PnmlEval, WritesRecordsConsistentWithSummary) {
  ScratchDir dir("pnml_eval");
  const auto cfg = blobs_config(dir / "out");
  const auto res = ex::run_pnml_eval(cfg);
  const auto table = csv::read(dir.path() / "out/pnml/samples.csv");
  EXPECT_EQ(table.header, ex::kSampleHeader);
  ASSERT_EQ(table.rows.size(), cfg.test_size);
  EXPECT_LE(res.summary.max_identity_error, 1e-9);

  std::ifstream in(dir.path() / "out/pnml/summary.json");
  const auto summary = nlohmann::json::parse(in);
  const auto again = ex::summarize(table);
  EXPECT_EQ(summary.at("pnml_loss").at("mean").get<double>(), again.pnml_loss.mean);
  EXPECT_EQ(summary.at("erm_accuracy").get<double>(), again.erm_accuracy);
  EXPECT_EQ(summary.at("regret").at("std").get<double>(), again.regret.stddev);

  const auto thresholds = csv::read(dir.path() / "out/pnml/thresholds.csv");
  double last = -1.0;
  for (const auto& r : thresholds.rows) {
    const double f = csv::parse_double(r[thresholds.column("fraction")]);
    EXPECT_GE(f, last);
    last = f;
  }
  for (const char* h : {"regret_hist_correct.csv", "regret_hist_incorrect.csv"}) {
    const auto p = dir.path() / "out/pnml" / h;
    if (!std::filesystem::exists(p)) continue;
    EXPECT_EQ(csv::read(p).header, (csv::Row{"bin_lo", "bin_hi", "count", "pmf"}));
  }
}

TEST(PnmlEval, ByteIdenticalAcrossRunsAndWorkerCounts) {
  ScratchDir dir("pnml_determinism");
  ex::run_pnml_eval(blobs_config(dir / "a"), {1, nullptr});
  ex::run_pnml_eval(blobs_config(dir / "b"), {3, nullptr});
  EXPECT_EQ(slurp(dir.path() / "a/pnml/samples.csv"), slurp(dir.path() / "b/pnml/samples.csv"));
  EXPECT_EQ(slurp(dir.path() / "a/erm.json"), slurp(dir.path() / "b/erm.json"));
}

TEST(PnmlEval, SeedChangesResults) {
  ScratchDir dir("pnml_seed");
  auto a = blobs_config(dir / "a");
  auto b = blobs_config(dir / "b");
  b.seed = a.seed + 1;
  ex::run_pnml_eval(a);
  ex::run_pnml_eval(b);
  EXPECT_NE(slurp(dir.path() / "a/pnml/samples.csv"), slurp(dir.path() / "b/pnml/samples.csv"));
}

TEST(PnmlEval, ResumedRunMatchesUninterruptedRun) {
  ScratchDir dir("pnml_resume");
  ex::run_pnml_eval(blobs_config(dir / "ref"));
  const auto ref = slurp(dir.path() / "ref/pnml/samples.csv");

  ex::run_pnml_eval(blobs_config(dir / "cut"));
  const auto csv_path = dir.path() / "cut/pnml/samples.csv";
  // Keep the header and four rows, then a half-written fifth row.
  std::size_t pos = 0;
  for (int k = 0; k < 5; ++k) pos = ref.find('\n', pos) + 1;
  const auto torn = ref.substr(0, pos) + ref.substr(pos, 9);
  std::filesystem::remove(csv_path);
  {
    std::ofstream j(csv_path.string() + ".partial", std::ios::binary);
    j << torn;
  }
  ex::run_pnml_eval(blobs_config(dir / "cut"));
  EXPECT_EQ(slurp(csv_path), ref);
}

TEST(PnmlEval, OutputDirOfAnotherConfigIsRefused) {
  ScratchDir dir("pnml_manifest");
  auto cfg = blobs_config(dir / "out");
  ex::run_train(cfg);
  cfg.seed += 1;
  EXPECT_THROW(ex::run_pnml_eval(cfg), UsageError);
}

TEST(PnmlEval, ZeroFineTuneStepsCollapseToErm) {
  ScratchDir dir("pnml_collapse");
  auto cfg = blobs_config(dir / "out");
  cfg.classes = {cfg.classes.back()};
  ASSERT_EQ(cfg.classes[0].fine_tune.epochs, 0u);
  cfg.classes[0].freeze = FreezeSpec::all(2);
  const auto res = ex::run_pnml_eval(cfg);
  const auto& t = res.table;
  for (const auto& r : t.rows) {
    EXPECT_LT(std::abs(csv::parse_double(r[t.column("regret")])), 1e-15);
    EXPECT_EQ(r[t.column("erm_pred")], r[t.column("pnml_pred")]);
    EXPECT_NEAR(csv::parse_double(r[t.column("erm_loss")]),
                csv::parse_double(r[t.column("pnml_loss")]), 1e-12);
  }
}

TEST(Train, ReportsAccuracyAndCachesModel) {
  ScratchDir dir("train");
  const auto cfg = blobs_config(dir / "out");
  const auto r = ex::run_train(cfg);
  EXPECT_GT(r.train.accuracy, 0.8);
  EXPECT_EQ(r.n_train, 60u);
  EXPECT_EQ(r.n_test, 18u);
  const auto first = slurp(dir.path() / "out/erm.json");
  ex::run_train(cfg);
  EXPECT_EQ(slurp(dir.path() / "out/erm.json"), first);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "out/train_summary.json"));
}

TEST(RandomLabels, SweepIsDeterministic) {
  ScratchDir dir("random_labels");
  const auto a = ex::run_random_labels(blobs_config(dir / "a"));
  ex::run_random_labels(blobs_config(dir / "b"));
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].p, 0.0);
  EXPECT_LE(a[0].epochs_run, 15u);
  EXPECT_EQ(a[0].reached_full_fit, a[0].train_accuracy == 1.0);
  EXPECT_EQ(slurp(dir.path() / "a/random_labels.csv"), slurp(dir.path() / "b/random_labels.csv"));
  EXPECT_EQ(slurp(dir.path() / "a/p_1/samples.csv"), slurp(dir.path() / "b/p_1/samples.csv"));
}

TEST(Ood, IdenticalSetsHaveZeroSeparation) {
  const std::vector<double> s{0.1, 0.2, 0.2, 0.5, 0.9, 0.95};
  const auto sep = ex::separation(s, s, 0.0, 1.0, {});
  EXPECT_EQ(sep.d_kl, 0.0);
  EXPECT_NEAR(sep.lrt.distance, 0.0, 1e-12);
}

TEST(Ood, WritesScoresMetricsAndHistograms) {
  ScratchDir dir("ood");
  const auto cfg = blobs_config(dir / "out");
  const auto rows = ex::run_ood_eval(cfg);
  ASSERT_EQ(rows.size(), 3u);
  const auto scores = csv::read(dir.path() / "out/ood/scores.csv");
  EXPECT_EQ(scores.rows.size(), cfg.test_size + cfg.ood.noise_count);
  for (const auto& r : rows) {
    EXPECT_GE(r.sep.d_kl, 0.0);
    EXPECT_GE(r.sep.lrt.distance, 0.0);
    const auto h = csv::read(dir.path() / ("out/ood/hist_" + r.method + "_out.csv"));
    EXPECT_EQ(h.rows.size(), cfg.histogram.bins);
  }
  EXPECT_EQ(csv::read(dir.path() / "out/ood/metrics.csv").rows.size(), 3u);
}

TEST(Adv, ZeroEpsilonReproducesCleanEvaluation) {
  ScratchDir dir("adv");
  const auto cfg = blobs_config(dir / "out");
  const auto rows = ex::run_adv_eval(cfg);
  ex::run_pnml_eval(cfg);
  ASSERT_EQ(rows.size(), 3u);
  const auto clean = slurp(dir.path() / "out/pnml/samples.csv");
  EXPECT_EQ(slurp(dir.path() / "out/adv_eps_0/samples.csv"), clean);
  EXPECT_EQ(rows[0].max_linf, 0.0);
  EXPECT_EQ(rows[0].vs_clean.d_kl, 0.0);
  for (const auto& r : rows) EXPECT_LE(r.max_linf, r.epsilon + 1e-15);
  EXPECT_GT(rows[2].max_linf, 0.0);
}

TEST(TwiceUniversal, BoundHoldsPerSample) {
  ScratchDir dir("tu");
  const auto r = ex::run_twice_universal(blobs_config(dir / "out"));
  ASSERT_EQ(r.classes.size(), 3u);
  EXPECT_LE(r.max_bound_slack, 1e-12);
  EXPECT_EQ(r.table.header.size(), 2u + 2u * 3u + 3u);
}

TEST(TwiceUniversal, SingleClassIsThatClassExactly) {
  ScratchDir dir("tu_single");
  auto cfg = blobs_config(dir / "out");
  cfg.classes = {cfg.classes[1]};
  const auto r = ex::run_twice_universal(cfg);
  const auto& t = r.table;
  for (const auto& row : t.rows) {
    EXPECT_EQ(csv::parse_double(row[t.column("tu_loss")]), csv::parse_double(row[t.column("loss_0")]));
    EXPECT_EQ(row[t.column("tu_pred")], row[t.column("pred_0")]);
    EXPECT_NEAR(csv::parse_double(row[t.column("tu_c")]), 1.0, 1e-15);
  }
  EXPECT_EQ(r.combined.mean_loss, r.classes[0].mean_loss);
  EXPECT_EQ(r.combined.accuracy, r.classes[0].accuracy);
}

TEST(TwiceUniversal, IdenticalLearnersCombineToThemselves) {
  ScratchDir dir("tu_identical");
  auto cfg = blobs_config(dir / "out");
  cfg.classes = {cfg.classes[1], cfg.classes[1]};
  cfg.classes[1].name = "copy";
  const auto r = ex::run_twice_universal(cfg);
  const auto& t = r.table;
  for (const auto& row : t.rows) {
    EXPECT_EQ(row[t.column("loss_0")], row[t.column("loss_1")]);
    EXPECT_EQ(csv::parse_double(row[t.column("tu_loss")]), csv::parse_double(row[t.column("loss_0")]));
  }
}

}  // namespace
}  // namespace pnml
