#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "convex_fixture.hpp"
#include "pnml/data_io.hpp"
#include "pnml/metrics.hpp"
#include "pnml/pnml.hpp"
#include "test_support.hpp"

namespace pnml {
namespace {

TEST(NormalizePnml, SingleFeasibleLabel) {
  const std::vector<double> p{1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  const auto n = normalize_pnml(p);
  EXPECT_EQ(n.c, 1.0);
  EXPECT_EQ(n.gamma, 0.0);
  EXPECT_EQ(n.q, p);
}

TEST(NormalizePnml, MaximalUncertainty) {
  const std::vector<double> p(10, 1.0);
  const auto n = normalize_pnml(p);
  EXPECT_EQ(n.c, 10.0);
  EXPECT_DOUBLE_EQ(n.gamma, 1.0);
  for (double q : n.q) EXPECT_DOUBLE_EQ(q, 0.1);
}

TEST(NormalizePnml, FourLabelExample) {
  const std::vector<double> p{0.8, 0.6, 0.2, 0.4};
  const auto n = normalize_pnml(p);
  EXPECT_NEAR(n.c, 2.0, 1e-15);
  const std::vector<double> q{0.4, 0.3, 0.1, 0.2};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(n.q[i], q[i], 1e-15);
    EXPECT_EQ(n.q[i], p[i] / n.c);
  }
  EXPECT_NEAR(n.gamma, 0.30103, 1e-5);
  EXPECT_EQ(n.gamma, std::log10(n.c));
}

TEST(NormalizePnml, RejectsDegenerateInput) {
  EXPECT_THROW(normalize_pnml(std::vector<double>{0, 0, 0}), DegenerateInputError);
  EXPECT_THROW(normalize_pnml(std::vector<double>{0.5, 1.5}), UsageError);
  EXPECT_THROW(normalize_pnml(std::vector<double>{}), UsageError);
}

TEST(TwiceUniversal, SingleLearnerIsIdentity) {
  const std::vector<ProbVector> l{{0.2, 0.5, 0.3}};
  const auto tu = twice_universal(l);
  EXPECT_EQ(tu.c, 1.0);
  EXPECT_EQ(tu.q, l[0]);
}

TEST(TwiceUniversal, OpposedLearners) {
  const std::vector<ProbVector> l{{0.9, 0.1}, {0.1, 0.9}};
  const auto tu = twice_universal(l);
  EXPECT_NEAR(tu.c, 1.8, 1e-15);
  EXPECT_NEAR(tu.q[0], 0.5, 1e-15);
  EXPECT_NEAR(tu.q[1], 0.5, 1e-15);
}

TEST(TwiceUniversal, IdenticalLearners) {
  const ProbVector q{0.125, 0.375, 0.5};
  const std::vector<ProbVector> l{q, q, q};
  const auto tu = twice_universal(l);
  EXPECT_EQ(tu.c, 1.0);
  EXPECT_EQ(tu.q, q);
}

TEST(TwiceUniversal, Errors) {
  EXPECT_THROW(twice_universal(std::vector<ProbVector>{}), UsageError);
  EXPECT_THROW(twice_universal(std::vector<ProbVector>{{0.5, 0.5}, {1.0}}), ShapeError);
}

TEST(TwiceUniversal, RegretBoundProperty) {
  Rng rng(404);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 1 + rng.index(5);
    const std::size_t n = 2 + rng.index(9);
    std::vector<ProbVector> learners;
    for (std::size_t i = 0; i < k; ++i) {
      ProbVector q(n);
      double s = 0.0;
      for (double& v : q) s += (v = rng.uniform() + 1e-6);
      for (double& v : q) v /= s;
      learners.push_back(q);
    }
    const auto tu = twice_universal(learners);
    EXPECT_GE(tu.c, 1.0 - 1e-12);
    EXPECT_LE(tu.c, static_cast<double>(k) + 1e-12);
    EXPECT_NEAR(std::accumulate(tu.q.begin(), tu.q.end(), 0.0), 1.0, 1e-12);
    for (std::size_t y = 0; y < n; ++y) {
      double best = 1e300;
      for (const auto& q : learners) best = std::min(best, -std::log10(q[y]));
      EXPECT_LE(-std::log10(tu.q[y]), best + std::log10(static_cast<double>(k)) + 1e-12);
    }
  }
}

TEST(LabelJobSeed, IndependentOfLabelCount) {
  EXPECT_EQ(label_job_seed(0, 0), 0x9E3779B97F4A7C15ULL);
  EXPECT_EQ(label_job_seed(5, 2), 5ULL ^ (3ULL * 0x9E3779B97F4A7C15ULL));
  EXPECT_NE(label_job_seed(5, 2), label_job_seed(5, 3));
}

class BlobPnml : public ::testing::Test {
 protected:
  void SetUp() override {
    train = synth_blobs(15, 3, 4, 3.0, 21);
    test = synth_blobs(4, 3, 4, 3.0, 21 + 1000);
    HyperParams h;
    h.lr_schedule = {{0, 0.1}};
    h.momentum = 0.9;
    h.batch_size = 8;
    h.epochs = 30;
    h.seed = 3;
    erm = erm_fit(train, arch, h);
    spec.name = "all";
    spec.freeze = FreezeSpec::all(2);
    spec.fine_tune = h;
    spec.fine_tune.epochs = 3;
    spec.fine_tune.lr_schedule = {{0, 0.05}};
    spec.fine_tune.seed = 99;
  }
  std::vector<std::size_t> arch{4, 6, 3};
  Dataset train, test;
  ModelParams erm;
  HypothesisClassSpec spec;
};

TEST_F(BlobPnml, ZeroFineTuningCollapsesToErm) {
  spec.fine_tune.epochs = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto r = pnml_predict(erm, train, test.sample(i), spec);
    const auto q = forward(erm, test.sample(i));
    EXPECT_LT(std::abs(r.regret_gamma), 1e-15);
    for (std::size_t y = 0; y < 3; ++y) EXPECT_NEAR(r.q_pnml[y], q[y], 1e-12);
    const auto g = genie_predict(erm, train, test.sample(i), test.label(i), spec);
    EXPECT_EQ(g.prob, q[static_cast<std::size_t>(test.label(i))]);
  }
}

TEST_F(BlobPnml, ResultInvariants) {
  PnmlEngine<Dataset> engine(erm, train, spec);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto r = engine.predict(test.sample(i));
    EXPECT_NEAR(std::accumulate(r.q_pnml.begin(), r.q_pnml.end(), 0.0), 1.0, 1e-9);
    EXPECT_NEAR(r.normalization_c, std::accumulate(r.genie_probs.begin(), r.genie_probs.end(), 0.0),
                1e-15);
    EXPECT_EQ(std::log10(r.normalization_c), r.regret_gamma);
    for (std::size_t y = 0; y < 3; ++y) {
      EXPECT_GE(r.genie_probs[y], 0.0);
      EXPECT_LE(r.genie_probs[y], 1.0);
      EXPECT_EQ(r.q_pnml[y], r.genie_probs[y] / r.normalization_c);
    }
  }
}

TEST_F(BlobPnml, GenieIsTheTrueLabelJob) {
  PnmlEngine<Dataset> engine(erm, train, spec);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto r = engine.predict(test.sample(i));
    const Label y = test.label(i);
    const auto g = genie_predict(erm, train, test.sample(i), y, spec);
    EXPECT_EQ(g.prob, r.genie_probs[static_cast<std::size_t>(y)]);
    const double pnml_loss = log_loss(r.q_pnml, y);
    EXPECT_NEAR(pnml_loss, g.loss + r.regret_gamma, 1e-9);
  }
}

TEST_F(BlobPnml, JobsMatchDirectSgdOnAugmentedTrainset) {
  spec.freeze = FreezeSpec::last(1);
  PnmlEngine<Dataset> engine(erm, train, spec);
  const auto x = test.sample(0);
  for (Label y = 0; y < 3; ++y) {
    auto h = spec.fine_tune;
    h.seed = label_job_seed(spec.fine_tune.seed, y);
    const auto direct = sgd_train(erm, AugmentedSource<Dataset>(train, x, y), h, FreezeSpec::last(1));
    EXPECT_EQ(engine.fine_tuned(x, y), direct);
  }
}

TEST_F(BlobPnml, RepeatedPredictionIsBitIdentical) {
  const auto a = PnmlEngine<Dataset>(erm, train, spec).predict(test.sample(1), true);
  const auto b = PnmlEngine<Dataset>(erm, train, spec).predict(test.sample(1), true);
  EXPECT_EQ(a.genie_probs, b.genie_probs);
  EXPECT_EQ(a.per_label_params_digest, b.per_label_params_digest);
  EXPECT_EQ(a.regret_gamma, b.regret_gamma);
}

TEST_F(BlobPnml, FineTuningRaisesRegretAboveZero) {
  PnmlEngine<Dataset> engine(erm, train, spec);
  double total = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) total += engine.predict(test.sample(i)).regret_gamma;
  EXPECT_GT(total, 0.0);
}

TEST_F(BlobPnml, RejectsBadInputs) {
  PnmlEngine<Dataset> engine(erm, train, spec);
  EXPECT_THROW(engine.predict(std::vector<double>{1.0, 2.0}), ShapeError);
  EXPECT_THROW(engine.genie(test.sample(0), 3), UsageError);
}

// SGD-based pNML on a convex class against the exact finite-class oracle.
TEST(ConvexPnml, MatchesExactOracle) {
  const auto grid = testing::binary_grid_class();
  Rng rng(8080);
  for (int trial = 0; trial < 3; ++trial) {
    const auto samples = testing::random_mixed_trainset(rng);
    const auto ds = testing::one_hot_dataset(samples);
    const std::vector<std::size_t> arch{2, 2};
    const auto erm = erm_fit(ds, arch, testing::convex_hyper(1));
    HypothesisClassSpec spec{"convex", FreezeSpec::all(1), testing::convex_hyper(2)};
    PnmlEngine<Dataset> engine(erm, ds, spec);
    for (std::size_t f = 0; f < 2; ++f) {
      const auto x = testing::one_hot(f);
      const auto exact = exact_pnml(grid, samples, f);
      const auto sgd = engine.predict(x);
      for (Label y = 0; y < 2; ++y) {
        const auto tuned = engine.fine_tuned(x, y);
        auto aug = ds;
        aug.features.append_row(x);
        aug.labels.push_back(y);
        EXPECT_LT(testing::grad_norm(tuned, aug), 1e-8);
        EXPECT_NEAR(sgd.genie_probs[static_cast<std::size_t>(y)],
                    exact.genie_probs[static_cast<std::size_t>(y)], 1e-3);
        EXPECT_NEAR(sgd.q_pnml[static_cast<std::size_t>(y)], exact.q_pnml[static_cast<std::size_t>(y)],
                    1e-3);
      }
    }
  }
}

}  // namespace
}  // namespace pnml
