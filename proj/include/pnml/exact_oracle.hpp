#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pnml/errors.hpp"
#include "pnml/model.hpp"
#include "pnml/pnml.hpp"

namespace pnml {

struct CategoricalSample {
  std::size_t feature = 0;
  Label label = 0;
};

/// Finitely many conditional PMFs over categorical features. Storage is flat:
/// prob(h, f, y) lives at (h * num_features + f) * num_labels + y.
class FiniteHypothesisClass {
 public:
  FiniteHypothesisClass(std::size_t num_features, std::size_t num_labels)
      : num_features_(num_features), num_labels_(num_labels) {
    if (num_features == 0 || num_labels == 0) throw UsageError("empty feature or label set");
  }

  /// Appends a hypothesis given as one ProbVector per feature value.
  void add(const std::vector<ProbVector>& table) {
    if (table.size() != num_features_) throw ShapeError("hypothesis table has wrong row count");
    for (const auto& row : table) {
      if (row.size() != num_labels_) throw ShapeError("hypothesis row has wrong label count");
      double s = 0.0;
      for (double p : row) {
        if (!(p >= 0.0 && p <= 1.0)) throw UsageError("hypothesis probability outside [0, 1]");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw UsageError("hypothesis row does not sum to 1");
      probs_.insert(probs_.end(), row.begin(), row.end());
    }
  }

  std::size_t size() const noexcept { return probs_.size() / (num_features_ * num_labels_); }
  std::size_t num_features() const noexcept { return num_features_; }
  std::size_t num_labels() const noexcept { return num_labels_; }

  double prob(std::size_t h, std::size_t f, Label y) const noexcept {
    return probs_[(h * num_features_ + f) * num_labels_ + static_cast<std::size_t>(y)];
  }
  std::span<const double> row(std::size_t h, std::size_t f) const noexcept {
    return {probs_.data() + (h * num_features_ + f) * num_labels_, num_labels_};
  }

  void check(std::span<const CategoricalSample> trainset, std::size_t x) const {
    if (size() == 0) throw UsageError("hypothesis class is empty");
    if (x >= num_features_) throw UsageError("test feature index out of range");
    for (const auto& s : trainset) {
      if (s.feature >= num_features_) throw UsageError("train feature index out of range");
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_labels_) {
        throw UsageError("train label out of range");
      }
    }
  }

 private:
  std::size_t num_features_;
  std::size_t num_labels_;
  std::vector<double> probs_;
};

struct ExactGenie {
  std::size_t index = 0;
  double log_joint = 0.0;  // natural log
  double joint = 0.0;
  double prob = 0.0;       // p_theta(y | x) of the selected hypothesis
};

/// argmax over the class of p(y|x) * prod_i p(y_i|x_i), by enumeration.
/// Joint ties (log joints within 1e-12 relative) go to the larger p(y|x), then
/// to the lower index.
inline ExactGenie exact_genie(const FiniteHypothesisClass& cls,
                              std::span<const CategoricalSample> trainset, std::size_t x,
                              Label y) {
  cls.check(trainset, x);
  if (y < 0 || static_cast<std::size_t>(y) >= cls.num_labels()) {
    throw UsageError("test label out of range");
  }
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  ExactGenie best;
  best.log_joint = kNegInf;
  bool have = false;
  for (std::size_t h = 0; h < cls.size(); ++h) {
    const double p = cls.prob(h, x, y);
    double lj = p > 0.0 ? std::log(p) : kNegInf;
    for (const auto& s : trainset) {
      if (lj == kNegInf) break;
      const double ps = cls.prob(h, s.feature, s.label);
      lj = ps > 0.0 ? lj + std::log(ps) : kNegInf;
    }
    if (!have) {
      best = {h, lj, 0.0, p};
      have = true;
      continue;
    }
    const bool both_inf = lj == kNegInf && best.log_joint == kNegInf;
    const bool tied =
        both_inf || (std::isfinite(lj) && std::isfinite(best.log_joint) &&
                     std::abs(lj - best.log_joint) <=
                         1e-12 * std::max(1.0, std::abs(best.log_joint)));
    if ((!tied && lj > best.log_joint) || (tied && p > best.prob)) best = {h, lj, 0.0, p};
  }
  best.joint = std::exp(best.log_joint);
  return best;
}

/// pNML with exact genies: p_i from exact_genie for every label, then normalized.
inline PnmlResult exact_pnml(const FiniteHypothesisClass& cls,
                             std::span<const CategoricalSample> trainset, std::size_t x) {
  PnmlResult r;
  r.genie_probs.resize(cls.num_labels());
  for (std::size_t i = 0; i < cls.num_labels(); ++i) {
    r.genie_probs[i] = exact_genie(cls, trainset, x, static_cast<Label>(i)).prob;
  }
  auto n = normalize_pnml(r.genie_probs);
  r.q_pnml = std::move(n.q);
  r.normalization_c = n.c;
  r.regret_gamma = n.gamma;
  return r;
}

/// log10(p_genie(y|x) / q(y)); +infinity when q(y) = 0.
inline double exact_regret(const FiniteHypothesisClass& cls,
                           std::span<const CategoricalSample> trainset, std::size_t x, Label y,
                           const ProbVector& q) {
  if (q.size() != cls.num_labels()) throw ShapeError("q has wrong label count");
  const auto g = exact_genie(cls, trainset, x, y);
  const double qy = q[static_cast<std::size_t>(y)];
  if (qy <= 0.0) return std::numeric_limits<double>::infinity();
  return std::log10(g.prob / qy);
}

/// A hypothesis class together with a trainset and a test feature.
struct ExactInstance {
  FiniteHypothesisClass cls{1, 1};
  std::vector<CategoricalSample> trainset;
  std::size_t x = 0;
};

// Instance document:
//   {"num_features": F, "num_labels": Y,
//    "hypotheses": [[[p(y|f=0)...], ...], ...],
//    "trainset": [[feature, label], ...], "x": feature}
inline nlohmann::json instance_to_json(const ExactInstance& inst) {
  nlohmann::json j;
  j["num_features"] = inst.cls.num_features();
  j["num_labels"] = inst.cls.num_labels();
  auto hyps = nlohmann::json::array();
  for (std::size_t h = 0; h < inst.cls.size(); ++h) {
    auto table = nlohmann::json::array();
    for (std::size_t f = 0; f < inst.cls.num_features(); ++f) {
      const auto row = inst.cls.row(h, f);
      table.push_back(std::vector<double>(row.begin(), row.end()));
    }
    hyps.push_back(std::move(table));
  }
  j["hypotheses"] = std::move(hyps);
  auto train = nlohmann::json::array();
  for (const auto& s : inst.trainset) train.push_back({s.feature, s.label});
  j["trainset"] = std::move(train);
  j["x"] = inst.x;
  return j;
}

inline ExactInstance instance_from_json(const nlohmann::json& j) {
  try {
    ExactInstance inst{FiniteHypothesisClass(j.at("num_features").get<std::size_t>(),
                                             j.at("num_labels").get<std::size_t>()),
                       {},
                       j.at("x").get<std::size_t>()};
    for (const auto& table : j.at("hypotheses")) {
      inst.cls.add(table.get<std::vector<ProbVector>>());
    }
    for (const auto& s : j.at("trainset")) {
      inst.trainset.push_back({s.at(0).get<std::size_t>(), s.at(1).get<Label>()});
    }
    inst.cls.check(inst.trainset, inst.x);
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("exact instance: ") + e.what());
  }
}

inline ExactInstance load_instance(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open instance file " + path);
  try {
    return instance_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace pnml
