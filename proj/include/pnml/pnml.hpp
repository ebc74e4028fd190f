#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pnml/dataset.hpp"
#include "pnml/errors.hpp"
#include "pnml/model.hpp"
#include "pnml/trainer.hpp"

namespace pnml {

/// Outcome of the predictive NML for one test input.
struct PnmlResult {
  /// genie_probs[i]: probability of label i under the model fine-tuned with label i.
  std::vector<double> genie_probs;
  ProbVector q_pnml;
  double normalization_c = 0.0;
  /// log10 of normalization_c.
  double regret_gamma = 0.0;
  /// FNV-1a digests of the per-label fine-tuned parameters, when requested.
  std::vector<std::uint64_t> per_label_params_digest;
};

struct Normalized {
  ProbVector q;
  double c = 0.0;
  double gamma = 0.0;  // log10 c
};

/// q_i = p_i / C with C = sum_i p_i; regret is log10 C.
inline Normalized normalize_pnml(std::span<const double> genie_probs) {
  if (genie_probs.empty()) throw UsageError("normalize_pnml: empty probability vector");
  Normalized n;
  for (double p : genie_probs) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw UsageError("normalize_pnml: probability " + std::to_string(p) + " outside [0, 1]");
    }
    n.c += p;
  }
  if (!(n.c > 0.0)) throw DegenerateInputError("normalize_pnml: all probabilities are zero");
  n.q.resize(genie_probs.size());
  for (std::size_t i = 0; i < genie_probs.size(); ++i) n.q[i] = genie_probs[i] / n.c;
  n.gamma = std::log10(n.c);
  return n;
}

/// Restricted model class for fine-tuning: which layers move and how.
struct HypothesisClassSpec {
  std::string name;
  FreezeSpec freeze;
  HyperParams fine_tune;  // fine_tune.epochs is the number of fine-tuning epochs
};

/// Seed of the fine-tuning job for `label`; independent of how many labels exist.
constexpr std::uint64_t label_job_seed(std::uint64_t base, Label label) noexcept {
  return base ^ (static_cast<std::uint64_t>(label + 1) * 0x9E3779B97F4A7C15ULL);
}

inline std::uint64_t params_digest(const ModelParams& params) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::span<const double> values) {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto& l : params.layers) {
    mix(l.weight.data());
    mix(l.bias);
  }
  return h;
}

inline double log10_loss(double prob) { return -std::log10(std::max(prob, 1e-300)); }

struct GenieResult {
  double prob = 0.0;
  double loss = 0.0;  // base 10
};

/// Per-label fine-tuning pNML around a fixed ERM model and trainset.
///
/// Each label's job restarts from the ERM weights, appends (x, label) to the
/// trainset and runs fine_tune.epochs of SGD with seed label_job_seed(...).
/// When the frozen layers form a prefix, the trainset's prefix activations are
/// computed once here and shared by all jobs and test inputs.
template <SampleSource S = Dataset>
class PnmlEngine {
 public:
  PnmlEngine(const ModelParams& erm, const S& trainset, HypothesisClassSpec spec)
      : erm_(&erm), trainset_(&trainset), spec_(std::move(spec)) {
    erm.validate();
    spec_.fine_tune.validate();
    spec_.freeze.validate(erm.num_layers());
    if (trainset.dim() != erm.input_dim()) throw ShapeError("trainset width != model input");
    first_ = spec_.freeze.first_trainable(erm.num_layers());
    if (first_ > 0 && first_ < erm.num_layers() && spec_.fine_tune.epochs > 0) {
      prefix_ = prefix_activations(erm, trainset, first_);
      labels_.resize(trainset.size());
      for (std::size_t i = 0; i < trainset.size(); ++i) labels_[i] = trainset.label(i);
      suffix_ = suffix_model(erm, first_);
    }
  }

  std::size_t num_labels() const noexcept { return erm_->output_dim(); }
  const HypothesisClassSpec& spec() const noexcept { return spec_; }

  /// Parameters after fine-tuning on trainset + (x, label).
  ModelParams fine_tuned(std::span<const double> x, Label label) const {
    check(x, label);
    HyperParams h = spec_.fine_tune;
    h.seed = label_job_seed(spec_.fine_tune.seed, label);
    if (!prefix_) return sgd_train(*erm_, AugmentedSource<S>(*trainset_, x, label), h, spec_.freeze);
    const Vector px = prefix_activation(*erm_, x, first_);
    const MatrixSource cached(*prefix_, labels_);
    auto tuned = sgd_train(suffix_, AugmentedSource<MatrixSource>(cached, px, label), h,
                           spec_.freeze);
    return splice_suffix(*erm_, std::move(tuned), first_);
  }

  /// p_{theta_label}(label | x).
  double label_prob(std::span<const double> x, Label label,
                    std::uint64_t* digest = nullptr) const {
    const ModelParams tuned = fine_tuned(x, label);
    if (digest) *digest = params_digest(tuned);
    return forward(tuned, x)[static_cast<std::size_t>(label)];
  }

  PnmlResult predict(std::span<const double> x, bool with_digests = false) const {
    PnmlResult r;
    const std::size_t n = num_labels();
    r.genie_probs.resize(n);
    if (with_digests) r.per_label_params_digest.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      r.genie_probs[i] = label_prob(x, static_cast<Label>(i),
                                    with_digests ? &r.per_label_params_digest[i] : nullptr);
    }
    auto norm = normalize_pnml(r.genie_probs);
    r.q_pnml = std::move(norm.q);
    r.normalization_c = norm.c;
    r.regret_gamma = norm.gamma;
    return r;
  }

  /// The reference learner that knows the true label.
  GenieResult genie(std::span<const double> x, Label y_true) const {
    GenieResult g;
    g.prob = label_prob(x, y_true);
    g.loss = log10_loss(g.prob);
    return g;
  }

 private:
  void check(std::span<const double> x, Label label) const {
    detail::check_input(*erm_, x);
    detail::check_label(*erm_, label);
  }

  const ModelParams* erm_;
  const S* trainset_;
  HypothesisClassSpec spec_;
  std::size_t first_ = 0;
  std::optional<Matrix> prefix_;
  std::vector<Label> labels_;
  ModelParams suffix_;
};

template <SampleSource S>
PnmlResult pnml_predict(const ModelParams& erm_params, const S& trainset,
                        std::span<const double> x, const HypothesisClassSpec& spec) {
  return PnmlEngine<S>(erm_params, trainset, spec).predict(x);
}

template <SampleSource S>
GenieResult genie_predict(const ModelParams& erm_params, const S& trainset,
                          std::span<const double> x, Label y_true,
                          const HypothesisClassSpec& spec) {
  return PnmlEngine<S>(erm_params, trainset, spec).genie(x, y_true);
}

struct TwiceUniversal {
  ProbVector q;
  double c = 0.0;
};

/// Label-wise maximum over the learners, renormalized. 1 <= c <= K.
inline TwiceUniversal twice_universal(std::span<const ProbVector> learners) {
  if (learners.empty()) throw UsageError("twice_universal: no learners");
  const std::size_t n = learners.front().size();
  TwiceUniversal tu;
  tu.q.assign(n, 0.0);
  for (const auto& q : learners) {
    if (q.size() != n) throw ShapeError("twice_universal: learners disagree on label count");
    for (std::size_t i = 0; i < n; ++i) tu.q[i] = std::max(tu.q[i], q[i]);
  }
  for (double v : tu.q) tu.c += v;
  if (!(tu.c > 0.0)) throw DegenerateInputError("twice_universal: all maxima are zero");
  // Identical learners (K = 1 included) combine to themselves without a rounding step.
  const bool identical = std::all_of(learners.begin(), learners.end(),
                                     [&](const ProbVector& q) { return q == learners.front(); });
  if (identical) {
    tu.q = learners.front();
    return tu;
  }
  for (double& v : tu.q) v /= tu.c;
  return tu;
}

}  // namespace pnml
