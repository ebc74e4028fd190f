#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pnml/dataset.hpp"
#include "pnml/errors.hpp"
#include "pnml/model.hpp"
#include "pnml/rng.hpp"

namespace pnml {

struct HyperParams {
  /// (first epoch, learning rate) pairs; epochs strictly increasing from 0.
  std::vector<std::pair<std::size_t, double>> lr_schedule{{0, 0.01}};
  double weight_decay = 0.0;
  double momentum = 0.0;
  std::size_t batch_size = 1;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;

  double lr_at(std::size_t epoch) const {
    double lr = lr_schedule.front().second;
    for (const auto& [start, rate] : lr_schedule) {
      if (epoch >= start) lr = rate;
    }
    return lr;
  }

  void validate() const {
    if (lr_schedule.empty() || lr_schedule.front().first != 0) {
      throw UsageError("learning-rate schedule must start at epoch 0");
    }
    for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
      if (i > 0 && lr_schedule[i].first <= lr_schedule[i - 1].first) {
        throw UsageError("learning-rate schedule epochs must be strictly increasing");
      }
      if (!(lr_schedule[i].second >= 0.0)) throw UsageError("learning rate must be >= 0");
    }
    if (!(weight_decay >= 0.0)) throw UsageError("weight decay must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("momentum must lie in [0, 1)");
    if (batch_size == 0) throw UsageError("batch size must be >= 1");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

/// Outputs of the first `upto` layers (post-rectifier) for every sample of `data`.
template <SampleSource S>
Matrix prefix_activations(const ModelParams& params, const S& data, std::size_t upto) {
  if (upto == 0 || upto >= params.num_layers()) {
    throw UsageError("prefix must cover at least one layer and leave at least one");
  }
  const std::size_t width = params.layers[upto - 1].outputs();
  Matrix out(data.size(), width);
  Vector a, b;
  for (std::size_t r = 0; r < data.size(); ++r) {
    auto x = data.sample(r);
    a.assign(x.begin(), x.end());
    for (std::size_t k = 0; k < upto; ++k) {
      b.resize(params.layers[k].outputs());
      detail::affine(params.layers[k], a, b);
      detail::relu_inplace(b);
      std::swap(a, b);
    }
    std::copy(a.begin(), a.end(), out.row(r).begin());
  }
  return out;
}

inline Vector prefix_activation(const ModelParams& params, std::span<const double> x,
                                std::size_t upto) {
  Matrix one(1, x.size(), std::vector<double>(x.begin(), x.end()));
  const std::vector<Label> no_label{0};
  return prefix_activations(params, MatrixSource(one, no_label), upto).data();
}

inline ModelParams suffix_model(const ModelParams& params, std::size_t from) {
  return {std::vector<DenseLayer>(params.layers.begin() + static_cast<std::ptrdiff_t>(from),
                                  params.layers.end())};
}

inline ModelParams splice_suffix(ModelParams params, ModelParams suffix, std::size_t from) {
  for (std::size_t k = 0; k < suffix.num_layers(); ++k) {
    params.layers[from + k] = std::move(suffix.layers[k]);
  }
  return params;
}

/// Minibatch SGD with classical momentum and L2 weight decay:
///   v <- mu v - eta (g + lambda w),  w <- w + v
/// The batch order of epoch e is a permutation drawn from (seed, e).
class SgdTrainer {
 public:
  SgdTrainer(ModelParams params, HyperParams hyper, FreezeSpec freeze)
      : params_(std::move(params)), hyper_(std::move(hyper)), freeze_(std::move(freeze)) {
    params_.validate();
    hyper_.validate();
    freeze_.validate(params_.num_layers());
    velocity_ = detail::zero_like(params_);
    grads_ = detail::zero_like(params_);
  }

  template <SampleSource S>
  void run_epoch(const S& data) {
    if (data.size() == 0) throw UsageError("sgd: empty dataset");
    if (data.dim() != params_.input_dim()) {
      throw ShapeError("sgd: data has " + std::to_string(data.dim()) +
                       " features, model expects " + std::to_string(params_.input_dim()));
    }
    const std::size_t n_layers = params_.num_layers();
    const double lr = hyper_.lr_at(epoch_);
    Rng rng(derive_seed(hyper_.seed, epoch_));
    const auto order = permutation(data.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += hyper_.batch_size) {
      const std::size_t stop = std::min(order.size(), start + hyper_.batch_size);
      for (std::size_t k = 0; k < n_layers; ++k) {
        if (!freeze_.is_trainable(k, n_layers)) continue;
        std::fill(grads_[k].weight.data().begin(), grads_[k].weight.data().end(), 0.0);
        std::fill(grads_[k].bias.begin(), grads_[k].bias.end(), 0.0);
      }
      for (std::size_t i = start; i < stop; ++i) {
        const Label y = data.label(order[i]);
        if (y < 0 || static_cast<std::size_t>(y) >= params_.output_dim()) {
          throw UsageError("sgd: label " + std::to_string(y) + " out of range");
        }
        detail::backprop_sample(params_, data.sample(order[i]), y, freeze_, grads_, nullptr,
                                ws_);
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = 0; k < n_layers; ++k) {
        if (!freeze_.is_trainable(k, n_layers)) continue;
        step(params_.layers[k].weight.data(), grads_[k].weight.data(),
             velocity_[k].weight.data(), lr, inv);
        step(params_.layers[k].bias, grads_[k].bias, velocity_[k].bias, lr, inv);
      }
    }
    ++epoch_;
  }

  const ModelParams& params() const noexcept { return params_; }
  ModelParams release() && { return std::move(params_); }
  std::size_t epoch() const noexcept { return epoch_; }
  const HyperParams& hyper() const noexcept { return hyper_; }

 private:
  void step(std::vector<double>& w, const std::vector<double>& g, std::vector<double>& v,
            double lr, double inv) const {
    const double mu = hyper_.momentum;
    const double wd = hyper_.weight_decay;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] - lr * (g[i] * inv + wd * w[i]);
      w[i] += v[i];
    }
  }

  ModelParams params_;
  HyperParams hyper_;
  FreezeSpec freeze_;
  std::vector<DenseLayer> velocity_;
  std::vector<DenseLayer> grads_;
  detail::Workspace ws_;
  std::size_t epoch_ = 0;
};

/// Trains for hyper.epochs full passes. Frozen layers come back bit-identical.
/// When the frozen layers form a prefix, their outputs are computed once and only
/// the trainable suffix is iterated; the arithmetic is the same either way.
template <SampleSource S>
ModelParams sgd_train(const ModelParams& params0, const S& data, const HyperParams& hyper,
                      const FreezeSpec& freeze) {
  params0.validate();
  hyper.validate();
  freeze.validate(params0.num_layers());
  if (data.size() == 0) throw UsageError("sgd: empty dataset");
  if (data.dim() != params0.input_dim()) {
    throw ShapeError("sgd: data has " + std::to_string(data.dim()) + " features, model expects " +
                     std::to_string(params0.input_dim()));
  }
  const std::size_t first = freeze.first_trainable(params0.num_layers());
  if (hyper.epochs == 0 || first == params0.num_layers()) return params0;
  if (first > 0) {
    const Matrix acts = prefix_activations(params0, data, first);
    std::vector<Label> labels(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.label(i);
    SgdTrainer trainer(suffix_model(params0, first), hyper, freeze);
    const MatrixSource cached(acts, labels);
    for (std::size_t e = 0; e < hyper.epochs; ++e) trainer.run_epoch(cached);
    return splice_suffix(params0, std::move(trainer).release(), first);
  }
  SgdTrainer trainer(params0, hyper, freeze);
  for (std::size_t e = 0; e < hyper.epochs; ++e) trainer.run_epoch(data);
  return std::move(trainer).release();
}

/// Weights and biases uniform in +-1/sqrt(fan_in).
inline ModelParams random_init(std::span<const std::size_t> arch, std::uint64_t seed) {
  ModelParams m = zero_model(arch);
  Rng rng(derive_seed(seed, 0x1A17ULL));
  for (auto& layer : m.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.inputs()));
    for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
    for (double& b : layer.bias) b = rng.uniform(-bound, bound);
  }
  return m;
}

/// Empirical risk minimizer: random init followed by SGD on all layers.
template <SampleSource S>
ModelParams erm_fit(const S& data, std::span<const std::size_t> arch, const HyperParams& hyper) {
  if (arch.empty() || arch.front() != data.dim()) {
    throw ShapeError("architecture input width does not match data");
  }
  ModelParams init = random_init(arch, hyper.seed);
  return sgd_train(init, data, hyper, FreezeSpec::all(init.num_layers()));
}

struct EvalStats {
  double accuracy = 0.0;
  double mean_nll = 0.0;  // nats
};

template <SampleSource S>
EvalStats evaluate(const ModelParams& params, const S& data) {
  EvalStats s;
  if (data.size() == 0) return s;
  detail::Workspace ws;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto z = detail::forward_logits(params, data.sample(i), ws);
    const auto y = static_cast<std::size_t>(data.label(i));
    const auto pred =
        static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    correct += pred == y;
    s.mean_nll += log_sum_exp(z) - z[y];
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  s.mean_nll /= static_cast<double>(data.size());
  return s;
}

}  // namespace pnml
