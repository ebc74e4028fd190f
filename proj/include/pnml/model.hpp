#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pnml/errors.hpp"
#include "pnml/matrix.hpp"

namespace pnml {

using Label = int;

/// Distribution over the label set.
using ProbVector = std::vector<double>;

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  std::size_t inputs() const noexcept { return weight.cols(); }
  std::size_t outputs() const noexcept { return weight.rows(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// A multilayer perceptron: rectifier on hidden layers, softmax over the final logits.
/// Zero hidden layers gives multinomial logistic regression.
struct ModelParams {
  std::vector<DenseLayer> layers;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().inputs(); }
  std::size_t output_dim() const noexcept { return layers.empty() ? 0 : layers.back().outputs(); }

  /// Layer widths from input to output, e.g. {784, 10, 10}.
  std::vector<std::size_t> arch() const {
    std::vector<std::size_t> sizes;
    if (layers.empty()) return sizes;
    sizes.push_back(input_dim());
    for (const auto& l : layers) sizes.push_back(l.outputs());
    return sizes;
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Throws ShapeError if layer dimensions do not chain or parameters are not finite.
  void validate() const {
    if (layers.empty()) throw ShapeError("model has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.bias.size() != l.outputs()) {
        throw ShapeError("layer " + std::to_string(k) + ": bias length " +
                         std::to_string(l.bias.size()) + " != rows " + std::to_string(l.outputs()));
      }
      if (k + 1 < layers.size() && layers[k + 1].inputs() != l.outputs()) {
        throw ShapeError("layer " + std::to_string(k + 1) + " expects " +
                         std::to_string(layers[k + 1].inputs()) + " inputs, previous layer has " +
                         std::to_string(l.outputs()) + " outputs");
      }
      if (!l.weight.all_finite() ||
          !std::all_of(l.bias.begin(), l.bias.end(), [](double v) { return std::isfinite(v); })) {
        throw ShapeError("layer " + std::to_string(k) + " has non-finite parameters");
      }
    }
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Zero-filled model with the given layer widths.
inline ModelParams zero_model(std::span<const std::size_t> arch) {
  if (arch.size() < 2) throw ShapeError("architecture needs at least input and output widths");
  ModelParams m;
  for (std::size_t k = 0; k + 1 < arch.size(); ++k) {
    m.layers.push_back({Matrix(arch[k + 1], arch[k]), Vector(arch[k + 1], 0.0)});
  }
  return m;
}

/// Which layers an update may touch. Indices count from the output end: 0 is the
/// output layer, 1 the layer below it, and so on.
struct FreezeSpec {
  std::set<std::size_t> trainable_layer_indices;

  static FreezeSpec all(std::size_t num_layers) {
    FreezeSpec f;
    for (std::size_t i = 0; i < num_layers; ++i) f.trainable_layer_indices.insert(i);
    return f;
  }
  static FreezeSpec none() { return {}; }
  /// The top `count` layers trainable.
  static FreezeSpec last(std::size_t count) { return all(count); }

  /// `layer` is counted from the input side.
  bool is_trainable(std::size_t layer, std::size_t num_layers) const {
    return trainable_layer_indices.contains(num_layers - 1 - layer);
  }

  void validate(std::size_t num_layers) const {
    for (auto i : trainable_layer_indices) {
      if (i >= num_layers) {
        throw UsageError("freeze spec names layer " + std::to_string(i) + " but model has " +
                         std::to_string(num_layers) + " layers");
      }
    }
  }

  /// Lowest input-side index of a trainable layer, or num_layers if all are frozen.
  std::size_t first_trainable(std::size_t num_layers) const {
    for (std::size_t k = 0; k < num_layers; ++k) {
      if (is_trainable(k, num_layers)) return k;
    }
    return num_layers;
  }

  friend bool operator==(const FreezeSpec&, const FreezeSpec&) = default;
};

inline double log_sum_exp(std::span<const double> z) noexcept {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

/// Max-shifted softmax.
inline ProbVector softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  ProbVector p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

namespace detail {

inline void affine(const DenseLayer& layer, std::span<const double> in, std::span<double> out) {
  for (std::size_t j = 0; j < layer.outputs(); ++j) {
    out[j] = layer.bias[j] + dot(layer.weight.row(j), in);
  }
}

inline void relu_inplace(std::span<double> v) noexcept {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
}

inline void check_input(const ModelParams& params, std::span<const double> x) {
  if (params.layers.empty()) throw ShapeError("model has no layers");
  if (x.size() != params.input_dim()) {
    throw ShapeError("input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(params.input_dim()));
  }
}

inline void check_label(const ModelParams& params, Label y) {
  if (y < 0 || static_cast<std::size_t>(y) >= params.output_dim()) {
    throw UsageError("label " + std::to_string(y) + " out of range [0, " +
                     std::to_string(params.output_dim()) + ")");
  }
}

/// Scratch buffers for one forward/backward pass; reused across samples.
struct Workspace {
  std::vector<Vector> acts;  // acts[k] is the input to layer k; acts[L] the logits
  Vector delta;
  Vector delta_prev;

  void prepare(const ModelParams& params) {
    const std::size_t n = params.num_layers();
    acts.resize(n + 1);
    acts[0].resize(params.input_dim());
    for (std::size_t k = 0; k < n; ++k) acts[k + 1].resize(params.layers[k].outputs());
  }
};

/// Forward pass into the workspace; returns a view of the logits.
inline std::span<const double> forward_logits(const ModelParams& params,
                                              std::span<const double> x, Workspace& ws) {
  ws.prepare(params);
  std::copy(x.begin(), x.end(), ws.acts[0].begin());
  const std::size_t n = params.num_layers();
  for (std::size_t k = 0; k < n; ++k) {
    affine(params.layers[k], ws.acts[k], ws.acts[k + 1]);
    if (k + 1 < n) relu_inplace(ws.acts[k + 1]);
  }
  return ws.acts[n];
}

/// Accumulates d(-ln p(y|x))/d(params) into `grads` for trainable layers and
/// optionally writes the input gradient. Returns the sample loss in nats.
inline double backprop_sample(const ModelParams& params, std::span<const double> x, Label y,
                              const FreezeSpec& freeze, std::vector<DenseLayer>& grads,
                              Vector* input_grad, Workspace& ws) {
  const std::size_t n = params.num_layers();
  const auto logits = forward_logits(params, x, ws);
  const double lse = log_sum_exp(logits);
  const double loss = lse - logits[static_cast<std::size_t>(y)];

  std::size_t lowest_needed = input_grad ? 0 : freeze.first_trainable(n);
  if (lowest_needed >= n) return loss;

  ws.delta.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) ws.delta[j] = std::exp(logits[j] - lse);
  ws.delta[static_cast<std::size_t>(y)] -= 1.0;

  for (std::size_t k = n; k-- > lowest_needed;) {
    const auto& layer = params.layers[k];
    const auto& in = ws.acts[k];
    if (freeze.is_trainable(k, n)) {
      auto& g = grads[k];
      for (std::size_t j = 0; j < layer.outputs(); ++j) {
        const double d = ws.delta[j];
        g.bias[j] += d;
        if (d == 0.0) continue;
        auto row = g.weight.row(j);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] += d * in[i];
      }
    }
    if (k == lowest_needed && !(k == 0 && input_grad)) break;
    // delta for the layer input: W^T delta, masked by the rectifier of the layer below.
    ws.delta_prev.assign(layer.inputs(), 0.0);
    for (std::size_t j = 0; j < layer.outputs(); ++j) {
      const double d = ws.delta[j];
      if (d == 0.0) continue;
      const auto row = layer.weight.row(j);
      for (std::size_t i = 0; i < row.size(); ++i) ws.delta_prev[i] += row[i] * d;
    }
    if (k == 0) {
      if (input_grad) *input_grad = ws.delta_prev;
      break;
    }
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!(in[i] > 0.0)) ws.delta_prev[i] = 0.0;
    }
    std::swap(ws.delta, ws.delta_prev);
  }
  return loss;
}

inline std::vector<DenseLayer> zero_like(const ModelParams& params) {
  std::vector<DenseLayer> g;
  g.reserve(params.num_layers());
  for (const auto& l : params.layers) {
    g.push_back({Matrix(l.outputs(), l.inputs()), Vector(l.outputs(), 0.0)});
  }
  return g;
}

}  // namespace detail

/// Logits of the final layer.
inline Vector logits(const ModelParams& params, std::span<const double> x) {
  detail::check_input(params, x);
  detail::Workspace ws;
  const auto z = detail::forward_logits(params, x, ws);
  return {z.begin(), z.end()};
}

/// p_theta(. | x): softmax of the final-layer logits.
inline ProbVector forward(const ModelParams& params, std::span<const double> x) {
  detail::check_input(params, x);
  detail::Workspace ws;
  return softmax(detail::forward_logits(params, x, ws));
}

/// -ln p_theta(y | x) computed through log-sum-exp.
inline double nll(const ModelParams& params, std::span<const double> x, Label y) {
  detail::check_input(params, x);
  detail::check_label(params, y);
  detail::Workspace ws;
  const auto z = detail::forward_logits(params, x, ws);
  return log_sum_exp(z) - z[static_cast<std::size_t>(y)];
}

struct GradBundle {
  std::vector<DenseLayer> param_grads;  // same shapes as the model
  Vector input_grad;                    // filled only for single-sample batches
  double loss = 0.0;                    // mean negative log-likelihood, nats
};

/// Mean negative log-likelihood over the rows of `features` and its gradient.
/// Gradients of frozen layers are left at exactly zero.
inline GradBundle loss_and_grad(const ModelParams& params, const Matrix& features,
                                std::span<const Label> labels, const FreezeSpec& freeze) {
  if (features.rows() == 0) throw UsageError("loss_and_grad: empty batch");
  if (labels.size() != features.rows()) {
    throw ShapeError("loss_and_grad: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(features.rows()) + " rows");
  }
  freeze.validate(params.num_layers());
  GradBundle out;
  out.param_grads = detail::zero_like(params);
  detail::Workspace ws;
  const bool single = features.rows() == 1;
  for (std::size_t r = 0; r < features.rows(); ++r) {
    detail::check_input(params, features.row(r));
    detail::check_label(params, labels[r]);
    out.loss += detail::backprop_sample(params, features.row(r), labels[r], freeze,
                                        out.param_grads, single ? &out.input_grad : nullptr, ws);
  }
  const double inv = 1.0 / static_cast<double>(features.rows());
  out.loss *= inv;
  if (!single) {
    for (auto& g : out.param_grads) {
      for (double& v : g.weight.data()) v *= inv;
      for (double& v : g.bias) v *= inv;
    }
  }
  return out;
}

/// Gradient of -ln p_theta(y | x) with respect to x.
inline Vector input_gradient(const ModelParams& params, std::span<const double> x, Label y) {
  detail::check_input(params, x);
  detail::check_label(params, y);
  auto scratch = detail::zero_like(params);
  detail::Workspace ws;
  Vector g;
  detail::backprop_sample(params, x, y, FreezeSpec::none(), scratch, &g, ws);
  return g;
}

}  // namespace pnml
