#pragma once

#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pnml/errors.hpp"
#include "pnml/matrix.hpp"
#include "pnml/model.hpp"

namespace pnml {

/// Anything the trainer can iterate: indexed feature rows with labels.
template <class S>
concept SampleSource = requires(const S& s, std::size_t i) {
  { s.size() } -> std::convertible_to<std::size_t>;
  { s.dim() } -> std::convertible_to<std::size_t>;
  { s.sample(i) } -> std::convertible_to<std::span<const double>>;
  { s.label(i) } -> std::convertible_to<Label>;
};

/// Feature matrix (N x d, values in [-1, 1]) with integer labels.
struct Dataset {
  Matrix features;
  std::vector<Label> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
  std::span<const double> sample(std::size_t i) const noexcept { return features.row(i); }
  Label label(std::size_t i) const noexcept { return labels[i]; }

  void validate() const {
    if (features.rows() != labels.size()) {
      throw ShapeError("dataset has " + std::to_string(features.rows()) + " rows but " +
                       std::to_string(labels.size()) + " labels");
    }
    for (Label y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw UsageError("dataset label " + std::to_string(y) + " outside [0, " +
                         std::to_string(num_classes) + ")");
      }
    }
  }

  /// First `n` samples (all if n >= size()).
  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset d;
    d.num_classes = num_classes;
    d.features = Matrix(n, dim(), std::vector<double>(features.data().begin(),
                                                      features.data().begin() + n * dim()));
    d.labels.assign(labels.begin(), labels.begin() + n);
    return d;
  }
};

/// A base source with one extra sample appended at index base.size().
template <SampleSource Base>
class AugmentedSource {
 public:
  AugmentedSource(const Base& base, std::span<const double> x, Label y)
      : base_(&base), x_(x), y_(y) {
    if (x.size() != base.dim()) throw ShapeError("appended sample width mismatch");
  }
  std::size_t size() const noexcept { return base_->size() + 1; }
  std::size_t dim() const noexcept { return base_->dim(); }
  std::span<const double> sample(std::size_t i) const noexcept {
    return i == base_->size() ? x_ : base_->sample(i);
  }
  Label label(std::size_t i) const noexcept { return i == base_->size() ? y_ : base_->label(i); }

 private:
  const Base* base_;
  std::span<const double> x_;
  Label y_;
};

/// Borrowed feature matrix and labels.
class MatrixSource {
 public:
  MatrixSource(const Matrix& features, std::span<const Label> labels)
      : features_(&features), labels_(labels) {}
  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t dim() const noexcept { return features_->cols(); }
  std::span<const double> sample(std::size_t i) const noexcept { return features_->row(i); }
  Label label(std::size_t i) const noexcept { return labels_[i]; }

 private:
  const Matrix* features_;
  std::span<const Label> labels_;
};

}  // namespace pnml
