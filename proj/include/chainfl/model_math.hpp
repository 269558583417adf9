#pragma once

// Numeric kernels: per-sample losses and gradients, mini-batch SGD, model
// aggregation and evaluation metrics.
//
// Two model families share the flat ParamVector layout:
//   squared       linear regression, dim == feature_dim, prediction x.w
//   cross_entropy multinomial logistic regression, dim == n_classes*(feature_dim+1),
//                 class k owns the slice [k*(d+1), (k+1)*(d+1)) with the bias last.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chainfl/error.hpp"

namespace chainfl {

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values) : values_(values) {}

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& raw() const noexcept { return values_; }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

struct Sample {
  std::vector<double> x;
  // Regression target, or the class index for classification.
  double y = 0.0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

class LabeledDataset {
 public:
  LabeledDataset() = default;
  explicit LabeledDataset(std::vector<Sample> samples) : samples_(std::move(samples)) {
    for (const auto& s : samples_) check_dim(s);
  }

  void add(Sample s) {
    check_dim(s);
    samples_.push_back(std::move(s));
  }

  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  std::size_t feature_dim() const noexcept { return samples_.empty() ? 0 : samples_.front().x.size(); }

  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  const std::vector<Sample>& samples() const noexcept { return samples_; }

  auto begin() const noexcept { return samples_.begin(); }
  auto end() const noexcept { return samples_.end(); }

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;

 private:
  void check_dim(const Sample& s) const {
    if (!samples_.empty() && s.x.size() != samples_.front().x.size()) {
      throw error(errc::shape_mismatch, "sample feature dimension differs from dataset");
    }
  }

  std::vector<Sample> samples_;
};

enum class LossKind { squared, cross_entropy };

inline const char* to_string(LossKind k) { return k == LossKind::squared ? "squared" : "cross_entropy"; }

struct HyperParams {
  double mu = 1e-2;
  int epochs = 1;
  int batch_size = 10;

  void validate() const {
    if (!(mu > 0.0) || !std::isfinite(mu)) throw error(errc::config, "learning rate must be > 0");
    if (epochs < 1) throw error(errc::config, "local epochs must be >= 1");
    if (batch_size < 1) throw error(errc::config, "mini-batch size must be >= 1");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

enum class MetricKind { accuracy, perplexity, loss };

inline const char* to_string(MetricKind k) {
  switch (k) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::perplexity: return "perplexity";
    case MetricKind::loss: return "loss";
  }
  return "unknown";
}

struct MetricValue {
  MetricKind kind;
  double value;
};

struct WeightedModel {
  ParamVector params;
  std::uint64_t weight;  // |D_j|, the contributing dataset size
};

namespace detail {

inline std::size_t class_count(std::size_t dim, std::size_t feature_dim) {
  const std::size_t stride = feature_dim + 1;
  if (dim == 0 || dim % stride != 0 || dim / stride < 2) {
    throw error(errc::shape_mismatch, "parameter dim " + std::to_string(dim) +
                                          " is not n_classes*(feature_dim+1) for feature_dim " +
                                          std::to_string(feature_dim));
  }
  return dim / stride;
}

inline void logits(std::span<const double> w, const Sample& s, std::size_t n_classes, std::vector<double>& out) {
  const std::size_t d = s.x.size();
  out.assign(n_classes, 0.0);
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double* row = w.data() + k * (d + 1);
    double z = row[d];
    for (std::size_t i = 0; i < d; ++i) z += row[i] * s.x[i];
    out[k] = z;
  }
}

// Turns logits into probabilities in place; returns log-sum-exp.
inline double softmax_inplace(std::vector<double>& z) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return zmax + std::log(sum);
}

inline std::size_t label_of(const Sample& s, std::size_t n_classes) {
  if (!(s.y >= 0.0) || s.y != std::floor(s.y) || s.y >= static_cast<double>(n_classes)) {
    throw error(errc::shape_mismatch, "class label out of range");
  }
  return static_cast<std::size_t>(s.y);
}

inline void check_model_shape(const ParamVector& w, const LabeledDataset& data, LossKind kind) {
  if (kind == LossKind::squared) {
    if (w.dim() != data.feature_dim()) throw error(errc::shape_mismatch, "regression dim != feature dim");
  } else {
    class_count(w.dim(), data.feature_dim());
  }
}

}  // namespace detail

inline double sample_loss(const ParamVector& w, const Sample& s, LossKind kind) {
  if (kind == LossKind::squared) {
    double pred = 0.0;
    for (std::size_t i = 0; i < s.x.size(); ++i) pred += w[i] * s.x[i];
    const double r = pred - s.y;
    return r * r;
  }
  const std::size_t n_classes = detail::class_count(w.dim(), s.x.size());
  std::vector<double> z;
  detail::logits(w.values(), s, n_classes, z);
  const std::size_t y = detail::label_of(s, n_classes);
  const double zy = z[y];
  const double lse = detail::softmax_inplace(z);
  return lse - zy;
}

// Gradient of the mean per-sample loss over `batch`.
inline std::vector<double> gradient(const ParamVector& w, std::span<const Sample> batch, LossKind kind) {
  if (batch.empty()) throw error(errc::validation, "empty batch");
  std::vector<double> g(w.dim(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  if (kind == LossKind::squared) {
    for (const auto& s : batch) {
      if (s.x.size() != w.dim()) throw error(errc::shape_mismatch, "regression dim != feature dim");
      double pred = 0.0;
      for (std::size_t i = 0; i < s.x.size(); ++i) pred += w[i] * s.x[i];
      const double coef = 2.0 * (pred - s.y) * inv_n;
      for (std::size_t i = 0; i < s.x.size(); ++i) g[i] += coef * s.x[i];
    }
  } else {
    const std::size_t d = batch.front().x.size();
    const std::size_t n_classes = detail::class_count(w.dim(), d);
    std::vector<double> p;
    for (const auto& s : batch) {
      if (s.x.size() != d) throw error(errc::shape_mismatch, "mixed feature dims in batch");
      detail::logits(w.values(), s, n_classes, p);
      detail::softmax_inplace(p);
      const std::size_t y = detail::label_of(s, n_classes);
      for (std::size_t k = 0; k < n_classes; ++k) {
        const double delta = (p[k] - (k == y ? 1.0 : 0.0)) * inv_n;
        double* row = g.data() + k * (d + 1);
        for (std::size_t i = 0; i < d; ++i) row[i] += delta * s.x[i];
        row[d] += delta;
      }
    }
  }
  for (double v : g) {
    if (!std::isfinite(v)) throw error(errc::numeric_overflow, "non-finite gradient");
  }
  return g;
}

inline ParamVector sgd_step(const ParamVector& w, std::span<const Sample> batch, double mu, LossKind kind) {
  const auto g = gradient(w, batch, kind);
  ParamVector out = w;
  for (std::size_t i = 0; i < out.dim(); ++i) out[i] -= mu * g[i];
  if (!out.all_finite()) throw error(errc::numeric_overflow, "non-finite parameters after step");
  return out;
}

inline ParamVector sgd_step(const ParamVector& w, const LabeledDataset& batch, double mu, LossKind kind) {
  return sgd_step(w, std::span<const Sample>(batch.samples()), mu, kind);
}

// E shuffled passes of mini-batch SGD. The trailing short batch is trained.
template <class Rng>
ParamVector local_train(const ParamVector& w0, const LabeledDataset& dataset, const HyperParams& hp, LossKind kind,
                        Rng& rng) {
  if (dataset.empty()) throw error(errc::validation, "local_train on empty dataset");
  hp.validate();
  detail::check_model_shape(w0, dataset, kind);

  const std::size_t n = dataset.size();
  const std::size_t bsz = std::min<std::size_t>(static_cast<std::size_t>(hp.batch_size), n);
  std::vector<std::size_t> order(n);
  std::vector<Sample> batch;
  batch.reserve(bsz);
  ParamVector w = w0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bsz) {
      batch.clear();
      const std::size_t stop = std::min(n, start + bsz);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(dataset[order[i]]);
      w = sgd_step(w, std::span<const Sample>(batch), hp.mu, kind);
    }
  }
  return w;
}

inline ParamVector weighted_aggregate(std::span<const WeightedModel> models) {
  if (models.empty()) throw error(errc::aggregation_empty, "no models to aggregate");
  const std::size_t dim = models.front().params.dim();
  long double total = 0.0L;
  for (const auto& m : models) {
    if (m.params.dim() != dim) throw error(errc::shape_mismatch, "aggregated models differ in dim");
    if (m.weight == 0) throw error(errc::validation, "aggregation weight must be positive");
    if (!m.params.all_finite()) throw error(errc::numeric_overflow, "non-finite model in aggregation");
    total += static_cast<long double>(m.weight);
  }
  std::vector<long double> acc(dim, 0.0L);
  for (const auto& m : models) {
    const long double wt = static_cast<long double>(m.weight);
    for (std::size_t i = 0; i < dim; ++i) acc[i] += wt * m.params[i];
  }
  ParamVector out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<double>(acc[i] / total);
  return out;
}

inline ParamVector uniform_aggregate(std::span<const ParamVector> models) {
  if (models.empty()) throw error(errc::aggregation_empty, "no models to aggregate");
  const std::size_t dim = models.front().dim();
  std::vector<long double> acc(dim, 0.0L);
  for (const auto& m : models) {
    if (m.dim() != dim) throw error(errc::shape_mismatch, "aggregated models differ in dim");
    if (!m.all_finite()) throw error(errc::numeric_overflow, "non-finite model in aggregation");
    for (std::size_t i = 0; i < dim; ++i) acc[i] += m[i];
  }
  const long double n = static_cast<long double>(models.size());
  ParamVector out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<double>(acc[i] / n);
  return out;
}

inline MetricValue evaluate_loss(const ParamVector& w, const LabeledDataset& dataset, LossKind kind) {
  if (dataset.empty()) throw error(errc::validation, "evaluate_loss on empty dataset");
  detail::check_model_shape(w, dataset, kind);
  double sum = 0.0;
  for (const auto& s : dataset) sum += sample_loss(w, s, kind);
  const double mean = sum / static_cast<double>(dataset.size());
  if (!std::isfinite(mean)) throw error(errc::numeric_overflow, "non-finite loss");
  return {MetricKind::loss, mean};
}

inline std::size_t predict_class(const ParamVector& w, const std::vector<double>& x) {
  const std::size_t n_classes = detail::class_count(w.dim(), x.size());
  std::vector<double> z;
  detail::logits(w.values(), Sample{x, 0.0}, n_classes, z);
  // First maximum wins on ties.
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline MetricValue accuracy(const ParamVector& w, const LabeledDataset& test) {
  if (test.empty()) return {MetricKind::accuracy, 0.0};
  std::size_t hits = 0;
  for (const auto& s : test) {
    if (static_cast<double>(predict_class(w, s.x)) == s.y) ++hits;
  }
  return {MetricKind::accuracy, static_cast<double>(hits) / static_cast<double>(test.size())};
}

// 2^H(p) with H in bits.
inline MetricValue perplexity(std::span<const double> p) {
  if (p.empty()) throw error(errc::validation, "empty distribution");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw error(errc::validation, "negative or non-finite probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw error(errc::validation, "distribution does not sum to 1");
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log2(v);
  }
  return {MetricKind::perplexity, std::exp2(h)};
}

inline ParamVector asynfl_update(const ParamVector& global_model, const ParamVector& local_model) {
  if (global_model.dim() != local_model.dim()) throw error(errc::shape_mismatch, "asynfl_update dim mismatch");
  ParamVector out(global_model.dim());
  for (std::size_t i = 0; i < out.dim(); ++i) out[i] = 0.5 * global_model[i] + 0.5 * local_model[i];
  return out;
}

// Higher is better: accuracy for classifiers, negated mean loss for regressors.
// Subchain validation and tip ranking both compare models on this scale.
inline double validation_score(const ParamVector& w, const LabeledDataset& test, LossKind kind) {
  if (kind == LossKind::cross_entropy) return accuracy(w, test).value;
  return -evaluate_loss(w, test, kind).value;
}

}  // namespace chainfl
