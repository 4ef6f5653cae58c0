#pragma once

// Labeled datasets and the synthetic generators standing in for private data.

#include <cstdint>
#include <string>

#include "infl/numerics.hpp"

namespace infl {

enum class Task { classification, regression };

inline std::string to_string(Task task) {
  return task == Task::classification ? "classification" : "regression";
}

struct Dataset {
  Task task = Task::classification;
  Matrix features;                  // n × d
  std::vector<std::size_t> labels;  // classification only
  Matrix targets;                   // regression only, n × m
  std::size_t n_classes = 0;

  std::size_t size() const { return features.rows(); }
  std::size_t n_features() const { return features.cols(); }
  std::size_t output_dim() const { return task == Task::classification ? n_classes : targets.cols(); }
  bool labeled() const { return task == Task::classification && labels.size() == size(); }
};

enum class GeneratorKind { gaussian_mixture, linear_regression };

struct DatasetDescriptor {
  GeneratorKind kind = GeneratorKind::gaussian_mixture;
  std::size_t n_samples = 2000;
  std::size_t n_features = 64;
  std::size_t n_classes = 4;   // gaussian_mixture
  std::size_t n_outputs = 1;   // linear_regression
  double center_scale = 4.0;
  double noise_std = 1.0;

  void validate() const {
    detail::require(n_samples >= 1, "data.n_samples must be >= 1");
    detail::require(n_features >= 1, "data.n_features must be >= 1");
    detail::require(noise_std >= 0.0, "data.noise_std must be >= 0");
    if (kind == GeneratorKind::gaussian_mixture) {
      detail::require(n_classes >= 2, "data.n_classes must be >= 2");
      detail::require(n_classes <= n_samples, "data.n_classes (", n_classes,
                      ") exceeds data.n_samples (", n_samples, ")");
      detail::require(n_classes <= n_features, "data.n_classes (", n_classes,
                      ") exceeds data.n_features (", n_features, "); simplex centers need one axis per class");
    } else {
      detail::require(n_outputs >= 1, "data.n_outputs must be >= 1");
    }
  }
};

/*!
 * Generate a synthetic dataset.
 *
 * gaussian_mixture: label ~ Uniform{0..k−1}, x = s·e_label + σ·N(0, I), i.e.
 * class centers at the vertices of the standard simplex scaled by s.
 * linear_regression: A has entries N(0, 1/d), x ~ N(0, I), y = A x + σ·N(0, I).
 *
 * Centers and A depend only on `seed`; samples are drawn from a stream that
 * also includes `split`, so splits share one generating distribution.
 */
inline Dataset make_dataset(const DatasetDescriptor& desc, std::uint64_t seed,
                            std::uint64_t split = 0) {
  desc.validate();
  const RngStream base = derive_stream(seed, {0xDA7A});
  Rng rng(base.child({1, split}));
  Dataset out;
  out.features = Matrix(desc.n_samples, desc.n_features);
  if (desc.kind == GeneratorKind::gaussian_mixture) {
    out.task = Task::classification;
    out.n_classes = desc.n_classes;
    out.labels.resize(desc.n_samples);
    for (std::size_t i = 0; i < desc.n_samples; ++i) {
      const std::size_t label = rng.below(desc.n_classes);
      out.labels[i] = label;
      auto row = out.features.row(i);
      for (std::size_t j = 0; j < desc.n_features; ++j)
        row[j] = (j == label ? desc.center_scale : 0.0) +
                 (desc.noise_std > 0.0 ? desc.noise_std * rng.normal() : 0.0);
    }
  } else {
    out.task = Task::regression;
    Rng coef_rng(base.child(0));
    const Matrix a(desc.n_outputs, desc.n_features,
                   gaussian(coef_rng, desc.n_outputs * desc.n_features,
                            std::sqrt(1.0 / static_cast<double>(desc.n_features))));
    out.targets = Matrix(desc.n_samples, desc.n_outputs);
    for (std::size_t i = 0; i < desc.n_samples; ++i) {
      auto row = out.features.row(i);
      for (auto& v : row) v = rng.normal();
      Vector y = matvec(a, row);
      for (std::size_t k = 0; k < y.size(); ++k)
        out.targets(i, k) = y[k] + (desc.noise_std > 0.0 ? desc.noise_std * rng.normal() : 0.0);
    }
  }
  return out;
}

}  // namespace infl
