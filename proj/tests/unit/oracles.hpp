#pragma once

// Independent reference implementations used as test oracles.

#include <gtest/gtest.h>

#include "infl/model.hpp"

namespace infl::test {

/// Entry-by-entry triple loop.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double std_dev = 1.0) {
  return Matrix(r, c, gaussian(rng, r * c, std_dev));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Mean loss of `model` with flat parameter vector `flat` over `batch`,
/// computed by forward passes only.
inline double batch_loss(Model model, const ParamVector& layout, std::span<const double> flat,
                         const Dataset& data, std::span<const std::size_t> batch, const LockState& state) {
  model.set_parameters(ParamVector::unflatten(layout, flat));
  const auto mods = model.modulations(state);
  double s = 0.0;
  for (std::size_t i : batch) s += sample_loss(model.forward(data.features.row(i), mods), data, i).value;
  return s / static_cast<double>(batch.size());
}

/// Relative error between analytic and central-difference gradients over
/// the trainable coordinates of `model`.
inline double model_gradient_error(const Model& model, const Dataset& data,
                                   std::span<const std::size_t> batch, const LockState& state,
                                   double h = 1e-5) {
  const ParamVector layout = model.parameters();
  const Vector flat = layout.flatten();
  const Vector analytic = compute_gradients(model, data, batch, state).grads.flatten();
  const Vector numeric = finite_diff_grad(
      [&](std::span<const double> p) { return batch_loss(model, layout, p, data, batch, state); }, flat, h);
  // Frozen segments have zero analytic gradient by contract; compare trainable ones.
  Vector a, n;
  std::size_t off = 0;
  for (const auto& s : layout.segments) {
    if (s.trainable)
      for (std::size_t i = 0; i < s.data.size(); ++i) {
        a.push_back(analytic[off + i]);
        n.push_back(numeric[off + i]);
      }
    off += s.data.size();
  }
  return relative_error(a, n);
}

inline Dataset random_classification(std::size_t n, std::size_t d, std::size_t classes, Rng& rng) {
  Dataset data;
  data.task = Task::classification;
  data.n_classes = classes;
  data.features = random_matrix(n, d, rng);
  for (std::size_t i = 0; i < n; ++i) data.labels.push_back(rng.below(classes));
  return data;
}

inline Dataset random_regression(std::size_t n, std::size_t d, std::size_t m, Rng& rng) {
  Dataset data;
  data.task = Task::regression;
  data.features = random_matrix(n, d, rng);
  data.targets = random_matrix(n, m, rng);
  return data;
}

/// Solves A X = B for square A by Gaussian elimination with partial pivoting.
inline Matrix solve(Matrix a, Matrix b) {
  const std::size_t n = a.rows();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(piv, k));
    for (std::size_t k = 0; k < b.cols(); ++k) std::swap(b(c, k), b(piv, k));
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a(r, c) / a(c, c);
      for (std::size_t k = 0; k < n; ++k) a(r, k) -= f * a(c, k);
      for (std::size_t k = 0; k < b.cols(); ++k) b(r, k) -= f * b(c, k);
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < b.cols(); ++k) b(r, k) /= a(r, r);
  return b;
}

/// Least-squares X minimizing ‖A X − B‖ via the normal equations.
inline Matrix least_squares(const Matrix& a, const Matrix& b) {
  const Matrix at = transpose(a);
  return solve(naive_matmul(at, a), naive_matmul(at, b));
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace infl::test
