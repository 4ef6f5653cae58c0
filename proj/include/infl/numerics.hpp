#pragma once

// Dense 64-bit arithmetic, counter-based random streams and a
// finite-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace infl {

/// Thrown for malformed inputs: bad shapes, out-of-range arguments, invalid
/// configuration. The CLI maps it to exit status 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename... Parts>
std::string concat(Parts&&... parts) {
  std::ostringstream oss;
  (oss << ... << std::forward<Parts>(parts));
  return oss.str();
}

template <typename... Parts>
void require(bool condition, Parts&&... parts) {
  if (!condition) throw ValidationError(concat(std::forward<Parts>(parts)...));
}

}  // namespace detail

using Vector = std::vector<double>;

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

inline void require_finite(std::span<const double> values, const char* what) {
  if (!all_finite(values))
    throw std::runtime_error(detail::concat(what, ": non-finite value produced"));
}

//---------------------------------------------------------------------------//
// Matrix
//---------------------------------------------------------------------------//

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_, "matrix data length ",
                    data_.size(), " does not match shape ", rows_, "x", cols_);
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      detail::require(row.size() == c, "ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::string shape_string() const { return detail::concat(rows_, "x", cols_); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.rows(), "matmul dimension mismatch: ",
                  a.shape_string(), " x ", b.shape_string());
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  require_finite(out.data(), "matmul");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// y = A x
inline Vector matvec(const Matrix& a, std::span<const double> x) {
  detail::require(a.cols() == x.size(), "matvec dimension mismatch: ",
                  a.shape_string(), " x ", x.size());
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto row = a.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

/// y = Aᵀ v
inline Vector matvec_transposed(const Matrix& a, std::span<const double> v) {
  detail::require(a.rows() == v.size(), "transposed matvec dimension mismatch: ",
                  a.shape_string(), "ᵀ x ", v.size());
  Vector y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    auto row = a.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) y[j] += row[j] * vi;
  }
  return y;
}

/// M += scale · u vᵀ
inline void add_outer(std::span<double> m, double scale, std::span<const double> u,
                      std::span<const double> v) {
  detail::require(m.size() == u.size() * v.size(), "outer product shape mismatch");
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double s = scale * u[i];
    if (s == 0.0) continue;
    double* row = m.data() + i * v.size();
    for (std::size_t j = 0; j < v.size(); ++j) row[j] += s * v[j];
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "dot length mismatch: ", a.size(), " vs ", b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += a·x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  detail::require(x.size() == y.size(), "axpy length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

//---------------------------------------------------------------------------//
// Counter-based random streams
//---------------------------------------------------------------------------//

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/*!
 * Immutable descriptor of a deterministic random stream.
 *
 * The stream key folds the root seed and every path element:
 *
 *   k  = mix64(seed ^ 0x6A09E667F3BCC909)
 *   k  = mix64(k ^ mix64(path[i] + (i + 1)·G))     for each path element i
 *   k  = mix64(k ^ len(path))
 *
 * and draw n of the stream is mix64(k + (n + 1)·G), with G the 64-bit golden
 * ratio 0x9E3779B97F4A7C15 and mix64 the SplitMix64 finalizer. Draws are pure
 * functions of (seed, path, n), so streams can be consumed from any thread in
 * any order. This mixing function is part of the on-disk reproducibility
 * contract and must not change.
 */
class RngStream {
 public:
  RngStream(std::uint64_t root_seed, std::vector<std::uint64_t> path)
      : root_seed_(root_seed), path_(std::move(path)) {
    std::uint64_t k = detail::mix64(root_seed_ ^ 0x6A09E667F3BCC909ull);
    for (std::size_t i = 0; i < path_.size(); ++i)
      k = detail::mix64(k ^ detail::mix64(path_[i] + (i + 1) * detail::kGolden));
    key_ = detail::mix64(k ^ static_cast<std::uint64_t>(path_.size()));
  }

  std::uint64_t root_seed() const { return root_seed_; }
  const std::vector<std::uint64_t>& path() const { return path_; }
  std::uint64_t key() const { return key_; }

  /// Stream at path + [tag].
  RngStream child(std::uint64_t tag) const {
    auto p = path_;
    p.push_back(tag);
    return RngStream(root_seed_, std::move(p));
  }

  RngStream child(std::initializer_list<std::uint64_t> tags) const {
    auto p = path_;
    p.insert(p.end(), tags.begin(), tags.end());
    return RngStream(root_seed_, std::move(p));
  }

  std::uint64_t draw(std::uint64_t counter) const {
    return detail::mix64(key_ + (counter + 1) * detail::kGolden);
  }

  friend bool operator==(const RngStream& a, const RngStream& b) {
    return a.root_seed_ == b.root_seed_ && a.path_ == b.path_;
  }

 private:
  std::uint64_t root_seed_;
  std::vector<std::uint64_t> path_;
  std::uint64_t key_;
};

inline RngStream derive_stream(std::uint64_t root_seed, std::vector<std::uint64_t> path) {
  return RngStream(root_seed, std::move(path));
}

/// Cursor over an RngStream. Copies are independent cursors.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(RngStream stream, std::uint64_t counter = 0)
      : stream_(std::move(stream)), counter_(counter) {}

  const RngStream& stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return stream_.draw(counter_++); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1].
  double uniform_open() { return 1.0 - uniform(); }

  /// Unbiased integer in [0, n): redraw while x >= floor(2^64-1 / n)·n, then x mod n.
  std::size_t below(std::size_t n) {
    detail::require(n > 0, "Rng::below requires n > 0");
    const std::uint64_t bound =
        (std::numeric_limits<std::uint64_t>::max() / n) * static_cast<std::uint64_t>(n);
    std::uint64_t x = next_u64();
    while (x >= bound) x = next_u64();
    return static_cast<std::size_t>(x % n);
  }

  /// Standard normal via Box–Muller on two consecutive draws (cosine branch only).
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Gamma(shape, 1) by Marsaglia–Tsang; shape < 1 uses the u^(1/shape) boost.
  double gamma(double shape) {
    detail::require(shape > 0.0, "gamma shape must be positive, got ", shape);
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform_open(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x;
      double v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

 private:
  RngStream stream_;
  std::uint64_t counter_;
};

/// n iid samples of N(0, std²) drawn from the cursor.
inline Vector gaussian(Rng& rng, std::size_t n, double std_dev) {
  detail::require(std_dev >= 0.0 && std::isfinite(std_dev),
                  "gaussian std must be a finite non-negative number, got ", std_dev);
  Vector out(n, 0.0);
  if (std_dev == 0.0) return out;
  for (auto& v : out) v = std_dev * rng.normal();
  return out;
}

/// Draws from the start of `stream`.
inline Vector gaussian(const RngStream& stream, std::size_t n, double std_dev) {
  Rng rng(stream);
  return gaussian(rng, n, std_dev);
}

/// Kaiming-normal: entries from N(0, 2 / cols).
inline Matrix kaiming_init(std::size_t rows, std::size_t cols, Rng& rng) {
  detail::require(rows >= 1 && cols >= 1, "kaiming_init needs positive dimensions, got ",
                  rows, "x", cols);
  const double std_dev = std::sqrt(2.0 / static_cast<double>(cols));
  return Matrix(rows, cols, gaussian(rng, rows * cols, std_dev));
}

//---------------------------------------------------------------------------//
// Finite differences
//---------------------------------------------------------------------------//

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h for every coordinate.
inline Vector finite_diff_grad(const ScalarFunction& f, std::span<const double> x, double h) {
  detail::require(h > 0.0, "finite difference step must be positive");
  Vector probe(x.begin(), x.end());
  Vector grad(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = probe[i];
    probe[i] = xi + h;
    const double fp = f(probe);
    probe[i] = xi - h;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw ValidationError(detail::concat("finite_diff_grad: non-finite f near coordinate ", i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-12) {
  detail::require(a.size() == b.size(), "relative_error length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(diff) / std::max({norm2(a), norm2(b), floor});
}

}  // namespace infl
