#pragma once

// Key-embedded INR linear layer.
//
//   y′ = α(Wx + b) + (1 − α)Δ,   Δᵢ = Φ_θ(γ(C(π(i))))
//
// π is a secret permutation of the output indices, C maps an index to a
// coordinate in [−1, 1], γ is a sinusoidal encoding with L octaves and Φ_θ is
// a small MLP. Δ does not depend on x.

#include <charconv>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>

#include "infl/numerics.hpp"

namespace infl {

//---------------------------------------------------------------------------//
// Permutation keys
//---------------------------------------------------------------------------//

class PermutationKey {
 public:
  explicit PermutationKey(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
    detail::require(!perm_.empty(), "permutation key must cover at least one index");
    std::vector<bool> seen(perm_.size(), false);
    for (std::size_t v : perm_) {
      detail::require(v < perm_.size() && !seen[v], "permutation key is not a bijection on 0..",
                      perm_.size() - 1);
      seen[v] = true;
    }
  }

  static PermutationKey identity(std::size_t n) {
    detail::require(n >= 1, "identity key needs n_out >= 1");
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    return PermutationKey(std::move(p));
  }

  std::size_t size() const { return perm_.size(); }
  std::size_t operator[](std::size_t i) const { return perm_[i]; }
  const std::vector<std::size_t>& perm() const { return perm_; }

  bool is_identity() const {
    for (std::size_t i = 0; i < perm_.size(); ++i)
      if (perm_[i] != i) return false;
    return true;
  }

  PermutationKey inverse() const {
    std::vector<std::size_t> inv(perm_.size());
    for (std::size_t i = 0; i < perm_.size(); ++i) inv[perm_[i]] = i;
    return PermutationKey(std::move(inv));
  }

  /// (this ∘ other)(i) = this[other[i]]
  PermutationKey compose(const PermutationKey& other) const {
    detail::require(other.size() == size(), "cannot compose keys of different sizes");
    std::vector<std::size_t> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = perm_[other[i]];
    return PermutationKey(std::move(out));
  }

  friend bool operator==(const PermutationKey&, const PermutationKey&) = default;

 private:
  std::vector<std::size_t> perm_;
};

/// Keys by locked-layer name. Held by clients only.
using KeySet = std::map<std::string, PermutationKey>;

/// Uniform permutation: start from the identity and, for i = n−1 down to 1,
/// swap positions i and rng.below(i + 1).
inline PermutationKey generate_key(std::size_t n_out, Rng& rng) {
  detail::require(n_out >= 1, "generate_key needs n_out >= 1");
  std::vector<std::size_t> p(n_out);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n_out - 1; i >= 1; --i) std::swap(p[i], p[rng.below(i + 1)]);
  return PermutationKey(std::move(p));
}

namespace detail {

struct Fnv1a64 {
  std::uint64_t state = 0xCBF29CE484222325ull;

  void byte(std::uint8_t b) {
    state ^= b;
    state *= 0x100000001B3ull;
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(std::span<const std::uint8_t> data) {
    for (auto b : data) byte(b);
  }
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream oss;
  oss << std::hex << std::setw(16) << std::setfill('0') << v;
  return oss.str();
}

inline std::uint64_t parse_hex64(std::string_view text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v, 16);
  require(ec == std::errc() && ptr == text.data() + text.size(), "bad hex value '", text, "'");
  return v;
}

}  // namespace detail

using detail::hex64;
using detail::parse_hex64;

/// FNV-1a 64 over little-endian u64 n_out followed by each π(i) as u64.
inline std::uint64_t key_fingerprint(const PermutationKey& key) {
  detail::Fnv1a64 h;
  h.u64(key.size());
  for (std::size_t v : key.perm()) h.u64(v);
  return h.state;
}

//---------------------------------------------------------------------------//
// Coordinates and encoding
//---------------------------------------------------------------------------//

/// C(j) = 2j/(n−1) − 1, and C(0) = 0 when n = 1.
inline double coordinate(std::size_t j, std::size_t n_out) {
  detail::require(j < n_out, "coordinate index ", j, " out of range for n_out=", n_out);
  if (n_out == 1) return 0.0;
  return 2.0 * static_cast<double>(j) / static_cast<double>(n_out - 1) - 1.0;
}

/// γ(c) = (sin(2⁰πc), cos(2⁰πc), …, sin(2^{L−1}πc), cos(2^{L−1}πc))
inline Vector encode(double c, std::size_t levels) {
  detail::require(levels >= 1, "encoding needs at least one level");
  Vector out(2 * levels);
  double freq = std::numbers::pi;
  for (std::size_t l = 0; l < levels; ++l) {
    out[2 * l] = std::sin(freq * c);
    out[2 * l + 1] = std::cos(freq * c);
    freq *= 2.0;
  }
  return out;
}

//---------------------------------------------------------------------------//
// INR network Φ_θ
//---------------------------------------------------------------------------//

enum class InrActivation { relu, tanh };
enum class InrOutputInit { zero, kaiming };

class InrNetwork {
 public:
  InrNetwork() = default;

  /// widths = {input, hidden..., 1}. Hidden layers Kaiming with zero bias; the
  /// output layer is zero or Kaiming per `output_init`.
  InrNetwork(std::vector<std::size_t> widths, Rng& rng,
             InrActivation activation = InrActivation::relu,
             InrOutputInit output_init = InrOutputInit::zero)
      : widths_(std::move(widths)), activation_(activation) {
    detail::require(widths_.size() >= 2, "INR needs at least input and output widths");
    detail::require(widths_.back() == 1, "INR output width must be 1");
    for (auto w : widths_) detail::require(w >= 1, "INR widths must be positive");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      const bool last = l + 2 == widths_.size();
      if (last && output_init == InrOutputInit::zero)
        weights_.emplace_back(widths_[l + 1], widths_[l]);
      else
        weights_.push_back(kaiming_init(widths_[l + 1], widths_[l], rng));
      biases_.emplace_back(widths_[l + 1], 0.0);
    }
  }

  const std::vector<std::size_t>& widths() const { return widths_; }
  InrActivation activation() const { return activation_; }
  std::size_t depth() const { return weights_.size(); }
  const Matrix& weight(std::size_t l) const { return weights_[l]; }
  const Vector& bias(std::size_t l) const { return biases_[l]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
    return n;
  }

  /// Layout: for each layer, W row-major then b.
  Vector flat_parameters() const {
    Vector out;
    out.reserve(parameter_count());
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.insert(out.end(), weights_[l].values().begin(), weights_[l].values().end());
      out.insert(out.end(), biases_[l].begin(), biases_[l].end());
    }
    return out;
  }

  void set_flat_parameters(std::span<const double> flat) {
    detail::require(flat.size() == parameter_count(), "INR parameter length ", flat.size(),
                    " != ", parameter_count());
    std::size_t off = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      auto w = weights_[l].data();
      std::copy_n(flat.begin() + off, w.size(), w.begin());
      off += w.size();
      std::copy_n(flat.begin() + off, biases_[l].size(), biases_[l].begin());
      off += biases_[l].size();
    }
  }

  double evaluate(std::span<const double> input) const {
    Vector h(input.begin(), input.end());
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Vector z = matvec(weights_[l], h);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += biases_[l][i];
      if (l + 1 < weights_.size())
        for (auto& v : z) v = activate(v);
      h = std::move(z);
    }
    return h[0];
  }

  /// grad += scale · ∂Φ(input)/∂θ, in flat_parameters() layout.
  void accumulate_gradient(std::span<const double> input, double scale,
                           std::span<double> grad) const {
    detail::require(grad.size() == parameter_count(), "INR gradient buffer has wrong length");
    if (scale == 0.0) return;
    // Forward, keeping pre-activations and layer inputs.
    std::vector<Vector> inputs{Vector(input.begin(), input.end())};
    std::vector<Vector> pre;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Vector z = matvec(weights_[l], inputs.back());
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += biases_[l][i];
      pre.push_back(z);
      if (l + 1 < weights_.size()) {
        for (auto& v : z) v = activate(v);
        inputs.push_back(std::move(z));
      }
    }
    std::vector<std::size_t> offsets(weights_.size());
    for (std::size_t l = 0, off = 0; l < weights_.size(); ++l) {
      offsets[l] = off;
      off += weights_[l].size() + biases_[l].size();
    }
    Vector delta{scale};
    for (std::size_t l = weights_.size(); l-- > 0;) {
      if (l + 1 < weights_.size())
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= activate_derivative(pre[l][i]);
      auto gw = grad.subspan(offsets[l], weights_[l].size());
      add_outer(gw, 1.0, delta, inputs[l]);
      auto gb = grad.subspan(offsets[l] + weights_[l].size(), biases_[l].size());
      for (std::size_t i = 0; i < delta.size(); ++i) gb[i] += delta[i];
      if (l > 0) delta = matvec_transposed(weights_[l], delta);
    }
  }

  /// ∂Φ(input)/∂θ as a flat vector.
  Vector jacobian(std::span<const double> input) const {
    Vector g(parameter_count(), 0.0);
    accumulate_gradient(input, 1.0, g);
    return g;
  }

 private:
  double activate(double v) const {
    return activation_ == InrActivation::relu ? (v > 0.0 ? v : 0.0) : std::tanh(v);
  }
  double activate_derivative(double pre) const {
    if (activation_ == InrActivation::relu) return pre > 0.0 ? 1.0 : 0.0;
    const double t = std::tanh(pre);
    return 1.0 - t * t;
  }

  std::vector<std::size_t> widths_;
  InrActivation activation_ = InrActivation::relu;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

//---------------------------------------------------------------------------//
// Locked layer
//---------------------------------------------------------------------------//

struct LockOptions {
  double alpha = 0.5;
  std::size_t levels = 6;
  std::size_t inr_hidden = 8;
  /// Number of linear layers in Φ_θ.
  std::size_t inr_depth = 3;
  InrActivation activation = InrActivation::relu;
  InrOutputInit output_init = InrOutputInit::zero;

  void validate() const {
    detail::require(alpha >= 0.0 && alpha <= 1.0, "lock.alpha must lie in [0,1], got ", alpha);
    detail::require(levels >= 1 && levels <= 16, "lock.levels must lie in 1..16, got ", levels);
    detail::require(inr_hidden >= 1, "lock.inr_hidden must be >= 1");
    detail::require(inr_depth >= 1, "lock.inr_depth must be >= 1");
  }

  std::vector<std::size_t> inr_widths() const {
    std::vector<std::size_t> w{2 * levels};
    for (std::size_t i = 0; i + 1 < inr_depth; ++i) w.push_back(inr_hidden);
    w.push_back(1);
    return w;
  }
};

class InrLinearLayer;

/// Δ for one (θ version, key) pair.
struct ModulationCache {
  Vector delta;
  std::uint64_t theta_version = 0;
  std::uint64_t key_fingerprint = 0;

  inline bool valid_for(const InrLinearLayer& layer, const PermutationKey& key) const;
};

struct InrLinearGrads {
  Matrix weight;
  Vector bias;
  Vector theta;
  Vector input;
};

class InrLinearLayer {
 public:
  InrLinearLayer() = default;

  /// Base W from stream.child(0) (Kaiming), b = 0, Φ_θ from stream.child(1).
  InrLinearLayer(std::size_t n_in, std::size_t n_out, const LockOptions& options,
                 const RngStream& stream)
      : alpha_(options.alpha), levels_(options.levels) {
    options.validate();
    Rng base_rng(stream.child(0));
    weight_ = kaiming_init(n_out, n_in, base_rng);
    bias_.assign(n_out, 0.0);
    Rng inr_rng(stream.child(1));
    inr_ = InrNetwork(options.inr_widths(), inr_rng, options.activation, options.output_init);
  }

  std::size_t n_in() const { return weight_.cols(); }
  std::size_t n_out() const { return weight_.rows(); }
  double alpha() const { return alpha_; }
  std::size_t levels() const { return levels_; }
  const Matrix& weight() const { return weight_; }
  const Vector& bias() const { return bias_; }
  const InrNetwork& inr() const { return inr_; }
  std::uint64_t theta_version() const { return theta_version_; }

  Matrix& mutable_weight() { return weight_; }
  Vector& mutable_bias() { return bias_; }

  void set_alpha(double alpha) {
    detail::require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0,1], got ", alpha);
    alpha_ = alpha;
  }

  void set_inr_parameters(std::span<const double> theta) {
    inr_.set_flat_parameters(theta);
    ++theta_version_;
  }

  /// Φ_θ(γ(C(j))) for coordinate index j.
  double inr_at(std::size_t j) const { return inr_.evaluate(encode(coordinate(j, n_out()), levels_)); }

  /// Δ*ⱼ = Φ_θ(γ(C(j))).
  Vector canonical_modulation() const {
    Vector out(n_out());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = inr_at(j);
    require_finite(out, "canonical_modulation");
    return out;
  }

  /// Δᵢ = Δ*_{π(i)}.
  Vector modulation(const PermutationKey& key) const {
    check_key(key);
    const Vector canonical = canonical_modulation();
    Vector out(n_out());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = canonical[key[i]];
    return out;
  }

  ModulationCache make_cache(const PermutationKey& key) const {
    return ModulationCache{modulation(key), theta_version_, key_fingerprint(key)};
  }

  /// α(Wx + b)
  Vector base_output(std::span<const double> x) const {
    Vector y = matvec(weight_, x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha_ * (y[i] + bias_[i]);
    return y;
  }

  /// α(Wx + b) + (1 − α)Δ for an explicit Δ; a zero Δ gives the stripped layer.
  Vector forward_with_modulation(std::span<const double> x, std::span<const double> delta) const {
    detail::require(x.size() == n_in(), "locked layer input length ", x.size(), " != ", n_in());
    detail::require(delta.size() == n_out(), "modulation length ", delta.size(), " != ", n_out());
    Vector y = base_output(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += (1.0 - alpha_) * delta[i];
    require_finite(y, "locked layer forward");
    return y;
  }

  Vector forward(std::span<const double> x, const PermutationKey& key) const {
    return forward_with_modulation(x, modulation(key));
  }

  Vector forward(std::span<const double> x, const ModulationCache& cache) const {
    detail::require(cache.theta_version == theta_version_, "stale modulation cache");
    return forward_with_modulation(x, cache.delta);
  }

  /// grad_theta += (1 − α) Σᵢ coeffᵢ ∂Φ_θ(γ(C(π(i))))/∂θ
  void accumulate_theta_gradient(const PermutationKey& key, std::span<const double> coeff,
                                 std::span<double> grad_theta) const {
    check_key(key);
    detail::require(coeff.size() == n_out(), "upstream length ", coeff.size(), " != ", n_out());
    const double scale = 1.0 - alpha_;
    if (scale == 0.0) return;
    for (std::size_t i = 0; i < n_out(); ++i) {
      if (coeff[i] == 0.0) continue;
      inr_.accumulate_gradient(encode(coordinate(key[i], n_out()), levels_), scale * coeff[i],
                               grad_theta);
    }
  }

  InrLinearGrads backward(std::span<const double> x, const PermutationKey& key,
                          std::span<const double> upstream) const {
    check_key(key);
    detail::require(x.size() == n_in(), "locked layer input length ", x.size(), " != ", n_in());
    detail::require(upstream.size() == n_out(), "upstream length ", upstream.size(), " != ",
                    n_out());
    InrLinearGrads g{Matrix(n_out(), n_in()), Vector(n_out()), Vector(inr_.parameter_count(), 0.0),
                     {}};
    add_outer(g.weight.data(), alpha_, upstream, x);
    for (std::size_t i = 0; i < n_out(); ++i) g.bias[i] = alpha_ * upstream[i];
    accumulate_theta_gradient(key, upstream, g.theta);
    g.input = matvec_transposed(weight_, upstream);
    for (auto& v : g.input) v *= alpha_;
    return g;
  }

  void check_key(const PermutationKey& key) const {
    detail::require(key.size() == n_out(), "key covers ", key.size(),
                    " outputs but the layer has ", n_out());
  }

 private:
  Matrix weight_;
  Vector bias_;
  double alpha_ = 0.5;
  std::size_t levels_ = 6;
  InrNetwork inr_;
  std::uint64_t theta_version_ = 0;
};

inline bool ModulationCache::valid_for(const InrLinearLayer& layer,
                                       const PermutationKey& key) const {
  return theta_version == layer.theta_version() && key_fingerprint == infl::key_fingerprint(key) &&
         delta.size() == layer.n_out();
}

//---------------------------------------------------------------------------//
// Key files
//---------------------------------------------------------------------------//

/// One locked layer's key as stored by a client. `binding` ties the key to the
/// training run that produced it; it carries no permutation information.
struct KeyRecord {
  std::string layer;
  PermutationKey key;
  std::uint64_t binding = 0;
};

inline constexpr std::string_view kKeyFileHeader = "# infl key file v1";

/// Text form:
///
///   # infl key file v1
///   layer decoder.0
///   n_out 4
///   binding 00000000deadbeef
///   perm 2 0 3 1
///   fingerprint 5d0c3b1a...
///
/// with a blank line between records.
inline std::string format_key_records(std::span<const KeyRecord> records) {
  std::ostringstream out;
  out << kKeyFileHeader << '\n';
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (r > 0) out << '\n';
    out << "layer " << rec.layer << '\n';
    out << "n_out " << rec.key.size() << '\n';
    out << "binding " << detail::hex64(rec.binding) << '\n';
    out << "perm";
    for (auto v : rec.key.perm()) out << ' ' << v;
    out << '\n';
    out << "fingerprint " << detail::hex64(key_fingerprint(rec.key)) << '\n';
  }
  return out.str();
}

inline std::vector<KeyRecord> parse_key_records(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::getline(in, line);
  detail::require(line == kKeyFileHeader, "not an infl key file (header '", line, "')");

  struct Pending {
    std::optional<std::string> layer;
    std::optional<std::size_t> n_out;
    std::optional<std::uint64_t> binding;
    std::optional<std::vector<std::size_t>> perm;
    std::optional<std::uint64_t> fingerprint;
  };
  std::vector<KeyRecord> out;
  Pending cur;
  std::size_t line_no = 1;

  auto flush = [&]() {
    if (!cur.layer && !cur.perm && !cur.n_out && !cur.fingerprint && !cur.binding) return;
    detail::require(cur.layer && cur.n_out && cur.binding && cur.perm && cur.fingerprint,
                    "incomplete key record ending at line ", line_no);
    detail::require(cur.perm->size() == *cur.n_out, "key record '", *cur.layer, "': n_out ",
                    *cur.n_out, " but ", cur.perm->size(), " entries");
    PermutationKey key(*cur.perm);
    detail::require(key_fingerprint(key) == *cur.fingerprint, "key record '", *cur.layer,
                    "': fingerprint mismatch");
    out.push_back(KeyRecord{*cur.layer, std::move(key), *cur.binding});
    cur = Pending{};
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      flush();
      continue;
    }
    if (line[0] == '#') continue;
    std::istringstream ls(line);
    std::string field;
    ls >> field;
    if (field == "layer") {
      std::string name;
      ls >> name;
      cur.layer = name;
    } else if (field == "n_out") {
      std::size_t n = 0;
      detail::require(static_cast<bool>(ls >> n), "line ", line_no, ": bad n_out");
      cur.n_out = n;
    } else if (field == "binding") {
      std::string hex;
      ls >> hex;
      cur.binding = detail::parse_hex64(hex);
    } else if (field == "perm") {
      std::vector<std::size_t> p;
      std::size_t v = 0;
      while (ls >> v) p.push_back(v);
      cur.perm = std::move(p);
    } else if (field == "fingerprint") {
      std::string hex;
      ls >> hex;
      cur.fingerprint = detail::parse_hex64(hex);
    } else {
      throw ValidationError(detail::concat("key file line ", line_no, ": unknown field '", field, "'"));
    }
  }
  flush();
  return out;
}

}  // namespace infl
