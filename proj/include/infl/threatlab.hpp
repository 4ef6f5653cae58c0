#pragma once

// Attacks on locked models and the numerical checks of their error laws.

#include <optional>

#include "json.hpp"

#include "infl/federation.hpp"

namespace infl {

enum class AttackKind { identity_key, random_key, strip_inr };

inline constexpr std::array<AttackKind, 3> kAllAttacks{AttackKind::identity_key, AttackKind::random_key,
                                                       AttackKind::strip_inr};

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::identity_key: return "identity_key";
    case AttackKind::random_key: return "random_key";
    case AttackKind::strip_inr: return "strip_inr";
  }
  return "?";
}

inline AttackKind parse_attack_kind(std::string_view s) {
  for (auto k : kAllAttacks)
    if (to_string(k) == s) return k;
  throw ValidationError(
      detail::concat("unknown attack kind '", s, "' (identity_key, random_key, strip_inr)"));
}

/// The substitute lock state an attacker without keys would use. random_key
/// draws one permutation per locked layer from stream.child(layer index).
inline LockState attack_state(const Model& model, AttackKind kind, const RngStream& stream) {
  const auto locked = model.locked_layers();
  detail::require(!locked.empty(), "model has no locked layers: nothing to attack");
  LockState state;
  for (std::size_t j = 0; j < kDecoderLayerNames.size(); ++j) {
    const std::string name(kDecoderLayerNames[j]);
    if (!model.spec().is_locked(name)) continue;
    const std::size_t n = model.locked_layer(name).n_out();
    switch (kind) {
      case AttackKind::identity_key: state.emplace(name, PermutationKey::identity(n)); break;
      case AttackKind::random_key: {
        Rng rng(stream.child(j));
        state.emplace(name, generate_key(n, rng));
        break;
      }
      case AttackKind::strip_inr: state.emplace(name, std::nullopt); break;
    }
  }
  return state;
}

inline Vector attack_forward(const Model& model, std::span<const double> x, AttackKind kind,
                             const RngStream& stream) {
  return model.forward(x, model.modulations(attack_state(model, kind, stream)));
}

//---------------------------------------------------------------------------//
// Error statistics
//---------------------------------------------------------------------------//

struct ErrorStats {
  std::size_t n_trials = 0;
  std::size_t n_samples = 0;  // neurons × trials
  double mean_error = 0.0;
  double mean_error_se = 0.0;  // standard error of mean_error
  double mean_sq_error = 0.0;
  /// 2(1−α)²σ²_Δ (wrong key) or (1−α)²σ²_Δ (strip).
  double analytic = 0.0;
  double sigma_delta_sq = 0.0;             // centered
  double sigma_delta_sq_uncentered = 0.0;  // mean of Δ*²
  /// Largest |observed − predicted| over all neurons and trials.
  double max_identity_residual = 0.0;
};

namespace detail {
struct Moments {
  double sum = 0.0, sum_sq = 0.0, sum_sigma = 0.0, sum_sigma_unc = 0.0;
  std::size_t n = 0, trials = 0;

  void add_delta(std::span<const double> d) {
    double mean = 0.0, sq = 0.0;
    for (double v : d) mean += v, sq += v * v;
    mean /= static_cast<double>(d.size());
    sq /= static_cast<double>(d.size());
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    sum_sigma += var / static_cast<double>(d.size());
    sum_sigma_unc += sq;
    ++trials;
  }

  ErrorStats finish(double analytic_factor, double residual) const {
    ErrorStats s;
    s.n_trials = trials;
    s.n_samples = n;
    const double nn = static_cast<double>(n);
    s.mean_error = sum / nn;
    s.mean_sq_error = sum_sq / nn;
    const double var = std::max(0.0, s.mean_sq_error - s.mean_error * s.mean_error);
    s.mean_error_se = n > 1 ? std::sqrt(var / (nn - 1.0)) : 0.0;
    s.sigma_delta_sq = sum_sigma / static_cast<double>(trials);
    s.sigma_delta_sq_uncentered = sum_sigma_unc / static_cast<double>(trials);
    s.analytic = analytic_factor * s.sigma_delta_sq;
    s.max_identity_residual = residual;
    return s;
  }
};

inline double identity_tolerance(std::span<const double> a, std::span<const double> b) {
  double scale = 1.0;
  for (double v : a) scale = std::max(scale, std::abs(v));
  for (double v : b) scale = std::max(scale, std::abs(v));
  return 1e-12 * scale;
}
}  // namespace detail

/*!
 * Wrong-key error on a concrete locked layer.
 *
 * Without `true_key`, each trial draws a random true key and the attacker
 * uses the identity. With `true_key`, the attacker draws a random key each
 * trial. Every trial evaluates both forwards on a fresh N(0, I) input and
 * checks εᵢ = (1−α)(Δ*_{π(i)} − Δ*_{π_A(i)}) per neuron; a violation throws.
 */
inline ErrorStats wrong_key_error_stats(const InrLinearLayer& layer,
                                        const std::optional<PermutationKey>& true_key,
                                        std::size_t n_trials, const RngStream& stream) {
  detail::require(n_trials >= 1, "n_trials must be >= 1");
  if (true_key) layer.check_key(*true_key);
  const std::size_t n = layer.n_out();
  const double w = 1.0 - layer.alpha();
  const Vector canonical = layer.canonical_modulation();
  detail::Moments m;
  double residual = 0.0;
  for (std::size_t t = 0; t < n_trials; ++t) {
    Rng rng(stream.child(t));
    const PermutationKey pi = true_key ? *true_key : generate_key(n, rng);
    const PermutationKey pa = true_key ? generate_key(n, rng) : PermutationKey::identity(n);
    const Vector x = gaussian(rng, layer.n_in(), 1.0);
    const Vector y = layer.forward(x, pi);
    const Vector ya = layer.forward(x, pa);
    const double tol = detail::identity_tolerance(y, ya);
    for (std::size_t i = 0; i < n; ++i) {
      const double eps = y[i] - ya[i];
      const double predicted = w * (canonical[pi[i]] - canonical[pa[i]]);
      const double r = std::abs(eps - predicted);
      residual = std::max(residual, r);
      if (r > tol)
        throw std::runtime_error(detail::concat("wrong-key identity violated at neuron ", i, " trial ",
                                                t, ": residual ", r));
      m.sum += eps;
      m.sum_sq += eps * eps;
      ++m.n;
    }
    m.add_delta(canonical);
  }
  return m.finish(2.0 * w * w, residual);
}

/// Wrong-key law on synthetic Δ*: each trial draws Δ* iid N(0, 1) of length
/// n_out and a random true key; the attacker uses the identity.
inline ErrorStats wrong_key_error_stats_synthetic(std::size_t n_out, double alpha, std::size_t n_trials,
                                                  const RngStream& stream) {
  detail::require(n_out >= 2, "synthetic layer needs n_out >= 2");
  detail::require(n_trials >= 1, "n_trials must be >= 1");
  const double w = 1.0 - alpha;
  detail::Moments m;
  for (std::size_t t = 0; t < n_trials; ++t) {
    Rng rng(stream.child(t));
    const Vector d = gaussian(rng, n_out, 1.0);
    const PermutationKey pi = generate_key(n_out, rng);
    for (std::size_t i = 0; i < n_out; ++i) {
      const double eps = w * (d[pi[i]] - d[i]);
      m.sum += eps;
      m.sum_sq += eps * eps;
      ++m.n;
    }
    m.add_delta(d);
  }
  return m.finish(2.0 * w * w, 0.0);
}

/*!
 * Strip error on a concrete locked layer: authorized minus stripped output on
 * fresh inputs, checked against (1−α)Δᵢ per neuron. Without `true_key` each
 * trial draws a random one.
 */
inline ErrorStats strip_error_stats(const InrLinearLayer& layer,
                                    const std::optional<PermutationKey>& true_key,
                                    std::size_t n_trials, const RngStream& stream) {
  detail::require(n_trials >= 1, "n_trials must be >= 1");
  if (true_key) layer.check_key(*true_key);
  const std::size_t n = layer.n_out();
  const double w = 1.0 - layer.alpha();
  const Vector zero(n, 0.0);
  detail::Moments m;
  double residual = 0.0;
  for (std::size_t t = 0; t < n_trials; ++t) {
    Rng rng(stream.child(t));
    const PermutationKey pi = true_key ? *true_key : generate_key(n, rng);
    const Vector delta = layer.modulation(pi);
    const Vector x = gaussian(rng, layer.n_in(), 1.0);
    const Vector y = layer.forward_with_modulation(x, delta);
    const Vector ys = layer.forward_with_modulation(x, zero);
    const double tol = detail::identity_tolerance(y, ys);
    for (std::size_t i = 0; i < n; ++i) {
      const double eps = y[i] - ys[i];
      const double r = std::abs(eps - w * delta[i]);
      residual = std::max(residual, r);
      if (r > tol)
        throw std::runtime_error(detail::concat("strip identity violated at neuron ", i, " trial ", t,
                                                ": residual ", r));
      m.sum += eps;
      m.sum_sq += eps * eps;
      ++m.n;
    }
    m.add_delta(delta);
  }
  return m.finish(w * w, residual);
}

/// Strip law on synthetic Δ* iid N(0, 1).
inline ErrorStats strip_error_stats_synthetic(std::size_t n_out, double alpha, std::size_t n_trials,
                                              const RngStream& stream) {
  detail::require(n_out >= 2, "synthetic layer needs n_out >= 2");
  detail::require(n_trials >= 1, "n_trials must be >= 1");
  const double w = 1.0 - alpha;
  detail::Moments m;
  for (std::size_t t = 0; t < n_trials; ++t) {
    Rng rng(stream.child(t));
    const Vector d = gaussian(rng, n_out, 1.0);
    for (double v : d) {
      const double eps = w * v;
      m.sum += eps;
      m.sum_sq += eps * eps;
      ++m.n;
    }
    m.add_delta(d);
  }
  return m.finish(w * w, 0.0);
}

//---------------------------------------------------------------------------//
// Gradient mismatch
//---------------------------------------------------------------------------//

struct BlockGap {
  std::string block;
  double l2_gap = 0.0;  // ‖g − g_A‖²
  double norm_true = 0.0;
  double norm_attack = 0.0;
  /// NaN when either gradient is zero on the block.
  double cosine = std::numeric_limits<double>::quiet_NaN();
};

struct JacobianSummary {
  std::string layer;
  /// Variance across coordinates of ‖∂Φ(γ(C(j)))/∂θ‖.
  double sigma_j_sq = 0.0;
  /// Mean |corr| between Jacobians of distinct coordinates.
  double mean_abs_correlation = 0.0;
  double max_abs_correlation = 0.0;
};

struct GradMismatchReport {
  BlockGap total;
  std::vector<BlockGap> blocks;  // theta, locked_weight, locked_bias, other
  std::vector<JacobianSummary> jacobians;
  std::string flag;

  const BlockGap& block(std::string_view name) const {
    for (const auto& b : blocks)
      if (b.block == name) return b;
    throw ValidationError(detail::concat("no gradient block '", name, "'"));
  }
};

inline JacobianSummary jacobian_summary(const std::string& name, const InrLinearLayer& layer) {
  const std::size_t n = layer.n_out();
  std::vector<Vector> jac(n);
  Vector norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    jac[j] = layer.inr().jacobian(encode(coordinate(j, n), layer.levels()));
    norms[j] = norm2(jac[j]);
  }
  JacobianSummary s{name};
  double mean = 0.0;
  for (double v : norms) mean += v;
  mean /= static_cast<double>(n);
  for (double v : norms) s.sigma_j_sq += (v - mean) * (v - mean);
  s.sigma_j_sq /= static_cast<double>(n);
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      if (norms[a] == 0.0 || norms[b] == 0.0) continue;
      const double c = std::abs(dot(jac[a], jac[b]) / (norms[a] * norms[b]));
      s.mean_abs_correlation += c;
      s.max_abs_correlation = std::max(s.max_abs_correlation, c);
      ++pairs;
    }
  if (pairs > 0) s.mean_abs_correlation /= static_cast<double>(pairs);
  return s;
}

namespace detail {
inline std::string block_of(const Model& model, const std::string& segment) {
  for (const auto& name : model.locked_layers()) {
    if (segment == name + ".inr.theta") return "theta";
    if (segment == name + ".weight") return "locked_weight";
    if (segment == name + ".bias") return "locked_bias";
  }
  return "other";
}

inline BlockGap finish_gap(std::string name, double gap, double gg, double aa, double ga) {
  BlockGap b{std::move(name), gap, std::sqrt(gg), std::sqrt(aa)};
  if (gg > 0.0 && aa > 0.0) b.cosine = std::clamp(ga / (b.norm_true * b.norm_attack), -1.0, 1.0);
  return b;
}
}  // namespace detail

/// Compares gradients of the mean batch loss under the true lock state and an
/// attacker's, block by block.
inline GradMismatchReport gradient_mismatch(const Model& model, const Dataset& data,
                                            std::span<const std::size_t> batch, const LockState& truth,
                                            const LockState& attacker) {
  const ParamVector g = compute_gradients(model, data, batch, truth).grads;
  const ParamVector ga = compute_gradients(model, data, batch, attacker).grads;
  const std::array<std::string, 4> names{"theta", "locked_weight", "locked_bias", "other"};
  std::map<std::string, std::array<double, 4>> acc;  // gap, gg, aa, ga
  for (const auto& n : names) acc[n] = {0, 0, 0, 0};
  for (std::size_t s = 0; s < g.segments.size(); ++s) {
    auto& a = acc[detail::block_of(model, g.segments[s].name)];
    const auto& u = g.segments[s].data;
    const auto& v = ga.segments[s].data;
    for (std::size_t i = 0; i < u.size(); ++i) {
      a[0] += (u[i] - v[i]) * (u[i] - v[i]);
      a[1] += u[i] * u[i];
      a[2] += v[i] * v[i];
      a[3] += u[i] * v[i];
    }
  }
  GradMismatchReport r;
  std::array<double, 4> tot{0, 0, 0, 0};
  for (const auto& n : names) {
    const auto& a = acc[n];
    for (std::size_t i = 0; i < 4; ++i) tot[i] += a[i];
    r.blocks.push_back(detail::finish_gap(n, a[0], a[1], a[2], a[3]));
  }
  r.total = detail::finish_gap("total", tot[0], tot[1], tot[2], tot[3]);
  bool all_weightless = true;
  for (const auto& name : model.locked_layers()) {
    const auto& layer = model.locked_layer(name);
    r.jacobians.push_back(jacobian_summary(name, layer));
    all_weightless = all_weightless && layer.alpha() == 1.0;
  }
  if (all_weightless)
    r.flag = "theta-gradient identically zero; mismatch undefined on theta block";
  return r;
}

inline GradMismatchReport gradient_mismatch(const Model& model, const Dataset& data,
                                            std::span<const std::size_t> batch, const KeySet& true_keys,
                                            AttackKind kind, const RngStream& stream) {
  detail::require(kind != AttackKind::strip_inr,
                  "gradient mismatch compares two keys; strip_inr has none");
  return gradient_mismatch(model, data, batch, model.lock_state(true_keys),
                           attack_state(model, kind, stream));
}

/// Two keys are functionally equivalent on a layer when every neuron receives
/// the same encoded coordinate under both, so forward and backward agree for
/// any θ. Distinct keys can be equivalent: γ(−1) and γ(+1) agree to rounding,
/// so swapping the two endpoint coordinates changes nothing.
inline bool functionally_equivalent(const InrLinearLayer& layer, const PermutationKey& a,
                                    const PermutationKey& b, double tol = 1e-12) {
  layer.check_key(a);
  layer.check_key(b);
  const std::size_t n = layer.n_out();
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] == b[i]) continue;
    const Vector ea = encode(coordinate(a[i], n), layer.levels());
    const Vector eb = encode(coordinate(b[i], n), layer.levels());
    for (std::size_t d = 0; d < ea.size(); ++d)
      if (std::abs(ea[d] - eb[d]) > tol) return false;
  }
  return true;
}

/// A gradient gap is treated as zero when it is below rounding noise relative
/// to the gradients themselves.
inline bool gap_is_zero(const BlockGap& b, double rel = 1e-20) {
  return b.l2_gap <= rel * (b.norm_true * b.norm_true + b.norm_attack * b.norm_attack);
}

//---------------------------------------------------------------------------//
// Attack suite
//---------------------------------------------------------------------------//

struct AttackSuiteConfig {
  std::vector<AttackKind> kinds{kAllAttacks.begin(), kAllAttacks.end()};
  std::uint64_t seed = 0;
  std::size_t n_trials = 200;
};

struct AttackReport {
  AttackKind kind = AttackKind::identity_key;
  std::string checkpoint_id;
  std::map<std::string, std::uint64_t> bindings;
  /// Fingerprints of the substitute keys the attacker used (random/identity).
  std::map<std::string, std::string> attack_key_fingerprints;
  bool authorized_available = false;
  double authorized_accuracy = std::numeric_limits<double>::quiet_NaN();
  double authorized_loss = std::numeric_limits<double>::quiet_NaN();
  double attacked_accuracy = std::numeric_limits<double>::quiet_NaN();
  double attacked_loss = std::numeric_limits<double>::quiet_NaN();
  /// Per locked layer; only when the true key is available.
  std::map<std::string, ErrorStats> error_stats;
  std::uint64_t seed = 0;
  std::size_t n_trials = 0;
  std::string method_label;
};

/*!
 * Evaluate authorized accuracy (when keys are given) and each attack on the
 * same evaluation set. `expected_bindings` come from the checkpoint; any key
 * record whose binding or size disagrees is rejected before evaluation.
 */
inline std::vector<AttackReport> run_attack_suite(const Model& model, const std::string& checkpoint_id,
                                                  const std::map<std::string, std::uint64_t>& expected_bindings,
                                                  const std::optional<std::vector<KeyRecord>>& key_records,
                                                  const Dataset& eval, const AttackSuiteConfig& cfg) {
  detail::require(!model.locked_layers().empty(), "model has no locked layers: nothing to attack");
  std::optional<KeySet> keys;
  if (key_records) {
    KeySet ks;
    for (const auto& rec : *key_records) {
      auto it = expected_bindings.find(rec.layer);
      detail::require(it != expected_bindings.end(), "key file names layer '", rec.layer,
                      "' which the checkpoint does not lock");
      detail::require(it->second == rec.binding, "key binding mismatch for layer '", rec.layer,
                      "': key file ", hex64(rec.binding), ", checkpoint ", hex64(it->second));
      model.locked_layer(rec.layer).check_key(rec.key);
      ks.emplace(rec.layer, rec.key);
    }
    for (const auto& name : model.locked_layers())
      detail::require(ks.count(name) == 1, "key file lacks a key for locked layer '", name, "'");
    keys = std::move(ks);
  }

  EvalResult authorized;
  if (keys) authorized = evaluate(model, eval, model.lock_state(*keys));

  std::vector<AttackReport> out;
  const RngStream base = derive_stream(cfg.seed, {7});
  for (std::size_t a = 0; a < cfg.kinds.size(); ++a) {
    const AttackKind kind = cfg.kinds[a];
    AttackReport r;
    r.kind = kind;
    r.checkpoint_id = checkpoint_id;
    r.bindings = expected_bindings;
    r.seed = cfg.seed;
    r.n_trials = cfg.n_trials;
    const RngStream s = base.child(static_cast<std::uint64_t>(kind));
    const LockState state = attack_state(model, kind, s.child(0));
    for (const auto& [name, key] : state)
      if (key) r.attack_key_fingerprints[name] = hex64(key_fingerprint(*key));
    const EvalResult attacked = evaluate(model, eval, state);
    r.attacked_accuracy = attacked.accuracy;
    r.attacked_loss = attacked.loss;
    if (keys) {
      r.authorized_available = true;
      r.authorized_accuracy = authorized.accuracy;
      r.authorized_loss = authorized.loss;
      for (const auto& name : model.locked_layers()) {
        const auto& layer = model.locked_layer(name);
        const PermutationKey& truth = keys->at(name);
        r.error_stats[name] =
            kind == AttackKind::strip_inr
                ? strip_error_stats(layer, truth, cfg.n_trials, s.child(1))
                : wrong_key_error_stats(layer, truth, cfg.n_trials, s.child(1));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

//---------------------------------------------------------------------------//
// Report output
//---------------------------------------------------------------------------//

inline constexpr std::string_view kAttackSchema = "infl-attack-v1";
inline constexpr std::string_view kAttackCsvHeader =
    "kind,authorized_accuracy,attacked_accuracy,authorized_loss,attacked_loss,accuracy_drop,"
    "mean_sq_error,analytic,n_trials,seed";

namespace detail {
inline nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}
}  // namespace detail

inline nlohmann::json to_json(const ErrorStats& s) {
  return {{"n_trials", s.n_trials},
          {"n_samples", s.n_samples},
          {"mean_error", detail::number_or_null(s.mean_error)},
          {"mean_error_se", detail::number_or_null(s.mean_error_se)},
          {"mean_sq_error", detail::number_or_null(s.mean_sq_error)},
          {"analytic", detail::number_or_null(s.analytic)},
          {"sigma_delta_sq", detail::number_or_null(s.sigma_delta_sq)},
          {"sigma_delta_sq_uncentered", detail::number_or_null(s.sigma_delta_sq_uncentered)},
          {"max_identity_residual", detail::number_or_null(s.max_identity_residual)}};
}

inline nlohmann::json to_json(const AttackReport& r) {
  nlohmann::json bindings = nlohmann::json::object();
  for (const auto& [k, v] : r.bindings) bindings[k] = hex64(v);
  nlohmann::json stats = nlohmann::json::object();
  for (const auto& [k, v] : r.error_stats) stats[k] = to_json(v);
  nlohmann::json j{{"schema", kAttackSchema},
                   {"kind", to_string(r.kind)},
                   {"checkpoint", r.checkpoint_id},
                   {"bindings", bindings},
                   {"attack_key_fingerprints", r.attack_key_fingerprints},
                   {"authorized_available", r.authorized_available},
                   {"metrics",
                    {{"authorized_accuracy", detail::number_or_null(r.authorized_accuracy)},
                     {"authorized_loss", detail::number_or_null(r.authorized_loss)},
                     {"attacked_accuracy", detail::number_or_null(r.attacked_accuracy)},
                     {"attacked_loss", detail::number_or_null(r.attacked_loss)}}},
                   {"error_stats", stats},
                   {"n_trials", r.n_trials},
                   {"seed", r.seed}};
  if (!r.method_label.empty()) j["method_label"] = r.method_label;
  return j;
}

inline std::string format_attack_csv(const std::vector<AttackReport>& reports) {
  std::ostringstream out;
  out << "# " << kAttackSchema << '\n' << kAttackCsvHeader << '\n';
  for (const auto& r : reports) {
    double msq = std::numeric_limits<double>::quiet_NaN();
    double analytic = msq;
    if (!r.error_stats.empty()) {
      msq = analytic = 0.0;
      for (const auto& [_, s] : r.error_stats) msq += s.mean_sq_error, analytic += s.analytic;
      msq /= static_cast<double>(r.error_stats.size());
      analytic /= static_cast<double>(r.error_stats.size());
    }
    using detail::format_double;
    out << to_string(r.kind) << ',' << format_double(r.authorized_accuracy) << ','
        << format_double(r.attacked_accuracy) << ',' << format_double(r.authorized_loss) << ','
        << format_double(r.attacked_loss) << ',' << format_double(r.authorized_accuracy - r.attacked_accuracy)
        << ',' << format_double(msq) << ',' << format_double(analytic) << ',' << r.n_trials << ','
        << r.seed << '\n';
  }
  return out.str();
}

}  // namespace infl
