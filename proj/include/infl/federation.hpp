#pragma once

// FedAvg simulation: partitioning, client selection, local training,
// unweighted aggregation and client-level DP sanitization.

#include <atomic>
#include <cstring>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include "infl/model.hpp"

namespace infl {

enum class Method { fl, fl_dp, fl_lora_dp, infl };
enum class OptimizerKind { sgd, adam };
enum class PartitionKind { iid, dirichlet };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::fl: return "fl";
    case Method::fl_dp: return "fl_dp";
    case Method::fl_lora_dp: return "fl_lora_dp";
    case Method::infl: return "infl";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "fl") return Method::fl;
  if (s == "fl_dp") return Method::fl_dp;
  if (s == "fl_lora_dp") return Method::fl_lora_dp;
  if (s == "infl") return Method::infl;
  throw ValidationError(detail::concat("unknown method '", s, "' (fl, fl_dp, fl_lora_dp, infl)"));
}

inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ValidationError(detail::concat("unknown optimizer '", s, "' (sgd, adam)"));
}

inline bool uses_dp(Method m) { return m == Method::fl_dp || m == Method::fl_lora_dp; }

struct DpConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 1.29;
  double delta = 1e-5;

  void validate() const {
    detail::require(clip_norm > 0.0 && std::isfinite(clip_norm), "dp.clip_norm must be > 0");
    detail::require(noise_multiplier >= 0.0 && std::isfinite(noise_multiplier),
                    "dp.noise_multiplier must be >= 0");
    detail::require(delta > 0.0 && delta < 1.0, "dp.delta must lie in (0,1)");
  }
};

struct PartitionSpec {
  PartitionKind kind = PartitionKind::iid;
  double dirichlet_alpha = 0.5;
};

struct FederationConfig {
  std::size_t n_clients = 5;
  double participation = 1.0;
  std::size_t local_epochs = 2;
  std::size_t rounds = 50;
  std::size_t batch_size = 0;  // 0 = full shard per step
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  Method method = Method::infl;
  DpConfig dp;
  PartitionSpec partition;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Reported as "PPML-approx": FL-LoRA-DP standing in for a PPML baseline.
  bool ppml_approx = false;

  std::size_t clients_per_round() const { return selection_size(n_clients, participation); }

  static std::size_t selection_size(std::size_t k, double fraction) {
    // Guard against 0.3·10 = 3.0000000000000004 rounding up to 4.
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(k) - 1e-9));
  }

  void validate() const {
    detail::require(n_clients >= 1, "federation.n_clients must be >= 1");
    detail::require(participation > 0.0 && participation <= 1.0,
                    "federation.participation must lie in (0,1], got ", participation);
    detail::require(clients_per_round() >= 1, "federation: ceil(C*K) must be >= 1");
    detail::require(rounds >= 1, "federation.rounds must be >= 1");
    detail::require(lr > 0.0 && std::isfinite(lr), "federation.lr must be > 0");
    detail::require(threads >= 1, "federation.threads must be >= 1");
    if (partition.kind == PartitionKind::dirichlet)
      detail::require(partition.dirichlet_alpha > 0.0, "dirichlet alpha must be > 0");
    if (uses_dp(method)) dp.validate();
  }
};

//---------------------------------------------------------------------------//
// Partitioning and selection
//---------------------------------------------------------------------------//

using Shard = std::vector<std::size_t>;

namespace detail {
inline void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i-- > 1;) std::swap(v[i], v[rng.below(i + 1)]);
}
}  // namespace detail

/// Shuffled split into K contiguous chunks; sizes differ by at most one.
inline std::vector<Shard> partition_iid(std::size_t n_samples, std::size_t k,
                                        const RngStream& stream) {
  detail::require(k >= 1, "partition: K must be >= 1");
  detail::require(k <= n_samples, "partition: K=", k, " exceeds dataset size ", n_samples);
  std::vector<std::size_t> idx(n_samples);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(stream);
  detail::shuffle(idx, rng);
  std::vector<Shard> shards(k);
  const std::size_t base = n_samples / k;
  const std::size_t extra = n_samples % k;
  std::size_t off = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t len = base + (c < extra ? 1 : 0);
    shards[c].assign(idx.begin() + off, idx.begin() + off + len);
    std::sort(shards[c].begin(), shards[c].end());
    off += len;
  }
  return shards;
}

inline std::vector<Shard> partition_iid(const Dataset& data, std::size_t k, const RngStream& stream) {
  return partition_iid(data.size(), k, stream);
}

inline Vector sample_dirichlet(std::size_t k, double alpha, Rng& rng) {
  Vector p(k);
  double total = 0.0;
  for (auto& v : p) total += (v = rng.gamma(alpha));
  if (total <= 0.0) {
    // Every gamma draw underflowed (tiny alpha): the limit is a one-hot vector.
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.below(k)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

inline constexpr std::size_t kDirichletRetries = 100;

/*!
 * Per class, split that class's (shuffled) samples across clients with
 * proportions drawn from Dirichlet(alpha). An allocation that leaves a client
 * empty is redrawn from a fresh stream, up to kDirichletRetries times.
 */
inline std::vector<Shard> partition_dirichlet(const Dataset& data, std::size_t k, double alpha,
                                              const RngStream& stream) {
  detail::require(data.labeled(), "dirichlet partition requires a labeled dataset");
  detail::require(alpha > 0.0, "dirichlet alpha must be > 0, got ", alpha);
  detail::require(k >= 1, "partition: K must be >= 1");
  detail::require(k <= data.size(), "partition: K=", k, " exceeds dataset size ", data.size());
  std::vector<std::vector<std::size_t>> by_class(data.n_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  for (std::size_t attempt = 0; attempt < kDirichletRetries; ++attempt) {
    Rng rng(stream.child(attempt));
    std::vector<Shard> shards(k);
    for (auto members : by_class) {
      detail::shuffle(members, rng);
      const Vector p = sample_dirichlet(k, alpha, rng);
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < k; ++c) {
        cum += p[c];
        std::size_t end = c + 1 == k ? members.size()
                                     : std::min(members.size(), static_cast<std::size_t>(std::floor(
                                                                    cum * static_cast<double>(members.size()))));
        end = std::max(end, start);
        shards[c].insert(shards[c].end(), members.begin() + start, members.begin() + end);
        start = end;
      }
    }
    if (std::all_of(shards.begin(), shards.end(), [](const Shard& s) { return !s.empty(); })) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
  }
  throw std::runtime_error(detail::concat("dirichlet partition left a client empty after ",
                                          kDirichletRetries, " redraws (K=", k, ", alpha=", alpha, ")"));
}

inline std::vector<Shard> make_partition(const Dataset& data, std::size_t k,
                                         const PartitionSpec& spec, const RngStream& stream) {
  return spec.kind == PartitionKind::iid ? partition_iid(data, k, stream)
                                         : partition_dirichlet(data, k, spec.dirichlet_alpha, stream);
}

/// ⌈C·K⌉ distinct ids, uniform without replacement, sorted ascending.
inline std::vector<std::size_t> select_clients(std::size_t k, double fraction, std::uint64_t round,
                                               const RngStream& stream) {
  detail::require(k >= 1, "select_clients: K must be >= 1");
  detail::require(fraction > 0.0 && fraction <= 1.0, "participation must lie in (0,1]");
  const std::size_t m = FederationConfig::selection_size(k, fraction);
  std::vector<std::size_t> ids(k);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(stream.child(round));
  for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + rng.below(k - i)]);
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

//---------------------------------------------------------------------------//
// Local training
//---------------------------------------------------------------------------//

struct LocalTrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 1e-3;
};

struct LocalResult {
  ParamVector params;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t steps = 0;
  bool empty_shard = false;
};

/*!
 * Load `global` into a copy of `model`, run `epochs` passes of mini-batch
 * training over the shard and return the resulting parameters.
 *
 * Each epoch visits the shard in an order shuffled from stream.child({0, e});
 * dropout masks come from stream.child(1). Optimizer state starts fresh.
 */
inline LocalResult local_train(const Model& model, const Dataset& data, const Shard& shard,
                               const ParamVector& global, const LockState& state,
                               const LocalTrainOptions& opt, const RngStream& stream) {
  LocalResult out{global, std::numeric_limits<double>::quiet_NaN(), 0, shard.empty()};
  if (opt.epochs == 0 || shard.empty()) return out;
  Model local = model;
  local.set_parameters(global);
  ParamVector params = global;
  AdamState adam;
  Rng dropout_rng(stream.child(1));
  Rng* dropout = model.spec().dropout_rate > 0.0 ? &dropout_rng : nullptr;
  const std::size_t bs = opt.batch_size == 0 ? shard.size() : std::min(opt.batch_size, shard.size());
  double loss_sum = 0.0;
  std::vector<std::size_t> order = shard;
  std::sort(order.begin(), order.end());
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    Rng shuffle_rng(stream.child({0, e}));
    std::vector<std::size_t> epoch_order = order;
    detail::shuffle(epoch_order, shuffle_rng);
    for (std::size_t start = 0; start < epoch_order.size(); start += bs) {
      const std::size_t len = std::min(bs, epoch_order.size() - start);
      const std::span<const std::size_t> batch(epoch_order.data() + start, len);
      GradientResult g = compute_gradients(local, data, batch, state, dropout);
      if (opt.optimizer == OptimizerKind::sgd)
        sgd_step(params, g.grads, opt.lr);
      else
        adam_step(params, g.grads, adam, AdamOptions{opt.lr});
      local.set_parameters(params);
      loss_sum += g.mean_loss;
      ++out.steps;
    }
  }
  out.params = std::move(params);
  out.mean_loss = loss_sum / static_cast<double>(out.steps);
  return out;
}

//---------------------------------------------------------------------------//
// Aggregation and DP
//---------------------------------------------------------------------------//

namespace detail {
inline void require_same_layout(const ParamVector& a, const ParamVector& b, const char* what) {
  if (auto bad = a.first_layout_mismatch(b))
    throw ValidationError(concat(what, ": layout mismatch at segment '", *bad, "'"));
}
}  // namespace detail

/// Unweighted per-parameter mean.
inline ParamVector fedavg_aggregate(std::span<const ParamVector> updates) {
  detail::require(!updates.empty(), "fedavg_aggregate needs at least one update");
  ParamVector out = updates.front();
  for (std::size_t u = 1; u < updates.size(); ++u) {
    detail::require_same_layout(out, updates[u], "fedavg_aggregate");
    for (std::size_t s = 0; s < out.segments.size(); ++s)
      axpy(1.0, updates[u].segments[s].data, out.segments[s].data);
  }
  const double n = static_cast<double>(updates.size());
  for (auto& s : out.segments)
    for (auto& v : s.data) v /= n;
  return out;
}

inline ParamVector difference(const ParamVector& a, const ParamVector& b) {
  detail::require_same_layout(a, b, "difference");
  ParamVector out = a;
  for (std::size_t s = 0; s < out.segments.size(); ++s)
    axpy(-1.0, b.segments[s].data, out.segments[s].data);
  return out;
}

/// L2 norm over trainable segments.
inline double trainable_norm(const ParamVector& pv) {
  double sq = 0.0;
  for (const auto& s : pv.segments)
    if (s.trainable) sq += dot(s.data, s.data);
  return std::sqrt(sq);
}

/// Clip the trainable part of `delta` to clip_norm, then add N(0, (σ·clip)²)
/// per trainable coordinate. Frozen segments pass through untouched.
inline ParamVector dp_sanitize(const ParamVector& delta, const DpConfig& dp, const RngStream& stream) {
  dp.validate();
  ParamVector out = delta;
  auto scaled = [&](double scale) {
    for (std::size_t i = 0; i < out.segments.size(); ++i)
      if (out.segments[i].trainable)
        for (std::size_t j = 0; j < out.segments[i].data.size(); ++j)
          out.segments[i].data[j] = delta.segments[i].data[j] * scale;
  };
  if (const double norm = trainable_norm(delta); norm > dp.clip_norm) {
    // clip/norm can land one ulp high; step down until the bound holds.
    double scale = dp.clip_norm / norm;
    for (scaled(scale); trainable_norm(out) > dp.clip_norm; scaled(scale))
      scale = std::nextafter(scale, 0.0);
  }
  Rng rng(stream);
  const double std_dev = dp.noise_multiplier * dp.clip_norm;
  if (std_dev > 0.0)
    for (auto& s : out.segments)
      if (s.trainable)
        for (auto& v : s.data) v += std_dev * rng.normal();
  return out;
}

//---------------------------------------------------------------------------//
// Orchestration
//---------------------------------------------------------------------------//

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> selected;
  std::vector<double> local_losses;
  std::vector<std::size_t> empty_clients;
  double mean_local_loss = 0.0;
  double global_loss = 0.0;
  double global_accuracy = 0.0;
  double wall_ms = 0.0;
  std::string error;

  /// Equality on everything except wall-clock time.
  bool same_outcome(const RoundRecord& o) const {
    auto bits_equal = [](double a, double b) {
      return std::memcmp(&a, &b, sizeof(double)) == 0;
    };
    if (round != o.round || selected != o.selected || empty_clients != o.empty_clients ||
        error != o.error || local_losses.size() != o.local_losses.size())
      return false;
    for (std::size_t i = 0; i < local_losses.size(); ++i)
      if (!bits_equal(local_losses[i], o.local_losses[i])) return false;
    return bits_equal(mean_local_loss, o.mean_local_loss) && bits_equal(global_loss, o.global_loss) &&
           bits_equal(global_accuracy, o.global_accuracy);
  }
};

class RoundFailure : public std::runtime_error {
 public:
  RoundFailure(RoundRecord record)
      : std::runtime_error(detail::concat("round ", record.round, " failed: ", record.error)),
        record_(std::move(record)) {}
  const RoundRecord& record() const { return record_; }

 private:
  RoundRecord record_;
};

/// Model spec actually trained for a method: baselines drop the lock, only
/// fl_lora_dp keeps adapters. Both default to the two decoder layers.
inline ModelSpec effective_model_spec(ModelSpec spec, Method method) {
  if (method != Method::infl) spec.locked_layers.clear();
  if (method != Method::fl_lora_dp) spec.lora_layers.clear();
  if (method == Method::fl_lora_dp && spec.lora_layers.empty())
    spec.lora_layers = {std::string(kDecoderLayerNames[0]), std::string(kDecoderLayerNames[1])};
  if (method == Method::infl && spec.locked_layers.empty())
    spec.locked_layers = {std::string(kDecoderLayerNames[0]), std::string(kDecoderLayerNames[1])};
  spec.validate();
  return spec;
}

/// Client-held secrets for INFL: the key of each locked layer plus a binding
/// nonce recorded in checkpoints.
struct ClientKeys {
  KeySet keys;
  std::map<std::string, std::uint64_t> bindings;

  std::vector<KeyRecord> records() const {
    std::vector<KeyRecord> out;
    for (const auto& [name, key] : keys) out.push_back({name, key, bindings.at(name)});
    return out;
  }
};

/// One key per locked layer, drawn from [seed, 2, layer index].
inline ClientKeys generate_client_keys(const Model& model, std::uint64_t seed) {
  ClientKeys ck;
  for (std::size_t j = 0; j < kDecoderLayerNames.size(); ++j) {
    const std::string name(kDecoderLayerNames[j]);
    if (!model.spec().is_locked(name)) continue;
    const RngStream s = derive_stream(seed, {2, j});
    Rng rng(s.child(0));
    ck.keys.emplace(name, generate_key(model.locked_layer(name).n_out(), rng));
    ck.bindings.emplace(name, s.child(1).draw(0));
  }
  return ck;
}

inline LockState authorized_state(const Model& model, const KeySet& keys) {
  return model.lock_state(keys);
}

struct FederationResult {
  ModelSpec model_spec;
  Model model;  // final global parameters loaded
  ParamVector initial;
  ParamVector global;
  std::vector<RoundRecord> history;
  std::vector<Shard> shards;
  /// INFL only: per-client key material. Never part of `global`.
  std::vector<ClientKeys> client_keys;
};

/// Called with every parameter vector that leaves a client.
using UploadObserver = std::function<void(std::size_t round, std::size_t client, const ParamVector&)>;

namespace detail {
inline void fill_eval(RoundRecord& rec, const Model& model, const Dataset& eval,
                      const LockState& state) {
  const EvalResult r = evaluate(model, eval, state);
  rec.global_loss = r.loss;
  rec.global_accuracy = r.accuracy;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (!std::isnan(x)) s += x, ++n;
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(n);
}

/// Runs job(i) for i in [0, n) on up to `threads` workers; rethrows the
/// lowest-index failure so the reported error does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(threads, n); ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            job(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}
}  // namespace detail

/*!
 * initialize → (select → distribute → local train → [sanitize deltas] →
 * aggregate → evaluate) × T.
 *
 * Stream layout under `seed`: model init [1], keys [2, layer], partition [3],
 * selection [4], local training [5, t, k], DP noise [6, t, k].
 */
inline FederationResult run_federation(const FederationConfig& cfg, const Dataset& train,
                                       const Dataset& eval, const ModelSpec& base_spec,
                                       const UploadObserver& observer = {}) {
  cfg.validate();
  const ModelSpec spec = effective_model_spec(base_spec, cfg.method);
  Model model = Model::build(spec, derive_stream(cfg.seed, {1}));
  FederationResult res{spec, model, model.parameters(), model.parameters(), {}, {}, {}};
  res.shards = make_partition(train, cfg.n_clients, cfg.partition, derive_stream(cfg.seed, {3}));

  LockState state;
  if (cfg.method == Method::infl) {
    const ClientKeys ck = generate_client_keys(model, cfg.seed);
    res.client_keys.assign(cfg.n_clients, ck);
    state = model.lock_state(ck.keys);
  }
  const LocalTrainOptions opt{cfg.local_epochs, cfg.batch_size, cfg.optimizer, cfg.lr};
  const RngStream selection = derive_stream(cfg.seed, {4});

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    const auto start = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = t;
    try {
      rec.selected = select_clients(cfg.n_clients, cfg.participation, t, selection);
      const std::size_t m = rec.selected.size();
      std::vector<LocalResult> results(m);
      detail::parallel_for(m, cfg.threads, [&](std::size_t i) {
        const std::size_t k = rec.selected[i];
        const LockState client_state =
            cfg.method == Method::infl ? model.lock_state(res.client_keys[k].keys) : LockState{};
        results[i] = local_train(model, train, res.shards[k], res.global, client_state, opt,
                                 derive_stream(cfg.seed, {5, t, k}));
      });
      std::vector<ParamVector> uploads;
      uploads.reserve(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t k = rec.selected[i];
        rec.local_losses.push_back(results[i].mean_loss);
        if (results[i].empty_shard) rec.empty_clients.push_back(k);
        if (observer) observer(t, k, results[i].params);
        uploads.push_back(std::move(results[i].params));
      }
      if (uses_dp(cfg.method)) {
        // Deltas are formed and sanitized at the server boundary.
        std::vector<ParamVector> deltas;
        for (std::size_t i = 0; i < m; ++i)
          deltas.push_back(dp_sanitize(difference(uploads[i], res.global), cfg.dp,
                                       derive_stream(cfg.seed, {6, t, rec.selected[i]})));
        ParamVector mean_delta = fedavg_aggregate(deltas);
        for (std::size_t s = 0; s < mean_delta.segments.size(); ++s)
          axpy(1.0, mean_delta.segments[s].data, res.global.segments[s].data);
      } else {
        res.global = fedavg_aggregate(uploads);
      }
      model.set_parameters(res.global);
      rec.mean_local_loss = detail::mean_of(rec.local_losses);
      detail::fill_eval(rec, model, eval, state);
    } catch (const std::exception& e) {
      rec.error = e.what();
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      res.history.push_back(rec);
      throw RoundFailure(rec);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.history.push_back(std::move(rec));
  }
  res.model = model;
  return res;
}

/*!
 * Non-federated reference: T periods of E epochs over the whole training set,
 * with optimizer state reset each period and the same stream layout as client
 * 0 of a federation. With K=1 and C=1 (no DP) the federation reproduces this
 * history bit for bit.
 */
inline FederationResult train_centralized(const FederationConfig& cfg, const Dataset& train,
                                          const Dataset& eval, const ModelSpec& base_spec) {
  cfg.validate();
  detail::require(!uses_dp(cfg.method), "centralized reference does not apply DP");
  const ModelSpec spec = effective_model_spec(base_spec, cfg.method);
  Model model = Model::build(spec, derive_stream(cfg.seed, {1}));
  FederationResult res{spec, model, model.parameters(), model.parameters(), {}, {}, {}};
  Shard all(train.size());
  std::iota(all.begin(), all.end(), 0);
  res.shards = {all};
  LockState state;
  if (cfg.method == Method::infl) {
    res.client_keys = {generate_client_keys(model, cfg.seed)};
    state = model.lock_state(res.client_keys[0].keys);
  }
  const LocalTrainOptions opt{cfg.local_epochs, cfg.batch_size, cfg.optimizer, cfg.lr};
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    const auto start = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = t;
    rec.selected = {0};
    LocalResult r = local_train(model, train, all, res.global, state, opt, derive_stream(cfg.seed, {5, t, 0}));
    rec.local_losses = {r.mean_loss};
    res.global = std::move(r.params);
    model.set_parameters(res.global);
    rec.mean_local_loss = detail::mean_of(rec.local_losses);
    detail::fill_eval(rec, model, eval, state);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.history.push_back(std::move(rec));
  }
  res.model = model;
  return res;
}

//---------------------------------------------------------------------------//
// Metrics
//---------------------------------------------------------------------------//

inline constexpr std::string_view kMetricsSchema = "infl-metrics-v1";
inline constexpr std::string_view kMetricsHeader =
    "round,selected_ids,mean_local_loss,global_loss,global_accuracy,wall_ms";

namespace detail {
/// Shortest round-trip representation.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
}  // namespace detail

/// One row per round; selected ids are ';'-separated. `include_timing`
/// false writes wall_ms as 0 so files from repeated runs compare equal.
inline std::string format_metrics_csv(const std::vector<RoundRecord>& history,
                                      bool include_timing = true) {
  std::ostringstream out;
  out << "# " << kMetricsSchema << '\n' << kMetricsHeader << '\n';
  for (const auto& r : history) {
    out << r.round << ',';
    for (std::size_t i = 0; i < r.selected.size(); ++i) out << (i ? ";" : "") << r.selected[i];
    out << ',' << detail::format_double(r.mean_local_loss) << ',' << detail::format_double(r.global_loss)
        << ',' << detail::format_double(r.global_accuracy) << ','
        << (include_timing ? detail::format_double(r.wall_ms) : "0") << '\n';
  }
  return out.str();
}

}  // namespace infl
