#pragma once

// train / attack / verify / partition, as library calls the CLI wraps.

#include <iomanip>
#include <iostream>

#include "infl/cli/checkpoint.hpp"
#include "infl/threatlab.hpp"

namespace infl::cli {

inline constexpr std::string_view kSummarySchema = "infl-summary-v1";

/// Training and evaluation sets for a config. The evaluation set is a second
/// draw (split 1) from the same generating distribution.
inline std::pair<Dataset, Dataset> make_datasets(const ExperimentConfig& cfg) {
  DatasetDescriptor eval_desc = cfg.data;
  eval_desc.n_samples = cfg.eval_samples;
  return {make_dataset(cfg.data, cfg.data_seed, 0), make_dataset(eval_desc, cfg.data_seed, 1)};
}

inline std::string method_label(const FederationConfig& f) {
  return f.ppml_approx ? "PPML-approx" : to_string(f.method);
}

//---------------------------------------------------------------------------//
// train
//---------------------------------------------------------------------------//

struct TrainArtifacts {
  std::filesystem::path root;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_csv;
  std::filesystem::path summary_json;
  std::vector<std::filesystem::path> key_files;
};

struct TrainOutcome {
  FederationResult result;
  TrainArtifacts artifacts;
  std::string checkpoint_id;
};

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const FederationResult& res,
                                   const std::string& checkpoint_id) {
  const RoundRecord& last = res.history.back();
  nlohmann::json j{{"schema", kSummarySchema},
                   {"method", to_string(cfg.federation.method)},
                   {"method_label", method_label(cfg.federation)},
                   {"rounds", res.history.size()},
                   {"n_clients", cfg.federation.n_clients},
                   {"participation", cfg.federation.participation},
                   {"local_epochs", cfg.federation.local_epochs},
                   {"lr", cfg.federation.lr},
                   {"parameter_count", res.global.size()},
                   {"locked_layers", res.model_spec.locked_layers},
                   {"lora_layers", res.model_spec.lora_layers},
                   {"checkpoint", checkpoint_id},
                   {"final_global_loss", infl::detail::number_or_null(last.global_loss)},
                   {"final_global_accuracy", infl::detail::number_or_null(last.global_accuracy)},
                   {"final_mean_local_loss", infl::detail::number_or_null(last.mean_local_loss)}};
  if (uses_dp(cfg.federation.method))
    j["dp"] = {{"clip_norm", cfg.federation.dp.clip_norm},
               {"noise_multiplier", cfg.federation.dp.noise_multiplier},
               {"delta", cfg.federation.dp.delta}};
  std::size_t empty = 0;
  for (const auto& r : res.history) empty += r.empty_clients.size();
  j["empty_shard_events"] = empty;
  return j;
}

/// Runs the federation and writes checkpoint.bin, keys/client_<k>.key (INFL),
/// metrics.csv and summary.json under the output root.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg, const UploadObserver& observer = {},
                              bool metrics_timing = true) {
  cfg.validate();
  const auto [train, eval] = make_datasets(cfg);
  TrainOutcome out{run_federation(cfg.federation, train, eval, cfg.model, observer), {}, {}};
  const FederationResult& res = out.result;
  TrainArtifacts& a = out.artifacts;
  a.root = output_root(cfg);
  a.checkpoint = a.root / "checkpoint.bin";
  a.metrics_csv = a.root / "metrics.csv";
  a.summary_json = a.root / "summary.json";

  std::map<std::string, std::uint64_t> bindings;
  if (!res.client_keys.empty()) bindings = res.client_keys.front().bindings;
  const auto bytes = serialize_checkpoint(cfg, res.model_spec, res.global, bindings);
  write_file_atomic(a.checkpoint, bytes);
  out.checkpoint_id = hex64(detail::fnv1a(std::span(bytes).first(bytes.size() - 8)));

  for (std::size_t k = 0; k < res.client_keys.size(); ++k) {
    a.key_files.push_back(key_file_path(a.root / "keys", k));
    save_key_file(a.key_files.back(), res.client_keys[k].records());
  }
  write_text_atomic(a.metrics_csv, format_metrics_csv(res.history, metrics_timing));
  write_text_atomic(a.summary_json, summary_json(cfg, res, out.checkpoint_id).dump(2) + "\n");
  return out;
}

//---------------------------------------------------------------------------//
// attack
//---------------------------------------------------------------------------//

struct AttackOutcome {
  std::vector<AttackReport> reports;
  std::vector<std::filesystem::path> written;
};

/// Loads a checkpoint (and optionally a key directory), runs the requested
/// attacks on a freshly generated evaluation set and writes
/// attacks/<kind>.json plus rows appended to attacks/attacks.csv.
inline AttackOutcome cmd_attack(const std::filesystem::path& checkpoint_path,
                                const std::optional<std::filesystem::path>& key_dir,
                                const std::vector<AttackKind>& kinds, std::uint64_t attack_seed = 0) {
  detail::require(!kinds.empty(), "no attack kinds requested");
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const Model model = model_from_checkpoint(ck);
  std::optional<std::vector<KeyRecord>> records;
  if (key_dir) records = load_key_file(find_key_file(*key_dir));
  const auto eval = make_datasets(ck.config).second;
  AttackSuiteConfig suite{kinds, attack_seed, ck.config.attack_trials};
  AttackOutcome out;
  out.reports = run_attack_suite(model, ck.id(), ck.bindings, records, eval, suite);
  const std::filesystem::path dir = std::filesystem::path(output_root(ck.config)) / "attacks";
  for (auto& r : out.reports) {
    r.method_label = method_label(ck.config.federation);
    const auto path = dir / (to_string(r.kind) + ".json");
    write_text_atomic(path, to_json(r).dump(2) + "\n");
    out.written.push_back(path);
  }
  const auto csv_path = dir / "attacks.csv";
  std::string csv = format_attack_csv(out.reports);
  if (std::filesystem::exists(csv_path)) {
    // Keep earlier rows; drop the new schema and header lines.
    std::string existing = read_text_file(csv_path.string());
    const auto body = csv.find('\n', csv.find('\n') + 1) + 1;
    csv = existing + csv.substr(body);
  }
  write_text_atomic(csv_path, csv);
  out.written.push_back(csv_path);
  return out;
}

//---------------------------------------------------------------------------//
// verify
//---------------------------------------------------------------------------//

struct VerifyOptions {
  double alpha = 0.5;
  std::size_t levels = 8;
  std::size_t trials = 100000;
  std::uint64_t seed = 0;
};

struct VerifyRow {
  std::string check;
  double observed = 0.0;
  double expected = 0.0;
  std::string tolerance;
  bool pass = false;
};

namespace detail {
inline bool within_relative(double observed, double expected, double rel) {
  if (expected == 0.0) return std::abs(observed) <= 1e-12;
  return std::abs(observed - expected) <= rel * std::abs(expected);
}

/// Small locked model whose logit layer is the locked layer; used for the
/// gradient-mismatch checks with softmax cross-entropy on random labels.
inline std::pair<Model, Dataset> mismatch_fixture(std::size_t n_out, double alpha, std::size_t levels,
                                                  std::size_t batch, const RngStream& stream) {
  ModelSpec spec;
  spec.input_dim = 8;
  spec.hidden_dim = 16;
  spec.n_residual_blocks = 0;
  spec.decoder_hidden = 16;
  spec.output_dim = n_out;
  spec.locked_layers = {"decoder.1"};
  spec.lock.alpha = alpha;
  spec.lock.levels = levels;
  Model model = Model::build(spec, stream.child(0));
  Dataset data;
  data.n_classes = n_out;
  Rng rng(stream.child(1));
  data.features = Matrix(batch, spec.input_dim, gaussian(rng, batch * spec.input_dim, 1.0));
  for (std::size_t i = 0; i < batch; ++i) data.labels.push_back(rng.below(n_out));
  return {std::move(model), std::move(data)};
}
}  // namespace detail

/// Numerical checks of the error laws and gradient mismatch, as a table.
inline std::vector<VerifyRow> run_verify(const VerifyOptions& opt) {
  detail::require(opt.alpha >= 0.0 && opt.alpha <= 1.0, "--alpha must lie in [0,1]");
  detail::require(opt.levels >= 1 && opt.levels <= 16, "--levels must lie in 1..16");
  detail::require(opt.trials >= 1, "--trials must be >= 1");
  const RngStream base = derive_stream(opt.seed, {0x5E21});
  const double w = 1.0 - opt.alpha;
  std::vector<VerifyRow> rows;

  // Exact identities on random layers with Kaiming-initialized INRs.
  {
    double worst = 0.0;
    LockOptions lo;
    lo.alpha = opt.alpha;
    lo.levels = opt.levels;
    lo.output_init = InrOutputInit::kaiming;
    for (std::size_t l = 0; l < 100; ++l) {
      const RngStream s = base.child({1, l});
      Rng shape(s.child(9));
      const InrLinearLayer layer(2 + shape.below(15), 2 + shape.below(31), lo, s);
      worst = std::max(worst, wrong_key_error_stats(layer, std::nullopt, 3, s.child(1)).max_identity_residual);
      worst = std::max(worst, strip_error_stats(layer, std::nullopt, 3, s.child(2)).max_identity_residual);
    }
    rows.push_back({"exact identities, max residual (100 layers)", worst, 0.0, "<= 1e-12", worst <= 1e-12});
  }

  const std::size_t n_syn = 128;
  const ErrorStats wk = wrong_key_error_stats_synthetic(n_syn, opt.alpha, opt.trials, base.child(2));
  rows.push_back({"wrong-key mean eps^2 vs 2(1-a)^2 sigma^2", wk.mean_sq_error, 2.0 * w * w, "5% rel",
                  detail::within_relative(wk.mean_sq_error, 2.0 * w * w, 0.05)});
  rows.push_back({"wrong-key mean eps within 3 SE of 0", wk.mean_error, 0.0,
                  detail::concat("3 SE = ", 3.0 * wk.mean_error_se),
                  std::abs(wk.mean_error) <= 3.0 * wk.mean_error_se || wk.mean_sq_error == 0.0});
  const ErrorStats st = strip_error_stats_synthetic(n_syn, opt.alpha, opt.trials, base.child(3));
  rows.push_back({"strip mean eps^2 vs (1-a)^2 sigma^2", st.mean_sq_error, w * w, "5% rel",
                  detail::within_relative(st.mean_sq_error, w * w, 0.05)});

  // Gradient mismatch over 50 key draws on a locked logit layer.
  {
    auto [model, data] = detail::mismatch_fixture(16, opt.alpha, opt.levels, 32, base.child(4));
    std::vector<std::size_t> batch(data.size());
    std::iota(batch.begin(), batch.end(), 0);
    const auto& layer = model.locked_layer("decoder.1");
    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
    bool gaps_positive = true;
    for (std::size_t d = 0; d < 50; ++d) {
      Rng rng(base.child({5, d}));
      const PermutationKey truth = generate_key(16, rng);
      const PermutationKey attack = generate_key(16, rng);
      const auto rep = gradient_mismatch(model, data, batch, LockState{{"decoder.1", truth}},
                                         LockState{{"decoder.1", attack}});
      const BlockGap& th = rep.block("theta");
      if (std::isfinite(th.cosine)) sum += th.cosine, sum_sq += th.cosine * th.cosine, ++n;
      if (!functionally_equivalent(layer, truth, attack) && rep.total.norm_true > 0.0)
        gaps_positive = gaps_positive && !gap_is_zero(rep.total);
    }
    if (opt.alpha < 1.0) {
      const double mean = n ? sum / static_cast<double>(n) : 0.0;
      const double se = n > 1 ? std::sqrt(std::max(0.0, sum_sq / n - mean * mean) / (n - 1.0)) : 0.0;
      rows.push_back({"theta-cosine mean within 3 SE of 0 (50 draws)", mean, 0.0,
                      detail::concat("3 SE = ", 3.0 * se), n == 50 && std::abs(mean) <= 3.0 * se});
    }
    rows.push_back({"gradient gap > 0 for differing keys", gaps_positive ? 1.0 : 0.0, 1.0, "all draws",
                    gaps_positive});
  }

  // Exhaustive 4-output layer: gap is zero exactly for equivalent keys.
  {
    auto [model, data] = detail::mismatch_fixture(4, opt.alpha, opt.levels, 32, base.child(6));
    std::vector<std::size_t> batch(data.size());
    std::iota(batch.begin(), batch.end(), 0);
    const auto& layer = model.locked_layer("decoder.1");
    std::vector<std::size_t> p{0, 1, 2, 3};
    std::vector<PermutationKey> all;
    do all.emplace_back(p);
    while (std::next_permutation(p.begin(), p.end()));
    const PermutationKey truth = all[Rng(base.child(7)).below(all.size())];
    std::size_t agree = 0;
    for (const auto& k : all) {
      const auto rep = gradient_mismatch(model, data, batch, LockState{{"decoder.1", truth}},
                                         LockState{{"decoder.1", k}});
      const bool zero = gap_is_zero(rep.total);
      agree += zero == functionally_equivalent(layer, truth, k) ? 1 : 0;
    }
    rows.push_back({"24 keys: gap==0 iff functionally equivalent", static_cast<double>(agree), 24.0,
                    "24/24", agree == 24});
  }
  return rows;
}

inline std::string format_verify_table(const std::vector<VerifyRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(50) << "check" << std::setw(16) << "observed" << std::setw(14)
      << "expected" << std::setw(22) << "tolerance" << "result\n";
  for (const auto& r : rows)
    out << std::left << std::setw(50) << r.check << std::setw(16) << std::setprecision(8) << r.observed
        << std::setw(14) << r.expected << std::setw(22) << r.tolerance << (r.pass ? "PASS" : "FAIL")
        << '\n';
  return out.str();
}

//---------------------------------------------------------------------------//
// partition
//---------------------------------------------------------------------------//

/// Writes partition/manifest.json: per client, shard size, class histogram
/// and sample indices.
inline std::filesystem::path cmd_partition(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dataset train = make_datasets(cfg).first;
  const auto shards = make_partition(train, cfg.federation.n_clients, cfg.federation.partition,
                                     derive_stream(cfg.seed(), {3}));
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t k = 0; k < shards.size(); ++k) {
    nlohmann::json c{{"client", k}, {"size", shards[k].size()}, {"indices", shards[k]}};
    if (train.labeled()) {
      std::vector<std::size_t> hist(train.n_classes, 0);
      for (auto i : shards[k]) ++hist[train.labels[i]];
      c["class_counts"] = hist;
    }
    clients.push_back(std::move(c));
  }
  const nlohmann::json manifest{
      {"schema", "infl-partition-v1"},
      {"n_samples", train.size()},
      {"partition", cfg.federation.partition.kind == PartitionKind::iid ? "iid" : "dirichlet"},
      {"dirichlet_alpha", cfg.federation.partition.kind == PartitionKind::iid
                              ? nlohmann::json(nullptr)
                              : nlohmann::json(cfg.federation.partition.dirichlet_alpha)},
      {"clients", clients}};
  const auto path = std::filesystem::path(output_root(cfg)) / "partition" / "manifest.json";
  write_text_atomic(path, manifest.dump(2) + "\n");
  return path;
}

}  // namespace infl::cli
