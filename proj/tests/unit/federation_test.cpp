#include <cstring>
#include <set>

#include "infl/federation.hpp"
#include "oracles.hpp"

namespace infl {
namespace {

using test::iota;

ModelSpec tiny_spec(std::size_t d, std::size_t c) {
  ModelSpec s;
  s.input_dim = d;
  s.hidden_dim = 6;
  s.n_residual_blocks = 1;
  s.decoder_hidden = 5;
  s.output_dim = c;
  s.locked_layers = {"decoder.1"};
  s.lock.levels = 3;
  s.lock.inr_hidden = 4;
  s.lock.output_init = InrOutputInit::kaiming;
  s.lora.rank = 2;
  return s;
}

Dataset mixture(std::size_t n, std::size_t d, std::size_t c, std::uint64_t seed, std::uint64_t split = 0) {
  DatasetDescriptor desc;
  desc.n_samples = n;
  desc.n_features = d;
  desc.n_classes = c;
  return make_dataset(desc, seed, split);
}

void expect_partition(const std::vector<Shard>& shards, std::size_t n) {
  std::vector<std::size_t> all;
  for (const auto& s : shards) all.insert(all.end(), s.begin(), s.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, iota(n));
}

TEST(PartitionIid, EqualShards) {
  const auto shards = partition_iid(100, 10, derive_stream(1, {}));
  ASSERT_EQ(shards.size(), 10u);
  for (const auto& s : shards) EXPECT_EQ(s.size(), 10u);
  expect_partition(shards, 100);
}

TEST(PartitionIid, SingleClientAndUneven) {
  const auto one = partition_iid(37, 1, derive_stream(1, {}));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].size(), 37u);
  expect_partition(one, 37);
  const auto uneven = partition_iid(23, 5, derive_stream(2, {}));
  std::size_t lo = 99, hi = 0;
  for (const auto& s : uneven) lo = std::min(lo, s.size()), hi = std::max(hi, s.size());
  EXPECT_LE(hi - lo, 1u);
  expect_partition(uneven, 23);
  EXPECT_THROW(partition_iid(3, 4, derive_stream(1, {})), ValidationError);
}

TEST(PartitionDirichlet, LargeAlphaIsNearlyUniform) {
  // Per-client class histograms pooled over 20 draws against the uniform split.
  const Dataset data = mixture(4000, 4, 4, 1);
  std::vector<std::size_t> class_total(4, 0);
  for (auto l : data.labels) ++class_total[l];
  const std::size_t k = 4;
  Matrix counts(k, 4);
  for (std::uint64_t draw = 0; draw < 20; ++draw) {
    const auto shards = partition_dirichlet(data, k, 1000.0, derive_stream(draw, {3}));
    expect_partition(shards, data.size());
    for (std::size_t c = 0; c < k; ++c)
      for (auto i : shards[c]) counts(c, data.labels[i]) += 1.0;
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t y = 0; y < 4; ++y) {
      const double expected = 20.0 * class_total[y] / k;
      EXPECT_LT(std::abs(counts(c, y) - expected) / expected, 0.10);
    }
}

TEST(PartitionDirichlet, SmallAlphaIsSkewed) {
  const Dataset data = mixture(1000, 4, 4, 2);
  int skewed_draws = 0;
  for (std::uint64_t draw = 0; draw < 20; ++draw) {
    const auto shards = partition_dirichlet(data, 5, 0.1, derive_stream(draw, {3}));
    expect_partition(shards, data.size());
    bool any = false;
    for (const auto& s : shards) {
      std::vector<double> h(4, 0.0);
      for (auto i : s) h[data.labels[i]] += 1.0;
      any = any || *std::max_element(h.begin(), h.end()) > 0.7 * static_cast<double>(s.size());
    }
    skewed_draws += any;
  }
  EXPECT_EQ(skewed_draws, 20);
}

TEST(PartitionDirichlet, SingleClientAndErrors) {
  const Dataset data = mixture(50, 4, 3, 3);
  const auto one = partition_dirichlet(data, 1, 0.5, derive_stream(0, {}));
  ASSERT_EQ(one.size(), 1u);
  expect_partition(one, 50);
  Rng rng(derive_stream(0, {}));
  const Dataset unlabeled = test::random_regression(10, 3, 1, rng);
  EXPECT_THROW(partition_dirichlet(unlabeled, 2, 0.5, derive_stream(0, {})), ValidationError);
  EXPECT_THROW(partition_dirichlet(data, 2, 0.0, derive_stream(0, {})), ValidationError);
}

TEST(Dirichlet, MeanMatchesSymmetricExpectation) {
  Rng rng(derive_stream(4, {}));
  Vector mean(3, 0.0);
  for (int i = 0; i < 20000; ++i) {
    const Vector p = sample_dirichlet(3, 0.5, rng);
    EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
    for (int j = 0; j < 3; ++j) mean[j] += p[j] / 20000.0;
  }
  for (double m : mean) EXPECT_NEAR(m, 1.0 / 3.0, 0.01);
}

TEST(SelectClients, Examples) {
  const RngStream s = derive_stream(5, {4});
  EXPECT_EQ(select_clients(3, 1.0, 1, s), (std::vector<std::size_t>{0, 1, 2}));
  const auto half = select_clients(10, 0.5, 7, s);
  EXPECT_EQ(half.size(), 5u);
  EXPECT_EQ(std::set<std::size_t>(half.begin(), half.end()).size(), 5u);
  for (auto id : half) EXPECT_LT(id, 10u);
  EXPECT_EQ(select_clients(10, 0.5, 7, s), half);
  EXPECT_EQ(FederationConfig::selection_size(10, 0.3), 3u);
  EXPECT_EQ(FederationConfig::selection_size(10, 0.01), 1u);
}

TEST(SelectClients, RoughlyUniform) {
  const RngStream s = derive_stream(6, {4});
  std::vector<int> hits(10, 0);
  for (std::uint64_t t = 0; t < 4000; ++t)
    for (auto id : select_clients(10, 0.3, t, s)) ++hits[id];
  for (int h : hits) EXPECT_NEAR(h, 1200, 5 * std::sqrt(1200 * 0.7));
}

struct LocalFixture : ::testing::Test {
  Dataset data = mixture(40, 5, 3, 8);
  Model model = Model::build(tiny_spec(5, 3), derive_stream(8, {1}));
  ClientKeys keys = generate_client_keys(model, 8);
  LockState state = model.lock_state(keys.keys);
  Shard shard = {1, 4, 9, 16, 25, 36};
};

TEST_F(LocalFixture, ZeroEpochsReturnsGlobalBitwise) {
  const ParamVector g = model.parameters();
  const auto r = local_train(model, data, shard, g, state, LocalTrainOptions{.epochs = 0}, derive_stream(0, {}));
  EXPECT_EQ(r.params, g);
  EXPECT_EQ(r.steps, 0u);
}

TEST_F(LocalFixture, EmptyShardFlagged) {
  const ParamVector g = model.parameters();
  const auto r = local_train(model, data, {}, g, state, LocalTrainOptions{}, derive_stream(0, {}));
  EXPECT_TRUE(r.empty_shard);
  EXPECT_EQ(r.params, g);
}

TEST_F(LocalFixture, SingleFullBatchSgdStep) {
  const ParamVector g = model.parameters();
  const auto r = local_train(model, data, shard, g, state, LocalTrainOptions{.epochs = 1, .lr = 0.05},
                             derive_stream(0, {}));
  ASSERT_EQ(r.steps, 1u);
  const Vector grad = compute_gradients(model, data, shard, state).grads.flatten();
  Vector expected = g.flatten();
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] -= 0.05 * grad[i];
  EXPECT_LT(test::max_abs_diff(r.params.flatten(), expected), 1e-12);
}

TEST_F(LocalFixture, IdenticalInputsGiveIdenticalResults) {
  const LocalTrainOptions opt{.epochs = 2, .batch_size = 4, .optimizer = OptimizerKind::adam, .lr = 0.01};
  const auto a = local_train(model, data, shard, model.parameters(), state, opt, derive_stream(3, {5, 1, 0}));
  const auto b = local_train(model, data, shard, model.parameters(), state, opt, derive_stream(3, {5, 1, 0}));
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.steps, 4u);
}

ParamVector pv(Vector v) { return ParamVector{{{"w", 1, v.size(), true, std::move(v)}}}; }

TEST(FedAvg, Examples) {
  const std::vector<ParamVector> two{pv({1, 2}), pv({3, 4})};
  EXPECT_EQ(fedavg_aggregate(two), pv({2, 3}));
  const std::vector<ParamVector> same(4, pv({0.1, -7.3}));
  EXPECT_EQ(fedavg_aggregate(same), pv({0.1, -7.3}));
  EXPECT_THROW(fedavg_aggregate(std::span<const ParamVector>{}), ValidationError);
}

TEST(FedAvg, MatchesBruteForceMean) {
  Rng rng(derive_stream(9, {}));
  std::vector<ParamVector> ups;
  for (int i = 0; i < 7; ++i) ups.push_back(pv(gaussian(rng, 50, 3.0)));
  const Vector mean = fedavg_aggregate(ups).flatten();
  for (std::size_t j = 0; j < 50; ++j) {
    double s = 0.0;
    for (const auto& u : ups) s += u.segments[0].data[j];
    EXPECT_NEAR(mean[j], s / 7.0, 1e-12);
  }
}

TEST(FedAvg, Linear) {
  Rng rng(derive_stream(10, {}));
  std::vector<ParamVector> u, v, mix;
  const double a = 0.7, b = -2.5;
  for (int i = 0; i < 5; ++i) {
    u.push_back(pv(gaussian(rng, 20, 1.0)));
    v.push_back(pv(gaussian(rng, 20, 1.0)));
    Vector m(20);
    for (int j = 0; j < 20; ++j) m[j] = a * u.back().segments[0].data[j] + b * v.back().segments[0].data[j];
    mix.push_back(pv(m));
  }
  const Vector lhs = fedavg_aggregate(mix).flatten();
  const Vector fu = fedavg_aggregate(u).flatten(), fv = fedavg_aggregate(v).flatten();
  for (int j = 0; j < 20; ++j) EXPECT_NEAR(lhs[j], a * fu[j] + b * fv[j], 1e-12);
}

TEST(FedAvg, MismatchNamesSegment) {
  const std::vector<ParamVector> ups{ParamVector{{{"embed.weight", 1, 2, true, {1, 2}}}},
                                     ParamVector{{{"embed.weight", 2, 1, true, {1, 2}}}}};
  try {
    fedavg_aggregate(ups);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("embed.weight"), std::string::npos);
  }
}

TEST(DpSanitize, ClipsLargeDeltaToNorm) {
  const DpConfig dp{.clip_norm = 1.0, .noise_multiplier = 0.0};
  const ParamVector out = dp_sanitize(pv({3, 4}), dp, derive_stream(0, {}));
  EXPECT_NEAR(trainable_norm(out), 1.0, 1e-15);
  EXPECT_EQ(dp_sanitize(pv({0.3, 0.4}), dp, derive_stream(0, {})), pv({0.3, 0.4}));
}

TEST(DpSanitize, ClipBoundAlwaysHolds) {
  Rng rng(derive_stream(11, {}));
  const DpConfig dp{.clip_norm = 0.7, .noise_multiplier = 0.0};
  for (int t = 0; t < 200; ++t) {
    const double scale = std::exp(4.0 * rng.normal());
    EXPECT_LE(trainable_norm(dp_sanitize(pv(gaussian(rng, 30, scale)), dp, derive_stream(t, {}))), 0.7);
  }
}

TEST(DpSanitize, NoiseStdMatchesMultiplier) {
  const DpConfig dp{.clip_norm = 1.0, .noise_multiplier = 1.29};
  const ParamVector out = dp_sanitize(pv(Vector(100000, 0.0)), dp, derive_stream(12, {}));
  double s = 0, s2 = 0;
  for (double v : out.segments[0].data) s += v, s2 += v * v;
  const double mean = s / 1e5;
  EXPECT_NEAR(std::sqrt(s2 / 1e5 - mean * mean) / 1.29, 1.0, 0.02);
}

TEST(DpSanitize, FrozenSegmentsUntouched) {
  const ParamVector d{{{"a", 1, 2, true, {3, 4}}, {"b", 1, 1, false, {100.0}}}};
  const ParamVector out = dp_sanitize(d, DpConfig{.noise_multiplier = 1.0}, derive_stream(0, {}));
  EXPECT_EQ(out.segments[1].data[0], 100.0);
}

FederationConfig quick_config(Method method) {
  FederationConfig cfg;
  cfg.n_clients = 3;
  cfg.local_epochs = 1;
  cfg.rounds = 1;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.lr = 0.05;
  cfg.method = method;
  cfg.seed = 21;
  return cfg;
}

TEST(RunFederation, SingleRoundEqualsMeanGradientStep) {
  const Dataset train = mixture(30, 5, 3, 13), eval = mixture(20, 5, 3, 13, 1);
  const FederationConfig cfg = quick_config(Method::infl);
  const auto res = run_federation(cfg, train, eval, tiny_spec(5, 3));
  const Model init = Model::build(res.model_spec, derive_stream(cfg.seed, {1}));
  const LockState state = init.lock_state(res.client_keys[0].keys);
  Vector mean_grad(init.parameter_count(), 0.0);
  for (const auto& shard : res.shards) {
    const Vector g = compute_gradients(init, train, shard, state).grads.flatten();
    for (std::size_t i = 0; i < g.size(); ++i) mean_grad[i] += g[i] / 3.0;
  }
  Vector expected = init.parameters().flatten();
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] -= cfg.lr * mean_grad[i];
  EXPECT_EQ(res.initial, init.parameters());
  EXPECT_LT(test::max_abs_diff(res.global.flatten(), expected), 1e-12);
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_EQ(res.history[0].selected, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(RunFederation, SingleClientMatchesCentralized) {
  const Dataset train = mixture(40, 5, 3, 14), eval = mixture(20, 5, 3, 14, 1);
  FederationConfig cfg = quick_config(Method::infl);
  cfg.n_clients = 1;
  cfg.rounds = 3;
  cfg.local_epochs = 2;
  cfg.batch_size = 8;
  cfg.optimizer = OptimizerKind::adam;
  cfg.lr = 0.01;
  const auto fed = run_federation(cfg, train, eval, tiny_spec(5, 3));
  const auto cen = train_centralized(cfg, train, eval, tiny_spec(5, 3));
  EXPECT_EQ(fed.global, cen.global);
  ASSERT_EQ(fed.history.size(), cen.history.size());
  for (std::size_t t = 0; t < fed.history.size(); ++t) EXPECT_TRUE(fed.history[t].same_outcome(cen.history[t]));
}

TEST(RunFederation, DeterministicAcrossThreadCounts) {
  const Dataset train = mixture(60, 5, 3, 15), eval = mixture(20, 5, 3, 15, 1);
  for (Method method : {Method::infl, Method::fl_dp, Method::fl_lora_dp}) {
    FederationConfig cfg = quick_config(method);
    cfg.n_clients = 4;
    cfg.participation = 0.5;
    cfg.rounds = 3;
    cfg.batch_size = 5;
    cfg.optimizer = OptimizerKind::adam;
    const auto a = run_federation(cfg, train, eval, tiny_spec(5, 3));
    cfg.threads = 4;
    const auto b = run_federation(cfg, train, eval, tiny_spec(5, 3));
    EXPECT_EQ(a.global, b.global) << to_string(method);
    EXPECT_EQ(format_metrics_csv(a.history, false), format_metrics_csv(b.history, false));
    for (const auto& r : a.history) EXPECT_EQ(r.selected.size(), 2u);
  }
}

TEST(RunFederation, BaselinesDropLockAndLoraKeepsAdapters) {
  const ModelSpec s = tiny_spec(5, 3);
  EXPECT_TRUE(effective_model_spec(s, Method::fl).locked_layers.empty());
  const ModelSpec lora = effective_model_spec(s, Method::fl_lora_dp);
  EXPECT_TRUE(lora.locked_layers.empty());
  EXPECT_EQ(lora.lora_layers.size(), 2u);
  ModelSpec unlocked = s;
  unlocked.locked_layers.clear();
  EXPECT_EQ(effective_model_spec(unlocked, Method::infl).locked_layers,
            (std::vector<std::string>{"decoder.0", "decoder.1"}));
}

TEST(RunFederation, UploadsCarryNoKeyMaterial) {
  const Dataset train = mixture(30, 5, 3, 16), eval = mixture(20, 5, 3, 16, 1);
  FederationConfig cfg = quick_config(Method::infl);
  cfg.rounds = 2;
  std::vector<std::string> seen;
  std::size_t uploads = 0;
  const auto res = run_federation(cfg, train, eval, tiny_spec(5, 3),
                                  [&](std::size_t, std::size_t, const ParamVector& p) {
                                    ++uploads;
                                    for (const auto& s : p.segments) seen.push_back(s.name);
                                  });
  EXPECT_EQ(uploads, 6u);
  for (const auto& name : seen) {
    EXPECT_EQ(name.find("key"), std::string::npos);
    EXPECT_EQ(name.find("perm"), std::string::npos);
  }
}

TEST(FederationConfig, RejectsInvalid) {
  FederationConfig c;
  c.participation = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.rounds = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.method = Method::fl_dp;
  c.dp.clip_norm = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Metrics, HeaderAndRoundTripPrecision) {
  RoundRecord r;
  r.round = 1;
  r.selected = {0, 2};
  r.local_losses = {0.1, 0.2};
  r.mean_local_loss = 0.15000000000000002;
  r.global_loss = 1.0 / 3.0;
  r.global_accuracy = 0.5;
  const std::string csv = format_metrics_csv({r}, false);
  const std::string expected_head = "# " + std::string(kMetricsSchema) + "\n" + std::string(kMetricsHeader) + "\n";
  EXPECT_EQ(csv.substr(0, expected_head.size()), expected_head);
  EXPECT_NE(csv.find("\n1,0;2,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("0.33333333333333331"), std::string::npos) << csv;
}

}  // namespace
}  // namespace infl
