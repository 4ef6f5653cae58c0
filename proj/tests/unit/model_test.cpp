#include "oracles.hpp"

namespace infl {
namespace {

using test::iota;

ModelSpec small_spec(std::size_t blocks = 1) {
  ModelSpec s;
  s.input_dim = 5;
  s.hidden_dim = 6;
  s.n_residual_blocks = blocks;
  s.decoder_hidden = 4;
  s.output_dim = 3;
  s.lock.levels = 3;
  s.lock.inr_hidden = 5;
  s.lock.output_init = InrOutputInit::kaiming;
  return s;
}

KeySet random_keys(const Model& m, std::uint64_t seed) {
  KeySet keys;
  Rng rng(derive_stream(seed, {99}));
  for (const auto& name : m.locked_layers()) keys.emplace(name, generate_key(m.locked_layer(name).n_out(), rng));
  return keys;
}

/// Perturbs every parameter so biases and LayerNorm affine terms are nonzero.
Model jitter(Model m, std::uint64_t seed, double std_dev = 0.2) {
  ParamVector p = m.parameters();
  Rng rng(derive_stream(seed, {77}));
  for (auto& s : p.segments)
    for (auto& v : s.data) v += std_dev * rng.normal();
  m.set_parameters(p);
  return m;
}

/// Forward pass assembled from named parameter segments.
Vector manual_forward(const Model& m, std::span<const double> x, const Model::Modulations& mods) {
  const ParamVector p = m.parameters();
  auto affine = [&](const std::string& prefix, const Vector& in) {
    const Segment& w = p.at(prefix + "weight");
    const Segment& b = p.at(prefix + "bias");
    Vector out(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
      out[r] = b.data[r];
      for (std::size_t c = 0; c < w.cols; ++c) out[r] += w.data[r * w.cols + c] * in[c];
    }
    return out;
  };
  auto relu = [](Vector v) {
    for (auto& e : v) e = std::max(e, 0.0);
    return v;
  };
  auto decoder = [&](std::size_t j, const Vector& in) {
    const std::string name(kDecoderLayerNames[j]);
    Vector out = affine(name + ".", in);
    if (m.spec().is_locked(name)) {
      const double a = m.spec().lock.alpha;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + (1 - a) * mods.at(name)[i];
    }
    return out;
  };
  Vector h = affine("embed.", Vector(x.begin(), x.end()));
  for (std::size_t b = 0; b < m.spec().n_residual_blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    const Vector z = affine(pre + "fc2.", relu(affine(pre + "fc1.", h)));
    double mean = 0, var = 0;
    for (double v : z) mean += v / z.size();
    for (double v : z) var += (v - mean) * (v - mean) / z.size();
    for (std::size_t i = 0; i < h.size(); ++i)
      h[i] += p.at(pre + "norm.gain").data[i] * (z[i] - mean) / std::sqrt(var + 1e-5) +
              p.at(pre + "norm.shift").data[i];
  }
  return decoder(1, relu(decoder(0, h)));
}

TEST(BuildModel, NoResidualBlocksRuns) {
  const Model m = build_model(small_spec(0), derive_stream(1, {}));
  EXPECT_EQ(m.forward(Vector(5, 0.5), KeySet{}).size(), 3u);
}

TEST(BuildModel, DeterministicFromStream) {
  auto spec = small_spec(2);
  spec.locked_layers = {"decoder.1"};
  EXPECT_EQ(build_model(spec, derive_stream(2, {})).parameters(), build_model(spec, derive_stream(2, {})).parameters());
  EXPECT_NE(build_model(spec, derive_stream(3, {})).parameters(), build_model(spec, derive_stream(2, {})).parameters());
}

TEST(BuildModel, HandCountedParameters) {
  // 4→8 embed (40) + decoder 8→8 (72) + locked 8→2 (18) + INR 4→8→8→1 (40 + 72 + 9).
  ModelSpec s;
  s.input_dim = 4;
  s.hidden_dim = 8;
  s.n_residual_blocks = 0;
  s.decoder_hidden = 8;
  s.output_dim = 2;
  s.locked_layers = {"decoder.1"};
  s.lock.levels = 2;
  s.lock.inr_hidden = 8;
  s.lock.inr_depth = 3;
  EXPECT_EQ(build_model(s, derive_stream(0, {})).parameter_count(), 251u);
}

TEST(BuildModel, RejectsInvalidSpecNamingField) {
  auto s = small_spec();
  s.hidden_dim = 0;
  try {
    build_model(s, derive_stream(0, {}));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("hidden_dim"), std::string::npos);
  }
  s = small_spec();
  s.locked_layers = {"embed"};
  EXPECT_THROW(build_model(s, derive_stream(0, {})), ValidationError);
  s = small_spec();
  s.lora_layers = {"decoder.0"};
  s.lora.rank = 5;
  EXPECT_THROW(build_model(s, derive_stream(0, {})), ValidationError);
}

TEST(BuildModel, LockingLeavesOtherLayersUnchanged) {
  auto plain = small_spec(1);
  auto locked = plain;
  locked.locked_layers = {"decoder.0", "decoder.1"};
  const ParamVector a = build_model(plain, derive_stream(4, {})).parameters();
  const ParamVector b = build_model(locked, derive_stream(4, {})).parameters();
  for (const auto& s : a.segments) EXPECT_EQ(s.data, b.at(s.name).data) << s.name;
}

TEST(ForwardModel, MissingKeyRejected) {
  auto s = small_spec();
  s.locked_layers = {"decoder.1"};
  const Model m = build_model(s, derive_stream(5, {}));
  try {
    m.forward(Vector(5, 0.0), KeySet{});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("key required"), std::string::npos);
  }
}

TEST(ForwardModel, AlphaOneEqualsUnlocked) {
  auto plain = small_spec(2);
  auto locked = plain;
  locked.locked_layers = {"decoder.0", "decoder.1"};
  locked.lock.alpha = 1.0;
  const Model a = build_model(plain, derive_stream(6, {})), b = build_model(locked, derive_stream(6, {}));
  const KeySet keys = random_keys(b, 6);
  Rng rng(derive_stream(6, {1}));
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Vector x = gaussian(rng, 5, 1.0);
    worst = std::max(worst, test::max_abs_diff(a.forward(x, KeySet{}), b.forward(x, keys)));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(ForwardModel, ZeroWeightsLeaveOnlyBiasPath) {
  Model m = jitter(build_model(small_spec(0), derive_stream(7, {})), 7);
  ParamVector p = m.parameters();
  for (auto& s : p.segments)
    if (s.name.ends_with("weight")) std::fill(s.data.begin(), s.data.end(), 0.0);
  m.set_parameters(p);
  EXPECT_EQ(m.forward(Vector(5, 0.0), KeySet{}), p.at("decoder.1.bias").data);
}

TEST(ForwardModel, MatchesManualComposition) {
  auto s = small_spec(2);
  s.locked_layers = {"decoder.1"};
  const Model m = jitter(build_model(s, derive_stream(8, {})), 8);
  const auto mods = m.modulations(m.lock_state(random_keys(m, 8)));
  Rng rng(derive_stream(8, {1}));
  for (int t = 0; t < 20; ++t) {
    const Vector x = gaussian(rng, 5, 1.0);
    EXPECT_LT(test::max_abs_diff(m.forward(x, mods), manual_forward(m, x, mods)), 1e-12);
  }
}

TEST(Loss, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u}) EXPECT_NEAR(cross_entropy(Vector(c, 0.7), 1).value, std::log(c), 1e-14);
}

TEST(Loss, SaturatedAndZero) {
  EXPECT_LT(cross_entropy(Vector{10, -10}, 0).value, 1e-4);
  EXPECT_EQ(mean_squared_error(Vector{1, 2}, Vector{1, 2}).value, 0.0);
  EXPECT_THROW(cross_entropy(Vector{1, 2}, 2), ValidationError);
  EXPECT_TRUE(std::isfinite(cross_entropy(Vector{1000, -1000}, 1).value));
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  const Vector logits{0.3, -1.2, 2.0, 0.1}, target{1, 0, -1, 0.5};
  const Vector fd_ce = finite_diff_grad([](std::span<const double> z) { return cross_entropy(z, 2).value; }, logits, 1e-6);
  EXPECT_LT(relative_error(cross_entropy(logits, 2).grad, fd_ce), 1e-8);
  const Vector fd_mse = finite_diff_grad(
      [&](std::span<const double> z) { return mean_squared_error(z, target).value; }, logits, 1e-6);
  EXPECT_LT(relative_error(mean_squared_error(logits, target).grad, fd_mse), 1e-8);
}

TEST(BackwardModel, DuplicatedBatchEqualsSingle) {
  auto s = small_spec(1);
  s.locked_layers = {"decoder.0"};
  const Model m = jitter(build_model(s, derive_stream(9, {})), 9);
  Rng rng(derive_stream(9, {1}));
  const Dataset data = test::random_classification(4, 5, 3, rng);
  const KeySet keys = random_keys(m, 9);
  const std::vector<std::size_t> one{2}, dup{2, 2, 2};
  const Vector a = backward_model(m, data, one, keys).flatten(), b = backward_model(m, data, dup, keys).flatten();
  EXPECT_LT(test::max_abs_diff(a, b), 1e-15);
  EXPECT_THROW(backward_model(m, data, std::vector<std::size_t>{}, keys), ValidationError);
}

TEST(BackwardModel, MatchesFiniteDifferencesLocked) {
  auto s = small_spec(1);
  s.locked_layers = {"decoder.0", "decoder.1"};
  s.lock.activation = InrActivation::tanh;
  const Model m = jitter(build_model(s, derive_stream(10, {})), 10);
  Rng rng(derive_stream(10, {1}));
  const Dataset data = test::random_classification(6, 5, 3, rng);
  EXPECT_LT(test::model_gradient_error(m, data, iota(6), m.lock_state(random_keys(m, 10))), 1e-5);
}

TEST(BackwardModel, MatchesFiniteDifferencesRegressionStripped) {
  auto s = small_spec(2);
  s.task = Task::regression;
  s.locked_layers = {"decoder.1"};
  const Model m = jitter(build_model(s, derive_stream(11, {})), 11);
  Rng rng(derive_stream(11, {1}));
  const Dataset data = test::random_regression(5, 5, 3, rng);
  const LockState stripped{{"decoder.1", std::nullopt}};
  EXPECT_LT(test::model_gradient_error(m, data, iota(5), stripped), 1e-5);
  // Stripping removes the θ path entirely.
  const auto g = compute_gradients(m, data, iota(5), stripped).grads;
  const auto& theta = g.at("decoder.1.inr.theta").data;
  EXPECT_TRUE(std::all_of(theta.begin(), theta.end(), [](double v) { return v == 0.0; }));
}

TEST(BackwardModel, PerfectFitGivesZeroGradient) {
  auto s = small_spec(1);
  s.task = Task::regression;
  const Model m = jitter(build_model(s, derive_stream(12, {})), 12);
  Rng rng(derive_stream(12, {1}));
  Dataset data = test::random_regression(3, 5, 3, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    const Vector y = m.forward(data.features.row(i), KeySet{});
    std::copy(y.begin(), y.end(), data.targets.row(i).begin());
  }
  const Vector g = backward_model(m, data, iota(3), KeySet{}).flatten();
  EXPECT_EQ(g, Vector(g.size(), 0.0));
}

TEST(Optimizer, SgdExample) {
  ParamVector p{{{"p", 1, 1, true, {1.0}}}}, g{{{"p", 1, 1, true, {2.0}}}};
  sgd_step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p.segments[0].data[0], 0.8);
  EXPECT_THROW(sgd_step(p, g, 0.0), ValidationError);
  EXPECT_THROW(sgd_step(p, g, -1.0), ValidationError);
}

TEST(Optimizer, FrozenSegmentsUntouched) {
  ParamVector p{{{"a", 1, 1, true, {1.0}}, {"b", 1, 1, false, {1.0}}}};
  const ParamVector g{{{"a", 1, 1, true, {1.0}}, {"b", 1, 1, false, {1.0}}}};
  sgd_step(p, g, 0.5);
  AdamState st;
  adam_step(p, g, st, AdamOptions{});
  EXPECT_EQ(p.segments[1].data[0], 1.0);
  EXPECT_NE(p.segments[0].data[0], 1.0);
}

TEST(Optimizer, AdamFirstStepIsLr) {
  for (double g0 : {0.01, 3.0, -50.0}) {
    ParamVector p{{{"p", 1, 1, true, {1.0}}}}, g{{{"p", 1, 1, true, {g0}}}};
    AdamState st;
    adam_step(p, g, st, AdamOptions{.lr = 0.01});
    EXPECT_NEAR(std::abs(p.segments[0].data[0] - 1.0), 0.01, 1e-8);
  }
}

TEST(Optimizer, AdamConvergesOnQuadratic) {
  ParamVector p{{{"p", 1, 1, true, {1.0}}}};
  AdamState st;
  for (int i = 0; i < 50; ++i) {
    const ParamVector g{{{"p", 1, 1, true, {2.0 * p.segments[0].data[0]}}}};
    adam_step(p, g, st, AdamOptions{.lr = 0.1});
  }
  EXPECT_LT(std::abs(p.segments[0].data[0]), 0.5);
}

TEST(Optimizer, RejectsMismatchedLayout) {
  ParamVector p{{{"a", 1, 2, true, {1.0, 2.0}}}};
  const ParamVector g{{{"b", 1, 2, true, {1.0, 2.0}}}};
  try {
    sgd_step(p, g, 0.1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
  }
}

TEST(Training, FullBatchSgdLossIsMonotone) {
  auto s = small_spec(1);
  s.output_dim = 2;
  s.locked_layers = {"decoder.1"};
  Model m = build_model(s, derive_stream(13, {}));
  DatasetDescriptor d;
  d.n_samples = 60;
  d.n_features = 5;
  d.n_classes = 2;
  d.noise_std = 0.3;
  const Dataset data = make_dataset(d, 13);
  const LockState state = m.lock_state(random_keys(m, 13));
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    const auto r = compute_gradients(m, data, iota(60), state);
    EXPECT_LE(r.mean_loss, prev + 1e-12) << "step " << step;
    prev = r.mean_loss;
    ParamVector p = m.parameters();
    sgd_step(p, r.grads, 0.05);
    m.set_parameters(p);
  }
}

TEST(Lora, FreshAdapterIsExactlyBase) {
  auto base_spec = small_spec(1);
  auto lora_spec = base_spec;
  lora_spec.lora_layers = {"decoder.0", "decoder.1"};
  lora_spec.lora.rank = 2;
  const Model a = build_model(base_spec, derive_stream(14, {})), b = build_model(lora_spec, derive_stream(14, {}));
  Rng rng(derive_stream(14, {1}));
  for (int t = 0; t < 20; ++t) {
    const Vector x = gaussian(rng, 5, 1.0);
    EXPECT_EQ(a.forward(x, KeySet{}), b.forward(x, KeySet{}));
  }
}

TEST(Lora, FullRankRepresentsAnyMatrix) {
  // n_in = 3 ≤ n_out = 5, rank 3: A is square and almost surely invertible, so
  // B = T A⁻¹ / factor solves factor·B·A = T.
  Rng rng(derive_stream(15, {}));
  const Linear base(3, 5, derive_stream(15, {1}));
  LoraAdapter ad = attach_lora(base, 3, 2.0, rng);
  const Matrix target = test::random_matrix(5, 3, rng);
  // Solve Aᵀ Bᵀ = Tᵀ / factor.
  Matrix tt = transpose(target);
  for (auto& v : tt.data()) v /= ad.factor();
  ad.b = transpose(test::least_squares(transpose(ad.a), tt));
  EXPECT_LT(test::max_abs_diff(ad.effective_delta().data(), target.data()), 1e-8);
  EXPECT_THROW(attach_lora(base, 4, 1.0, rng), ValidationError);
}

TEST(Lora, AdapterGradientsMatchFiniteDifferences) {
  auto s = small_spec(1);
  s.lora_layers = {"decoder.0", "decoder.1"};
  s.lora.rank = 2;
  const Model m = jitter(build_model(s, derive_stream(16, {})), 16);
  Rng rng(derive_stream(16, {1}));
  const Dataset data = test::random_classification(5, 5, 3, rng);
  EXPECT_LT(test::model_gradient_error(m, data, iota(5), LockState{}), 1e-5);
  const auto g = compute_gradients(m, data, iota(5), LockState{}).grads;
  for (const auto& seg : g.segments) {
    if (!seg.trainable) {
      EXPECT_TRUE(std::all_of(seg.data.begin(), seg.data.end(), [](double v) { return v == 0.0; })) << seg.name;
    }
  }
}

TEST(ParamVector, FlattenRoundTripIsBitwise) {
  auto s = small_spec(2);
  s.locked_layers = {"decoder.1"};
  const ParamVector p = jitter(build_model(s, derive_stream(17, {})), 17).parameters();
  const Vector flat = p.flatten();
  EXPECT_EQ(flat.size(), p.size());
  EXPECT_EQ(ParamVector::unflatten(p, flat), p);
  EXPECT_EQ(ParamVector::unflatten(p, flat).flatten(), flat);
  EXPECT_THROW(ParamVector::unflatten(p, Vector(flat.size() - 1)), ValidationError);
}

TEST(ParamVector, LayoutMismatchNamesSegment) {
  auto s = small_spec(1);
  const ParamVector a = build_model(s, derive_stream(18, {})).parameters();
  s.locked_layers = {"decoder.1"};
  const ParamVector b = build_model(s, derive_stream(18, {})).parameters();
  const auto bad = a.first_layout_mismatch(b);
  ASSERT_TRUE(bad.has_value());
  EXPECT_NE(bad->find("decoder.1"), std::string::npos);
}

TEST(Dropout, OnlyWithRngAndReproducible) {
  auto s = small_spec(1);
  s.dropout_rate = 0.5;
  const Model m = build_model(s, derive_stream(19, {}));
  const Vector x(5, 1.0);
  const auto mods = m.modulations(LockState{});
  Rng r1(derive_stream(19, {1})), r2(derive_stream(19, {1}));
  EXPECT_EQ(m.trace(x, mods, &r1).output, m.trace(x, mods, &r2).output);
  EXPECT_EQ(m.trace(x, mods).output, m.forward(x, mods));
}

}  // namespace
}  // namespace infl
