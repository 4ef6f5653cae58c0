#pragma once

// Desk-scale models: embedding → residual blocks → two-layer decoder, where
// decoder layers may be INR-locked or carry a LoRA adapter. Hand-written
// forward/backward, losses and optimizers.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "infl/data.hpp"
#include "infl/inr_lock.hpp"
#include "infl/numerics.hpp"

namespace infl {

inline constexpr std::array<std::string_view, 2> kDecoderLayerNames{"decoder.0", "decoder.1"};

struct LoraOptions {
  std::size_t rank = 4;
  double scaling = 1.0;
};

struct ModelSpec {
  std::size_t input_dim = 64;
  std::size_t hidden_dim = 64;
  std::size_t n_residual_blocks = 2;
  std::size_t decoder_hidden = 32;
  std::size_t output_dim = 4;
  std::vector<std::string> locked_layers;
  std::vector<std::string> lora_layers;
  double dropout_rate = 0.0;
  Task task = Task::classification;
  LockOptions lock;
  LoraOptions lora;

  bool is_locked(std::string_view name) const {
    return std::find(locked_layers.begin(), locked_layers.end(), name) != locked_layers.end();
  }
  bool has_lora(std::string_view name) const {
    return std::find(lora_layers.begin(), lora_layers.end(), name) != lora_layers.end();
  }

  /// (n_in, n_out) of decoder layer j.
  std::pair<std::size_t, std::size_t> decoder_shape(std::size_t j) const {
    return j == 0 ? std::pair{hidden_dim, decoder_hidden} : std::pair{decoder_hidden, output_dim};
  }

  void validate() const {
    detail::require(input_dim >= 1, "model.input_dim must be >= 1");
    detail::require(hidden_dim >= 1, "model.hidden_dim must be >= 1");
    detail::require(decoder_hidden >= 1, "model.decoder_hidden must be >= 1");
    detail::require(output_dim >= 1, "model.output_dim must be >= 1");
    detail::require(dropout_rate >= 0.0 && dropout_rate < 1.0, "model.dropout must lie in [0,1)");
    auto is_decoder = [](const std::string& n) {
      return n == kDecoderLayerNames[0] || n == kDecoderLayerNames[1];
    };
    for (const auto& n : locked_layers)
      detail::require(is_decoder(n), "model.locked_layers: '", n, "' is not a decoder layer");
    for (const auto& n : lora_layers) {
      detail::require(is_decoder(n), "model.lora_layers: '", n, "' is not a decoder layer");
      detail::require(!is_locked(n), "model.lora_layers: '", n, "' is also locked");
    }
    if (!locked_layers.empty()) lock.validate();
    for (std::size_t j = 0; j < 2; ++j) {
      if (!has_lora(std::string(kDecoderLayerNames[j]))) continue;
      auto [n_in, n_out] = decoder_shape(j);
      detail::require(lora.rank >= 1 && lora.rank <= std::min(n_in, n_out), "lora.rank ", lora.rank,
                      " must lie in 1..", std::min(n_in, n_out), " for ", kDecoderLayerNames[j]);
    }
  }
};

//---------------------------------------------------------------------------//
// ParamVector
//---------------------------------------------------------------------------//

struct Segment {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool trainable = true;
  Vector data;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered named parameter blocks; the unit of aggregation, DP and checkpoints.
class ParamVector {
 public:
  std::vector<Segment> segments;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.data.size();
    return n;
  }

  Vector flatten() const {
    Vector out;
    out.reserve(size());
    for (const auto& s : segments) out.insert(out.end(), s.data.begin(), s.data.end());
    return out;
  }

  static ParamVector unflatten(const ParamVector& layout, std::span<const double> flat) {
    detail::require(flat.size() == layout.size(), "unflatten: ", flat.size(),
                    " values for a layout of ", layout.size());
    ParamVector out = layout;
    std::size_t off = 0;
    for (auto& s : out.segments) {
      std::copy_n(flat.begin() + off, s.data.size(), s.data.begin());
      off += s.data.size();
    }
    return out;
  }

  ParamVector zeros_like() const {
    ParamVector out = *this;
    for (auto& s : out.segments) std::fill(s.data.begin(), s.data.end(), 0.0);
    return out;
  }

  /// Name of the first segment whose name, shape or flag differs, if any.
  std::optional<std::string> first_layout_mismatch(const ParamVector& other) const {
    const std::size_t n = std::min(segments.size(), other.segments.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = segments[i];
      const auto& b = other.segments[i];
      if (a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.trainable != b.trainable ||
          a.data.size() != b.data.size())
        return a.name;
    }
    if (segments.size() != other.segments.size())
      return segments.size() > n ? segments[n].name
                                 : (other.segments.size() > n ? other.segments[n].name : "");
    return std::nullopt;
  }

  bool same_layout(const ParamVector& other) const { return !first_layout_mismatch(other); }

  const Segment* find(std::string_view name) const {
    for (const auto& s : segments)
      if (s.name == name) return &s;
    return nullptr;
  }
  Segment* find(std::string_view name) {
    for (auto& s : segments)
      if (s.name == name) return &s;
    return nullptr;
  }
  const Segment& at(std::string_view name) const {
    const Segment* s = find(name);
    detail::require(s != nullptr, "no parameter segment named '", name, "'");
    return *s;
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

//---------------------------------------------------------------------------//
// Layers
//---------------------------------------------------------------------------//

struct Linear {
  Matrix weight;
  Vector bias;

  Linear() = default;
  /// Kaiming weight from stream.child(0), zero bias.
  Linear(std::size_t n_in, std::size_t n_out, const RngStream& stream) {
    Rng rng(stream.child(0));
    weight = kaiming_init(n_out, n_in, rng);
    bias.assign(n_out, 0.0);
  }

  std::size_t n_in() const { return weight.cols(); }
  std::size_t n_out() const { return weight.rows(); }

  Vector forward(std::span<const double> x) const {
    Vector y = matvec(weight, x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i];
    return y;
  }
};

/// Low-rank update (scaling / rank)·B·A on a frozen base layer.
struct LoraAdapter {
  std::size_t rank = 0;
  double scaling = 1.0;
  Matrix a;  // rank × n_in
  Matrix b;  // n_out × rank

  double factor() const { return scaling / static_cast<double>(rank); }

  Matrix effective_delta() const {
    Matrix d = matmul(b, a);
    for (auto& v : d.data()) v *= factor();
    return d;
  }
};

/// A Kaiming, B zero, so a fresh adapter leaves the base output unchanged.
inline LoraAdapter attach_lora(const Linear& base, std::size_t rank, double scaling, Rng& rng) {
  detail::require(rank >= 1 && rank <= std::min(base.n_in(), base.n_out()), "LoRA rank ", rank,
                  " must lie in 1..", std::min(base.n_in(), base.n_out()));
  return LoraAdapter{rank, scaling, kaiming_init(rank, base.n_in(), rng),
                     Matrix(base.n_out(), rank)};
}

struct LoraLinear {
  Linear base;
  LoraAdapter adapter;

  Vector forward(std::span<const double> x) const {
    Vector y = base.forward(x);
    const Vector u = matvec(adapter.a, x);
    const Vector v = matvec(adapter.b, u);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += adapter.factor() * v[i];
    return y;
  }
};

struct LayerNorm {
  static constexpr double kEps = 1e-5;
  Vector gain;
  Vector shift;

  explicit LayerNorm(std::size_t n = 0) : gain(n, 1.0), shift(n, 0.0) {}
};

struct ResidualBlock {
  Linear fc1;
  Linear fc2;
  LayerNorm norm;
};

using DecoderLayer = std::variant<Linear, InrLinearLayer, LoraLinear>;

/// How each locked layer obtains its modulation: under a key, or stripped (Δ = 0).
using LockState = std::map<std::string, std::optional<PermutationKey>>;

//---------------------------------------------------------------------------//
// Losses
//---------------------------------------------------------------------------//

struct LossValue {
  double value = 0.0;
  Vector grad;  // ∂loss/∂output
};

/// Softmax cross-entropy, max-subtracted.
inline LossValue cross_entropy(std::span<const double> logits, std::size_t label) {
  detail::require(label < logits.size(), "label ", label, " out of range for ", logits.size(),
                  " classes");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  LossValue out{log_z - logits[label], Vector(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_z);
  out.grad[label] -= 1.0;
  return out;
}

/// Mean over output components of squared error.
inline LossValue mean_squared_error(std::span<const double> output, std::span<const double> target) {
  detail::require(output.size() == target.size(), "MSE length mismatch: ", output.size(), " vs ",
                  target.size());
  LossValue out{0.0, Vector(output.size())};
  const double n = static_cast<double>(output.size());
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double d = output[i] - target[i];
    out.value += d * d / n;
    out.grad[i] = 2.0 * d / n;
  }
  return out;
}

inline LossValue sample_loss(std::span<const double> output, const Dataset& data, std::size_t i) {
  if (data.task == Task::classification) return cross_entropy(output, data.labels[i]);
  return mean_squared_error(output, data.targets.row(i));
}

//---------------------------------------------------------------------------//
// Model
//---------------------------------------------------------------------------//

/// Per-sample activations kept for backpropagation.
struct ForwardTrace {
  struct Block {
    Vector input, z1, a1, mask1, xhat;
    double inv_std = 0.0;
  };
  Vector input;
  Vector embedded;
  std::vector<Block> blocks;
  Vector decoder_input;
  Vector z0, a0, mask0;
  Vector output;
};

class Model {
 public:
  using Modulations = std::map<std::string, Vector>;

  /// Every layer is initialized from its own child stream of `stream`, so
  /// locking or adapting one layer leaves all other initial weights unchanged.
  static Model build(const ModelSpec& spec, const RngStream& stream) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    m.embed_ = Linear(spec.input_dim, spec.hidden_dim, stream.child(0));
    for (std::size_t i = 0; i < spec.n_residual_blocks; ++i) {
      const RngStream bs = stream.child({1, i});
      m.blocks_.push_back(ResidualBlock{Linear(spec.hidden_dim, spec.hidden_dim, bs.child(0)),
                                        Linear(spec.hidden_dim, spec.hidden_dim, bs.child(1)),
                                        LayerNorm(spec.hidden_dim)});
    }
    for (std::size_t j = 0; j < 2; ++j) {
      const std::string name(kDecoderLayerNames[j]);
      const RngStream ls = stream.child({2, j});
      auto [n_in, n_out] = spec.decoder_shape(j);
      if (spec.is_locked(name)) {
        m.decoder_[j] = InrLinearLayer(n_in, n_out, spec.lock, ls);
      } else if (spec.has_lora(name)) {
        Linear base(n_in, n_out, ls);
        Rng lora_rng(ls.child(2));
        auto adapter = attach_lora(base, spec.lora.rank, spec.lora.scaling, lora_rng);
        m.decoder_[j] = LoraLinear{std::move(base), std::move(adapter)};
      } else {
        m.decoder_[j] = Linear(n_in, n_out, ls);
      }
    }
    return m;
  }

  const ModelSpec& spec() const { return spec_; }
  const DecoderLayer& decoder(std::size_t j) const { return decoder_[j]; }

  std::vector<std::string> locked_layers() const {
    std::vector<std::string> out;
    for (std::size_t j = 0; j < 2; ++j)
      if (std::holds_alternative<InrLinearLayer>(decoder_[j]))
        out.emplace_back(kDecoderLayerNames[j]);
    return out;
  }

  const InrLinearLayer& locked_layer(std::string_view name) const {
    for (std::size_t j = 0; j < 2; ++j)
      if (kDecoderLayerNames[j] == name && std::holds_alternative<InrLinearLayer>(decoder_[j]))
        return std::get<InrLinearLayer>(decoder_[j]);
    throw ValidationError(detail::concat("'", name, "' is not a locked layer"));
  }

  InrLinearLayer& mutable_locked_layer(std::string_view name) {
    return const_cast<InrLinearLayer&>(std::as_const(*this).locked_layer(name));
  }

  //-------------------------------------------------------------------------//
  // Parameters
  //-------------------------------------------------------------------------//

  ParamVector parameters() const {
    ParamVector pv;
    auto add_matrix = [&](std::string name, const Matrix& m, bool trainable = true) {
      pv.segments.push_back({std::move(name), m.rows(), m.cols(), trainable, m.values()});
    };
    auto add_vector = [&](std::string name, const Vector& v, bool trainable = true) {
      pv.segments.push_back({std::move(name), v.size(), 1, trainable, v});
    };
    add_matrix("embed.weight", embed_.weight);
    add_vector("embed.bias", embed_.bias);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      add_matrix(p + "fc1.weight", blocks_[i].fc1.weight);
      add_vector(p + "fc1.bias", blocks_[i].fc1.bias);
      add_matrix(p + "fc2.weight", blocks_[i].fc2.weight);
      add_vector(p + "fc2.bias", blocks_[i].fc2.bias);
      add_vector(p + "norm.gain", blocks_[i].norm.gain);
      add_vector(p + "norm.shift", blocks_[i].norm.shift);
    }
    for (std::size_t j = 0; j < 2; ++j) {
      const std::string p = std::string(kDecoderLayerNames[j]) + ".";
      std::visit(
          [&](const auto& layer) {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, Linear>) {
              add_matrix(p + "weight", layer.weight);
              add_vector(p + "bias", layer.bias);
            } else if constexpr (std::is_same_v<T, InrLinearLayer>) {
              add_matrix(p + "weight", layer.weight());
              add_vector(p + "bias", layer.bias());
              add_vector(p + "inr.theta", layer.inr().flat_parameters());
            } else {
              add_matrix(p + "weight", layer.base.weight, false);
              add_vector(p + "bias", layer.base.bias, false);
              add_matrix(p + "lora.a", layer.adapter.a);
              add_matrix(p + "lora.b", layer.adapter.b);
            }
          },
          decoder_[j]);
    }
    return pv;
  }

  void set_parameters(const ParamVector& pv) {
    const ParamVector layout = parameters();
    if (auto bad = layout.first_layout_mismatch(pv))
      throw ValidationError(detail::concat("parameter layout mismatch at segment '", *bad, "'"));
    std::size_t s = 0;
    auto take = [&](std::span<double> dst) {
      const auto& src = pv.segments[s++].data;
      std::copy(src.begin(), src.end(), dst.begin());
    };
    take(embed_.weight.data());
    take(embed_.bias);
    for (auto& b : blocks_) {
      take(b.fc1.weight.data());
      take(b.fc1.bias);
      take(b.fc2.weight.data());
      take(b.fc2.bias);
      take(b.norm.gain);
      take(b.norm.shift);
    }
    for (auto& layer : decoder_) {
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Linear>) {
              take(l.weight.data());
              take(l.bias);
            } else if constexpr (std::is_same_v<T, InrLinearLayer>) {
              take(l.mutable_weight().data());
              take(l.mutable_bias());
              l.set_inr_parameters(pv.segments[s++].data);
            } else {
              take(l.base.weight.data());
              take(l.base.bias);
              take(l.adapter.a.data());
              take(l.adapter.b.data());
            }
          },
          layer);
    }
  }

  std::size_t parameter_count() const { return parameters().size(); }

  //-------------------------------------------------------------------------//
  // Lock state
  //-------------------------------------------------------------------------//

  /// Authorized lock state; every locked layer must have a key.
  LockState lock_state(const KeySet& keys) const {
    LockState state;
    for (const auto& name : locked_layers()) {
      auto it = keys.find(name);
      if (it == keys.end())
        throw ValidationError(detail::concat("key required for locked layer '", name, "'"));
      locked_layer(name).check_key(it->second);
      state.emplace(name, it->second);
    }
    return state;
  }

  Modulations modulations(const LockState& state) const {
    Modulations out;
    for (const auto& name : locked_layers()) {
      auto it = state.find(name);
      if (it == state.end())
        throw ValidationError(detail::concat("key required for locked layer '", name, "'"));
      const auto& layer = locked_layer(name);
      out.emplace(name, it->second ? layer.modulation(*it->second) : Vector(layer.n_out(), 0.0));
    }
    return out;
  }

  //-------------------------------------------------------------------------//
  // Forward
  //-------------------------------------------------------------------------//

  /// Full forward pass. Dropout is applied only when `dropout_rng` is given.
  ForwardTrace trace(std::span<const double> x, const Modulations& mods,
                     Rng* dropout_rng = nullptr) const {
    detail::require(x.size() == spec_.input_dim, "model input length ", x.size(), " != ",
                    spec_.input_dim);
    ForwardTrace t;
    t.input.assign(x.begin(), x.end());
    t.embedded = embed_.forward(x);
    Vector h = t.embedded;
    for (const auto& blk : blocks_) {
      ForwardTrace::Block bt;
      bt.input = h;
      bt.z1 = blk.fc1.forward(h);
      bt.a1 = bt.z1;
      for (auto& v : bt.a1) v = v > 0.0 ? v : 0.0;
      bt.mask1 = dropout_mask(bt.a1.size(), dropout_rng);
      for (std::size_t i = 0; i < bt.a1.size(); ++i) bt.a1[i] *= bt.mask1[i];
      const Vector z2 = blk.fc2.forward(bt.a1);
      layer_norm(z2, bt.xhat, bt.inv_std);
      for (std::size_t i = 0; i < h.size(); ++i)
        h[i] += blk.norm.gain[i] * bt.xhat[i] + blk.norm.shift[i];
      t.blocks.push_back(std::move(bt));
    }
    t.decoder_input = h;
    t.z0 = decoder_forward(0, h, mods);
    t.a0 = t.z0;
    for (auto& v : t.a0) v = v > 0.0 ? v : 0.0;
    t.mask0 = dropout_mask(t.a0.size(), dropout_rng);
    for (std::size_t i = 0; i < t.a0.size(); ++i) t.a0[i] *= t.mask0[i];
    t.output = decoder_forward(1, t.a0, mods);
    require_finite(t.output, "model forward");
    return t;
  }

  Vector forward(std::span<const double> x, const Modulations& mods) const {
    return trace(x, mods).output;
  }

  Vector forward(std::span<const double> x, const KeySet& keys) const {
    return forward(x, modulations(lock_state(keys)));
  }

  //-------------------------------------------------------------------------//
  // Backward
  //-------------------------------------------------------------------------//

  /// Accumulates ∂loss/∂params for one sample into `grads` (parameters()
  /// layout). θ contributions are deferred: the upstream at each locked layer
  /// is summed into `theta_upstream[name]` and expanded once per batch by
  /// finish_theta_gradients().
  void backward(const ForwardTrace& t, std::span<const double> dout, ParamVector& grads,
                std::map<std::string, Vector>& theta_upstream) const {
    auto& seg = grads.segments;
    std::size_t base = 2 + 6 * blocks_.size();
    std::array<std::size_t, 2> dec_base{base, base + decoder_segment_count(0)};

    Vector d = decoder_backward(1, t.a0, dout, seg, dec_base[1], theta_upstream);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= t.mask0[i] * (t.z0[i] > 0.0 ? 1.0 : 0.0);
    Vector dh = decoder_backward(0, t.decoder_input, d, seg, dec_base[0], theta_upstream);

    for (std::size_t b = blocks_.size(); b-- > 0;) {
      const auto& blk = blocks_[b];
      const auto& bt = t.blocks[b];
      const std::size_t o = 2 + 6 * b;
      // out = in + gain ⊙ x̂ + shift
      const std::size_t n = dh.size();
      Vector dxhat(n);
      for (std::size_t i = 0; i < n; ++i) {
        seg[o + 4].data[i] += dh[i] * bt.xhat[i];
        seg[o + 5].data[i] += dh[i];
        dxhat[i] = dh[i] * blk.norm.gain[i];
      }
      double mean_dx = 0.0;
      double mean_dx_xhat = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mean_dx += dxhat[i];
        mean_dx_xhat += dxhat[i] * bt.xhat[i];
      }
      mean_dx /= static_cast<double>(n);
      mean_dx_xhat /= static_cast<double>(n);
      Vector dz2(n);
      for (std::size_t i = 0; i < n; ++i)
        dz2[i] = bt.inv_std * (dxhat[i] - mean_dx - bt.xhat[i] * mean_dx_xhat);
      add_outer(seg[o + 2].data, 1.0, dz2, bt.a1);
      axpy(1.0, dz2, seg[o + 3].data);
      Vector da1 = matvec_transposed(blk.fc2.weight, dz2);
      for (std::size_t i = 0; i < da1.size(); ++i)
        da1[i] *= bt.mask1[i] * (bt.z1[i] > 0.0 ? 1.0 : 0.0);
      add_outer(seg[o + 0].data, 1.0, da1, bt.input);
      axpy(1.0, da1, seg[o + 1].data);
      const Vector dres = matvec_transposed(blk.fc1.weight, da1);
      for (std::size_t i = 0; i < n; ++i) dh[i] += dres[i];
    }
    add_outer(seg[0].data, 1.0, dh, t.input);
    axpy(1.0, dh, seg[1].data);
  }

  /// Expands deferred θ upstreams using the lock state's keys (stripped layers
  /// receive no θ gradient).
  void finish_theta_gradients(const LockState& state,
                              const std::map<std::string, Vector>& theta_upstream,
                              ParamVector& grads) const {
    for (const auto& [name, upstream] : theta_upstream) {
      auto it = state.find(name);
      if (it == state.end() || !it->second) continue;
      Segment* s = grads.find(name + ".inr.theta");
      locked_layer(name).accumulate_theta_gradient(*it->second, upstream, s->data);
    }
  }

 private:
  static void layer_norm(const Vector& z, Vector& xhat, double& inv_std) {
    const double n = static_cast<double>(z.size());
    double mean = 0.0;
    for (double v : z) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : z) var += (v - mean) * (v - mean);
    var /= n;
    inv_std = 1.0 / std::sqrt(var + LayerNorm::kEps);
    xhat.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) xhat[i] = (z[i] - mean) * inv_std;
  }

  Vector dropout_mask(std::size_t n, Rng* rng) const {
    Vector mask(n, 1.0);
    if (rng == nullptr || spec_.dropout_rate == 0.0) return mask;
    const double keep = 1.0 - spec_.dropout_rate;
    for (auto& m : mask) m = rng->uniform() < keep ? 1.0 / keep : 0.0;
    return mask;
  }

  std::size_t decoder_segment_count(std::size_t j) const {
    return std::holds_alternative<Linear>(decoder_[j]) ? 2 : (std::holds_alternative<InrLinearLayer>(decoder_[j]) ? 3 : 4);
  }

  Vector decoder_forward(std::size_t j, std::span<const double> x, const Modulations& mods) const {
    return std::visit(
        [&](const auto& layer) -> Vector {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, InrLinearLayer>) {
            auto it = mods.find(std::string(kDecoderLayerNames[j]));
            if (it == mods.end())
              throw ValidationError(detail::concat("key required for locked layer '",
                                                   kDecoderLayerNames[j], "'"));
            return layer.forward_with_modulation(x, it->second);
          } else {
            return layer.forward(x);
          }
        },
        decoder_[j]);
  }

  Vector decoder_backward(std::size_t j, std::span<const double> x, std::span<const double> up,
                          std::vector<Segment>& seg, std::size_t o,
                          std::map<std::string, Vector>& theta_upstream) const {
    return std::visit(
        [&](const auto& layer) -> Vector {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, Linear>) {
            add_outer(seg[o].data, 1.0, up, x);
            axpy(1.0, up, seg[o + 1].data);
            return matvec_transposed(layer.weight, up);
          } else if constexpr (std::is_same_v<T, InrLinearLayer>) {
            const double a = layer.alpha();
            add_outer(seg[o].data, a, up, x);
            axpy(a, up, seg[o + 1].data);
            auto& acc = theta_upstream[std::string(kDecoderLayerNames[j])];
            if (acc.empty()) acc.assign(up.size(), 0.0);
            axpy(1.0, up, acc);
            Vector dx = matvec_transposed(layer.weight(), up);
            for (auto& v : dx) v *= a;
            return dx;
          } else {
            // Base weights are frozen: only the adapter receives gradients.
            const double f = layer.adapter.factor();
            const Vector u = matvec(layer.adapter.a, x);
            add_outer(seg[o + 3].data, f, up, u);
            const Vector bt_up = matvec_transposed(layer.adapter.b, up);
            add_outer(seg[o + 2].data, f, bt_up, x);
            Vector dx = matvec_transposed(layer.base.weight, up);
            const Vector da = matvec_transposed(layer.adapter.a, bt_up);
            axpy(f, da, dx);
            return dx;
          }
        },
        decoder_[j]);
  }

  ModelSpec spec_;
  Linear embed_;
  std::vector<ResidualBlock> blocks_;
  std::array<DecoderLayer, 2> decoder_;
};

inline Model build_model(const ModelSpec& spec, const RngStream& stream) {
  return Model::build(spec, stream);
}

//---------------------------------------------------------------------------//
// Batch gradients and evaluation
//---------------------------------------------------------------------------//

struct GradientResult {
  ParamVector grads;
  double mean_loss = 0.0;
};

/// Mean loss and mean gradient over `batch` (indices into `data`).
inline GradientResult compute_gradients(const Model& model, const Dataset& data,
                                        std::span<const std::size_t> batch, const LockState& state,
                                        Rng* dropout_rng = nullptr) {
  detail::require(!batch.empty(), "gradient batch must be nonempty");
  const auto mods = model.modulations(state);
  GradientResult out{model.parameters().zeros_like(), 0.0};
  std::map<std::string, Vector> theta_upstream;
  for (std::size_t idx : batch) {
    detail::require(idx < data.size(), "batch index ", idx, " out of range");
    const ForwardTrace t = model.trace(data.features.row(idx), mods, dropout_rng);
    const LossValue lv = sample_loss(t.output, data, idx);
    out.mean_loss += lv.value;
    model.backward(t, lv.grad, out.grads, theta_upstream);
  }
  model.finish_theta_gradients(state, theta_upstream, out.grads);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& s : out.grads.segments) {
    if (!s.trainable) std::fill(s.data.begin(), s.data.end(), 0.0);
    for (auto& v : s.data) v *= inv;
  }
  out.mean_loss *= inv;
  return out;
}

inline ParamVector backward_model(const Model& model, const Dataset& data,
                                  std::span<const std::size_t> batch, const KeySet& keys) {
  return compute_gradients(model, data, batch, model.lock_state(keys)).grads;
}

struct EvalResult {
  double loss = 0.0;
  /// Fraction correct; NaN for regression.
  double accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline EvalResult evaluate(const Model& model, const Dataset& data, const Model::Modulations& mods) {
  detail::require(data.size() > 0, "cannot evaluate on an empty dataset");
  EvalResult r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector y = model.forward(data.features.row(i), mods);
    r.loss += sample_loss(y, data, i).value;
    if (data.task == Task::classification) {
      const auto arg = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
      correct += arg == data.labels[i] ? 1 : 0;
    }
  }
  r.loss /= static_cast<double>(data.size());
  if (data.task == Task::classification)
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

inline EvalResult evaluate(const Model& model, const Dataset& data, const LockState& state) {
  return evaluate(model, data, model.modulations(state));
}

//---------------------------------------------------------------------------//
// Optimizers
//---------------------------------------------------------------------------//

namespace detail {
inline void check_step(const ParamVector& params, const ParamVector& grads, double lr) {
  require(lr > 0.0 && std::isfinite(lr), "learning rate must be positive, got ", lr);
  if (auto bad = params.first_layout_mismatch(grads))
    throw ValidationError(concat("gradient layout mismatch at segment '", *bad, "'"));
}
}  // namespace detail

/// p ← p − lr·g on trainable segments.
inline void sgd_step(ParamVector& params, const ParamVector& grads, double lr) {
  detail::check_step(params, grads, lr);
  for (std::size_t s = 0; s < params.segments.size(); ++s) {
    if (!params.segments[s].trainable) continue;
    axpy(-lr, grads.segments[s].data, params.segments[s].data);
  }
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vector m;
  Vector v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam on trainable segments; the state spans the flattened vector.
inline void adam_step(ParamVector& params, const ParamVector& grads, AdamState& state,
                      const AdamOptions& opt) {
  detail::check_step(params, grads, opt.lr);
  const std::size_t n = params.size();
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  detail::require(state.m.size() == n, "Adam state does not match parameter count");
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  std::size_t off = 0;
  for (std::size_t s = 0; s < params.segments.size(); ++s) {
    auto& p = params.segments[s].data;
    const auto& g = grads.segments[s].data;
    if (params.segments[s].trainable) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        double& m = state.m[off + i];
        double& v = state.v[off + i];
        m = opt.beta1 * m + (1.0 - opt.beta1) * g[i];
        v = opt.beta2 * v + (1.0 - opt.beta2) * g[i] * g[i];
        p[i] -= opt.lr * (m / c1) / (std::sqrt(v / c2) + opt.eps);
      }
    }
    off += p.size();
  }
}

}  // namespace infl
