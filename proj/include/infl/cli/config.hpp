#pragma once

// Sectioned key=value experiment configuration with named presets.
//
//   # comment
//   [federation]
//   n_clients = 5
//   participation = 1.0
//
// Unknown sections or keys are errors; every field not set by the file or
// the preset is reported in ExperimentConfig::defaults_applied.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "infl/federation.hpp"

namespace infl::cli {

inline constexpr std::string_view kOutputRootEnv = "INFL_OUTPUT_ROOT";

struct ExperimentConfig {
  DatasetDescriptor data;
  /// Seeds data generation only. Kept apart from the run seed, which keys
  /// are derived from and which therefore never leaves the client side.
  std::uint64_t data_seed = 0;
  std::size_t eval_samples = 1000;
  ModelSpec model;
  FederationConfig federation;
  std::string output_dir = "infl_out";
  std::string preset;
  std::size_t attack_trials = 200;
  std::vector<std::string> defaults_applied;

  std::uint64_t seed() const { return federation.seed; }

  /// Derived fields: model input/output widths follow the data.
  void sync_model_to_data() {
    model.input_dim = data.n_features;
    model.task = data.kind == GeneratorKind::gaussian_mixture ? Task::classification : Task::regression;
    model.output_dim = data.kind == GeneratorKind::gaussian_mixture ? data.n_classes : data.n_outputs;
  }

  void validate() const {
    data.validate();
    detail::require(eval_samples >= 1, "run.eval_samples must be >= 1");
    model.validate();
    federation.validate();
    detail::require(federation.n_clients <= data.n_samples, "federation.n_clients (",
                    federation.n_clients, ") exceeds data.n_samples (", data.n_samples, ")");
    effective_model_spec(model, federation.method);
    detail::require(attack_trials >= 1, "attack.trials must be >= 1");
    detail::require(!output_dir.empty(), "run.output_dir must be nonempty");
  }
};

//---------------------------------------------------------------------------//
// Value parsing
//---------------------------------------------------------------------------//

namespace detail {
using infl::detail::concat;
using infl::detail::require;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d))
    throw ValidationError(concat("expects a number, got '", v, "'"));
  return d;
}

inline std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size())
    throw ValidationError(concat("expects a non-negative integer, got '", v, "'"));
  return out;
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

inline std::string fmt(double v) { return infl::detail::format_double(v); }
}  // namespace detail

struct FieldDef {
  std::string_view section;
  std::string_view key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define INFL_UINT_FIELD(sec, name, member)                                                       \
  FieldDef {                                                                                     \
    sec, name, [](ExperimentConfig& c, const std::string& v) { c.member = detail::parse_uint(v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                        \
  }
#define INFL_DOUBLE_FIELD(sec, name, member)                                                        \
  FieldDef {                                                                                        \
    sec, name, [](ExperimentConfig& c, const std::string& v) { c.member = detail::parse_double(v); }, \
        [](const ExperimentConfig& c) { return detail::fmt(c.member); }                              \
  }

inline const std::vector<FieldDef>& field_table() {
  static const std::vector<FieldDef> table{
      FieldDef{"run", "seed", [](ExperimentConfig& c, const std::string& v) { c.federation.seed = detail::parse_uint(v); },
               [](const ExperimentConfig& c) { return std::to_string(c.federation.seed); }},
      FieldDef{"run", "output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
               [](const ExperimentConfig& c) { return c.output_dir; }},
      INFL_UINT_FIELD("run", "eval_samples", eval_samples),

      FieldDef{"data", "task",
               [](ExperimentConfig& c, const std::string& v) {
                 if (v == "classification") c.data.kind = GeneratorKind::gaussian_mixture;
                 else if (v == "regression") c.data.kind = GeneratorKind::linear_regression;
                 else throw ValidationError(detail::concat("expects classification or regression, got '", v, "'"));
               },
               [](const ExperimentConfig& c) {
                 return std::string(c.data.kind == GeneratorKind::gaussian_mixture ? "classification" : "regression");
               }},
      INFL_UINT_FIELD("data", "seed", data_seed),
      INFL_UINT_FIELD("data", "n_samples", data.n_samples),
      INFL_UINT_FIELD("data", "n_features", data.n_features),
      INFL_UINT_FIELD("data", "n_classes", data.n_classes),
      INFL_UINT_FIELD("data", "n_outputs", data.n_outputs),
      INFL_DOUBLE_FIELD("data", "center_scale", data.center_scale),
      INFL_DOUBLE_FIELD("data", "noise_std", data.noise_std),
      FieldDef{"data", "partition",
               [](ExperimentConfig& c, const std::string& v) {
                 if (v == "iid") {
                   c.federation.partition.kind = PartitionKind::iid;
                 } else if (v.rfind("dirichlet:", 0) == 0) {
                   c.federation.partition.kind = PartitionKind::dirichlet;
                   c.federation.partition.dirichlet_alpha = detail::parse_double(v.substr(10));
                 } else {
                   throw ValidationError(detail::concat("expects iid or dirichlet:<alpha>, got '", v, "'"));
                 }
               },
               [](const ExperimentConfig& c) {
                 return c.federation.partition.kind == PartitionKind::iid
                            ? std::string("iid")
                            : "dirichlet:" + detail::fmt(c.federation.partition.dirichlet_alpha);
               }},

      INFL_UINT_FIELD("model", "hidden_dim", model.hidden_dim),
      INFL_UINT_FIELD("model", "residual_blocks", model.n_residual_blocks),
      INFL_UINT_FIELD("model", "decoder_hidden", model.decoder_hidden),
      INFL_DOUBLE_FIELD("model", "dropout", model.dropout_rate),
      FieldDef{"model", "locked_layers",
               [](ExperimentConfig& c, const std::string& v) { c.model.locked_layers = detail::parse_list(v); },
               [](const ExperimentConfig& c) { return detail::join(c.model.locked_layers); }},
      FieldDef{"model", "lora_layers",
               [](ExperimentConfig& c, const std::string& v) { c.model.lora_layers = detail::parse_list(v); },
               [](const ExperimentConfig& c) { return detail::join(c.model.lora_layers); }},

      INFL_DOUBLE_FIELD("lock", "alpha", model.lock.alpha),
      INFL_UINT_FIELD("lock", "levels", model.lock.levels),
      INFL_UINT_FIELD("lock", "inr_hidden", model.lock.inr_hidden),
      INFL_UINT_FIELD("lock", "inr_depth", model.lock.inr_depth),
      FieldDef{"lock", "activation",
               [](ExperimentConfig& c, const std::string& v) {
                 if (v == "relu") c.model.lock.activation = InrActivation::relu;
                 else if (v == "tanh") c.model.lock.activation = InrActivation::tanh;
                 else throw ValidationError(detail::concat("expects relu or tanh, got '", v, "'"));
               },
               [](const ExperimentConfig& c) {
                 return std::string(c.model.lock.activation == InrActivation::relu ? "relu" : "tanh");
               }},
      FieldDef{"lock", "inr_output_init",
               [](ExperimentConfig& c, const std::string& v) {
                 if (v == "zero") c.model.lock.output_init = InrOutputInit::zero;
                 else if (v == "kaiming") c.model.lock.output_init = InrOutputInit::kaiming;
                 else throw ValidationError(detail::concat("expects zero or kaiming, got '", v, "'"));
               },
               [](const ExperimentConfig& c) {
                 return std::string(c.model.lock.output_init == InrOutputInit::zero ? "zero" : "kaiming");
               }},

      INFL_UINT_FIELD("lora", "rank", model.lora.rank),
      INFL_DOUBLE_FIELD("lora", "scaling", model.lora.scaling),

      INFL_UINT_FIELD("federation", "n_clients", federation.n_clients),
      INFL_DOUBLE_FIELD("federation", "participation", federation.participation),
      INFL_UINT_FIELD("federation", "local_epochs", federation.local_epochs),
      INFL_UINT_FIELD("federation", "rounds", federation.rounds),
      INFL_UINT_FIELD("federation", "batch_size", federation.batch_size),
      FieldDef{"federation", "optimizer",
               [](ExperimentConfig& c, const std::string& v) { c.federation.optimizer = parse_optimizer(v); },
               [](const ExperimentConfig& c) { return to_string(c.federation.optimizer); }},
      INFL_DOUBLE_FIELD("federation", "lr", federation.lr),
      FieldDef{"federation", "method",
               [](ExperimentConfig& c, const std::string& v) { c.federation.method = parse_method(v); },
               [](const ExperimentConfig& c) { return to_string(c.federation.method); }},
      INFL_UINT_FIELD("federation", "threads", federation.threads),
      FieldDef{"federation", "ppml_approx",
               [](ExperimentConfig& c, const std::string& v) {
                 if (v != "true" && v != "false")
                   throw ValidationError(detail::concat("expects true or false, got '", v, "'"));
                 c.federation.ppml_approx = v == "true";
               },
               [](const ExperimentConfig& c) { return std::string(c.federation.ppml_approx ? "true" : "false"); }},

      INFL_DOUBLE_FIELD("dp", "clip_norm", federation.dp.clip_norm),
      INFL_DOUBLE_FIELD("dp", "noise_multiplier", federation.dp.noise_multiplier),
      INFL_DOUBLE_FIELD("dp", "delta", federation.dp.delta),

      INFL_UINT_FIELD("attack", "trials", attack_trials),
  };
  return table;
}

#undef INFL_UINT_FIELD
#undef INFL_DOUBLE_FIELD

inline const FieldDef* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : field_table())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

//---------------------------------------------------------------------------//
// Presets
//---------------------------------------------------------------------------//

using Assignments = std::vector<std::pair<std::string, std::string>>;  // "section.key", value

inline const std::map<std::string, Assignments, std::less<>>& presets() {
  static const std::map<std::string, Assignments, std::less<>> table{
      {"proteomic",
       {{"federation.n_clients", "5"}, {"federation.participation", "1.0"},
        {"federation.local_epochs", "50"}, {"federation.rounds", "200"}, {"federation.lr", "1e-4"}}},
      {"perturbation",
       {{"federation.n_clients", "10"}, {"federation.participation", "0.5"},
        {"federation.local_epochs", "2"}, {"federation.rounds", "200"}, {"federation.lr", "5e-3"}}},
      {"spaintegration",
       {{"federation.n_clients", "3"}, {"federation.participation", "1.0"},
        {"federation.local_epochs", "2"}, {"federation.rounds", "50"}, {"federation.lr", "1e-3"}}},
      {"demo",
       {{"data.n_samples", "400"}, {"data.n_features", "16"}, {"data.n_classes", "4"},
        {"run.eval_samples", "200"}, {"model.hidden_dim", "16"}, {"model.residual_blocks", "1"},
        {"model.decoder_hidden", "16"}, {"model.locked_layers", "decoder.0,decoder.1"},
        {"federation.n_clients", "3"}, {"federation.rounds", "5"}, {"federation.local_epochs", "1"},
        {"federation.batch_size", "32"}, {"federation.lr", "5e-3"}, {"attack.trials", "20"}}},
      {"acceptance",
       {{"data.n_samples", "2000"}, {"data.n_features", "64"}, {"data.n_classes", "4"},
        {"run.eval_samples", "1000"}, {"model.locked_layers", "decoder.0,decoder.1"},
        {"lock.alpha", "0.5"}, {"lock.levels", "6"}, {"lock.inr_hidden", "8"}, {"lock.inr_depth", "3"},
        {"federation.n_clients", "5"}, {"federation.participation", "1.0"},
        {"federation.rounds", "50"}, {"federation.local_epochs", "2"}, {"federation.batch_size", "32"},
        {"federation.optimizer", "adam"}, {"federation.lr", "1e-3"}, {"federation.method", "infl"}}},
      {"ppml",
       {{"federation.method", "fl_lora_dp"}, {"dp.noise_multiplier", "2.36"},
        {"federation.ppml_approx", "true"}}},
  };
  return table;
}

//---------------------------------------------------------------------------//
// Parsing
//---------------------------------------------------------------------------//

namespace detail {
inline void apply(ExperimentConfig& cfg, const FieldDef& f, const std::string& value,
                  const std::string& where) {
  try {
    f.set(cfg, value);
  } catch (const ValidationError& e) {
    throw ValidationError(concat(where, ": [", f.section, "] ", f.key, " ", e.what()));
  }
}

inline void apply_preset(ExperimentConfig& cfg, const std::string& name, std::set<std::string>& set_fields) {
  auto it = presets().find(name);
  if (it == presets().end()) {
    std::string names;
    for (const auto& [n, _] : presets()) names += (names.empty() ? "" : ", ") + n;
    throw ValidationError(concat("unknown preset '", name, "' (", names, ")"));
  }
  cfg.preset = name;
  for (const auto& [path, value] : it->second) {
    const auto dot = path.find('.');
    const FieldDef* f = find_field(path.substr(0, dot), path.substr(dot + 1));
    apply(cfg, *f, value, "preset " + name);
    set_fields.insert(path);
  }
}
}  // namespace detail

/// Parse config text. A `preset` named on the command line is applied before
/// the file's own values; a `[run] preset = name` line in the file works the
/// same way when no command-line preset is given.
inline ExperimentConfig parse_config_text(std::string_view text, const std::string& cli_preset = {}) {
  struct Line {
    std::size_t number;
    std::string section, key, value;
  };
  std::vector<Line> lines;
  std::string file_preset;
  {
    std::istringstream in{std::string(text)};
    std::string raw, section;
    std::size_t number = 0;
    while (std::getline(in, raw)) {
      ++number;
      const auto hash = raw.find('#');
      const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
      if (line.empty()) continue;
      if (line.front() == '[') {
        detail::require(line.back() == ']', "line ", number, ": malformed section header '", line, "'");
        section = detail::trim(line.substr(1, line.size() - 2));
        static const std::set<std::string> known{"run", "data", "model", "lock", "lora", "federation", "dp", "attack"};
        detail::require(known.count(section) == 1, "line ", number, ": unknown section [", section, "]");
        continue;
      }
      const auto eq = line.find('=');
      detail::require(eq != std::string::npos, "line ", number, ": expected key = value, got '", line, "'");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      detail::require(!section.empty(), "line ", number, ": key '", key, "' appears before any [section]");
      if (section == "run" && key == "preset") {
        file_preset = value;
        continue;
      }
      detail::require(find_field(section, key) != nullptr, "line ", number, ": unknown key '", key,
                      "' in [", section, "]");
      lines.push_back({number, section, key, value});
    }
  }

  ExperimentConfig cfg;
  std::set<std::string> set_fields;
  const std::string preset = cli_preset.empty() ? file_preset : cli_preset;
  if (!preset.empty()) detail::apply_preset(cfg, preset, set_fields);
  for (const auto& l : lines) {
    detail::apply(cfg, *find_field(l.section, l.key), l.value, detail::concat("line ", l.number));
    set_fields.insert(l.section + "." + l.key);
  }
  for (const auto& f : field_table()) {
    const std::string path = std::string(f.section) + "." + std::string(f.key);
    if (set_fields.count(path) == 0) cfg.defaults_applied.push_back(path + " = " + f.get(cfg));
  }
  cfg.sync_model_to_data();
  cfg.validate();
  return cfg;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(detail::concat("cannot open '", path, "'"));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig parse_config(const std::string& path, const std::string& cli_preset = {}) {
  return parse_config_text(read_text_file(path), cli_preset);
}

/// Canonical text form; parse_config_text(format_config(c)) reproduces c.
inline std::string format_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  std::string_view section;
  for (const auto& f : field_table()) {
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

/// Output root: the environment override if set, else the configured dir.
inline std::string output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(std::string(kOutputRootEnv).c_str()); env != nullptr && *env != '\0')
    return env;
  return cfg.output_dir;
}

}  // namespace infl::cli
