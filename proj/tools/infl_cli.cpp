// Command-line front end: train, attack, verify, partition.
//
// Exit status: 0 ok, 1 invalid input, 2 runtime failure, 3 verify check failed.
// Failures also print one JSON error record to stderr.

#include <iostream>

#include "CLI11.hpp"
#include "infl/cli/commands.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kVerifyFailed = 3 };

int fail(const std::string& command, Exit code, const std::string& message) {
  const nlohmann::json record{{"error",
                               {{"command", command},
                                {"kind", code == kValidation ? "validation" : code == kVerifyFailed ? "verify" : "runtime"},
                                {"message", message}}},
                              {"exit_code", static_cast<int>(code)}};
  std::cerr << record.dump() << std::endl;
  return code;
}

void log_defaults(const infl::cli::ExperimentConfig& cfg) {
  if (!cfg.preset.empty()) std::clog << "preset: " << cfg.preset << '\n';
  for (const auto& d : cfg.defaults_applied) std::clog << "default: " << d << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  using namespace infl;
  using namespace infl::cli;

  CLI::App app{"Federated training with INR-locked layers"};
  app.require_subcommand(1);

  std::string config_path, preset;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "run a federation and write checkpoint, keys and metrics");
  train->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  train->add_option("--preset", preset, "named preset applied before the config file");
  train->add_flag("--quiet", quiet, "suppress per-round progress");

  std::string checkpoint_path, key_dir, kind = "all";
  std::uint64_t attack_seed = 0;
  auto* attack = app.add_subcommand("attack", "evaluate attacks on a checkpoint");
  attack->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  attack->add_option("--keys", key_dir, "directory holding a client key file");
  attack->add_option("--kind", kind, "identity_key | random_key | strip_inr | all")->required();
  attack->add_option("--seed", attack_seed, "seed for random_key draws and error trials");

  VerifyOptions vopt;
  auto* verify = app.add_subcommand("verify", "numerically check the lock's error laws");
  verify->add_option("--alpha", vopt.alpha, "blend factor");
  verify->add_option("--levels", vopt.levels, "positional-encoding levels");
  verify->add_option("--trials", vopt.trials, "Monte Carlo trials");
  verify->add_option("--seed", vopt.seed, "seed");

  std::string part_config;
  auto* partition = app.add_subcommand("partition", "write client shard manifests");
  partition->add_option("--config", part_config, "config file")->required()->check(CLI::ExistingFile);
  partition->add_option("--preset", preset, "named preset applied before the config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(),
                kValidation, e.what());
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*train) {
      const ExperimentConfig cfg = parse_config(config_path, preset);
      log_defaults(cfg);
      const auto out = cmd_train(cfg);
      if (!quiet)
        for (const auto& r : out.result.history)
          std::clog << "round " << r.round << " loss " << r.global_loss << " acc " << r.global_accuracy
                    << '\n';
      std::cout << "checkpoint " << out.artifacts.checkpoint.string() << " (" << out.checkpoint_id << ")\n"
                << "metrics " << out.artifacts.metrics_csv.string() << '\n'
                << "summary " << out.artifacts.summary_json.string() << '\n';
      for (const auto& k : out.artifacts.key_files) std::cout << "key " << k.string() << '\n';
    } else if (*attack) {
      std::vector<AttackKind> kinds;
      if (kind == "all")
        kinds.assign(kAllAttacks.begin(), kAllAttacks.end());
      else
        kinds = {parse_attack_kind(kind)};
      std::optional<std::filesystem::path> keys;
      if (!key_dir.empty()) keys = key_dir;
      const auto out = cmd_attack(checkpoint_path, keys, kinds, attack_seed);
      std::cout << format_attack_csv(out.reports);
      for (const auto& p : out.written) std::clog << "wrote " << p.string() << '\n';
    } else if (*verify) {
      const auto rows = run_verify(vopt);
      std::cout << format_verify_table(rows);
      const bool ok = std::all_of(rows.begin(), rows.end(), [](const VerifyRow& r) { return r.pass; });
      if (!ok) return fail(command, kVerifyFailed, "one or more verify checks failed");
    } else if (*partition) {
      const ExperimentConfig cfg = parse_config(part_config, preset);
      log_defaults(cfg);
      std::cout << "manifest " << cmd_partition(cfg).string() << '\n';
    }
  } catch (const ValidationError& e) {
    return fail(command, kValidation, e.what());
  } catch (const std::exception& e) {
    return fail(command, kRuntime, e.what());
  }
  return kOk;
}
