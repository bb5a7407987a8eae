#include "cbfmpc/expcli.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

using namespace cbfmpc;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

// Flag beats environment beats config file.
std::string output_dir(const ExperimentConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  return env_or("CBFMPC_OUT_DIR", cfg.output_dir);
}

double failure_rate(int failures, long solves) {
  return solves > 0 ? static_cast<double>(failures) / static_cast<double>(solves) : 0.0;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_flag) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  const std::string out = output_dir(cfg, out_flag);
  spdlog::info("training {} ({} episodes x {} steps, seed {})", cfg.preset.empty() ? config_path : cfg.preset,
               cfg.trainer.episodes, cfg.trainer.steps, cfg.seed);
  const ResultBundle b = run_train(cfg, [](const EpisodeRecord& r) {
    spdlog::debug("episode {} cost {:.1f} min_h {:.4f} slack {:.3g} |td| {:.3g} failures {}", r.episode, r.cost,
                  r.min_h, r.slack_total, r.mean_abs_td, r.failures);
    if (r.eval_cost) spdlog::info("episode {} evaluated cost {:.1f} min_h {:.4f}", r.episode, *r.eval_cost, *r.eval_min_h);
  });
  export_bundle(b, out);
  int failures = 0;
  for (const EpisodeRecord& r : b.episodes) failures += r.failures;
  const double rate = failure_rate(failures, static_cast<long>(b.episodes.size()) * cfg.trainer.steps);
  spdlog::info("final rollout cost {:.1f} min_h {:.4f}; bundle in {}", b.trajectory->cost, b.trajectory->min_h, out);
  if (rate > cfg.max_failure_rate) {
    spdlog::error("solver failure rate {:.3f} exceeds {:.3f}", rate, cfg.max_failure_rate);
    return kExitFailure;
  }
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& snapshot, const std::string& out_flag) {
  const ExperimentConfig cfg = load_config(config_path);
  const ThetaVector theta = snapshot.empty() ? initial_theta(cfg) : load_theta(snapshot);
  const std::string out = output_dir(cfg, out_flag);
  const ResultBundle b = run_evaluate(cfg, theta);
  export_bundle(b, out);
  const Rollout& r = *b.trajectory;
  std::cout << "cumulative_cost " << format_double(r.cost) << "\nmin_h " << format_double(r.min_h)
            << "\nfailures " << r.failures << "\n";
  const double rate = failure_rate(r.failures, static_cast<long>(r.actions.size()));
  if (rate > cfg.max_failure_rate) {
    spdlog::error("solver failure rate {:.3f} exceeds {:.3f}", rate, cfg.max_failure_rate);
    return kExitFailure;
  }
  return 0;
}

int cmd_check_gradients(const std::string& config_path, std::optional<int> trials, bool parallel) {
  const ExperimentConfig cfg = load_config(config_path);
  const int n = trials.value_or(cfg.gradcheck_trials);
  const GradientReport rep = run_check_gradients(cfg, n, parallel ? Execution::Parallel : Execution::Serial);
  for (size_t i = 0; i < rep.results.size(); ++i) {
    const GradCheckResult& r = rep.results[i];
    spdlog::debug("instance {} solved {} degenerate {} stable {} rel_error {:.3g}", i, r.solved, r.degenerate,
                  r.active_set_stable, r.rel_error);
  }
  std::cout << "instances " << rep.trials << "\nusable " << rep.usable << "\nmax_rel_error "
            << format_double(rep.max_rel_error) << "\n";
  if (!rep.passed()) {
    spdlog::error("gradient check failed");
    return kExitFailure;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("cbfmpc");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(env_or("CBFMPC_LOG_LEVEL", "info")));

  CLI::App app{"Safe MPC-based Q-learning with learnable control barrier functions"};
  app.require_subcommand(1);

  std::string config, snapshot, out, preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  bool parallel = false;

  auto* train = app.add_subcommand("train", "Run the training loop and write a result bundle");
  train->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out, "Output directory (default: $CBFMPC_OUT_DIR, then the config)");

  auto* evaluate = app.add_subcommand("evaluate", "Deterministic rollout of a parameter snapshot");
  evaluate->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--snapshot", snapshot, "theta.json snapshot (default: theta0 of the config)")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--out", out, "Output directory (default: $CBFMPC_OUT_DIR, then the config)");

  auto* check = app.add_subcommand("check-gradients", "Compare envelope gradients with finite differences");
  check->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  check->add_option("--trials", trials, "Number of random instances");
  check->add_flag("--parallel", parallel, "Evaluate finite differences with OpenMP");

  auto* show = app.add_subcommand("preset", "Print the full config of a preset");
  show->add_option("name", preset, "Preset name")->required()->check(CLI::IsMember(preset_names()));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config, seed, out);
    if (*evaluate) return cmd_evaluate(config, snapshot, out);
    if (*check) return cmd_check_gradients(config, trials, parallel);
    if (*show) {
      std::cout << config_to_json(preset_config(preset));
      return 0;
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return e.kind() == ConfigErrorKind::Io ? kExitIo : kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailure;
  }
  return 0;
}
