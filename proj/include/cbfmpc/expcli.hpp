#pragma once

#include "cbfmpc/gradcheck.hpp"
#include "cbfmpc/mpc.hpp"
#include "cbfmpc/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cbfmpc {

/// Everything needed to reproduce one experiment.
struct ExperimentConfig {
  std::string preset;  // empty when built from scratch
  MpcConfig mpc;
  ThetaInit init;
  TrainerConfig trainer;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  int gradcheck_trials = 20;
  double max_failure_rate = 0.05;  // evaluate fails above this fraction of failed solves

  void validate() const;
};

enum class ConfigErrorKind { Io, Parse, Schema, PresetConflict };

class ConfigError : public std::runtime_error {
 public:
  ConfigError(ConfigErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ConfigErrorKind kind() const { return kind_; }

 private:
  ConfigErrorKind kind_;
};

/// Names accepted by preset_config.
std::vector<std::string> preset_names();
/// Throws ConfigError(Schema) for an unknown name.
ExperimentConfig preset_config(std::string_view name);

/// Parses a JSON document. A "preset" key expands first and the remaining
/// keys override it; overriding a preset's variant, or setting keys that do
/// not apply to the preset's variant, is a PresetConflict.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON form of a config (all fields, fixed key order). Parsing the
/// result gives back an equal config.
std::string config_to_json(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// theta0 for the config, drawn from its seed.
ThetaVector initial_theta(const ExperimentConfig& cfg);

/// Snapshot document with named blocks, values and bounds.
std::string theta_to_json(const ThetaVector& theta);
ThetaVector theta_from_json(std::string_view text);
ThetaVector load_theta(const std::filesystem::path& path);
/// Throws ConfigError(Schema) when block names or sizes differ from the
/// config's parameterization.
void check_theta_matches(const ExperimentConfig& cfg, const ThetaVector& theta);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double x);

struct ResultBundle {
  ExperimentConfig config;
  std::vector<EpisodeRecord> episodes;
  std::optional<Rollout> trajectory;  // final deterministic rollout
  std::optional<ThetaVector> theta;
  double runtime_seconds = 0.0;
  std::string command;
};

/// Writes trajectory.csv, costs.csv, theta.json, training_log.jsonl,
/// summary.json and meta.json (the ones the bundle has data for; costs.csv
/// and meta.json always). Identical bundles give identical bytes.
void export_bundle(const ResultBundle& bundle, const std::filesystem::path& dir);

std::string trajectory_csv(const Rollout& r, int num_obstacles);
std::string costs_csv(const std::vector<EpisodeRecord>& episodes);
std::string episode_json(const EpisodeRecord& r);

/// Q-learning from the config's theta0; the bundle holds the log, the final
/// theta and its deterministic rollout.
ResultBundle run_train(const ExperimentConfig& cfg, const EpisodeCallback& on_episode = {});
ResultBundle run_evaluate(const ExperimentConfig& cfg, const ThetaVector& theta);

struct GradientReport {
  int trials = 0;
  int usable = 0;
  double max_rel_error = 0.0;
  std::vector<GradCheckResult> results;

  bool passed(double tol = 1e-4) const { return usable > 0 && max_rel_error <= tol; }
};

/// Random (s, a, theta, t) instances for the config's variant and horizon.
GradientReport run_check_gradients(const ExperimentConfig& cfg, int trials,
                                   Execution exec = Execution::Serial);

}  // namespace cbfmpc
