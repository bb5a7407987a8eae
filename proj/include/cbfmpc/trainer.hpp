#pragma once

#include "cbfmpc/mpc.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace cbfmpc {

/// tau = L + discount V_next - Q_cur.
double td_error(double cost, double discount, double v_next, double q_cur);

/// L + w_rl * sum of slacks. Throws std::invalid_argument on negative slack.
double augment_cost(double cost, const Eigen::MatrixXd& slack, double w_rl);

/// Collects per-transition gradients; an update fires only when full.
class GradBuffer {
 public:
  explicit GradBuffer(int capacity = 1);

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(grads_.size()); }
  bool full() const { return size() >= capacity_; }
  bool empty() const { return grads_.empty(); }
  void set_capacity(int capacity);
  /// Throws std::logic_error when already full.
  void push(Eigen::VectorXd g);
  /// Mean of the stored gradients. Throws std::logic_error when empty.
  Eigen::VectorXd mean() const;
  void clear() { grads_.clear(); }

 private:
  int capacity_;
  std::vector<Eigen::VectorXd> grads_;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  Eigen::VectorXd lr;  // per-coordinate learning rate
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState create(const Eigen::VectorXd& lr);
};

/// Adam candidate step for gradient g (advances the moment estimates).
Eigen::VectorXd adam_step(AdamState& adam, const Eigen::VectorXd& g);

/// Minimizer of |d - step|^2 subject to lower <= theta + d <= upper. For a
/// box this separates into per-coordinate clamping.
Eigen::VectorXd project_step(const Eigen::VectorXd& theta, const Eigen::VectorXd& step,
                             const Eigen::VectorXd& lower, const Eigen::VectorXd& upper);

/// Averages the buffer, applies the projected Adam step to theta and clears
/// the buffer. Throws std::logic_error when the buffer is not full.
void buffered_update(GradBuffer& buffer, AdamState& adam, ThetaVector& theta);

/// Zero-mean Gaussian exploration with per-channel std std0 * decay^episode.
class NoiseSchedule {
 public:
  NoiseSchedule(Eigen::Vector2d std0, double decay, std::uint64_t seed);

  Eigen::Vector2d std_at(int episode) const;
  Eigen::Vector2d sample(int episode);

 private:
  Eigen::Vector2d std0_;
  double decay_;
  std::mt19937_64 rng_;
};

struct TrainerConfig {
  int episodes = 500;
  int steps = 100;             // T
  double discount = 0.99;      // TD target
  double w_rl = 1e3;
  double learning_rate = 1e-3;
  std::map<std::string, double> block_learning_rates;  // overrides per theta block
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int buffer_size = 0;         // 0: one episode's transitions
  Eigen::Vector2d noise_std = Eigen::Vector2d::Constant(0.5);
  double noise_decay = 0.99;
  std::uint64_t seed = 0;
  int max_failures = 10;       // per episode before aborting it
  int eval_every = 0;          // deterministic evaluation period (0: never)
  SolverConfig solver;
};

/// One closed-loop rollout.
struct Rollout {
  std::vector<State> states;    // T + 1 entries
  std::vector<Action> actions;  // T entries
  Eigen::MatrixXd h;            // (T + 1) x O barrier values
  Eigen::MatrixXd decay;        // T x O first-step decays
  Eigen::VectorXd slack;        // T, total slack of each solve
  double cost = 0.0;            // undiscounted sum of stage costs
  double slack_total = 0.0;
  double min_h = 0.0;
  int failures = 0;
  bool aborted = false;
};

/// Deterministic rollout of the MPC policy with exploration off.
Rollout evaluate_policy(const MpcModel& model, int steps, const SolverConfig& solver = {},
                        int max_failures = -1);

struct EpisodeRecord {
  int episode = 0;
  double cost = 0.0;           // unaugmented cumulative cost of the training rollout
  double slack_total = 0.0;
  double slack_penalty = 0.0;  // w_rl * slack_total
  double min_h = 0.0;
  double mean_abs_td = 0.0;
  int transitions = 0;
  int failures = 0;
  bool aborted = false;
  int updates = 0;
  Eigen::Vector2d noise_std = Eigen::Vector2d::Zero();
  std::optional<double> eval_cost;
  std::optional<double> eval_min_h;
  Eigen::VectorXd theta;       // after the episode's updates
};

struct TrainingLog {
  std::vector<EpisodeRecord> episodes;
  ThetaVector theta;
};

using EpisodeCallback = std::function<void(const EpisodeRecord&)>;

/// Q-learning loop over episodes with exploration, TD errors, buffered
/// averaged gradients and projected Adam updates.
TrainingLog run_training(const MpcConfig& cfg, const ThetaVector& theta0, const TrainerConfig& tc,
                         const EpisodeCallback& on_episode = {});

/// Per-coordinate learning rates from the default and block overrides.
Eigen::VectorXd learning_rates(const ThetaVector& theta, const TrainerConfig& tc);

}  // namespace cbfmpc
