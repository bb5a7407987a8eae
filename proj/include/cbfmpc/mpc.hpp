#pragma once

#include "cbfmpc/barrier.hpp"
#include "cbfmpc/env.hpp"
#include "cbfmpc/neural.hpp"
#include "cbfmpc/nlp.hpp"

#include <Eigen/Core>

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace cbfmpc {

/// Flat, named, bounded collection of all learnable scalars.
class ThetaVector {
 public:
  struct Block {
    std::string name;
    int offset = 0;
    int size = 0;
  };

  void add_block(std::string name, const Eigen::VectorXd& values, double lower, double upper);
  void add_block(std::string name, const Eigen::VectorXd& values, const Eigen::VectorXd& lower,
                 const Eigen::VectorXd& upper);

  int size() const { return static_cast<int>(values_.size()); }
  const std::vector<Block>& blocks() const { return blocks_; }
  /// Throws std::out_of_range for an unknown name.
  const Block& block(std::string_view name) const;
  bool has_block(std::string_view name) const;

  const Eigen::VectorXd& values() const { return values_; }
  const Eigen::VectorXd& lower() const { return lower_; }
  const Eigen::VectorXd& upper() const { return upper_; }
  Eigen::VectorXd segment(std::string_view name) const;

  /// Throws std::invalid_argument on a size mismatch or an out-of-bounds entry.
  void set_values(const Eigen::VectorXd& v);
  bool within_bounds() const;

 private:
  std::vector<Block> blocks_;
  Eigen::VectorXd values_;
  Eigen::VectorXd lower_;
  Eigen::VectorXd upper_;
};

enum class Variant { Lod, Nn, Rnn };

std::string_view to_string(Variant v);
/// Accepts "lod", "nn", "rnn". Throws std::invalid_argument otherwise.
Variant parse_variant(std::string_view s);

inline constexpr double kTerminalFloor = 1e-3;

struct MpcConfig {
  int horizon = 1;
  Variant variant = Variant::Lod;
  World world;
  StageCostWeights weights;
  double w_mpc = 64e6;
  double discount = 1.0;  // applied to stage k as discount^k inside the MPC
  std::vector<int> hidden = {16, 16, 16};

  int num_obstacles() const { return world.num_obstacles(); }
  /// Network input width 4 + 2 O.
  int net_input_width() const { return kStateDim + 2 * num_obstacles(); }
  void validate() const;
};

struct ThetaInit {
  Eigen::Vector4d terminal = Eigen::Vector4d::Constant(100.0);
  double omega_ref = 1000.0;
  double p_omega = 0.4;
  double omega_ref_upper = 1000.0;
  double initial_decay = 0.9;
  double output_weight_scale = 1.0;
  double weight_bound = 1e3;
};

/// Blocks: "F" (terminal diagonal), then "omega_ref", "p_omega" (LOD, N x O
/// row-major) or the network blocks "W1", "b1", ..., "Wq1", ... (NN, RNN).
ThetaVector initial_theta(const MpcConfig& cfg, const ThetaInit& init, std::mt19937_64& rng);

/// Configuration and parameters fixed for a batch of solves.
class MpcModel {
 public:
  MpcModel(MpcConfig cfg, ThetaVector theta);

  const MpcConfig& config() const { return cfg_; }
  const ThetaVector& theta() const { return theta_; }
  const Eigen::Vector4d& terminal() const { return terminal_; }
  const DecayParamsLod& lod() const { return lod_; }
  const DecayNetwork& network() const { return net_; }
  bool has_network() const { return cfg_.variant != Variant::Lod; }

 private:
  MpcConfig cfg_;
  ThetaVector theta_;
  Eigen::Vector4d terminal_;
  DecayParamsLod lod_;
  DecayNetwork net_;
};

/// Decision layout [U (2N) | X = x_1..x_N (4N) | Sigma (N O) | Omega (N O,
/// LOD only) | state-box slacks (N)]. Sigma and Omega are indexed k O + i.
struct MpcLayout {
  int N = 0;
  int O = 0;
  bool lod = false;

  int u(int k) const { return 2 * k; }
  int x(int k) const { return 2 * N + 4 * (k - 1); }  // k in 1..N
  int sigma(int k, int i) const { return 6 * N + k * O + i; }
  int omega(int k, int i) const { return 6 * N + N * O + k * O + i; }
  int state_slack(int k) const { return 6 * N + (lod ? 2 : 1) * N * O + k; }  // k in 0..N-1 for x_{k+1}
  int size() const { return 6 * N + (lod ? 2 : 1) * N * O + N; }
};

/// One MPC instance: the value, action-value or exploratory program at a state.
class MpcNlp : public NlpProblem {
 public:
  MpcNlp(const MpcModel& model, const State& s, int t, std::optional<Action> fixed_action,
         const Eigen::Vector2d& xi, RnnHiddenState hidden);

  const MpcModel& model() const { return *model_; }
  const MpcLayout& layout() const { return lay_; }
  const State& state() const { return s_; }
  int time() const { return t_; }
  const std::optional<Action>& fixed_action() const { return action_; }
  const Eigen::Vector2d& perturbation() const { return xi_; }
  const RnnHiddenState& hidden() const { return hidden_; }

  int num_variables() const override { return lay_.size(); }
  int num_equalities() const override;
  int num_inequalities() const override;
  Eigen::VectorXd lower_bounds() const override;
  Eigen::VectorXd upper_bounds() const override;
  /// Cold start: zero inputs, states rolled out under zero input, slacks at
  /// the violation magnitude, omega at its reference clipped into the box.
  Eigen::VectorXd initial_point() const override;
  /// Keeps the inputs (and omega) of z, re-rolls the states from s, and
  /// resets slacks to the violation magnitude.
  Eigen::VectorXd repair(const Eigen::VectorXd& z) const;

  void evaluate(const Eigen::VectorXd& z, bool derivatives, NlpEval& out) const override;
  Eigen::MatrixXd lagrangian_hessian(const Eigen::VectorXd& z, const Eigen::VectorXd& eq_mult,
                                     const Eigen::VectorXd& ineq_mult) const override;
  Eigen::MatrixXd convex_hessian(const Eigen::VectorXd& z, const Eigen::VectorXd& eq_mult,
                                 const Eigen::VectorXd& ineq_mult) const override;
  int num_parameters() const override;
  Eigen::VectorXd parameter_gradient(const Eigen::VectorXd& z, const Eigen::VectorXd& eq_mult,
                                     const Eigen::VectorXd& ineq_mult) const override;

  /// Predicted states x_0..x_N.
  std::vector<State> states(const Eigen::VectorXd& z) const;
  /// Decay per (step, obstacle): omega for LOD, network output otherwise.
  Eigen::MatrixXd decays(const Eigen::VectorXd& z) const;
  /// Hidden state after step 0 of the network pass at z (empty unless RNN).
  RnnHiddenState first_hidden(const Eigen::VectorXd& z) const;
  /// On/off pattern of every hidden ReLU unit over the horizon (empty for LOD).
  std::vector<bool> activation_pattern(const Eigen::VectorXd& z) const;
  /// Objective without the perturbation term.
  double unperturbed_value(const Eigen::VectorXd& z) const;

  /// Named blocks, bounds and constraint list as a single-line JSON record.
  std::string dump() const;

 private:
  struct Network;
  Network run_network(const std::vector<State>& xs, bool derivatives) const;
  int cbf_row(int k, int i) const { return k * lay_.O + i; }

  const MpcModel* model_;
  MpcLayout lay_;
  State s_;
  int t_;
  std::optional<Action> action_;
  Eigen::Vector2d xi_;
  RnnHiddenState hidden_;
};

MpcNlp build_value_problem(const MpcModel& model, const State& s, int t,
                           const RnnHiddenState& hidden = {});
/// Throws std::invalid_argument when a lies outside the action box.
MpcNlp build_action_value_problem(const MpcModel& model, const State& s, const Action& a, int t,
                                  const RnnHiddenState& hidden = {});
MpcNlp build_exploratory_problem(const MpcModel& model, const State& s, const Eigen::Vector2d& xi,
                                 int t, const RnnHiddenState& hidden = {});

struct MpcOutcome {
  Action u0 = Action::Zero();
  double value = 0.0;          // optimal objective (perturbation included)
  Eigen::MatrixXd slack;       // N x O CBF slacks
  Eigen::VectorXd state_slack; // N
  Eigen::MatrixXd decay;       // N x O, omega* or gamma
  RnnHiddenState hidden0;      // hidden state after prediction step 0
  NlpSolution solution;
  bool failed = false;

  double slack_total() const { return slack.sum() + state_slack.sum(); }
};

/// Solves the instance; on failure u0 is the final iterate's input clipped to
/// the action box and the outcome is flagged.
MpcOutcome solve_mpc(const MpcNlp& problem, const SolverConfig& solver = {},
                     const std::optional<Eigen::VectorXd>& warm_start = std::nullopt);

/// Receding-horizon bookkeeping: shifted warm starts and the recurrent state
/// carried across real time steps.
class MpcPolicy {
 public:
  MpcPolicy(const MpcModel& model, SolverConfig solver = {});

  /// Start of an episode: no warm start, zero hidden state.
  void reset();
  /// Switches to updated parameters keeping warm start and hidden state.
  void rebind(const MpcModel& model) { model_ = &model; }
  /// Exploratory solve at (s, t); advances the warm start and hidden state.
  MpcOutcome act(const State& s, int t, const Eigen::Vector2d& xi = Eigen::Vector2d::Zero());
  /// Hidden state that the next act() call will use.
  const RnnHiddenState& hidden() const { return hidden_; }
  /// Warm start for the next time step derived from the last act().
  const std::optional<Eigen::VectorXd>& shifted() const { return shifted_; }
  /// Last exploratory solution (unshifted).
  const std::optional<Eigen::VectorXd>& last() const { return last_; }

 private:
  const MpcModel* model_;
  SolverConfig solver_;
  RnnHiddenState hidden_;
  std::optional<Eigen::VectorXd> shifted_;
  std::optional<Eigen::VectorXd> last_;
};

/// Shifts a solution one step forward in time (drops u_0, repeats u_{N-1}).
Eigen::VectorXd shift_solution(const MpcLayout& lay, const Eigen::VectorXd& z);

}  // namespace cbfmpc
