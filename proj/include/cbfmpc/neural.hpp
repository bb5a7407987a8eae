#pragma once

#include "cbfmpc/env.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cbfmpc {

struct DenseLayer {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

/// Feedforward decay network: M ReLU hidden layers followed by a sigmoid
/// output layer. layers.back() is the output layer.
struct MlpParams {
  std::vector<DenseLayer> layers;

  int hidden_layers() const { return static_cast<int>(layers.size()) - 1; }
  int input_width() const;
  int output_width() const;
  /// Throws std::invalid_argument when the shape chain is inconsistent.
  void validate() const;
};

/// Elman recurrence: hidden layer j additionally sees W_q[j] q_{k-1}[j].
struct RnnParams {
  MlpParams mlp;
  std::vector<Eigen::MatrixXd> Wq;

  void validate() const;
};

struct RnnHiddenState {
  std::vector<Eigen::VectorXd> q;

  static RnnHiddenState zeros(const MlpParams& p);
  bool empty() const { return q.empty(); }
};

/// Network input z0 = [x, h_1..h_O, c_1..c_O].
struct NetInput {
  State x = State::Zero();
  Eigen::VectorXd h_vals;
  Eigen::VectorXd context;

  Eigen::VectorXd flatten() const;
};

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Intermediate values of one unrolled pass over a sequence of inputs.
struct NetworkPass {
  std::vector<Eigen::VectorXd> inputs;                 // z0_k
  std::vector<std::vector<Eigen::VectorXd>> pre;       // [k][j] hidden pre-activations
  std::vector<std::vector<Eigen::VectorXd>> hidden;    // [k][j] hidden outputs
  RnnHiddenState initial;                              // q_{-1}
  Eigen::MatrixXd out_pre;                             // steps x O, pre-sigmoid
  Eigen::MatrixXd out;                                 // steps x O, sigmoid outputs

  int steps() const { return static_cast<int>(inputs.size()); }
};

/// Decay-rate network shared by the feedforward and recurrent variants.
/// Flattened parameter order: for each layer W (row-major) then b; then, for
/// a recurrent network, W_q of each hidden layer.
class DecayNetwork {
 public:
  DecayNetwork() = default;
  explicit DecayNetwork(MlpParams mlp);
  explicit DecayNetwork(RnnParams rnn);

  bool recurrent() const { return recurrent_; }
  const MlpParams& mlp() const { return mlp_; }
  const std::vector<Eigen::MatrixXd>& recurrent_weights() const { return wq_; }
  RnnParams rnn_params() const { return {mlp_, wq_}; }

  int input_width() const { return mlp_.input_width(); }
  int output_width() const { return mlp_.output_width(); }
  int hidden_layers() const { return mlp_.hidden_layers(); }
  int num_parameters() const;

  Eigen::VectorXd flatten() const;
  void assign(std::span<const double> theta);
  /// (name, size) per parameter block, in flattened order.
  std::vector<std::pair<std::string, int>> blocks() const;

  /// Unrolled forward pass; the recurrence (if any) runs across the inputs.
  NetworkPass forward(const std::vector<Eigen::VectorXd>& inputs,
                      const RnnHiddenState& initial) const;

  /// Reverse-mode sweep seeded on the pre-sigmoid outputs (steps x O).
  /// Accumulates into param_grad (size num_parameters) and input_grad
  /// (one vector per step) when non-null.
  void backward(const NetworkPass& pass, const Eigen::MatrixXd& seed,
                Eigen::VectorXd* param_grad,
                std::vector<Eigen::VectorXd>* input_grad) const;

  /// Jacobian of the sigmoid outputs at the last step with respect to all
  /// parameters (O x P).
  Eigen::MatrixXd output_param_jacobian(const NetworkPass& pass, int step) const;

 private:
  MlpParams mlp_;
  std::vector<Eigen::MatrixXd> wq_;
  bool recurrent_ = false;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases; the output
/// bias is set to logit(initial_decay). Output weights are further scaled by
/// output_weight_scale so the initial decays stay close to initial_decay.
MlpParams init_mlp(int input_width, const std::vector<int>& hidden, int output_width,
                   std::mt19937_64& rng, double initial_decay = 0.9,
                   double output_weight_scale = 1.0);
RnnParams init_rnn(int input_width, const std::vector<int>& hidden, int output_width,
                   std::mt19937_64& rng, double initial_decay = 0.9,
                   double output_weight_scale = 1.0);

Eigen::VectorXd mlp_forward(const MlpParams& p, const NetInput& z);
std::pair<Eigen::VectorXd, RnnHiddenState> rnn_forward(const RnnParams& p, const NetInput& z,
                                                       const RnnHiddenState& q_prev);

/// d gamma_i / d theta for every output i (O x P), exact reverse mode with the
/// ReLU subgradient at zero taken as zero.
Eigen::MatrixXd mlp_param_jacobian(const MlpParams& p, const NetInput& z);
Eigen::MatrixXd rnn_param_jacobian(const RnnParams& p, const NetInput& z,
                                   const RnnHiddenState& q_prev);

}  // namespace cbfmpc
