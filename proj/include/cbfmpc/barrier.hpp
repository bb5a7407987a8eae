#pragma once

#include "cbfmpc/env.hpp"

#include <Eigen/Core>

namespace cbfmpc {

/// Strict lower bound on decay variables, realized as a closed bound.
inline constexpr double kDecayFloor = 1e-6;

/// h(s, t) = (px - cx(t))^2 + (py - cy(t))^2 - r^2.
double barrier_value(const Obstacle& ob, const State& s, int t);

/// Gradient of h with respect to the full state (velocity entries are zero).
State barrier_gradient(const Obstacle& ob, const State& s, int t);

/// h(x_{k+1}, t+1) - (1 - decay) h(x_k, t) + slack, where t is the absolute
/// time of x_k. The discrete CBF condition holds iff the residual is >= 0.
double cbf_residual(const Obstacle& ob, const State& xk, const State& xk1, double decay,
                    double slack, int t);

/// Learnable reference decays and penalty weights, one per (step, obstacle).
struct DecayParamsLod {
  Eigen::MatrixXd omega_ref;
  Eigen::MatrixXd p_omega;
};

/// sum_k sum_i P_ki (omega_ki - omega_ref_ki)^2. Throws on dimension mismatch.
double decay_penalty(const DecayParamsLod& p, const Eigen::MatrixXd& omega);

}  // namespace cbfmpc
