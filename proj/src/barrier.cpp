#include "cbfmpc/barrier.hpp"

#include <stdexcept>

namespace cbfmpc {

double barrier_value(const Obstacle& ob, const State& s, int t) {
  const Eigen::Vector2d c = obstacle_center_at(ob, t);
  const double dx = s(0) - c(0);
  const double dy = s(1) - c(1);
  return dx * dx + dy * dy - ob.radius * ob.radius;
}

State barrier_gradient(const Obstacle& ob, const State& s, int t) {
  const Eigen::Vector2d c = obstacle_center_at(ob, t);
  return State(2.0 * (s(0) - c(0)), 2.0 * (s(1) - c(1)), 0.0, 0.0);
}

double cbf_residual(const Obstacle& ob, const State& xk, const State& xk1, double decay,
                    double slack, int t) {
  return barrier_value(ob, xk1, t + 1) - (1.0 - decay) * barrier_value(ob, xk, t) + slack;
}

double decay_penalty(const DecayParamsLod& p, const Eigen::MatrixXd& omega) {
  if (p.omega_ref.rows() != omega.rows() || p.omega_ref.cols() != omega.cols() ||
      p.p_omega.rows() != omega.rows() || p.p_omega.cols() != omega.cols()) {
    throw std::invalid_argument("decay_penalty: dimension mismatch");
  }
  return (p.p_omega.array() * (omega - p.omega_ref).array().square()).sum();
}

}  // namespace cbfmpc
