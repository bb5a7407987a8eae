#pragma once

#include "cbfmpc/mpc.hpp"
#include "cbfmpc/parallel.hpp"

namespace cbfmpc {

struct GradCheckOptions {
  // h_j = max(rel_step, cbrt(eps |V|)) * max(1, |theta_j|), kept inside the bounds
  double rel_step = 1e-5;
  double active_tol = 1e-7;
  SolverConfig solver;
  Execution exec = Execution::Serial;
};

struct GradCheckResult {
  Eigen::VectorXd envelope;
  Eigen::VectorXd fd;
  double rel_error = 0.0;  // |envelope - fd|_inf / max(1, |fd|_inf)
  bool solved = false;
  bool degenerate = false;
  bool active_set_stable = true;

  bool usable() const { return solved && !degenerate && active_set_stable; }
};

/// Compares the envelope gradient of Q(s, a) with central differences of
/// re-solved optimal values. The check counts as stable when neither the
/// constraint active set nor the ReLU activation pattern changes under any
/// perturbation.
GradCheckResult check_action_value_gradient(const MpcConfig& cfg, const ThetaVector& theta,
                                            const State& s, const Action& a, int t,
                                            const RnnHiddenState& hidden,
                                            const GradCheckOptions& options = {});

}  // namespace cbfmpc
