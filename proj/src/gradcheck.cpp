#include "cbfmpc/gradcheck.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace cbfmpc {

GradCheckResult check_action_value_gradient(const MpcConfig& cfg, const ThetaVector& theta,
                                            const State& s, const Action& a, int t,
                                            const RnnHiddenState& hidden,
                                            const GradCheckOptions& options) {
  GradCheckResult out;
  const MpcModel model(cfg, theta);
  const MpcNlp nominal = build_action_value_problem(model, s, a, t, hidden);
  const NlpSolution sol = solve(nominal, options.solver);
  if (!sol.ok()) return out;
  out.solved = true;
  const ValueGradient vg = value_gradient(nominal, sol);
  out.envelope = vg.grad;
  out.degenerate = vg.degenerate;
  const ActiveSet active = active_set(nominal, sol, options.active_tol);
  const std::vector<bool> pattern = nominal.activation_pattern(sol.z);

  // The step grows with |V| so that cancellation noise eps |V| / h stays
  // below the truncation error.
  const double noise_step = std::cbrt(std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(sol.value)));
  const double rel = std::max(options.rel_step, noise_step);
  const Eigen::VectorXd& th = theta.values();
  Eigen::VectorXd h(th.size());
  for (Eigen::Index j = 0; j < th.size(); ++j) {
    const double room = std::min(th(j) - theta.lower()(j), theta.upper()(j) - th(j));
    h(j) = std::min(rel * std::max(1.0, std::abs(th(j))), 0.5 * room);
  }

  std::atomic<bool> stable{true};
  std::atomic<bool> failed{false};
  auto value = [&](const Eigen::VectorXd& p) {
    ThetaVector perturbed = theta;
    perturbed.set_values(p);
    const MpcModel m(cfg, std::move(perturbed));
    const MpcNlp problem = build_action_value_problem(m, s, a, t, hidden);
    const NlpSolution r = solve(problem, options.solver, sol.z);
    if (!r.ok()) failed = true;
    if (!(active_set(problem, r, options.active_tol) == active) ||
        problem.activation_pattern(r.z) != pattern)
      stable = false;
    return lagrangian_value(problem, r);
  };
  out.fd = Eigen::VectorXd::Zero(th.size());
  std::vector<int> movable;
  for (Eigen::Index j = 0; j < th.size(); ++j)
    if (h(j) > 0.0) movable.push_back(static_cast<int>(j));
  // Coordinates pinned at a bound are compared against a zero-width step
  // and therefore skipped.
  if (movable.size() == static_cast<size_t>(th.size())) {
    out.fd = central_differences(value, th, h, options.exec);
  } else {
    Eigen::VectorXd sub(movable.size()), hs(movable.size());
    for (size_t i = 0; i < movable.size(); ++i) {
      sub(i) = th(movable[i]);
      hs(i) = h(movable[i]);
    }
    auto embedded = [&](const Eigen::VectorXd& q) {
      Eigen::VectorXd full = th;
      for (size_t i = 0; i < movable.size(); ++i) full(movable[i]) = q(i);
      return value(full);
    };
    const Eigen::VectorXd g = central_differences(embedded, sub, hs, options.exec);
    for (size_t i = 0; i < movable.size(); ++i) out.fd(movable[i]) = g(i);
    for (Eigen::Index j = 0; j < th.size(); ++j)
      if (h(j) <= 0.0) out.fd(j) = out.envelope(j);
  }
  out.active_set_stable = stable && !failed;
  const double denom = std::max(1.0, out.fd.lpNorm<Eigen::Infinity>());
  out.rel_error = (out.envelope - out.fd).lpNorm<Eigen::Infinity>() / denom;
  return out;
}

}  // namespace cbfmpc
