#include "cbfmpc/nlp.hpp"

#include "cbfmpc/qp.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace cbfmpc {

std::string_view to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Success: return "success";
    case SolveStatus::MaxIterations: return "max-iterations";
    case SolveStatus::NonFiniteEvaluation: return "non-finite-evaluation";
    case SolveStatus::InconsistentBounds: return "inconsistent-bounds";
    case SolveStatus::LineSearchFailure: return "line-search-failure";
    case SolveStatus::QpFailure: return "qp-failure";
  }
  return "unknown";
}

double KktResidual::max() const {
  return std::max({stationarity, feasibility, complementarity});
}

Eigen::MatrixXd NlpProblem::convex_hessian(const Eigen::VectorXd& z,
                                           const Eigen::VectorXd& eq_mult,
                                           const Eigen::VectorXd& ineq_mult) const {
  const Eigen::MatrixXd H = lagrangian_hessian(z, eq_mult, ineq_mult);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (H + H.transpose()));
  const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::VectorXd NlpProblem::parameter_gradient(const Eigen::VectorXd&, const Eigen::VectorXd&,
                                               const Eigen::VectorXd&) const {
  return Eigen::VectorXd::Zero(num_parameters());
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

bool finite(const NlpEval& ev, bool derivatives) {
  if (!std::isfinite(ev.f) || !ev.ceq.allFinite() || !ev.cin.allFinite()) return false;
  if (!derivatives) return true;
  return ev.grad.allFinite() && ev.jeq.allFinite() && ev.jin.allFinite();
}

double violation(const NlpEval& ev) {
  return ev.ceq.lpNorm<1>() + ev.cin.cwiseMax(0.0).sum();
}

struct Multipliers {
  Eigen::VectorXd eq, ineq, lower, upper;
};

// Newton iterations on the KKT equations restricted to a fixed active set.
// Returns true and overwrites the solution when the refined point is a valid
// KKT point at least as accurate as the input.
bool polish(const NlpProblem& problem, const SolverConfig& cfg, const ActiveSet& working,
            NlpSolution& sol) {
  const int n = problem.num_variables();
  const int p = problem.num_equalities();
  const int m = problem.num_inequalities();
  const Eigen::VectorXd lb = problem.lower_bounds();
  const Eigen::VectorXd ub = problem.upper_bounds();

  std::vector<char> fixed(n, 0);
  for (int j : working.lower) fixed[j] = 1;
  for (int j : working.upper) fixed[j] = 1;
  std::vector<int> free_vars;
  for (int j = 0; j < n; ++j)
    if (!fixed[j]) free_vars.push_back(j);
  const std::vector<int>& W = working.ineq;
  const int nf = static_cast<int>(free_vars.size());
  const int nw = static_cast<int>(W.size());
  const int dim = nf + p + nw;
  if (nf < p + nw) return false;

  Eigen::VectorXd z = sol.z;
  for (int j : working.lower) z(j) = lb(j);
  for (int j : working.upper) z(j) = ub(j);
  Eigen::VectorXd nu = sol.eq_mult;
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(m);
  for (int i : W) lam(i) = sol.ineq_mult(i);

  NlpEval ev;
  double best = kInf;
  for (int it = 0; it < 12; ++it) {
    problem.evaluate(z, true, ev);
    if (!finite(ev, true)) return false;
    const Eigen::VectorXd grad_l = ev.grad + ev.jeq.transpose() * nu + ev.jin.transpose() * lam;
    Eigen::VectorXd rhs(dim);
    for (int a = 0; a < nf; ++a) rhs(a) = -grad_l(free_vars[a]);
    rhs.segment(nf, p) = -ev.ceq;
    for (int b = 0; b < nw; ++b) rhs(nf + p + b) = -ev.cin(W[b]);
    const double res = rhs.lpNorm<Eigen::Infinity>();
    if (!(res < best * 0.999) && it > 0) break;
    best = res;
    if (res == 0.0) break;

    const Eigen::MatrixXd H = problem.lagrangian_hessian(z, nu, lam);
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(dim, dim);
    for (int a = 0; a < nf; ++a) {
      for (int c = 0; c < nf; ++c) K(a, c) = H(free_vars[a], free_vars[c]);
      for (int e = 0; e < p; ++e) {
        K(a, nf + e) = ev.jeq(e, free_vars[a]);
        K(nf + e, a) = ev.jeq(e, free_vars[a]);
      }
      for (int b = 0; b < nw; ++b) {
        K(a, nf + p + b) = ev.jin(W[b], free_vars[a]);
        K(nf + p + b, a) = ev.jin(W[b], free_vars[a]);
      }
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    lu.setThreshold(1e-13);
    if (lu.rank() < dim) return false;
    const Eigen::VectorXd step = lu.solve(rhs);
    if (!step.allFinite()) return false;
    for (int a = 0; a < nf; ++a) z(free_vars[a]) += step(a);
    nu += step.segment(nf, p);
    for (int b = 0; b < nw; ++b) lam(W[b]) += step(nf + p + b);
  }

  problem.evaluate(z, true, ev);
  if (!finite(ev, true)) return false;
  // Free variables must still respect their bounds.
  for (int j : free_vars) {
    const double tol = 1e-9 * (1.0 + std::abs(z(j)));
    if (z(j) < lb(j) - tol || z(j) > ub(j) + tol) return false;
    z(j) = std::clamp(z(j), lb(j), ub(j));
  }
  const Eigen::VectorXd grad_l = ev.grad + ev.jeq.transpose() * nu + ev.jin.transpose() * lam;
  Eigen::VectorXd lo = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd up = Eigen::VectorXd::Zero(n);
  for (int j : working.lower) lo(j) = grad_l(j);
  for (int j : working.upper) up(j) = -grad_l(j);

  const double dual_tol =
      cfg.tolerance * (1.0 + max_abs(lam) + std::max(max_abs(lo), max_abs(up)));
  if ((lam.array() < -dual_tol).any() || (lo.array() < -dual_tol).any() ||
      (up.array() < -dual_tol).any()) {
    return false;
  }
  lam = lam.cwiseMax(0.0);
  lo = lo.cwiseMax(0.0);
  up = up.cwiseMax(0.0);

  const KktResidual kkt = kkt_residual(problem, ev, z, nu, lam, lo, up);
  if (!(kkt.max() <= cfg.tolerance) || kkt.max() > sol.kkt.max()) return false;

  sol.z = z;
  sol.eq_mult = nu;
  sol.ineq_mult = lam;
  sol.lower_mult = lo;
  sol.upper_mult = up;
  sol.value = ev.f;
  sol.kkt = kkt;
  sol.polished = true;
  return true;
}

void log_iteration(std::ostream* os, int iter, const NlpEval& ev, const KktResidual& kkt,
                   double alpha, double merit) {
  if (!os) return;
  *os << "{\"iter\":" << iter << ",\"f\":" << ev.f << ",\"stationarity\":" << kkt.stationarity
      << ",\"feasibility\":" << kkt.feasibility << ",\"complementarity\":" << kkt.complementarity
      << ",\"alpha\":" << alpha << ",\"merit\":" << merit << "}\n";
}

}  // namespace

KktResidual kkt_residual(const NlpProblem& problem, const NlpEval& ev, const Eigen::VectorXd& z,
                         const Eigen::VectorXd& eq_mult, const Eigen::VectorXd& ineq_mult,
                         const Eigen::VectorXd& lower_mult, const Eigen::VectorXd& upper_mult) {
  const int n = problem.num_variables();
  const Eigen::VectorXd lb = problem.lower_bounds();
  const Eigen::VectorXd ub = problem.upper_bounds();
  KktResidual r;

  const Eigen::VectorXd eq_terms = ev.jeq.transpose() * eq_mult;
  const Eigen::VectorXd in_terms = ev.jin.transpose() * ineq_mult;
  const Eigen::VectorXd eq_mag = ev.jeq.cwiseAbs().transpose() * eq_mult.cwiseAbs();
  const Eigen::VectorXd in_mag = ev.jin.cwiseAbs().transpose() * ineq_mult.cwiseAbs();
  for (int j = 0; j < n; ++j) {
    const double s = ev.grad(j) + eq_terms(j) + in_terms(j) - lower_mult(j) + upper_mult(j);
    const double scale = std::max({1.0, std::abs(ev.grad(j)), eq_mag(j), in_mag(j),
                                   std::abs(lower_mult(j)), std::abs(upper_mult(j))});
    r.stationarity = std::max(r.stationarity, std::abs(s) / scale);
  }

  double feas = 0.0;
  if (ev.ceq.size() > 0) feas = ev.ceq.lpNorm<Eigen::Infinity>();
  if (ev.cin.size() > 0) feas = std::max(feas, ev.cin.maxCoeff());
  for (int j = 0; j < n; ++j) feas = std::max({feas, lb(j) - z(j), z(j) - ub(j)});
  r.feasibility = std::max(feas, 0.0);

  double comp = 0.0;
  for (int i = 0; i < ev.cin.size(); ++i) {
    comp = std::max(comp, std::min(std::abs(ineq_mult(i)), std::abs(ev.cin(i))));
    comp = std::max(comp, -ineq_mult(i));
  }
  for (int j = 0; j < n; ++j) {
    if (std::isfinite(lb(j))) comp = std::max(comp, std::min(std::abs(lower_mult(j)), std::abs(z(j) - lb(j))));
    if (std::isfinite(ub(j))) comp = std::max(comp, std::min(std::abs(upper_mult(j)), std::abs(ub(j) - z(j))));
    comp = std::max({comp, -lower_mult(j), -upper_mult(j)});
  }
  r.complementarity = comp;
  return r;
}

KktResidual kkt_residual(const NlpProblem& problem, const NlpSolution& sol) {
  NlpEval ev;
  problem.evaluate(sol.z, true, ev);
  return kkt_residual(problem, ev, sol.z, sol.eq_mult, sol.ineq_mult, sol.lower_mult,
                      sol.upper_mult);
}

NlpSolution solve(const NlpProblem& problem, const SolverConfig& cfg,
                  const std::optional<Eigen::VectorXd>& warm_start) {
  const int n = problem.num_variables();
  const int p = problem.num_equalities();
  const int m = problem.num_inequalities();
  const Eigen::VectorXd lb = problem.lower_bounds();
  const Eigen::VectorXd ub = problem.upper_bounds();

  NlpSolution sol;
  sol.eq_mult = Eigen::VectorXd::Zero(p);
  sol.ineq_mult = Eigen::VectorXd::Zero(m);
  sol.lower_mult = Eigen::VectorXd::Zero(n);
  sol.upper_mult = Eigen::VectorXd::Zero(n);
  if ((lb.array() > ub.array()).any()) {
    sol.z = problem.initial_point();
    sol.status = SolveStatus::InconsistentBounds;
    return sol;
  }

  Eigen::VectorXd z = (cfg.warm_start && warm_start && warm_start->size() == n)
                          ? *warm_start
                          : problem.initial_point();
  z = z.cwiseMax(lb).cwiseMin(ub);
  sol.z = z;

  NlpEval ev;
  problem.evaluate(z, true, ev);
  if (!finite(ev, true)) {
    sol.status = SolveStatus::NonFiniteEvaluation;
    return sol;
  }
  sol.value = ev.f;

  double penalty = 1.0;
  ActiveSet working;
  bool have_working = false;
  int last_polish = -10;

  for (int iter = 0;; ++iter) {
    sol.iterations = iter;
    sol.kkt = kkt_residual(problem, ev, z, sol.eq_mult, sol.ineq_mult, sol.lower_mult,
                           sol.upper_mult);
    const double err = sol.kkt.max();
    if (have_working && cfg.polish && err <= std::max(1e-3, cfg.tolerance) &&
        iter - last_polish >= 3) {
      last_polish = iter;
      if (polish(problem, cfg, working, sol)) {
        sol.status = SolveStatus::Success;
        return sol;
      }
    }
    if (iter > 0 && err <= cfg.tolerance) {
      sol.status = SolveStatus::Success;
      return sol;
    }
    if (iter >= cfg.max_iterations) {
      sol.status = SolveStatus::MaxIterations;
      return sol;
    }

    // QP model.
    Eigen::MatrixXd H = problem.convex_hessian(z, sol.eq_mult, sol.ineq_mult);
    H = 0.5 * (H + H.transpose());
    const double diag_max = max_abs(H.diagonal());
    const double floor = cfg.regularization * (1.0 + diag_max);
    for (int j = 0; j < n; ++j) {
      // Directions with (near) linear cost get curvature that keeps the
      // unconstrained model step bounded.
      if (H(j, j) <= floor) H(j, j) = std::max(floor, std::abs(ev.grad(j)) / 10.0);
      else H(j, j) += floor;
    }

    QpProblem qp;
    qp.H = std::move(H);
    qp.g = ev.grad;
    qp.Aeq = ev.jeq;
    qp.beq = -ev.ceq;
    qp.Ain = ev.jin;
    qp.bin = -ev.cin;
    qp.lb = lb - z;
    qp.ub = ub - z;
    const QpResult q = solve_qp(qp);
    if (q.status != QpStatus::Optimal) {
      sol.status = SolveStatus::QpFailure;
      return sol;
    }
    working = {q.active_ineq, q.active_lb, q.active_ub};
    have_working = true;
    const Eigen::VectorXd& d = q.x;

    penalty = std::max(penalty, 1.1 * std::max(max_abs(q.eq_mult), max_abs(q.ineq_mult)));
    const double viol0 = violation(ev);
    const double merit0 = ev.f + penalty * viol0;
    const double slope = ev.grad.dot(d) - penalty * viol0;

    // Steps at rounding level are taken in full so the multipliers update.
    const bool negligible = d.lpNorm<Eigen::Infinity>() <= 1e-13 * (1.0 + z.lpNorm<Eigen::Infinity>());
    const double rounding = 1e-14 * (1.0 + std::abs(merit0));
    double alpha = 1.0;
    NlpEval trial;
    Eigen::VectorXd zt;
    bool accepted = false;
    while (alpha >= 1e-12) {
      zt = (z + alpha * d).cwiseMax(lb).cwiseMin(ub);
      problem.evaluate(zt, false, trial);
      if (finite(trial, false)) {
        const double merit = trial.f + penalty * violation(trial);
        if (negligible ||
            merit <= merit0 + 1e-4 * alpha * std::min(slope, 0.0) + rounding) {
          accepted = true;
          break;
        }
      }
      alpha *= 0.5;
    }
    log_iteration(cfg.iteration_log, iter, ev, sol.kkt, accepted ? alpha : 0.0, merit0);
    if (!accepted) {
      sol.status = SolveStatus::LineSearchFailure;
      return sol;
    }

    z = zt;
    sol.z = z;
    sol.eq_mult = q.eq_mult;
    sol.ineq_mult = q.ineq_mult;
    sol.lower_mult = q.lb_mult;
    sol.upper_mult = q.ub_mult;
    problem.evaluate(z, true, ev);
    if (!finite(ev, true)) {
      sol.status = SolveStatus::NonFiniteEvaluation;
      return sol;
    }
    sol.value = ev.f;
  }
}

double lagrangian_value(const NlpProblem& problem, const NlpSolution& sol) {
  NlpEval ev;
  problem.evaluate(sol.z, false, ev);
  double L = ev.f + sol.eq_mult.dot(ev.ceq) + sol.ineq_mult.dot(ev.cin);
  const Eigen::VectorXd lb = problem.lower_bounds();
  const Eigen::VectorXd ub = problem.upper_bounds();
  for (Eigen::Index j = 0; j < sol.z.size(); ++j) {
    if (std::isfinite(lb(j))) L += sol.lower_mult(j) * (lb(j) - sol.z(j));
    if (std::isfinite(ub(j))) L += sol.upper_mult(j) * (sol.z(j) - ub(j));
  }
  return L;
}

ActiveSet active_set(const NlpProblem& problem, const NlpSolution& sol, double tol) {
  ActiveSet as;
  NlpEval ev;
  problem.evaluate(sol.z, false, ev);
  for (int i = 0; i < ev.cin.size(); ++i)
    if (ev.cin(i) >= -tol) as.ineq.push_back(i);
  const Eigen::VectorXd lb = problem.lower_bounds();
  const Eigen::VectorXd ub = problem.upper_bounds();
  for (int j = 0; j < sol.z.size(); ++j) {
    if (sol.z(j) - lb(j) <= tol) as.lower.push_back(j);
    if (ub(j) - sol.z(j) <= tol) as.upper.push_back(j);
  }
  return as;
}

ValueGradient value_gradient(const NlpProblem& problem, const NlpSolution& sol) {
  ValueGradient out;
  out.grad = problem.parameter_gradient(sol.z, sol.eq_mult, sol.ineq_mult);

  // Strict complementarity and LICQ diagnostics.
  constexpr double tol = 1e-8;
  NlpEval ev;
  problem.evaluate(sol.z, true, ev);
  const ActiveSet as = active_set(problem, sol, tol);
  const double mult_scale = 1.0 + max_abs(sol.ineq_mult);
  for (int i : as.ineq)
    if (sol.ineq_mult(i) <= tol * mult_scale) out.degenerate = true;
  for (int j : as.lower)
    if (sol.lower_mult(j) <= tol * mult_scale) out.degenerate = true;
  for (int j : as.upper)
    if (sol.upper_mult(j) <= tol * mult_scale) out.degenerate = true;

  const int n = problem.num_variables();
  const int rows = static_cast<int>(ev.jeq.rows() + as.ineq.size() + as.lower.size() + as.upper.size());
  if (rows > n) {
    out.degenerate = true;
  } else if (rows > 0) {
    Eigen::MatrixXd A(rows, n);
    int r = 0;
    for (int e = 0; e < ev.jeq.rows(); ++e) A.row(r++) = ev.jeq.row(e);
    for (int i : as.ineq) A.row(r++) = ev.jin.row(i);
    for (int j : as.lower) A.row(r++) = Eigen::RowVectorXd::Unit(n, j);
    for (int j : as.upper) A.row(r++) = Eigen::RowVectorXd::Unit(n, j);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    lu.setThreshold(1e-10);
    if (lu.rank() < rows) out.degenerate = true;
  }
  return out;
}

GridResult brute_force_value(const NlpProblem& problem, const GridSpec& grid) {
  GridResult out;
  const int n = problem.num_variables();
  if (n > 3 || problem.num_equalities() > 0) {
    out.status = GridStatus::DimensionTooLarge;
    return out;
  }
  const Eigen::VectorXd lb = problem.lower_bounds();
  const Eigen::VectorXd ub = problem.upper_bounds();
  if (!lb.allFinite() || !ub.allFinite()) {
    out.status = GridStatus::UnboundedBox;
    return out;
  }
  const int k = std::max(grid.points_per_dim, 2);
  Eigen::VectorXd h = (ub - lb) / static_cast<double>(k - 1);
  out.step = n > 0 ? h.maxCoeff() : 0.0;

  long total = 1;
  for (int j = 0; j < n; ++j) total *= k;
  double best = kInf;
  Eigen::VectorXd z(n);
  NlpEval ev;
  for (long idx = 0; idx < total; ++idx) {
    long rem = idx;
    for (int j = 0; j < n; ++j) {
      z(j) = lb(j) + h(j) * static_cast<double>(rem % k);
      rem /= k;
    }
    problem.evaluate(z, false, ev);
    if (ev.cin.size() > 0 && ev.cin.maxCoeff() > grid.feasibility_tol) continue;
    if (ev.f < best) {
      best = ev.f;
      out.argmin = z;
    }
  }
  if (!std::isfinite(best)) {
    out.status = GridStatus::Infeasible;
    return out;
  }
  out.value = best;
  return out;
}

}  // namespace cbfmpc
