#include "cbfmpc/parallel.hpp"

#include <omp.h>

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cbfmpc {

int max_threads() { return omp_get_max_threads(); }

Eigen::VectorXd central_differences(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                    Execution exec) {
  if (h.size() != x.size()) throw std::invalid_argument("step vector has the wrong size");
  const int n = static_cast<int>(x.size());
  Eigen::VectorXd g(n);
  auto one = [&](int j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h(j);
    xm(j) -= h(j);
    g(j) = (f(xp) - f(xm)) / (xp(j) - xm(j));
  };
  if (exec == Execution::Serial) {
    for (int j = 0; j < n; ++j) one(j);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (int j = 0; j < n; ++j) one(j);
  }
  return g;
}

namespace {

struct GridBest {
  double value = std::numeric_limits<double>::infinity();
  long index = -1;
};

void grid_point(const Eigen::VectorXd& lb, const Eigen::VectorXd& step, int k, long idx,
                Eigen::VectorXd& z) {
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    z(j) = lb(j) + step(j) * static_cast<double>(idx % k);
    idx /= k;
  }
}

}  // namespace

GridResult brute_force_value(const NlpProblem& problem, const GridSpec& grid, Execution exec) {
  if (exec == Execution::Serial) return brute_force_value(problem, grid);
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
  const Eigen::VectorXd step = (ub - lb) / static_cast<double>(k - 1);
  out.step = n > 0 ? step.maxCoeff() : 0.0;
  long total = 1;
  for (int j = 0; j < n; ++j) total *= k;

  GridBest best;
#pragma omp parallel
  {
    GridBest local;
    Eigen::VectorXd z(n);
    NlpEval ev;
#pragma omp for schedule(static) nowait
    for (long idx = 0; idx < total; ++idx) {
      grid_point(lb, step, k, idx, z);
      problem.evaluate(z, false, ev);
      if (ev.cin.size() > 0 && ev.cin.maxCoeff() > grid.feasibility_tol) continue;
      if (ev.f < local.value || (ev.f == local.value && idx < local.index)) local = {ev.f, idx};
    }
#pragma omp critical
    {
      if (local.index >= 0 &&
          (local.value < best.value || (local.value == best.value && local.index < best.index)))
        best = local;
    }
  }
  if (best.index < 0) {
    out.status = GridStatus::Infeasible;
    return out;
  }
  out.value = best.value;
  out.argmin.resize(n);
  grid_point(lb, step, k, best.index, out.argmin);
  return out;
}

std::vector<NlpSolution> solve_batch(const std::vector<const NlpProblem*>& problems,
                                     const SolverConfig& config, Execution exec) {
  const int n = static_cast<int>(problems.size());
  std::vector<NlpSolution> out(n);
  SolverConfig cfg = config;
  if (exec == Execution::Parallel) cfg.iteration_log = nullptr;  // shared stream
  if (exec == Execution::Serial) {
    for (int i = 0; i < n; ++i) out[i] = solve(*problems[i], cfg);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) out[i] = solve(*problems[i], cfg);
  }
  return out;
}

}  // namespace cbfmpc
