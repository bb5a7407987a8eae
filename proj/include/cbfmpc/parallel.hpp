#pragma once

#include "cbfmpc/nlp.hpp"

#include <Eigen/Core>

#include <functional>
#include <vector>

namespace cbfmpc {

/// Serial kernels are the reference; parallel ones use OpenMP and must give
/// bit-identical results.
enum class Execution { Serial, Parallel };

/// Central differences (f(x + h_j e_j) - f(x - h_j e_j)) / (2 h_j). f must be
/// safe to call concurrently when exec is Parallel.
Eigen::VectorXd central_differences(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& x, const Eigen::VectorXd& h,
                                    Execution exec);

/// Grid oracle; ties resolve to the lowest grid index in both modes.
GridResult brute_force_value(const NlpProblem& problem, const GridSpec& grid, Execution exec);

/// Solves independent problems; results are in input order.
std::vector<NlpSolution> solve_batch(const std::vector<const NlpProblem*>& problems,
                                     const SolverConfig& config, Execution exec);

int max_threads();

}  // namespace cbfmpc
