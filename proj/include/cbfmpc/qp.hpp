#pragma once

#include <Eigen/Core>

#include <string_view>
#include <vector>

namespace cbfmpc {

/// min 1/2 x'Hx + g'x  s.t.  Aeq x = beq,  Ain x <= bin,  lb <= x <= ub.
/// H must be symmetric positive definite. Infinite bounds are ignored.
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  Eigen::MatrixXd Aeq;
  Eigen::VectorXd beq;
  Eigen::MatrixXd Ain;
  Eigen::VectorXd bin;
  Eigen::VectorXd lb;
  Eigen::VectorXd ub;
};

enum class QpStatus { Optimal, NotConvex, Infeasible, DependentEqualities, MaxIterations };

std::string_view to_string(QpStatus s);

/// Multipliers follow H x + g + Aeq' nu + Ain' lambda - mu_lb + mu_ub = 0 with
/// lambda, mu_lb, mu_ub >= 0.
struct QpResult {
  QpStatus status = QpStatus::Optimal;
  Eigen::VectorXd x;
  Eigen::VectorXd eq_mult;
  Eigen::VectorXd ineq_mult;
  Eigen::VectorXd lb_mult;
  Eigen::VectorXd ub_mult;
  std::vector<int> active_ineq;
  std::vector<int> active_lb;
  std::vector<int> active_ub;
  double objective = 0.0;
  int iterations = 0;
};

/// Dual active-set method of Goldfarb and Idnani with Givens updates of the
/// factorization of the active constraint normals.
QpResult solve_qp(const QpProblem& qp);

}  // namespace cbfmpc
