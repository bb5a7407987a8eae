#pragma once

#include <Eigen/Core>

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cbfmpc {

/// First-order data of an NLP at a point. Inequalities are cin(z) <= 0.
struct NlpEval {
  double f = 0.0;
  Eigen::VectorXd grad;
  Eigen::VectorXd ceq;
  Eigen::MatrixXd jeq;
  Eigen::VectorXd cin;
  Eigen::MatrixXd jin;
};

/// Dense smooth NLP
///
///   min f(z; p)  s.t.  ceq(z; p) = 0,  cin(z; p) <= 0,  lb <= z <= ub
///
/// with a parameter vector p whose Lagrangian gradient is available for
/// sensitivity of the optimal value. The Lagrangian is
/// L = f + nu' ceq + lambda' cin; bounds never depend on p.
class NlpProblem {
 public:
  virtual ~NlpProblem() = default;

  virtual int num_variables() const = 0;
  virtual int num_equalities() const = 0;
  virtual int num_inequalities() const = 0;
  virtual Eigen::VectorXd lower_bounds() const = 0;
  virtual Eigen::VectorXd upper_bounds() const = 0;
  virtual Eigen::VectorXd initial_point() const = 0;

  /// Fills values; gradients and Jacobians only when derivatives is true.
  virtual void evaluate(const Eigen::VectorXd& z, bool derivatives, NlpEval& out) const = 0;

  /// Exact Hessian of the Lagrangian.
  virtual Eigen::MatrixXd lagrangian_hessian(const Eigen::VectorXd& z,
                                             const Eigen::VectorXd& eq_mult,
                                             const Eigen::VectorXd& ineq_mult) const = 0;

  /// Positive semidefinite model of the Lagrangian Hessian used in the QP
  /// subproblems. Default: exact Hessian with negative eigenvalues clipped.
  virtual Eigen::MatrixXd convex_hessian(const Eigen::VectorXd& z, const Eigen::VectorXd& eq_mult,
                                         const Eigen::VectorXd& ineq_mult) const;

  virtual int num_parameters() const { return 0; }
  /// dL/dp at (z, multipliers).
  virtual Eigen::VectorXd parameter_gradient(const Eigen::VectorXd& z,
                                             const Eigen::VectorXd& eq_mult,
                                             const Eigen::VectorXd& ineq_mult) const;
};

struct SolverConfig {
  double tolerance = 1e-6;    // scaled KKT tolerance for success
  int max_iterations = 200;
  double regularization = 1e-8;  // relative floor added to the QP Hessian diagonal
  bool warm_start = true;
  bool polish = true;            // Newton refinement on the identified active set
  std::ostream* iteration_log = nullptr;  // newline-delimited JSON records
};

enum class SolveStatus {
  Success,
  MaxIterations,
  NonFiniteEvaluation,
  InconsistentBounds,
  LineSearchFailure,
  QpFailure,
};

std::string_view to_string(SolveStatus s);

struct KktResidual {
  double stationarity = 0.0;
  double feasibility = 0.0;
  double complementarity = 0.0;

  double max() const;
};

struct NlpSolution {
  Eigen::VectorXd z;
  Eigen::VectorXd eq_mult;
  Eigen::VectorXd ineq_mult;
  Eigen::VectorXd lower_mult;
  Eigen::VectorXd upper_mult;
  double value = 0.0;
  SolveStatus status = SolveStatus::MaxIterations;
  int iterations = 0;
  KktResidual kkt;
  bool polished = false;

  bool ok() const { return status == SolveStatus::Success; }
};

/// Scaled KKT residuals: each stationarity component is measured relative to
/// the magnitude of the terms it sums.
KktResidual kkt_residual(const NlpProblem& problem, const NlpEval& ev, const Eigen::VectorXd& z,
                         const Eigen::VectorXd& eq_mult, const Eigen::VectorXd& ineq_mult,
                         const Eigen::VectorXd& lower_mult, const Eigen::VectorXd& upper_mult);
KktResidual kkt_residual(const NlpProblem& problem, const NlpSolution& sol);

/// SQP with a dense active-set QP subproblem and l1-merit backtracking.
/// Deterministic: identical inputs give bit-identical iterates.
NlpSolution solve(const NlpProblem& problem, const SolverConfig& config = {},
                  const std::optional<Eigen::VectorXd>& warm_start = std::nullopt);

/// L(z, multipliers) at a solution. Equal to the optimal value at an exact KKT
/// point, and insensitive to first order to the residual infeasibility that
/// scales with large multipliers.
double lagrangian_value(const NlpProblem& problem, const NlpSolution& sol);

/// Which inequalities and bounds are treated as active at a solution.
struct ActiveSet {
  std::vector<int> ineq;
  std::vector<int> lower;
  std::vector<int> upper;

  bool operator==(const ActiveSet&) const = default;
};

ActiveSet active_set(const NlpProblem& problem, const NlpSolution& sol, double tol = 1e-7);

struct ValueGradient {
  Eigen::VectorXd grad;
  /// Weakly active constraints or rank-deficient active Jacobian.
  bool degenerate = false;
};

/// Envelope gradient of the optimal value: dL/dp at the primal-dual solution.
ValueGradient value_gradient(const NlpProblem& problem, const NlpSolution& sol);

struct GridSpec {
  int points_per_dim = 101;
  double feasibility_tol = 1e-12;
};

enum class GridStatus { Ok, Infeasible, DimensionTooLarge, UnboundedBox };

struct GridResult {
  GridStatus status = GridStatus::Ok;
  double value = 0.0;
  Eigen::VectorXd argmin;
  double step = 0.0;  // largest grid spacing
};

/// Exhaustive grid minimum of f over the feasible grid points of the bound
/// box. Test oracle for problems with at most three variables and no
/// equality constraints.
GridResult brute_force_value(const NlpProblem& problem, const GridSpec& grid = {});

}  // namespace cbfmpc
