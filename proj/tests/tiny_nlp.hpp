#pragma once

#include "cbfmpc/nlp.hpp"
#include "support.hpp"

#include <vector>

namespace cbfmpc::testing {

// f = 1/2 z'Hz + g'z + quartic * sum z^4, with linear rows A z <= b and
// optional ball constraints |z - c|^2 <= r^2, inside a finite box.
class TinyNlp : public NlpProblem {
 public:
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  double quartic = 0.0;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  std::vector<Eigen::VectorXd> ball_center;
  std::vector<double> ball_radius;
  Eigen::VectorXd lb, ub;

  int num_variables() const override { return static_cast<int>(g.size()); }
  int num_equalities() const override { return 0; }
  int num_inequalities() const override {
    return static_cast<int>(A.rows() + ball_center.size());
  }
  Eigen::VectorXd lower_bounds() const override { return lb; }
  Eigen::VectorXd upper_bounds() const override { return ub; }
  Eigen::VectorXd initial_point() const override { return Eigen::VectorXd::Zero(g.size()); }

  void evaluate(const Eigen::VectorXd& z, bool derivatives, NlpEval& out) const override {
    const int n = num_variables();
    out.f = 0.5 * z.dot(H * z) + g.dot(z) + quartic * z.array().pow(4).sum();
    out.ceq.resize(0);
    out.cin.resize(num_inequalities());
    out.cin.head(A.rows()) = A * z - b;
    for (size_t i = 0; i < ball_center.size(); ++i)
      out.cin(A.rows() + i) = (z - ball_center[i]).squaredNorm() - ball_radius[i] * ball_radius[i];
    if (!derivatives) return;
    out.grad = H * z + g + 4.0 * quartic * z.array().pow(3).matrix();
    out.jeq.resize(0, n);
    out.jin.resize(num_inequalities(), n);
    out.jin.topRows(A.rows()) = A;
    for (size_t i = 0; i < ball_center.size(); ++i)
      out.jin.row(A.rows() + i) = 2.0 * (z - ball_center[i]).transpose();
  }

  Eigen::MatrixXd lagrangian_hessian(const Eigen::VectorXd& z, const Eigen::VectorXd&,
                                     const Eigen::VectorXd& ineq) const override {
    Eigen::MatrixXd Hl = H;
    Hl.diagonal() += (12.0 * quartic * z.array().square()).matrix();
    for (size_t i = 0; i < ball_center.size(); ++i)
      Hl.diagonal().array() += 2.0 * ineq(A.rows() + i);
    return Hl;
  }
};

// Convex instance with a strictly feasible anchor point inside the box, so a
// fine grid always contains feasible points.
inline TinyNlp random_tiny_nlp(Gen& gen) {
  TinyNlp p;
  const int n = gen.integer(1, 3);
  const Eigen::MatrixXd L = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return gen.uniform(-1, 1); });
  p.H = L * L.transpose();
  if (gen.integer(0, 3) == 0) p.H.setZero();  // linear objective
  p.g = gen.vector(n, -3, 3);
  p.quartic = gen.integer(0, 1) ? gen.uniform(0.0, 0.5) : 0.0;
  p.lb = gen.vector(n, -2, -0.5);
  p.ub = gen.vector(n, 0.5, 2);
  const Eigen::VectorXd anchor = 0.5 * (p.lb + p.ub) + 0.1 * gen.vector(n, -1, 1);
  const int rows = gen.integer(0, 2);
  p.A.resize(rows, n);
  p.b.resize(rows);
  for (int r = 0; r < rows; ++r) {
    p.A.row(r) = gen.vector(n, -1, 1).transpose();
    p.b(r) = p.A.row(r).dot(anchor) + gen.uniform(0.2, 1.0);
  }
  if (gen.integer(0, 1)) {
    const Eigen::VectorXd c = anchor + 0.3 * gen.vector(n, -1, 1);
    p.ball_center.push_back(c);
    p.ball_radius.push_back((c - anchor).norm() + gen.uniform(0.3, 1.0));
  }
  return p;
}

}  // namespace cbfmpc::testing
