#include "cbfmpc/qp.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <limits>

namespace cbfmpc {

std::string_view to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::NotConvex: return "not-convex";
    case QpStatus::Infeasible: return "infeasible";
    case QpStatus::DependentEqualities: return "dependent-equalities";
    case QpStatus::MaxIterations: return "max-iterations";
  }
  return "unknown";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Relative size below which the component of a normal outside the active
// span is treated as zero.
constexpr double kDependenceTol = 1e-11;

enum class Kind { Ineq, Lower, Upper };

// Inequality in the solver's form n'x + c >= 0.
struct Row {
  Kind kind;
  int index;
};

class ActiveSetFactor {
 public:
  explicit ActiveSetFactor(const Eigen::MatrixXd& J0) : J(J0), R(Eigen::MatrixXd::Zero(J0.rows(), J0.rows())) {}

  Eigen::MatrixXd J;  // J J' = H^{-1}, rotated so the first iq columns span the active normals
  Eigen::MatrixXd R;  // upper triangular
  int iq = 0;

  int n() const { return static_cast<int>(J.rows()); }

  void direction(const Eigen::VectorXd& np, Eigen::VectorXd& d, Eigen::VectorXd& z,
                 Eigen::VectorXd& r) const {
    d.noalias() = J.transpose() * np;
    z.noalias() = J.rightCols(n() - iq) * d.tail(n() - iq);
    r = R.topLeftCorner(iq, iq).triangularView<Eigen::Upper>().solve(d.head(iq));
  }

  bool add(Eigen::VectorXd d) {
    const int nn = n();
    const double dnorm = d.norm();
    for (int j = nn - 1; j >= iq + 1; --j) {
      double cc = d(j - 1);
      double ss = d(j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d(j) = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d(j - 1) = -h;
      } else {
        d(j - 1) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < nn; ++k) {
        const double t1 = J(k, j - 1);
        const double t2 = J(k, j);
        J(k, j - 1) = t1 * cc + t2 * ss;
        J(k, j) = xny * (t1 + J(k, j - 1)) - t2;
      }
    }
    ++iq;
    R.col(iq - 1).head(iq) = d.head(iq);
    return std::abs(d(iq - 1)) > kDependenceTol * dnorm;
  }

  // Removes active position qq (>= first) and restores triangularity.
  void remove(std::vector<int>& active, Eigen::VectorXd& u, int qq) {
    for (int i = qq; i < iq - 1; ++i) {
      active[i] = active[i + 1];
      u(i) = u(i + 1);
      R.col(i) = R.col(i + 1);
    }
    active[iq - 1] = active[iq];
    u(iq - 1) = u(iq);
    active[iq] = 0;
    u(iq) = 0.0;
    R.col(iq - 1).head(iq).setZero();
    --iq;
    if (iq == 0) return;
    const int nn = n();
    for (int j = qq; j < iq; ++j) {
      double cc = R(j, j);
      double ss = R(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < iq; ++k) {
        const double t1 = R(j, k);
        const double t2 = R(j + 1, k);
        R(j, k) = t1 * cc + t2 * ss;
        R(j + 1, k) = xny * (t1 + R(j, k)) - t2;
      }
      for (int k = 0; k < nn; ++k) {
        const double t1 = J(k, j);
        const double t2 = J(k, j + 1);
        J(k, j) = t1 * cc + t2 * ss;
        J(k, j + 1) = xny * (J(k, j) + t1) - t2;
      }
    }
  }
};

}  // namespace

QpResult solve_qp(const QpProblem& qp) {
  const int n = static_cast<int>(qp.H.rows());
  const int p = static_cast<int>(qp.Aeq.rows());
  QpResult res;
  res.x = Eigen::VectorXd::Zero(n);
  res.eq_mult = Eigen::VectorXd::Zero(p);
  res.ineq_mult = Eigen::VectorXd::Zero(qp.Ain.rows());
  res.lb_mult = Eigen::VectorXd::Zero(n);
  res.ub_mult = Eigen::VectorXd::Zero(n);

  // Inequalities in n'x + c >= 0 form.
  std::vector<Row> rows;
  for (int i = 0; i < qp.Ain.rows(); ++i) rows.push_back({Kind::Ineq, i});
  for (int j = 0; j < n; ++j) {
    if (qp.lb.size() == n && qp.lb(j) > -kInf) rows.push_back({Kind::Lower, j});
    if (qp.ub.size() == n && qp.ub(j) < kInf) rows.push_back({Kind::Upper, j});
  }
  const int m = static_cast<int>(rows.size());
  auto normal = [&](int i, Eigen::VectorXd& np) {
    const Row& r = rows[i];
    switch (r.kind) {
      case Kind::Ineq: np = -qp.Ain.row(r.index).transpose(); break;
      case Kind::Lower: np.setZero(n); np(r.index) = 1.0; break;
      case Kind::Upper: np.setZero(n); np(r.index) = -1.0; break;
    }
  };
  auto slack = [&](int i, const Eigen::VectorXd& x) {
    const Row& r = rows[i];
    switch (r.kind) {
      case Kind::Ineq: return qp.bin(r.index) - qp.Ain.row(r.index).dot(x);
      case Kind::Lower: return x(r.index) - qp.lb(r.index);
      case Kind::Upper: return qp.ub(r.index) - x(r.index);
    }
    return 0.0;
  };
  auto row_scale = [&](int i, const Eigen::VectorXd& x) {
    const Row& r = rows[i];
    switch (r.kind) {
      case Kind::Ineq:
        return 1.0 + std::abs(qp.bin(r.index)) +
               qp.Ain.row(r.index).cwiseAbs().dot(x.cwiseAbs());
      case Kind::Lower: return 1.0 + std::abs(qp.lb(r.index)) + std::abs(x(r.index));
      case Kind::Upper: return 1.0 + std::abs(qp.ub(r.index)) + std::abs(x(r.index));
    }
    return 1.0;
  };

  Eigen::LLT<Eigen::MatrixXd> llt(qp.H);
  if (llt.info() != Eigen::Success) {
    res.status = QpStatus::NotConvex;
    return res;
  }
  const Eigen::MatrixXd L = llt.matrixL();
  ActiveSetFactor fac(
      L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n, n)).transpose());

  Eigen::VectorXd x = llt.solve(-qp.g);
  double f = 0.5 * qp.g.dot(x);
  std::vector<int> active(p + m + 1, 0);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(p + m + 1);
  Eigen::VectorXd d(n), z(n), r, np(n);

  // Equality constraints enter the active set first and never leave.
  for (int i = 0; i < p; ++i) {
    np = qp.Aeq.row(i).transpose();
    fac.direction(np, d, z, r);
    double t2 = 0.0;
    const double ztn = z.dot(np);
    if (d.tail(n - fac.iq).squaredNorm() > kDependenceTol * kDependenceTol * d.squaredNorm() &&
        ztn != 0.0) {
      t2 = (qp.beq(i) - np.dot(x)) / ztn;
    }
    x += t2 * z;
    u(fac.iq) = t2;
    for (int k = 0; k < fac.iq; ++k) u(k) -= t2 * r(k);
    f += 0.5 * t2 * t2 * ztn;
    active[fac.iq] = -i - 1;
    if (!fac.add(d)) {
      res.status = QpStatus::DependentEqualities;
      res.x = x;
      return res;
    }
  }

  std::vector<char> in_active(m, 0);
  std::vector<char> excluded(m, 0);
  Eigen::VectorXd s(m);
  const int max_iter = 50 * (n + m) + 100;
  int iter = 0;

  while (true) {
    if (++iter > max_iter) {
      res.status = QpStatus::MaxIterations;
      break;
    }
    // Step 1: choose the most violated constraint (scaled).
    int ip = -1;
    double worst = 0.0;
    for (int i = 0; i < m; ++i) {
      s(i) = slack(i, x);
      if (in_active[i] || excluded[i]) continue;
      const double scaled = s(i) / row_scale(i, x);
      if (scaled < -1e-13 && scaled < worst) {
        worst = scaled;
        ip = i;
      }
    }
    if (ip < 0) break;

    normal(ip, np);
    u(fac.iq) = 0.0;
    active[fac.iq] = ip;

    while (true) {
      // Step 2a: direction in primal and dual space.
      fac.direction(np, d, z, r);
      // Step 2b: partial step keeping dual feasibility.
      int l = -1;
      double t1 = kInf;
      for (int k = p; k < fac.iq; ++k) {
        if (r(k) > 0.0 && u(k) / r(k) < t1) {
          t1 = u(k) / r(k);
          l = active[k];
        }
      }
      // Full step making constraint ip active.
      double t2 = kInf;
      const double ztn = z.dot(np);
      if (d.tail(n - fac.iq).squaredNorm() > kDependenceTol * kDependenceTol * d.squaredNorm() &&
          ztn > 0.0) {
        t2 = -s(ip) / ztn;
      }
      const double t = std::min(t1, t2);
      if (t >= kInf) {
        res.status = QpStatus::Infeasible;
        res.x = x;
        return res;
      }
      if (t2 >= kInf) {
        // Step in dual space only.
        for (int k = 0; k < fac.iq; ++k) u(k) -= t * r(k);
        u(fac.iq) += t;
        int qq = -1;
        for (int k = p; k < fac.iq; ++k)
          if (active[k] == l) qq = k;
        in_active[l] = 0;
        // Keep the candidate (stored at position iq) in place while shifting.
        const int cand = active[fac.iq];
        const double ucand = u(fac.iq);
        fac.remove(active, u, qq);
        active[fac.iq] = cand;
        u(fac.iq) = ucand;
        continue;
      }
      // Step in primal and dual space.
      x += t * z;
      f += t * ztn * (0.5 * t + u(fac.iq));
      for (int k = 0; k < fac.iq; ++k) u(k) -= t * r(k);
      u(fac.iq) += t;
      if (t2 <= t1) {
        if (!fac.add(d)) {
          // Numerically dependent on the active normals; t2 would have been
          // infinite with exact arithmetic. Skip the constraint.
          excluded[ip] = 1;
          fac.remove(active, u, fac.iq - 1);
        } else {
          in_active[ip] = 1;
        }
        break;
      }
      // Partial step: drop the blocking constraint and retry.
      int qq = -1;
      for (int k = p; k < fac.iq; ++k)
        if (active[k] == l) qq = k;
      in_active[l] = 0;
      const int cand = active[fac.iq];
      const double ucand = u(fac.iq);
      fac.remove(active, u, qq);
      active[fac.iq] = cand;
      u(fac.iq) = ucand;
      s(ip) = slack(ip, x);
    }
  }

  res.x = x;
  res.objective = 0.5 * x.dot(qp.H * x) + qp.g.dot(x);
  res.iterations = iter;
  for (int k = 0; k < fac.iq; ++k) {
    const int a = active[k];
    if (a < 0) {
      res.eq_mult(-a - 1) = -u(k);
      continue;
    }
    const Row& row = rows[a];
    switch (row.kind) {
      case Kind::Ineq:
        res.ineq_mult(row.index) = u(k);
        res.active_ineq.push_back(row.index);
        break;
      case Kind::Lower:
        res.lb_mult(row.index) = u(k);
        res.active_lb.push_back(row.index);
        break;
      case Kind::Upper:
        res.ub_mult(row.index) = u(k);
        res.active_ub.push_back(row.index);
        break;
    }
  }
  (void)f;
  return res;
}

}  // namespace cbfmpc
