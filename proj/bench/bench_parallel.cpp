#include "cbfmpc/gradcheck.hpp"
#include "cbfmpc/parallel.hpp"

#include <benchmark/benchmark.h>

using namespace cbfmpc;

namespace {

MpcConfig dynamic_rnn(int horizon) {
  MpcConfig cfg;
  cfg.horizon = horizon;
  cfg.variant = Variant::Rnn;
  cfg.w_mpc = 1.28e9;
  cfg.world.obstacles.push_back({-2.0, 0.0, 1.0, std::nullopt});
  cfg.world.obstacles.push_back({-4.0, -1.5, 0.7, HorizontalMotion{-4.0, 0.0, 0.2, 1}});
  cfg.world.obstacles.push_back({-4.0, -3.3, 0.7, HorizontalMotion{-4.0, 1.0, 0.2, 1}});
  return cfg;
}

Execution mode(const benchmark::State& st) { return st.range(0) ? Execution::Parallel : Execution::Serial; }

// Quadratic bowl on a 3-D box, 101^3 grid points.
class Bowl : public NlpProblem {
 public:
  int num_variables() const override { return 3; }
  int num_equalities() const override { return 0; }
  int num_inequalities() const override { return 1; }
  Eigen::VectorXd lower_bounds() const override { return Eigen::Vector3d::Constant(-2.0); }
  Eigen::VectorXd upper_bounds() const override { return Eigen::Vector3d::Constant(2.0); }
  Eigen::VectorXd initial_point() const override { return Eigen::Vector3d::Zero(); }
  void evaluate(const Eigen::VectorXd& z, bool, NlpEval& out) const override {
    out.f = (z - Eigen::Vector3d(0.3, -0.7, 1.1)).squaredNorm();
    out.cin.resize(1);
    out.cin(0) = z.sum() - 1.0;
  }
  Eigen::MatrixXd lagrangian_hessian(const Eigen::VectorXd&, const Eigen::VectorXd&,
                                     const Eigen::VectorXd&) const override {
    return 2.0 * Eigen::Matrix3d::Identity();
  }
};

void BM_GradientCheck(benchmark::State& st) {
  const MpcConfig cfg = dynamic_rnn(static_cast<int>(st.range(1)));
  std::mt19937_64 rng(1);
  const ThetaVector theta = initial_theta(cfg, ThetaInit{}, rng);
  GradCheckOptions opt;
  opt.exec = mode(st);
  for (auto _ : st) {
    benchmark::DoNotOptimize(
        check_action_value_gradient(cfg, theta, cfg.world.start, Action(0.5, 0.5), 0, {}, opt));
  }
}
BENCHMARK(BM_GradientCheck)->ArgsProduct({{0, 1}, {1, 3}})->Unit(benchmark::kMillisecond);

void BM_SolveBatch(benchmark::State& st) {
  const MpcConfig cfg = dynamic_rnn(6);
  std::mt19937_64 rng(2);
  const MpcModel model(cfg, initial_theta(cfg, ThetaInit{}, rng));
  std::vector<MpcNlp> problems;
  for (int i = 0; i < 16; ++i)
    problems.push_back(build_value_problem(model, State(-5.0 + 0.2 * i, -5.0, 0.0, 0.0), i));
  std::vector<const NlpProblem*> ptrs;
  for (const auto& p : problems) ptrs.push_back(&p);
  for (auto _ : st) benchmark::DoNotOptimize(solve_batch(ptrs, {}, mode(st)));
}
BENCHMARK(BM_SolveBatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_GridOracle(benchmark::State& st) {
  const Bowl p;
  for (auto _ : st) benchmark::DoNotOptimize(brute_force_value(p, GridSpec{101}, mode(st)));
}
BENCHMARK(BM_GridOracle)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
