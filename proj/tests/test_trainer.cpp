#include "cbfmpc/trainer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cbfmpc;
using cbfmpc::testing::Gen;

namespace {

MpcConfig static_lod() {
  MpcConfig cfg;
  cfg.horizon = 1;
  cfg.variant = Variant::Lod;
  cfg.world.obstacles.push_back({-2.0, -2.25, 1.5, std::nullopt});
  return cfg;
}

ThetaVector lod_theta(const MpcConfig& cfg) {
  ThetaInit init;
  init.omega_ref = 0.4;
  init.p_omega = 1000.0;
  std::mt19937_64 rng(1);
  return initial_theta(cfg, init, rng);
}

}  // namespace

TEST_CASE("td_error examples") {
  CHECK(td_error(1.0, 0.9, 10.0, 10.0) == doctest::Approx(0.0));
  CHECK(td_error(0.0, 1.0, 5.0, 3.0) == 2.0);
  CHECK(td_error(4.0, 0.0, 123.0, 1.5) == 2.5);
}

TEST_CASE("augment_cost examples") {
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 3);
  CHECK(augment_cost(7.0, zero, 1e3) == 7.0);
  Eigen::MatrixXd one = Eigen::MatrixXd::Constant(1, 1, 0.002);
  CHECK(augment_cost(10.0, one, 1e3) == doctest::Approx(12.0).epsilon(1e-14));
  const double p1 = augment_cost(0.0, one, 3.0);
  const double p2 = augment_cost(0.0, one, 6.0);
  CHECK(p2 == 2.0 * p1);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Constant(1, 1, -1e-3);
  CHECK_THROWS_AS(augment_cost(1.0, bad, 1.0), std::invalid_argument);
}

TEST_CASE("gradient buffer fills, averages and rejects misuse") {
  GradBuffer buf(2);
  CHECK(buf.empty());
  CHECK_THROWS_AS(buf.mean(), std::logic_error);
  buf.push(Eigen::Vector2d(1.0, 2.0));
  CHECK_FALSE(buf.full());
  buf.push(Eigen::Vector2d(3.0, -2.0));
  CHECK(buf.full());
  CHECK(buf.mean().isApprox(Eigen::Vector2d(2.0, 0.0)));
  CHECK_THROWS_AS(buf.push(Eigen::Vector2d::Zero()), std::logic_error);
  buf.clear();
  CHECK(buf.empty());
  CHECK_THROWS_AS(GradBuffer(0), std::invalid_argument);
}

TEST_CASE("first Adam step is lr times the gradient sign") {
  // Fresh moments: m_hat = g and v_hat = g^2, so the step is -lr g / (|g| + eps).
  AdamState adam = AdamState::create(Eigen::Vector3d(0.1, 0.2, 0.3));
  const Eigen::Vector3d g(4.0, -0.5, 0.0);
  const Eigen::VectorXd d = adam_step(adam, g);
  CHECK(d(0) == doctest::Approx(-0.1 * 4.0 / (4.0 + 1e-8)));
  CHECK(d(1) == doctest::Approx(0.2 * 0.5 / (0.5 + 1e-8)));
  CHECK(d(2) == 0.0);
  CHECK(adam.step == 1);
  CHECK((adam.v.array() >= 0.0).all());
}

TEST_CASE("zero gradient leaves theta unchanged") {
  const MpcConfig cfg = static_lod();
  ThetaVector theta = lod_theta(cfg);
  const Eigen::VectorXd before = theta.values();
  AdamState adam = AdamState::create(Eigen::VectorXd::Constant(theta.size(), 0.1));
  GradBuffer buf(1);
  buf.push(Eigen::VectorXd::Zero(theta.size()));
  buffered_update(buf, adam, theta);
  CHECK(theta.values() == before);
  CHECK(buf.empty());
  CHECK_THROWS_AS(buffered_update(buf, adam, theta), std::logic_error);
}

TEST_CASE("projection clamps only the crossing coordinate") {
  const Eigen::Vector2d theta(0.0, 0.0);
  const Eigen::Vector2d lo(-1.0, -1.0), hi(1.0, 1.0);
  const Eigen::VectorXd d = project_step(theta, Eigen::Vector2d(2.0, 0.5), lo, hi);
  CHECK(d(0) == 1.0);
  CHECK(d(1) == 0.5);
  const Eigen::VectorXd inner = project_step(theta, Eigen::Vector2d(-0.25, 0.75), lo, hi);
  CHECK(inner(0) == -0.25);
  CHECK(inner(1) == 0.75);
}

TEST_CASE("projection property: result in bounds, interior steps untouched") {
  Gen gen(11);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = gen.integer(1, 6);
    Eigen::VectorXd lo = gen.vector(n, -3.0, 0.0);
    Eigen::VectorXd hi = lo + gen.vector(n, 0.0, 3.0);
    Eigen::VectorXd theta(n);
    for (int i = 0; i < n; ++i) theta(i) = gen.uniform(lo(i), hi(i));
    const Eigen::VectorXd step = gen.vector(n, -2.0, 2.0);
    const Eigen::VectorXd d = project_step(theta, step, lo, hi);
    const Eigen::VectorXd out = theta + d;
    for (int i = 0; i < n; ++i) {
      CHECK(out(i) >= lo(i) - 1e-15);
      CHECK(out(i) <= hi(i) + 1e-15);
      const double cand = theta(i) + step(i);
      if (cand > lo(i) && cand < hi(i)) {
        CHECK(d(i) == step(i));
        CHECK(out(i) == cand);
      } else {
        // Any other feasible value is farther from the candidate.
        const double alt = gen.uniform(lo(i), hi(i));
        CHECK(std::abs(out(i) - cand) <= std::abs(alt - cand) + 1e-15);
      }
    }
  }
}

TEST_CASE("exploration std decays geometrically") {
  NoiseSchedule noise(Eigen::Vector2d(0.5, 0.2), 0.9, 3);
  for (int e : {0, 1, 5, 40}) {
    CHECK(noise.std_at(e)(0) == doctest::Approx(0.5 * std::pow(0.9, e)));
    CHECK(noise.std_at(e)(1) == doctest::Approx(0.2 * std::pow(0.9, e)));
  }
  for (int e = 1; e < 50; ++e) CHECK((noise.std_at(e).array() <= noise.std_at(e - 1).array()).all());

  // Realized std over many draws.
  const int n = 20000;
  for (int e : {0, 10}) {
    Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sq = Eigen::Vector2d::Zero();
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector2d x = noise.sample(e);
      sum += x;
      sq += x.cwiseAbs2();
    }
    const Eigen::Vector2d mean = sum / n;
    const Eigen::Vector2d sd = (sq / n - mean.cwiseAbs2()).cwiseSqrt();
    for (int i = 0; i < 2; ++i) CHECK(sd(i) == doctest::Approx(noise.std_at(e)(i)).epsilon(0.03));
  }
  CHECK_THROWS_AS(NoiseSchedule(Eigen::Vector2d(-1.0, 0.0), 0.9, 0), std::invalid_argument);
}

TEST_CASE("learning rates honour block overrides") {
  const MpcConfig cfg = static_lod();
  const ThetaVector theta = lod_theta(cfg);
  TrainerConfig tc;
  tc.learning_rate = 0.01;
  tc.block_learning_rates["F"] = 2.0;
  const Eigen::VectorXd lr = learning_rates(theta, tc);
  const auto& f = theta.block("F");
  for (int i = 0; i < theta.size(); ++i) {
    CHECK(lr(i) == ((i >= f.offset && i < f.offset + f.size) ? 2.0 : 0.01));
  }
  tc.block_learning_rates["nope"] = 1.0;
  CHECK_THROWS_AS(learning_rates(theta, tc), std::out_of_range);
}

TEST_CASE("single buffered step with |B| = 1 reduces the squared TD error on a frozen transition") {
  const MpcConfig cfg = static_lod();
  Gen gen(5);
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    ThetaVector theta = lod_theta(cfg);
    const State s(gen.uniform(-5, 0), gen.uniform(-5, 0), gen.uniform(-1, 1), gen.uniform(-1, 1));
    if (barrier_value(cfg.world.obstacles[0], s, 0) <= 0.1) continue;
    const Action a(gen.uniform(-1, 1), gen.uniform(-1, 1));
    const State next = step(cfg.world.plant, s, a);
    const MpcModel model(cfg, theta);
    const MpcNlp qp = build_action_value_problem(model, s, a, 0);
    const MpcOutcome q = solve_mpc(qp);
    const MpcOutcome v = solve_mpc(build_value_problem(model, next, 1));
    REQUIRE_FALSE(q.failed);
    REQUIRE_FALSE(v.failed);
    const double target = stage_cost(cfg.weights, s, a) + 0.99 * v.value;
    const double tau = target - q.value;
    const Eigen::VectorXd grad = value_gradient(qp, q.solution).grad;
    if (std::abs(tau) * grad.norm() < 1e-6) continue;

    GradBuffer buf(1);
    buf.push(-tau * grad);
    // Small steps relative to each coordinate's scale.
    AdamState adam = AdamState::create(1e-6 * theta.values().cwiseAbs().cwiseMax(1.0));
    buffered_update(buf, adam, theta);
    const MpcModel moved(cfg, theta);
    const MpcOutcome q2 = solve_mpc(build_action_value_problem(moved, s, a, 0));
    REQUIRE_FALSE(q2.failed);
    CHECK(std::abs(target - q2.value) < std::abs(tau));
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("zero episodes give an empty log") {
  const MpcConfig cfg = static_lod();
  const ThetaVector theta = lod_theta(cfg);
  TrainerConfig tc;
  tc.episodes = 0;
  const TrainingLog log = run_training(cfg, theta, tc);
  CHECK(log.episodes.empty());
  CHECK(log.theta.values() == theta.values());
}

TEST_CASE("no noise and no learning repeat the same trajectory") {
  const MpcConfig cfg = static_lod();
  TrainerConfig tc;
  tc.episodes = 3;
  tc.steps = 20;
  tc.learning_rate = 0.0;
  tc.noise_std.setZero();
  const TrainingLog log = run_training(cfg, lod_theta(cfg), tc);
  REQUIRE(log.episodes.size() == 3);
  for (const auto& r : log.episodes) {
    CHECK(r.cost == log.episodes[0].cost);
    CHECK(r.min_h == log.episodes[0].min_h);
    CHECK(r.updates == 1);
    CHECK(r.theta == log.episodes[0].theta);
  }
  const Rollout ev = evaluate_policy(MpcModel(cfg, lod_theta(cfg)), tc.steps);
  CHECK(ev.cost == log.episodes[0].cost);
  CHECK(ev.states.size() == 21u);
  CHECK(ev.h.rows() == 21);
}

TEST_CASE("identical seeds give identical training logs") {
  const MpcConfig cfg = static_lod();
  TrainerConfig tc;
  tc.episodes = 3;
  tc.steps = 25;
  tc.learning_rate = 0.02;
  tc.block_learning_rates["F"] = 2.0;
  tc.seed = 9;
  const TrainingLog a = run_training(cfg, lod_theta(cfg), tc);
  const TrainingLog b = run_training(cfg, lod_theta(cfg), tc);
  REQUIRE(a.episodes.size() == b.episodes.size());
  for (size_t i = 0; i < a.episodes.size(); ++i) {
    CHECK(a.episodes[i].cost == b.episodes[i].cost);
    CHECK(a.episodes[i].mean_abs_td == b.episodes[i].mean_abs_td);
    CHECK(a.episodes[i].theta == b.episodes[i].theta);
  }
  CHECK(a.theta.values() != lod_theta(cfg).values());
  CHECK(a.theta.within_bounds());
}

TEST_CASE("fixed-size buffers update mid-episode") {
  const MpcConfig cfg = static_lod();
  TrainerConfig tc;
  tc.episodes = 1;
  tc.steps = 10;
  tc.buffer_size = 4;
  const TrainingLog log = run_training(cfg, lod_theta(cfg), tc);
  REQUIRE(log.episodes.size() == 1);
  CHECK(log.episodes[0].updates == log.episodes[0].transitions / 4);
}
