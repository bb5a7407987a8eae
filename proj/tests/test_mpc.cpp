#include "cbfmpc/barrier.hpp"
#include "cbfmpc/gradcheck.hpp"
#include "cbfmpc/mpc.hpp"
#include "support.hpp"

#include <Eigen/Cholesky>
#include <doctest.h>
#include <json.hpp>

#include <set>

using namespace cbfmpc;
using cbfmpc::testing::Gen;
using cbfmpc::testing::rel_err;

namespace {

MpcConfig static_cfg(Variant v, int horizon = 1) {
  MpcConfig cfg;
  cfg.horizon = horizon;
  cfg.variant = v;
  cfg.world.obstacles.push_back({-2.0, -2.25, 1.5, std::nullopt});
  cfg.hidden = {8, 8};
  return cfg;
}

MpcConfig dynamic_cfg(Variant v, int horizon) {
  MpcConfig cfg;
  cfg.horizon = horizon;
  cfg.variant = v;
  cfg.w_mpc = std::pow(20.0, 7);
  cfg.world.obstacles.push_back({-2.0, 0.0, 1.0, std::nullopt});
  cfg.world.obstacles.push_back({-4.0, -1.5, 0.7, HorizontalMotion{-4.0, 0.0, 0.2, 1}});
  cfg.world.obstacles.push_back({-4.0, -3.3, 0.7, HorizontalMotion{-4.0, 1.0, 0.2, 1}});
  cfg.hidden = {8, 8};
  return cfg;
}

ThetaVector theta_for(const MpcConfig& cfg, double omega_ref = 0.4, double p_omega = 1000.0,
                      std::uint64_t seed = 1) {
  ThetaInit init;
  init.omega_ref = omega_ref;
  init.p_omega = p_omega;
  std::mt19937_64 rng(seed);
  return initial_theta(cfg, init, rng);
}

ThetaVector with_block(ThetaVector theta, const std::string& name, double value) {
  Eigen::VectorXd v = theta.values();
  const auto& b = theta.block(name);
  v.segment(b.offset, b.size).setConstant(value);
  theta.set_values(v);
  return theta;
}

}  // namespace

TEST_CASE("layout partitions the decision vector") {
  for (int N : {1, 2, 6}) {
    for (int O : {1, 3}) {
      for (bool lod : {true, false}) {
        const MpcLayout lay{N, O, lod};
        std::set<int> seen;
        for (int k = 0; k < N; ++k) {
          for (int j = 0; j < 2; ++j) seen.insert(lay.u(k) + j);
          for (int j = 0; j < 4; ++j) seen.insert(lay.x(k + 1) + j);
          for (int i = 0; i < O; ++i) {
            seen.insert(lay.sigma(k, i));
            if (lod) seen.insert(lay.omega(k, i));
          }
          seen.insert(lay.state_slack(k));
        }
        CHECK(static_cast<int>(seen.size()) == lay.size());
        CHECK(*seen.begin() == 0);
        CHECK(*seen.rbegin() == lay.size() - 1);
      }
    }
  }
  CHECK(MpcLayout{1, 1, true}.size() == 9);
  CHECK(MpcLayout{6, 3, false}.size() == 6 * 6 + 18 + 6);
}

TEST_CASE("theta blocks per variant") {
  const ThetaVector lod = theta_for(static_cfg(Variant::Lod, 3));
  CHECK(lod.blocks().size() == 3u);
  CHECK(lod.block("omega_ref").size == 3);
  CHECK(lod.segment("F") == Eigen::Vector4d::Constant(100.0));
  const ThetaVector nn = theta_for(static_cfg(Variant::Nn));
  CHECK(nn.has_block("W3"));
  CHECK_FALSE(nn.has_block("Wq1"));
  CHECK(nn.block("W1").size == 8 * 6);
  const ThetaVector rnn = theta_for(static_cfg(Variant::Rnn));
  CHECK(rnn.block("Wq1").size == 64);
  CHECK(rnn.block("Wq2").size == 64);
  CHECK(rnn.size() == nn.size() + 128);
  CHECK_THROWS_AS(lod.block("W1"), std::out_of_range);
}

TEST_CASE("inactive barrier far from the obstacle") {
  const MpcConfig cfg = static_cfg(Variant::Lod);
  const MpcModel model(cfg, theta_for(cfg));
  const MpcOutcome out = solve_mpc(build_value_problem(model, State(4.0, 4.0, 0.0, 0.0), 0));
  REQUIRE_FALSE(out.failed);
  CHECK(out.slack_total() == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
  CHECK(out.decay(0, 0) == doctest::Approx(0.4).epsilon(1e-6));
}

TEST_CASE("one-step problem away from obstacles is an LQ problem") {
  const MpcConfig cfg = static_cfg(Variant::Lod);
  const MpcModel model(cfg, theta_for(cfg));
  const State s(1.0, 0.5, -0.2, 0.1);
  const auto& A = cfg.world.plant.A;
  const auto& B = cfg.world.plant.B;
  const Eigen::Matrix4d F = Eigen::Vector4d::Constant(100.0).asDiagonal();
  const Eigen::Matrix2d H = cfg.weights.R + B.transpose() * F * B;
  const Eigen::Vector2d u = -H.ldlt().solve(B.transpose() * F * A * s);
  REQUIRE(u.cwiseAbs().maxCoeff() < 1.0);
  const State x1 = A * s + B * u;
  const double v = s.dot(cfg.weights.Q * s) + u.dot(cfg.weights.R * u) + x1.dot(F * x1);
  const MpcOutcome out = solve_mpc(build_value_problem(model, s, 0));
  REQUIRE_FALSE(out.failed);
  CHECK((out.u0 - u).norm() < 1e-7);
  CHECK(rel_err(out.value, v) < 1e-9);
}

TEST_CASE("zero network gives decay one half") {
  for (Variant v : {Variant::Nn, Variant::Rnn}) {
    const MpcConfig cfg = static_cfg(v, 3);
    ThetaVector theta = theta_for(cfg);
    Eigen::VectorXd vals = theta.values();
    vals.segment(4, vals.size() - 4).setZero();
    theta.set_values(vals);
    const MpcModel model(cfg, theta);
    const MpcOutcome out = solve_mpc(build_value_problem(model, State(-4.0, -4.5, 0.3, 0.2), 0));
    REQUIRE_FALSE(out.failed);
    CHECK((out.decay.array() - 0.5).abs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("action value at the optimal first input equals the value") {
  Gen gen(11);
  for (Variant v : {Variant::Lod, Variant::Nn, Variant::Rnn}) {
    const MpcConfig cfg = static_cfg(v, 3);
    const MpcModel model(cfg, theta_for(cfg));
    for (int trial = 0; trial < 5; ++trial) {
      const State s(gen.uniform(-5, -1), gen.uniform(-5, -1), gen.uniform(-0.5, 0.5), gen.uniform(-0.5, 0.5));
      const MpcOutcome vo = solve_mpc(build_value_problem(model, s, 0));
      if (vo.failed) continue;
      const MpcOutcome qo = solve_mpc(build_action_value_problem(model, s, vo.u0, 0));
      REQUIRE_FALSE(qo.failed);
      CHECK(rel_err(qo.value, vo.value) < 1e-6);
      for (int j = 0; j < 4; ++j) {
        const Action a = gen.vector(2, -1, 1);
        const MpcOutcome q = solve_mpc(build_action_value_problem(model, s, a, 0));
        if (q.failed) continue;
        CHECK(q.value >= vo.value - 1e-6 * std::max(1.0, vo.value));
      }
    }
  }
}

TEST_CASE("action outside the box is rejected") {
  const MpcConfig cfg = static_cfg(Variant::Lod);
  const MpcModel model(cfg, theta_for(cfg));
  CHECK_THROWS_AS(build_action_value_problem(model, cfg.world.start, Action(1.5, 0.0), 0),
                  std::invalid_argument);
}

TEST_CASE("exploratory program") {
  const MpcConfig cfg = static_cfg(Variant::Lod);
  const MpcModel model(cfg, theta_for(cfg));
  const State s(-4.0, -4.0, 0.2, 0.0);

  SUBCASE("zero perturbation equals the value program") {
    const MpcOutcome a = solve_mpc(build_exploratory_problem(model, s, Eigen::Vector2d::Zero(), 0));
    const MpcOutcome b = solve_mpc(build_value_problem(model, s, 0));
    CHECK(a.value == b.value);
    CHECK(a.u0 == b.u0);
  }
  SUBCASE("a large linear tilt saturates the input") {
    const MpcOutcome a = solve_mpc(build_exploratory_problem(model, s, Eigen::Vector2d(1e3, 0.0), 0));
    REQUIRE_FALSE(a.failed);
    CHECK(a.u0(0) == doctest::Approx(-1.0).epsilon(1e-9));
  }
  SUBCASE("objective gap is the tilt term") {
    Gen gen(2);
    for (int i = 0; i < 10; ++i) {
      const Eigen::Vector2d xi = gen.vector(2, -20, 20);
      const MpcNlp p = build_exploratory_problem(model, s, xi, 0);
      const MpcOutcome a = solve_mpc(p);
      REQUIRE_FALSE(a.failed);
      CHECK(a.value - p.unperturbed_value(a.solution.z) == doctest::Approx(xi.dot(a.u0)).epsilon(1e-9));
    }
  }
}

TEST_CASE("recurrent variant with zero recurrence matches the feedforward one") {
  const MpcConfig rcfg = dynamic_cfg(Variant::Rnn, 4);
  const MpcConfig ncfg = dynamic_cfg(Variant::Nn, 4);
  ThetaVector rnn = theta_for(rcfg);
  for (const auto& b : rnn.blocks())
    if (b.name.rfind("Wq", 0) == 0) rnn = with_block(rnn, b.name, 0.0);
  ThetaVector nn = theta_for(ncfg, 0.4, 1000.0, 99);
  Eigen::VectorXd v = nn.values();
  for (const auto& b : nn.blocks()) v.segment(b.offset, b.size) = rnn.segment(b.name);
  nn.set_values(v);
  const MpcModel rm(rcfg, rnn), nm(ncfg, nn);
  Gen gen(5);
  for (int i = 0; i < 10; ++i) {
    const State s(gen.uniform(-5, 0), gen.uniform(-5, -2), gen.uniform(-0.5, 0.5), gen.uniform(-0.5, 0.5));
    const int t = gen.integer(0, 40);
    const MpcOutcome a = solve_mpc(build_value_problem(rm, s, t));
    const MpcOutcome b = solve_mpc(build_value_problem(nm, s, t));
    REQUIRE(a.failed == b.failed);
    if (a.failed) continue;
    CHECK(rel_err(a.value, b.value) < 1e-8);
    CHECK((a.decay - b.decay).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("value is monotone in the decay penalty weight") {
  const MpcConfig cfg = static_cfg(Variant::Lod, 3);
  const State s(-4.2, -4.4, 0.9, 0.9);
  for (double omega_ref : {1.0, 0.05}) {
    double prev = -1.0;
    for (double p : {1.0, 1e2, 1e4}) {
      const MpcModel model(cfg, theta_for(cfg, omega_ref, p));
      const MpcOutcome out = solve_mpc(build_value_problem(model, s, 0));
      REQUIRE_FALSE(out.failed);
      CHECK(out.value >= prev - 1e-9 * out.value);
      prev = out.value;
    }
  }
}

TEST_CASE("tight decay at the boundary keeps the barrier condition") {
  const MpcConfig cfg = static_cfg(Variant::Lod);
  const Obstacle& ob = cfg.world.obstacles[0];
  const MpcModel model(cfg, theta_for(cfg, 1e-6, 1e4));
  Gen gen(9);
  for (int i = 0; i < 20; ++i) {
    const double ang = gen.uniform(0, 2 * M_PI);
    const State s(ob.cx0 + ob.radius * std::cos(ang), ob.cy0 + ob.radius * std::sin(ang),
                  gen.uniform(-0.5, 0.5), gen.uniform(-0.5, 0.5));
    const MpcNlp p = build_value_problem(model, s, 0);
    const MpcOutcome out = solve_mpc(p);
    REQUIRE_FALSE(out.failed);
    const std::vector<State> xs = p.states(out.solution.z);
    CHECK(cbf_residual(ob, xs[0], xs[1], out.decay(0, 0), out.slack(0, 0), 0) >= -1e-7);
    CHECK(barrier_value(ob, xs[1], 1) >= -out.slack(0, 0) - 1e-7);
  }
}

TEST_CASE("envelope gradient matches finite differences") {
  Gen gen(21);
  for (Variant v : {Variant::Lod, Variant::Nn, Variant::Rnn}) {
    const MpcConfig cfg = static_cfg(v, 2);
    int usable = 0;
    for (int trial = 0; trial < 8 && usable < 3; ++trial) {
      ThetaInit init;
      init.omega_ref = gen.uniform(0.3, 0.8);
      init.p_omega = gen.uniform(5, 25);
      init.terminal = gen.vector(4, 50, 150);
      const ThetaVector theta = initial_theta(cfg, init, gen.engine());
      const State s(gen.uniform(-5, -1), gen.uniform(-5, -1), gen.uniform(-0.5, 0.5), gen.uniform(-0.5, 0.5));
      const Action a = gen.vector(2, -1, 1);
      RnnHiddenState hidden;
      if (v == Variant::Rnn)
        for (int w : cfg.hidden) hidden.q.push_back(gen.vector(w, 0, 1));
      const GradCheckResult r = check_action_value_gradient(cfg, theta, s, a, gen.integer(0, 39), hidden);
      if (!r.usable()) continue;
      ++usable;
      CHECK(r.rel_error <= 1e-4);
    }
    CHECK(usable >= 1);
  }
}

TEST_CASE("problem dump is valid JSON") {
  const MpcConfig cfg = dynamic_cfg(Variant::Nn, 6);
  const MpcModel model(cfg, theta_for(cfg));
  const auto rec = nlohmann::json::parse(build_action_value_problem(model, cfg.world.start, Action(0.5, -0.5), 3).dump());
  CHECK(rec["problem"] == "action_value");
  CHECK(rec["horizon"] == 6);
  CHECK(rec["obstacles"] == 3);
  CHECK(rec["blocks"].size() == 4u);
  CHECK(rec["num_parameters"] == model.theta().size());
}

TEST_CASE("receding-horizon policy carries its warm start") {
  const MpcConfig cfg = dynamic_cfg(Variant::Rnn, 3);
  const MpcModel model(cfg, theta_for(cfg));
  MpcPolicy policy(model);
  CHECK_FALSE(policy.shifted());
  const MpcOutcome out = policy.act(cfg.world.start, 0);
  REQUIRE_FALSE(out.failed);
  REQUIRE(policy.shifted());
  REQUIRE(policy.last());
  CHECK(policy.shifted()->segment(0, 4) == policy.last()->segment(2, 4));
  CHECK(policy.hidden().q.size() == cfg.hidden.size());
  CHECK(policy.hidden().q[0] == out.hidden0.q[0]);
  policy.reset();
  CHECK_FALSE(policy.shifted());
  CHECK(policy.hidden().q[0].isZero());
}

TEST_CASE("decay approaches one as its penalty weight grows") {
  const MpcConfig cfg = static_cfg(Variant::Lod);
  // Inside the obstacle the nominal condition needs slack, so small P trades
  // decay for feasibility; outside it omega = 1 is already the loosest choice.
  for (const State& s : {State(-2.0, -1.5, 0.0, 0.0), State(-2.5, -2.0, 0.3, 0.3), State(-4.2, -4.4, 0.9, 0.9)}) {
    double gap = 2.0;
    for (double p : {1.0, 1e2, 1e4}) {
      const MpcModel model(cfg, theta_for(cfg, 1.0, p));
      const MpcOutcome out = solve_mpc(build_value_problem(model, s, 0));
      REQUIRE_FALSE(out.failed);
      const double g = 1.0 - out.decay(0, 0);
      CHECK(g >= -1e-12);
      CHECK(g <= gap + 1e-9);
      gap = g;
    }
  }
  const MpcModel model(cfg, theta_for(cfg, 1.0, 1.0));
  CHECK(solve_mpc(build_value_problem(model, State(-4.2, -4.4, 0.9, 0.9), 0)).decay(0, 0) ==
        doctest::Approx(1.0).epsilon(1e-9));
}
