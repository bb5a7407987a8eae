#include "cbfmpc/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cbfmpc {

DoubleIntegrator DoubleIntegrator::zoh(double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("sample time must be positive");
  DoubleIntegrator p;
  p.dt = dt;
  p.A.setIdentity();
  p.A(0, 2) = dt;
  p.A(1, 3) = dt;
  p.B.setZero();
  p.B(0, 0) = 0.5 * dt * dt;
  p.B(1, 1) = 0.5 * dt * dt;
  p.B(2, 0) = dt;
  p.B(3, 1) = dt;
  return p;
}

State step(const DoubleIntegrator& plant, const State& s, const Action& a) {
  if (!s.allFinite() || !a.allFinite()) {
    throw std::invalid_argument("step: non-finite state or action");
  }
  return plant.A * s + plant.B * a;
}

ObstaclePose obstacle_pose_at(const Obstacle& ob, int t) {
  if (!ob.motion) return {Eigen::Vector2d(ob.cx0, ob.cy0), 0};
  const HorizontalMotion& m = *ob.motion;
  const double length = m.x_max - m.x_min;
  if (length <= 0.0) return {Eigen::Vector2d(ob.cx0, ob.cy0), m.direction};

  // Unfold the back-and-forth walk onto a circle of circumference 2L.
  const double period = 2.0 * length;
  const double offset = std::clamp(ob.cx0 - m.x_min, 0.0, length);
  double phase = m.direction >= 0 ? offset : period - offset;
  phase = std::fmod(phase + m.speed * static_cast<double>(std::max(t, 0)), period);
  if (phase < 0.0) phase += period;

  const bool outbound = phase < length;
  const double x = outbound ? m.x_min + phase : m.x_min + (period - phase);
  return {Eigen::Vector2d(x, ob.cy0), outbound ? 1 : -1};
}

Eigen::Vector2d obstacle_center_at(const Obstacle& ob, int t) {
  return obstacle_pose_at(ob, t).center;
}

double stage_cost(const StageCostWeights& w, const State& s, const Action& a) {
  return s.dot(w.Q * s) + a.dot(w.R * a);
}

double rollout_cost(const StageCostWeights& w, std::span<const TraceStep> trace,
                    double discount) {
  if (trace.empty()) throw std::invalid_argument("rollout_cost: empty trace");
  double total = 0.0;
  double weight = 1.0;
  for (const TraceStep& st : trace) {
    total += weight * stage_cost(w, st.s, st.a);
    weight *= discount;
  }
  return total;
}

void World::validate() const {
  if (obstacles.empty()) throw std::invalid_argument("world needs at least one obstacle");
  for (const Obstacle& ob : obstacles) {
    if (!(ob.radius > 0.0)) throw std::invalid_argument("obstacle radius must be positive");
    if (ob.motion && !(ob.motion->x_max >= ob.motion->x_min)) {
      throw std::invalid_argument("obstacle motion segment is reversed");
    }
    if (ob.motion && ob.motion->speed < 0.0) {
      throw std::invalid_argument("obstacle speed must be non-negative");
    }
  }
  if (!(state_bound > 0.0) || !(action_bound > 0.0)) {
    throw std::invalid_argument("state and action bounds must be positive");
  }
  if (!start.allFinite()) throw std::invalid_argument("start state must be finite");
}

bool within_state_bounds(const World& world, const State& s) {
  return s.cwiseAbs().maxCoeff() <= world.state_bound;
}

bool within_action_bounds(const World& world, const Action& a) {
  return a.cwiseAbs().maxCoeff() <= world.action_bound;
}

}  // namespace cbfmpc
