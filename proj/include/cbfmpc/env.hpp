#pragma once

#include <Eigen/Core>

#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace cbfmpc {

/// Planar double-integrator state (px, py, vx, vy).
using State = Eigen::Vector4d;
/// Acceleration input (ax, ay).
using Action = Eigen::Vector2d;

inline constexpr int kStateDim = 4;
inline constexpr int kActionDim = 2;

/// Exact zero-order-hold discretization of the planar double integrator.
struct DoubleIntegrator {
  double dt = 0.2;
  Eigen::Matrix4d A = Eigen::Matrix4d::Identity();
  Eigen::Matrix<double, 4, 2> B = Eigen::Matrix<double, 4, 2>::Zero();

  static DoubleIntegrator zoh(double dt);
};

/// One plant step A s + B a. Throws std::invalid_argument on non-finite input.
State step(const DoubleIntegrator& plant, const State& s, const Action& a);

/// Back-and-forth motion along a horizontal segment at constant speed.
struct HorizontalMotion {
  double x_min = 0.0;
  double x_max = 0.0;
  double speed = 0.2;  // metres per step
  int direction = 1;   // +1 moving toward x_max, -1 toward x_min
};

struct ObstaclePose {
  Eigen::Vector2d center;
  int direction = 0;  // 0 for static obstacles
};

/// Circular keep-out region, optionally moving.
struct Obstacle {
  double cx0 = 0.0;
  double cy0 = 0.0;
  double radius = 1.0;
  std::optional<HorizontalMotion> motion;

  bool moving() const { return motion.has_value(); }
};

/// Center (and travel direction) after t steps; moving obstacles reflect at
/// the segment endpoints.
ObstaclePose obstacle_pose_at(const Obstacle& ob, int t);
Eigen::Vector2d obstacle_center_at(const Obstacle& ob, int t);

struct StageCostWeights {
  Eigen::Matrix4d Q = 10.0 * Eigen::Matrix4d::Identity();
  Eigen::Matrix2d R = Eigen::Matrix2d::Identity();
};

/// s'Qs + a'Ra.
double stage_cost(const StageCostWeights& w, const State& s, const Action& a);

struct TraceStep {
  State s;
  Action a;
};

/// Discounted sum of stage costs over a trace; throws on an empty trace.
double rollout_cost(const StageCostWeights& w, std::span<const TraceStep> trace,
                    double discount = 1.0);

struct World {
  DoubleIntegrator plant = DoubleIntegrator::zoh(0.2);
  std::vector<Obstacle> obstacles;
  double state_bound = 5.0;   // |s|_inf
  double action_bound = 1.0;  // |a|_inf
  State start = State(-5.0, -5.0, 0.0, 0.0);

  int num_obstacles() const { return static_cast<int>(obstacles.size()); }
  /// Throws std::invalid_argument when the world is malformed.
  void validate() const;
};

bool within_state_bounds(const World& world, const State& s);
bool within_action_bounds(const World& world, const Action& a);

}  // namespace cbfmpc
