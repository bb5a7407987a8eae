#include "cbfmpc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace cbfmpc {

double td_error(double cost, double discount, double v_next, double q_cur) {
  return cost + discount * v_next - q_cur;
}

double augment_cost(double cost, const Eigen::MatrixXd& slack, double w_rl) {
  if ((slack.array() < 0.0).any()) throw std::invalid_argument("slacks must be non-negative");
  return cost + w_rl * slack.sum();
}

GradBuffer::GradBuffer(int capacity) : capacity_(1) { set_capacity(capacity); }

void GradBuffer::set_capacity(int capacity) {
  if (capacity < 1) throw std::invalid_argument("buffer capacity must be positive");
  capacity_ = capacity;
}

void GradBuffer::push(Eigen::VectorXd g) {
  if (full()) throw std::logic_error("gradient buffer is full");
  if (!grads_.empty() && g.size() != grads_.front().size()) {
    throw std::invalid_argument("gradient has the wrong size");
  }
  grads_.push_back(std::move(g));
}

Eigen::VectorXd GradBuffer::mean() const {
  if (grads_.empty()) throw std::logic_error("gradient buffer is empty");
  Eigen::VectorXd m = Eigen::VectorXd::Zero(grads_.front().size());
  for (const auto& g : grads_) m += g;
  return m / static_cast<double>(grads_.size());
}

AdamState AdamState::create(const Eigen::VectorXd& lr) {
  AdamState a;
  a.m = Eigen::VectorXd::Zero(lr.size());
  a.v = Eigen::VectorXd::Zero(lr.size());
  a.lr = lr;
  return a;
}

Eigen::VectorXd adam_step(AdamState& adam, const Eigen::VectorXd& g) {
  if (g.size() != adam.m.size()) throw std::invalid_argument("gradient has the wrong size");
  ++adam.step;
  adam.m = adam.beta1 * adam.m + (1.0 - adam.beta1) * g;
  adam.v = adam.beta2 * adam.v + (1.0 - adam.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.step));
  const Eigen::ArrayXd mhat = adam.m.array() / c1;
  const Eigen::ArrayXd vhat = adam.v.array() / c2;
  return (-adam.lr.array() * mhat / (vhat.sqrt() + adam.eps)).matrix();
}

Eigen::VectorXd project_step(const Eigen::VectorXd& theta, const Eigen::VectorXd& step,
                             const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  Eigen::VectorXd d = step;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const double cand = theta(i) + step(i);
    if (cand < lower(i)) d(i) = lower(i) - theta(i);
    if (cand > upper(i)) d(i) = upper(i) - theta(i);
  }
  return d;
}

void buffered_update(GradBuffer& buffer, AdamState& adam, ThetaVector& theta) {
  if (!buffer.full()) throw std::logic_error("gradient buffer is not full");
  const Eigen::VectorXd g = buffer.mean();
  const Eigen::VectorXd d = project_step(theta.values(), adam_step(adam, g), theta.lower(), theta.upper());
  // Clamp once more so rounding in theta + d cannot leave the box.
  theta.set_values((theta.values() + d).cwiseMax(theta.lower()).cwiseMin(theta.upper()));
  buffer.clear();
}

NoiseSchedule::NoiseSchedule(Eigen::Vector2d std0, double decay, std::uint64_t seed)
    : std0_(std::move(std0)), decay_(decay), rng_(seed) {
  if ((std0_.array() < 0.0).any()) throw std::invalid_argument("noise std must be non-negative");
  if (!(decay_ > 0.0 && decay_ <= 1.0)) throw std::invalid_argument("noise decay must lie in (0, 1]");
}

Eigen::Vector2d NoiseSchedule::std_at(int episode) const {
  return std0_ * std::pow(decay_, static_cast<double>(episode));
}

Eigen::Vector2d NoiseSchedule::sample(int episode) {
  const Eigen::Vector2d sd = std_at(episode);
  std::normal_distribution<double> unit(0.0, 1.0);
  Eigen::Vector2d xi;
  for (int i = 0; i < 2; ++i) xi(i) = sd(i) * unit(rng_);
  return xi;
}

Eigen::VectorXd learning_rates(const ThetaVector& theta, const TrainerConfig& tc) {
  Eigen::VectorXd lr = Eigen::VectorXd::Constant(theta.size(), tc.learning_rate);
  for (const auto& [name, rate] : tc.block_learning_rates) {
    const auto& b = theta.block(name);
    lr.segment(b.offset, b.size).setConstant(rate);
  }
  return lr;
}

namespace {

double min_barrier(const World& world, const State& s, int t) {
  double m = std::numeric_limits<double>::infinity();
  for (const Obstacle& ob : world.obstacles) m = std::min(m, barrier_value(ob, s, t));
  return m;
}

}  // namespace

Rollout evaluate_policy(const MpcModel& model, int steps, const SolverConfig& solver,
                        int max_failures) {
  const MpcConfig& cfg = model.config();
  const int O = cfg.num_obstacles();
  Rollout r;
  r.h.resize(steps + 1, O);
  r.decay = Eigen::MatrixXd::Zero(steps, O);
  r.slack = Eigen::VectorXd::Zero(steps);
  MpcPolicy policy(model, solver);
  State s = cfg.world.start;
  r.states.push_back(s);
  for (int i = 0; i < O; ++i) r.h(0, i) = barrier_value(cfg.world.obstacles[i], s, 0);
  r.min_h = min_barrier(cfg.world, s, 0);
  for (int t = 0; t < steps; ++t) {
    const MpcOutcome out = policy.act(s, t);
    if (out.failed && ++r.failures > max_failures && max_failures >= 0) {
      r.aborted = true;
      r.h.conservativeResize(t + 1, O);
      r.decay.conservativeResize(t, O);
      r.slack.conservativeResize(t);
      break;
    }
    r.actions.push_back(out.u0);
    r.cost += stage_cost(cfg.weights, s, out.u0);
    r.decay.row(t) = out.decay.row(0);
    r.slack(t) = out.slack_total();
    r.slack_total += out.slack_total();
    s = step(cfg.world.plant, s, out.u0);
    r.states.push_back(s);
    for (int i = 0; i < O; ++i) r.h(t + 1, i) = barrier_value(cfg.world.obstacles[i], s, t + 1);
    r.min_h = std::min(r.min_h, r.h.row(t + 1).minCoeff());
  }
  return r;
}

TrainingLog run_training(const MpcConfig& cfg, const ThetaVector& theta0, const TrainerConfig& tc,
                         const EpisodeCallback& on_episode) {
  if (tc.episodes < 0 || tc.steps < 1) throw std::invalid_argument("invalid episode settings");
  TrainingLog log;
  log.theta = theta0;
  ThetaVector& theta = log.theta;
  AdamState adam = AdamState::create(learning_rates(theta, tc));
  adam.beta1 = tc.beta1;
  adam.beta2 = tc.beta2;
  adam.eps = tc.adam_eps;
  NoiseSchedule noise(tc.noise_std, tc.noise_decay, tc.seed);
  GradBuffer buffer(tc.buffer_size > 0 ? tc.buffer_size : tc.steps);

  for (int ep = 0; ep < tc.episodes; ++ep) {
    EpisodeRecord rec;
    rec.episode = ep;
    rec.noise_std = noise.std_at(ep);
    auto model = std::make_unique<MpcModel>(cfg, theta);
    MpcPolicy policy(*model, tc.solver);
    State s = cfg.world.start;
    rec.min_h = min_barrier(cfg.world, s, 0);
    double td_abs = 0.0;
    // Transitions of one episode fill the buffer when its capacity is implicit.
    if (tc.buffer_size <= 0) buffer.set_capacity(tc.steps);

    for (int t = 0; t < tc.steps; ++t) {
      const RnnHiddenState hidden_t = policy.hidden();
      const Eigen::Vector2d xi = noise.sample(ep);
      const MpcOutcome explore = policy.act(s, t, xi);
      const Action a = explore.u0;
      const double L = stage_cost(cfg.weights, s, a);
      const double slack = explore.slack_total();
      const double Lt = L + tc.w_rl * slack;
      const State next = step(cfg.world.plant, s, a);

      const MpcNlp qp = build_action_value_problem(*model, s, a, t, hidden_t);
      const MpcOutcome q = solve_mpc(qp, tc.solver, policy.last());
      const MpcNlp vp = build_value_problem(*model, next, t + 1, policy.hidden());
      const MpcOutcome v = solve_mpc(vp, tc.solver, policy.shifted());

      rec.cost += L;
      rec.slack_total += slack;
      rec.min_h = std::min(rec.min_h, min_barrier(cfg.world, next, t + 1));
      s = next;

      if (explore.failed || q.failed || v.failed) {
        if (++rec.failures > tc.max_failures) {
          rec.aborted = true;
          break;
        }
        continue;
      }
      const double tau = td_error(Lt, tc.discount, v.value, q.value);
      td_abs += std::abs(tau);
      ++rec.transitions;
      buffer.push(-tau * value_gradient(qp, q.solution).grad);
      if (buffer.full()) {
        buffered_update(buffer, adam, theta);
        ++rec.updates;
        if (t + 1 < tc.steps) {
          // Later solves in this episode use the updated parameters.
          auto updated = std::make_unique<MpcModel>(cfg, theta);
          policy.rebind(*updated);
          model = std::move(updated);
        }
      }
    }
    if (tc.buffer_size <= 0 && !buffer.empty()) {
      buffer.set_capacity(buffer.size());
      buffered_update(buffer, adam, theta);
      ++rec.updates;
    }
    rec.slack_penalty = tc.w_rl * rec.slack_total;
    rec.mean_abs_td = rec.transitions > 0 ? td_abs / rec.transitions : 0.0;
    if (tc.eval_every > 0 && ((ep + 1) % tc.eval_every == 0 || ep + 1 == tc.episodes)) {
      const Rollout r = evaluate_policy(MpcModel(cfg, theta), tc.steps, tc.solver);
      rec.eval_cost = r.cost;
      rec.eval_min_h = r.min_h;
    }
    rec.theta = theta.values();
    log.episodes.push_back(rec);
    if (on_episode) on_episode(log.episodes.back());
  }
  return log;
}

}  // namespace cbfmpc
