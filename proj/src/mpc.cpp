#include "cbfmpc/mpc.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cbfmpc {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// ThetaVector

void ThetaVector::add_block(std::string name, const Eigen::VectorXd& values, double lower,
                            double upper) {
  const auto n = values.size();
  add_block(std::move(name), values, Eigen::VectorXd::Constant(n, lower),
            Eigen::VectorXd::Constant(n, upper));
}

void ThetaVector::add_block(std::string name, const Eigen::VectorXd& values,
                            const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  if (has_block(name)) throw std::invalid_argument("duplicate parameter block " + name);
  if (lower.size() != values.size() || upper.size() != values.size()) {
    throw std::invalid_argument("parameter block " + name + " has mismatched bounds");
  }
  const int off = size();
  const int n = static_cast<int>(values.size());
  blocks_.push_back({std::move(name), off, n});
  values_.conservativeResize(off + n);
  lower_.conservativeResize(off + n);
  upper_.conservativeResize(off + n);
  values_.segment(off, n) = values;
  lower_.segment(off, n) = lower;
  upper_.segment(off, n) = upper;
}

const ThetaVector::Block& ThetaVector::block(std::string_view name) const {
  for (const Block& b : blocks_)
    if (b.name == name) return b;
  throw std::out_of_range("unknown parameter block " + std::string(name));
}

bool ThetaVector::has_block(std::string_view name) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const Block& b) { return b.name == name; });
}

Eigen::VectorXd ThetaVector::segment(std::string_view name) const {
  const Block& b = block(name);
  return values_.segment(b.offset, b.size);
}

void ThetaVector::set_values(const Eigen::VectorXd& v) {
  if (v.size() != values_.size()) throw std::invalid_argument("parameter vector has the wrong size");
  if (!v.allFinite() || (v.array() < lower_.array()).any() || (v.array() > upper_.array()).any()) {
    throw std::invalid_argument("parameter vector violates its bounds");
  }
  values_ = v;
}

bool ThetaVector::within_bounds() const {
  return (values_.array() >= lower_.array()).all() && (values_.array() <= upper_.array()).all();
}

// ---------------------------------------------------------------------------
// Configuration and parameters

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Lod: return "lod";
    case Variant::Nn: return "nn";
    case Variant::Rnn: return "rnn";
  }
  return "unknown";
}

Variant parse_variant(std::string_view s) {
  if (s == "lod") return Variant::Lod;
  if (s == "nn") return Variant::Nn;
  if (s == "rnn") return Variant::Rnn;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected lod, nn or rnn)");
}

void MpcConfig::validate() const {
  world.validate();
  if (horizon < 1) throw std::invalid_argument("horizon must be at least 1");
  if (!(w_mpc > 0.0)) throw std::invalid_argument("w_mpc must be positive");
  if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("discount must lie in (0, 1]");
  if (variant != Variant::Lod) {
    if (hidden.empty()) throw std::invalid_argument("network needs at least one hidden layer");
    for (int h : hidden)
      if (h < 1) throw std::invalid_argument("hidden widths must be positive");
  }
}

ThetaVector initial_theta(const MpcConfig& cfg, const ThetaInit& init, std::mt19937_64& rng) {
  cfg.validate();
  ThetaVector theta;
  theta.add_block("F", init.terminal, kTerminalFloor, 1e6);
  const int NO = cfg.horizon * cfg.num_obstacles();
  if (cfg.variant == Variant::Lod) {
    theta.add_block("omega_ref", Eigen::VectorXd::Constant(NO, init.omega_ref), kDecayFloor,
                    init.omega_ref_upper);
    theta.add_block("p_omega", Eigen::VectorXd::Constant(NO, init.p_omega), 0.0, 1e6);
    return theta;
  }
  const DecayNetwork net =
      cfg.variant == Variant::Nn
          ? DecayNetwork(init_mlp(cfg.net_input_width(), cfg.hidden, cfg.num_obstacles(), rng,
                                  init.initial_decay, init.output_weight_scale))
          : DecayNetwork(init_rnn(cfg.net_input_width(), cfg.hidden, cfg.num_obstacles(), rng,
                                  init.initial_decay, init.output_weight_scale));
  const Eigen::VectorXd flat = net.flatten();
  int off = 0;
  for (const auto& [name, size] : net.blocks()) {
    theta.add_block(name, flat.segment(off, size), -init.weight_bound, init.weight_bound);
    off += size;
  }
  return theta;
}

namespace {

DecayNetwork network_shape(const MpcConfig& cfg) {
  MlpParams p;
  int w = cfg.net_input_width();
  for (int h : cfg.hidden) {
    p.layers.push_back({Eigen::MatrixXd::Zero(h, w), Eigen::VectorXd::Zero(h)});
    w = h;
  }
  p.layers.push_back({Eigen::MatrixXd::Zero(cfg.num_obstacles(), w),
                      Eigen::VectorXd::Zero(cfg.num_obstacles())});
  if (cfg.variant == Variant::Nn) return DecayNetwork(std::move(p));
  RnnParams r{std::move(p), {}};
  for (int h : cfg.hidden) r.Wq.push_back(Eigen::MatrixXd::Zero(h, h));
  return DecayNetwork(std::move(r));
}

}  // namespace

MpcModel::MpcModel(MpcConfig cfg, ThetaVector theta) : cfg_(std::move(cfg)), theta_(std::move(theta)) {
  cfg_.validate();
  if (!theta_.within_bounds()) throw std::invalid_argument("parameters violate their bounds");
  terminal_ = theta_.segment("F");
  const int N = cfg_.horizon, O = cfg_.num_obstacles();
  if (cfg_.variant == Variant::Lod) {
    const Eigen::VectorXd ref = theta_.segment("omega_ref");
    const Eigen::VectorXd pw = theta_.segment("p_omega");
    if (ref.size() != N * O || pw.size() != N * O) {
      throw std::invalid_argument("decay parameter blocks do not match horizon and obstacles");
    }
    lod_.omega_ref = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(ref.data(), N, O);
    lod_.p_omega = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(pw.data(), N, O);
    return;
  }
  net_ = network_shape(cfg_);
  const int off = theta_.block("W1").offset;
  if (off + net_.num_parameters() != theta_.size()) {
    throw std::invalid_argument("network parameter blocks do not match the configuration");
  }
  net_.assign(std::span<const double>(theta_.values().data() + off, net_.num_parameters()));
}

// ---------------------------------------------------------------------------
// MpcNlp

struct MpcNlp::Network {
  NetworkPass pass;
  Eigen::MatrixXd gamma;  // N x O
  // Per (k, i): d a_{k,i} / d x_j as rows j = 0..N-1 (row 0 multiplies the
  // fixed initial state and is unused), and the curvature coefficient c_j
  // with d^2 a / d x_j^2 = c_j diag(1, 1, 0, 0).
  std::vector<Eigen::Matrix<double, -1, 4>> da;
  std::vector<Eigen::VectorXd> curv;
};

MpcNlp::MpcNlp(const MpcModel& model, const State& s, int t, std::optional<Action> fixed_action,
               const Eigen::Vector2d& xi, RnnHiddenState hidden)
    : model_(&model), s_(s), t_(t), action_(std::move(fixed_action)), xi_(xi), hidden_(std::move(hidden)) {
  const MpcConfig& cfg = model.config();
  lay_ = {cfg.horizon, cfg.num_obstacles(), cfg.variant == Variant::Lod};
  if (!s.allFinite()) throw std::invalid_argument("state must be finite");
  if (!xi.allFinite()) throw std::invalid_argument("perturbation must be finite");
  if (t < 0) throw std::invalid_argument("time index must be non-negative");
  if (cfg.variant == Variant::Rnn) {
    if (hidden_.empty()) hidden_ = RnnHiddenState::zeros(model.network().mlp());
    const auto& mlp = model.network().mlp();
    if (static_cast<int>(hidden_.q.size()) != mlp.hidden_layers()) {
      throw std::invalid_argument("recurrent hidden state does not match the network");
    }
    for (int j = 0; j < mlp.hidden_layers(); ++j)
      if (hidden_.q[j].size() != mlp.layers[j].b.size())
        throw std::invalid_argument("recurrent hidden state does not match the network");
  }
}

int MpcNlp::num_equalities() const { return 4 * lay_.N + (action_ ? 2 : 0); }
int MpcNlp::num_inequalities() const { return lay_.N * lay_.O + 8 * lay_.N; }

Eigen::VectorXd MpcNlp::lower_bounds() const {
  Eigen::VectorXd lb = Eigen::VectorXd::Constant(lay_.size(), -kInf);
  const double ab = model_->config().world.action_bound;
  lb.head(2 * lay_.N).setConstant(-ab);
  for (int k = 0; k < lay_.N; ++k) {
    for (int i = 0; i < lay_.O; ++i) {
      lb(lay_.sigma(k, i)) = 0.0;
      if (lay_.lod) lb(lay_.omega(k, i)) = kDecayFloor;
    }
    lb(lay_.state_slack(k)) = 0.0;
  }
  return lb;
}

Eigen::VectorXd MpcNlp::upper_bounds() const {
  Eigen::VectorXd ub = Eigen::VectorXd::Constant(lay_.size(), kInf);
  ub.head(2 * lay_.N).setConstant(model_->config().world.action_bound);
  if (lay_.lod)
    for (int k = 0; k < lay_.N; ++k)
      for (int i = 0; i < lay_.O; ++i) ub(lay_.omega(k, i)) = 1.0;
  return ub;
}

std::vector<State> MpcNlp::states(const Eigen::VectorXd& z) const {
  std::vector<State> xs(lay_.N + 1);
  xs[0] = s_;
  for (int k = 1; k <= lay_.N; ++k) xs[k] = z.segment<4>(lay_.x(k));
  return xs;
}

MpcNlp::Network MpcNlp::run_network(const std::vector<State>& xs, bool derivatives) const {
  const int N = lay_.N, O = lay_.O;
  const auto& obs = model_->config().world.obstacles;
  const int width = model_->config().net_input_width();
  std::vector<Eigen::VectorXd> inputs(N);
  for (int k = 0; k < N; ++k) {
    Eigen::VectorXd in(width);
    in.head<4>() = xs[k];
    for (int i = 0; i < O; ++i) {
      in(4 + i) = barrier_value(obs[i], xs[k], t_ + k);
      in(4 + O + i) = obs[i].moving() ? xs[k](0) - obstacle_center_at(obs[i], t_ + k)(0) : 0.0;
    }
    inputs[k] = std::move(in);
  }
  Network net;
  const DecayNetwork& dn = model_->network();
  net.pass = dn.forward(inputs, dn.recurrent() ? hidden_ : RnnHiddenState{});
  net.gamma = net.pass.out;
  if (!derivatives) return net;

  // d z0_j / d x_j
  std::vector<Eigen::MatrixXd> dz(N);
  for (int j = 0; j < N; ++j) {
    dz[j] = Eigen::MatrixXd::Zero(width, 4);
    dz[j].topRows<4>().setIdentity();
    for (int i = 0; i < O; ++i) {
      dz[j].row(4 + i) = barrier_gradient(obs[i], xs[j], t_ + j).transpose();
      if (obs[i].moving()) dz[j](4 + O + i, 0) = 1.0;
    }
  }
  net.da.resize(N * O);
  net.curv.resize(N * O);
  std::vector<Eigen::VectorXd> input_grad;
  for (int k = 0; k < N; ++k) {
    for (int i = 0; i < O; ++i) {
      Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(N, O);
      seed(k, i) = 1.0;
      dn.backward(net.pass, seed, nullptr, &input_grad);
      auto& da = net.da[k * O + i];
      auto& curv = net.curv[k * O + i];
      da.setZero(N, 4);
      curv.setZero(N);
      for (int j = 0; j <= k; ++j) {
        da.row(j) = input_grad[j].transpose() * dz[j];
        curv(j) = 2.0 * input_grad[j].segment(4, O).sum();
      }
    }
  }
  return net;
}

namespace {

double violation_slack(double c) { return std::max(0.0, c); }

}  // namespace

Eigen::VectorXd MpcNlp::repair(const Eigen::VectorXd& zin) const {
  if (zin.size() != lay_.size()) throw std::invalid_argument("warm start has the wrong size");
  const MpcConfig& cfg = model_->config();
  Eigen::VectorXd z = zin;
  const double ab = cfg.world.action_bound;
  z.head(2 * lay_.N) = z.head(2 * lay_.N).cwiseMax(-ab).cwiseMin(ab);
  if (action_) z.head<2>() = *action_;
  State x = s_;
  for (int k = 0; k < lay_.N; ++k) {
    x = cfg.world.plant.A * x + cfg.world.plant.B * z.segment<2>(lay_.u(k));
    z.segment<4>(lay_.x(k + 1)) = x;
  }
  if (lay_.lod)
    for (int k = 0; k < lay_.N; ++k)
      for (int i = 0; i < lay_.O; ++i)
        z(lay_.omega(k, i)) = std::clamp(z(lay_.omega(k, i)), kDecayFloor, 1.0);
  // Slacks at the violation magnitude of the unslacked constraints.
  for (int k = 0; k < lay_.N; ++k) {
    for (int i = 0; i < lay_.O; ++i) z(lay_.sigma(k, i)) = 0.0;
    z(lay_.state_slack(k)) = 0.0;
  }
  NlpEval ev;
  evaluate(z, false, ev);
  for (int k = 0; k < lay_.N; ++k) {
    for (int i = 0; i < lay_.O; ++i) z(lay_.sigma(k, i)) = violation_slack(ev.cin(cbf_row(k, i)));
    const int base = lay_.N * lay_.O + 8 * k;
    z(lay_.state_slack(k)) = violation_slack(ev.cin.segment(base, 8).maxCoeff());
  }
  return z;
}

Eigen::VectorXd MpcNlp::initial_point() const {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(lay_.size());
  if (lay_.lod) {
    const auto& ref = model_->lod().omega_ref;
    for (int k = 0; k < lay_.N; ++k)
      for (int i = 0; i < lay_.O; ++i) z(lay_.omega(k, i)) = ref(k, i);
  }
  return repair(z);
}

void MpcNlp::evaluate(const Eigen::VectorXd& z, bool derivatives, NlpEval& out) const {
  const MpcConfig& cfg = model_->config();
  const int N = lay_.N, O = lay_.O, n = lay_.size();
  const auto& obs = cfg.world.obstacles;
  const auto& Q = cfg.weights.Q;
  const auto& R = cfg.weights.R;
  const auto& F = model_->terminal();
  const std::vector<State> xs = states(z);

  // Objective.
  double f = 0.0;
  double wk = 1.0;
  if (derivatives) out.grad = Eigen::VectorXd::Zero(n);
  for (int k = 0; k < N; ++k) {
    const Eigen::Vector2d u = z.segment<2>(lay_.u(k));
    f += wk * (xs[k].dot(Q * xs[k]) + u.dot(R * u));
    if (derivatives) {
      out.grad.segment<2>(lay_.u(k)) = wk * (R + R.transpose()) * u;
      if (k > 0) out.grad.segment<4>(lay_.x(k)) = wk * (Q + Q.transpose()) * xs[k];
    }
    wk *= cfg.discount;
  }
  f += wk * xs[N].dot(F.cwiseProduct(xs[N]));
  if (derivatives) out.grad.segment<4>(lay_.x(N)) = 2.0 * wk * F.cwiseProduct(xs[N]);
  for (int k = 0; k < N; ++k) {
    for (int i = 0; i < O; ++i) {
      f += cfg.w_mpc * z(lay_.sigma(k, i));
      if (derivatives) out.grad(lay_.sigma(k, i)) = cfg.w_mpc;
      if (lay_.lod) {
        const double d = z(lay_.omega(k, i)) - model_->lod().omega_ref(k, i);
        const double p = model_->lod().p_omega(k, i);
        f += p * d * d;
        if (derivatives) out.grad(lay_.omega(k, i)) = 2.0 * p * d;
      }
    }
    f += cfg.w_mpc * z(lay_.state_slack(k));
    if (derivatives) out.grad(lay_.state_slack(k)) = cfg.w_mpc;
  }
  f += xi_.dot(z.head<2>());
  if (derivatives) out.grad.head<2>() += xi_;
  out.f = f;

  // Equalities: dynamics, then the fixed first input.
  const auto& A = cfg.world.plant.A;
  const auto& B = cfg.world.plant.B;
  out.ceq.resize(num_equalities());
  for (int k = 0; k < N; ++k)
    out.ceq.segment<4>(4 * k) = xs[k + 1] - A * xs[k] - B * z.segment<2>(lay_.u(k));
  if (action_) out.ceq.tail<2>() = z.head<2>() - *action_;
  if (derivatives) {
    out.jeq = Eigen::MatrixXd::Zero(num_equalities(), n);
    for (int k = 0; k < N; ++k) {
      out.jeq.block<4, 4>(4 * k, lay_.x(k + 1)).setIdentity();
      if (k > 0) out.jeq.block<4, 4>(4 * k, lay_.x(k)) = -A;
      out.jeq.block<4, 2>(4 * k, lay_.u(k)) = -B;
    }
    if (action_) out.jeq.block<2, 2>(4 * N, 0).setIdentity();
  }

  // Inequalities: CBF rows, then the softened state box.
  std::optional<Network> net;
  if (!lay_.lod) net = run_network(xs, derivatives);
  out.cin.resize(num_inequalities());
  if (derivatives) out.jin = Eigen::MatrixXd::Zero(num_inequalities(), n);
  for (int k = 0; k < N; ++k) {
    for (int i = 0; i < O; ++i) {
      const int r = cbf_row(k, i);
      const double hk = barrier_value(obs[i], xs[k], t_ + k);
      const double hk1 = barrier_value(obs[i], xs[k + 1], t_ + k + 1);
      const double gamma = lay_.lod ? z(lay_.omega(k, i)) : net->gamma(k, i);
      out.cin(r) = (1.0 - gamma) * hk - hk1 - z(lay_.sigma(k, i));
      if (!derivatives) continue;
      if (k > 0) out.jin.block<1, 4>(r, lay_.x(k)) = (1.0 - gamma) * barrier_gradient(obs[i], xs[k], t_ + k).transpose();
      out.jin.block<1, 4>(r, lay_.x(k + 1)) -= barrier_gradient(obs[i], xs[k + 1], t_ + k + 1).transpose();
      out.jin(r, lay_.sigma(k, i)) = -1.0;
      if (lay_.lod) {
        out.jin(r, lay_.omega(k, i)) = -hk;
      } else {
        const double sp = gamma * (1.0 - gamma);
        const auto& da = net->da[k * O + i];
        for (int j = 1; j <= k; ++j) out.jin.block<1, 4>(r, lay_.x(j)) -= hk * sp * da.row(j);
      }
    }
  }
  const double sb = cfg.world.state_bound;
  for (int k = 0; k < N; ++k) {
    const int base = N * O + 8 * k;
    for (int j = 0; j < 4; ++j) {
      const double v = xs[k + 1](j);
      const double sl = z(lay_.state_slack(k));
      out.cin(base + 2 * j) = v - sb - sl;
      out.cin(base + 2 * j + 1) = -v - sb - sl;
      if (derivatives) {
        out.jin(base + 2 * j, lay_.x(k + 1) + j) = 1.0;
        out.jin(base + 2 * j + 1, lay_.x(k + 1) + j) = -1.0;
        out.jin(base + 2 * j, lay_.state_slack(k)) = -1.0;
        out.jin(base + 2 * j + 1, lay_.state_slack(k)) = -1.0;
      }
    }
  }
}

namespace {

// Hessian of the objective (constant in z).
Eigen::MatrixXd objective_hessian(const MpcModel& model, const MpcLayout& lay) {
  const MpcConfig& cfg = model.config();
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(lay.size(), lay.size());
  const Eigen::Matrix4d Q2 = cfg.weights.Q + cfg.weights.Q.transpose();
  const Eigen::Matrix2d R2 = cfg.weights.R + cfg.weights.R.transpose();
  double wk = 1.0;
  for (int k = 0; k < lay.N; ++k) {
    H.block<2, 2>(lay.u(k), lay.u(k)) = wk * R2;
    if (k > 0) H.block<4, 4>(lay.x(k), lay.x(k)) = wk * Q2;
    wk *= cfg.discount;
  }
  H.block<4, 4>(lay.x(lay.N), lay.x(lay.N)) = (2.0 * wk * model.terminal()).asDiagonal();
  if (lay.lod)
    for (int k = 0; k < lay.N; ++k)
      for (int i = 0; i < lay.O; ++i) H(lay.omega(k, i), lay.omega(k, i)) = 2.0 * model.lod().p_omega(k, i);
  return H;
}

void add_position_curvature(Eigen::MatrixXd& H, int x_offset, double c) {
  H(x_offset, x_offset) += c;
  H(x_offset + 1, x_offset + 1) += c;
}

}  // namespace

Eigen::MatrixXd MpcNlp::lagrangian_hessian(const Eigen::VectorXd& z, const Eigen::VectorXd&,
                                           const Eigen::VectorXd& ineq) const {
  const int N = lay_.N, O = lay_.O;
  const auto& obs = model_->config().world.obstacles;
  Eigen::MatrixXd H = objective_hessian(*model_, lay_);
  const std::vector<State> xs = states(z);
  std::optional<Network> net;
  if (!lay_.lod) net = run_network(xs, true);

  for (int k = 0; k < N; ++k) {
    for (int i = 0; i < O; ++i) {
      const double lam = ineq(cbf_row(k, i));
      if (lam == 0.0) continue;
      const double gamma = lay_.lod ? z(lay_.omega(k, i)) : net->gamma(k, i);
      if (k > 0) add_position_curvature(H, lay_.x(k), 2.0 * lam * (1.0 - gamma));
      add_position_curvature(H, lay_.x(k + 1), -2.0 * lam);
      if (k == 0) continue;  // remaining terms involve derivatives of h at the fixed x_0
      const State gh = barrier_gradient(obs[i], xs[k], t_ + k);
      if (lay_.lod) {
        const int w = lay_.omega(k, i);
        for (int c = 0; c < 4; ++c) {
          H(w, lay_.x(k) + c) -= lam * gh(c);
          H(lay_.x(k) + c, w) -= lam * gh(c);
        }
        continue;
      }
      const double hk = barrier_value(obs[i], xs[k], t_ + k);
      const double sp = gamma * (1.0 - gamma);
      const double spp = sp * (1.0 - 2.0 * gamma);
      const auto& da = net->da[k * O + i];
      // Cross terms -lam (grad gamma grad h' + grad h grad gamma').
      for (int j = 1; j <= k; ++j) {
        const Eigen::Matrix4d cross = sp * da.row(j).transpose() * gh.transpose();
        H.block<4, 4>(lay_.x(j), lay_.x(k)) -= lam * cross;
        H.block<4, 4>(lay_.x(k), lay_.x(j)) -= lam * cross.transpose();
      }
      // -lam h (s'' grad a grad a' + s' hess a).
      for (int j = 1; j <= k; ++j) {
        for (int l = 1; l <= k; ++l)
          H.block<4, 4>(lay_.x(j), lay_.x(l)) -= lam * hk * spp * da.row(j).transpose() * da.row(l);
        add_position_curvature(H, lay_.x(j), -lam * hk * sp * net->curv[k * O + i](j));
      }
    }
  }
  return H;
}

Eigen::MatrixXd MpcNlp::convex_hessian(const Eigen::VectorXd& z, const Eigen::VectorXd&,
                                       const Eigen::VectorXd& ineq) const {
  Eigen::MatrixXd H = objective_hessian(*model_, lay_);
  std::optional<Network> net;
  if (!lay_.lod) net = run_network(states(z), false);
  for (int k = 1; k < lay_.N; ++k) {
    for (int i = 0; i < lay_.O; ++i) {
      const double lam = std::max(0.0, ineq(cbf_row(k, i)));
      const double gamma = lay_.lod ? z(lay_.omega(k, i)) : net->gamma(k, i);
      add_position_curvature(H, lay_.x(k), 2.0 * lam * (1.0 - gamma));
    }
  }
  return H;
}

int MpcNlp::num_parameters() const { return model_->theta().size(); }

Eigen::VectorXd MpcNlp::parameter_gradient(const Eigen::VectorXd& z, const Eigen::VectorXd&,
                                           const Eigen::VectorXd& ineq) const {
  const ThetaVector& theta = model_->theta();
  const MpcConfig& cfg = model_->config();
  const int N = lay_.N, O = lay_.O;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
  const std::vector<State> xs = states(z);
  const double wN = std::pow(cfg.discount, N);
  g.segment<4>(theta.block("F").offset) = wN * xs[N].cwiseAbs2();
  if (lay_.lod) {
    const int ro = theta.block("omega_ref").offset;
    const int po = theta.block("p_omega").offset;
    for (int k = 0; k < N; ++k) {
      for (int i = 0; i < O; ++i) {
        const double d = z(lay_.omega(k, i)) - model_->lod().omega_ref(k, i);
        g(ro + k * O + i) = -2.0 * model_->lod().p_omega(k, i) * d;
        g(po + k * O + i) = d * d;
      }
    }
    return g;
  }
  const Network net = run_network(xs, false);
  const auto& obs = cfg.world.obstacles;
  Eigen::MatrixXd seed(N, O);
  for (int k = 0; k < N; ++k) {
    for (int i = 0; i < O; ++i) {
      const double gamma = net.gamma(k, i);
      seed(k, i) = -ineq(cbf_row(k, i)) * barrier_value(obs[i], xs[k], t_ + k) * gamma * (1.0 - gamma);
    }
  }
  const DecayNetwork& dn = model_->network();
  Eigen::VectorXd pg = Eigen::VectorXd::Zero(dn.num_parameters());
  dn.backward(net.pass, seed, &pg, nullptr);
  g.segment(theta.block("W1").offset, dn.num_parameters()) = pg;
  return g;
}

Eigen::MatrixXd MpcNlp::decays(const Eigen::VectorXd& z) const {
  if (!lay_.lod) return run_network(states(z), false).gamma;
  Eigen::MatrixXd d(lay_.N, lay_.O);
  for (int k = 0; k < lay_.N; ++k)
    for (int i = 0; i < lay_.O; ++i) d(k, i) = z(lay_.omega(k, i));
  return d;
}

RnnHiddenState MpcNlp::first_hidden(const Eigen::VectorXd& z) const {
  if (model_->config().variant != Variant::Rnn) return {};
  const Network net = run_network(states(z), false);
  return RnnHiddenState{net.pass.hidden[0]};
}

std::vector<bool> MpcNlp::activation_pattern(const Eigen::VectorXd& z) const {
  std::vector<bool> on;
  if (lay_.lod) return on;
  const Network net = run_network(states(z), false);
  for (const auto& step : net.pass.pre)
    for (const auto& layer : step)
      for (Eigen::Index r = 0; r < layer.size(); ++r) on.push_back(layer(r) > 0.0);
  return on;
}

double MpcNlp::unperturbed_value(const Eigen::VectorXd& z) const {
  NlpEval ev;
  evaluate(z, false, ev);
  return ev.f - xi_.dot(z.head<2>());
}

std::string MpcNlp::dump() const {
  using nlohmann::json;
  const Eigen::VectorXd lb = lower_bounds();
  const Eigen::VectorXd ub = upper_bounds();
  auto bound = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json blocks = json::array();
  auto add = [&](const std::string& name, int offset, int size) {
    json lo = json::array(), hi = json::array();
    for (int j = offset; j < offset + size; ++j) {
      lo.push_back(bound(lb(j)));
      hi.push_back(bound(ub(j)));
    }
    blocks.push_back({{"name", name}, {"offset", offset}, {"size", size}, {"lower", lo}, {"upper", hi}});
  };
  add("U", 0, 2 * lay_.N);
  add("X", lay_.x(1), 4 * lay_.N);
  add("Sigma", lay_.sigma(0, 0), lay_.N * lay_.O);
  if (lay_.lod) add("Omega", lay_.omega(0, 0), lay_.N * lay_.O);
  add("StateSlack", lay_.state_slack(0), lay_.N);

  json constraints = json::array();
  constraints.push_back({{"name", "dynamics"}, {"kind", "eq"}, {"rows", 4 * lay_.N}});
  if (action_) constraints.push_back({{"name", "fixed_action"}, {"kind", "eq"}, {"rows", 2}});
  constraints.push_back({{"name", "cbf"}, {"kind", "ineq"}, {"rows", lay_.N * lay_.O}});
  constraints.push_back({{"name", "state_box"}, {"kind", "ineq"}, {"rows", 8 * lay_.N}});

  json rec = {{"variant", std::string(to_string(model_->config().variant))},
              {"horizon", lay_.N},
              {"obstacles", lay_.O},
              {"t", t_},
              {"state", {s_(0), s_(1), s_(2), s_(3)}},
              {"problem", action_ ? "action_value" : (xi_.isZero() ? "value" : "exploratory")},
              {"perturbation", {xi_(0), xi_(1)}},
              {"blocks", blocks},
              {"constraints", constraints},
              {"num_parameters", num_parameters()}};
  if (action_) rec["action"] = {(*action_)(0), (*action_)(1)};
  return rec.dump();
}

// ---------------------------------------------------------------------------
// Builders and solving

MpcNlp build_value_problem(const MpcModel& model, const State& s, int t, const RnnHiddenState& hidden) {
  return MpcNlp(model, s, t, std::nullopt, Eigen::Vector2d::Zero(), hidden);
}

MpcNlp build_action_value_problem(const MpcModel& model, const State& s, const Action& a, int t,
                                  const RnnHiddenState& hidden) {
  const double ab = model.config().world.action_bound;
  if (!a.allFinite() || a.cwiseAbs().maxCoeff() > ab * (1.0 + 1e-12)) {
    throw std::invalid_argument("action lies outside the action box");
  }
  return MpcNlp(model, s, t, Action(a.cwiseMax(-ab).cwiseMin(ab)), Eigen::Vector2d::Zero(), hidden);
}

MpcNlp build_exploratory_problem(const MpcModel& model, const State& s, const Eigen::Vector2d& xi,
                                 int t, const RnnHiddenState& hidden) {
  return MpcNlp(model, s, t, std::nullopt, xi, hidden);
}

MpcOutcome solve_mpc(const MpcNlp& problem, const SolverConfig& solver,
                     const std::optional<Eigen::VectorXd>& warm_start) {
  std::optional<Eigen::VectorXd> start;
  if (warm_start && solver.warm_start) start = problem.repair(*warm_start);
  MpcOutcome out;
  out.solution = solve(problem, solver, start);
  const Eigen::VectorXd& z = out.solution.z;
  const MpcLayout& lay = problem.layout();
  const double ab = problem.model().config().world.action_bound;
  out.failed = !out.solution.ok();
  out.u0 = z.head<2>().cwiseMax(-ab).cwiseMin(ab);
  out.value = out.solution.value;
  out.slack.resize(lay.N, lay.O);
  out.state_slack.resize(lay.N);
  for (int k = 0; k < lay.N; ++k) {
    for (int i = 0; i < lay.O; ++i) out.slack(k, i) = std::max(0.0, z(lay.sigma(k, i)));
    out.state_slack(k) = std::max(0.0, z(lay.state_slack(k)));
  }
  out.decay = problem.decays(z);
  out.hidden0 = problem.first_hidden(z);
  return out;
}

Eigen::VectorXd shift_solution(const MpcLayout& lay, const Eigen::VectorXd& z) {
  Eigen::VectorXd s = z;
  for (int k = 0; k + 1 < lay.N; ++k) {
    s.segment<2>(lay.u(k)) = z.segment<2>(lay.u(k + 1));
    s.segment<4>(lay.x(k + 1)) = z.segment<4>(lay.x(k + 2));
    for (int i = 0; i < lay.O; ++i) {
      s(lay.sigma(k, i)) = z(lay.sigma(k + 1, i));
      if (lay.lod) s(lay.omega(k, i)) = z(lay.omega(k + 1, i));
    }
    s(lay.state_slack(k)) = z(lay.state_slack(k + 1));
  }
  return s;
}

MpcPolicy::MpcPolicy(const MpcModel& model, SolverConfig solver)
    : model_(&model), solver_(std::move(solver)) {
  reset();
}

void MpcPolicy::reset() {
  hidden_ = model_->config().variant == Variant::Rnn ? RnnHiddenState::zeros(model_->network().mlp())
                                                     : RnnHiddenState{};
  shifted_.reset();
  last_.reset();
}

MpcOutcome MpcPolicy::act(const State& s, int t, const Eigen::Vector2d& xi) {
  const MpcNlp problem = build_exploratory_problem(*model_, s, xi, t, hidden_);
  MpcOutcome out = solve_mpc(problem, solver_, shifted_);
  last_ = out.solution.z;
  if (out.failed) {
    shifted_.reset();
  } else {
    shifted_ = shift_solution(problem.layout(), out.solution.z);
  }
  if (model_->config().variant == Variant::Rnn) hidden_ = out.hidden0;
  return out;
}

}  // namespace cbfmpc
