#include "cbfmpc/neural.hpp"

#include <cmath>
#include <stdexcept>

namespace cbfmpc {

int MlpParams::input_width() const {
  return layers.empty() ? 0 : static_cast<int>(layers.front().W.cols());
}

int MlpParams::output_width() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().W.rows());
}

void MlpParams::validate() const {
  if (layers.empty()) throw std::invalid_argument("network has no layers");
  for (std::size_t j = 0; j < layers.size(); ++j) {
    const DenseLayer& l = layers[j];
    if (l.b.size() != l.W.rows()) throw std::invalid_argument("bias size mismatch");
    if (j > 0 && l.W.cols() != layers[j - 1].W.rows()) {
      throw std::invalid_argument("layer width mismatch");
    }
  }
}

void RnnParams::validate() const {
  mlp.validate();
  if (static_cast<int>(Wq.size()) != mlp.hidden_layers()) {
    throw std::invalid_argument("one recurrent matrix per hidden layer required");
  }
  for (int j = 0; j < mlp.hidden_layers(); ++j) {
    const auto width = mlp.layers[j].W.rows();
    if (Wq[j].rows() != width || Wq[j].cols() != width) {
      throw std::invalid_argument("recurrent matrix must be square with the hidden width");
    }
  }
}

RnnHiddenState RnnHiddenState::zeros(const MlpParams& p) {
  RnnHiddenState h;
  for (int j = 0; j < p.hidden_layers(); ++j) {
    h.q.push_back(Eigen::VectorXd::Zero(p.layers[j].W.rows()));
  }
  return h;
}

Eigen::VectorXd NetInput::flatten() const {
  Eigen::VectorXd z(kStateDim + h_vals.size() + context.size());
  z << x, h_vals, context;
  return z;
}

DecayNetwork::DecayNetwork(MlpParams mlp) : mlp_(std::move(mlp)), recurrent_(false) {
  mlp_.validate();
}

DecayNetwork::DecayNetwork(RnnParams rnn)
    : mlp_(std::move(rnn.mlp)), wq_(std::move(rnn.Wq)), recurrent_(true) {
  RnnParams{mlp_, wq_}.validate();
}

int DecayNetwork::num_parameters() const {
  int n = 0;
  for (const DenseLayer& l : mlp_.layers) n += static_cast<int>(l.W.size() + l.b.size());
  for (const Eigen::MatrixXd& w : wq_) n += static_cast<int>(w.size());
  return n;
}

std::vector<std::pair<std::string, int>> DecayNetwork::blocks() const {
  std::vector<std::pair<std::string, int>> out;
  for (std::size_t j = 0; j < mlp_.layers.size(); ++j) {
    out.emplace_back("W" + std::to_string(j + 1), static_cast<int>(mlp_.layers[j].W.size()));
    out.emplace_back("b" + std::to_string(j + 1), static_cast<int>(mlp_.layers[j].b.size()));
  }
  for (std::size_t j = 0; j < wq_.size(); ++j) {
    out.emplace_back("Wq" + std::to_string(j + 1), static_cast<int>(wq_[j].size()));
  }
  return out;
}

namespace {

// Row-major copy in and out of a flat buffer.
void write_rows(const Eigen::MatrixXd& m, double*& dst) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) *dst++ = m(r, c);
}

void read_rows(Eigen::MatrixXd& m, const double*& src) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = *src++;
}

}  // namespace

Eigen::VectorXd DecayNetwork::flatten() const {
  Eigen::VectorXd theta(num_parameters());
  double* dst = theta.data();
  for (const DenseLayer& l : mlp_.layers) {
    write_rows(l.W, dst);
    for (Eigen::Index i = 0; i < l.b.size(); ++i) *dst++ = l.b(i);
  }
  for (const Eigen::MatrixXd& w : wq_) write_rows(w, dst);
  return theta;
}

void DecayNetwork::assign(std::span<const double> theta) {
  if (static_cast<int>(theta.size()) != num_parameters()) {
    throw std::invalid_argument("network parameter vector has the wrong size");
  }
  const double* src = theta.data();
  for (DenseLayer& l : mlp_.layers) {
    read_rows(l.W, src);
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b(i) = *src++;
  }
  for (Eigen::MatrixXd& w : wq_) read_rows(w, src);
}

NetworkPass DecayNetwork::forward(const std::vector<Eigen::VectorXd>& inputs,
                                  const RnnHiddenState& initial) const {
  const int M = hidden_layers();
  const int O = output_width();
  NetworkPass pass;
  pass.inputs = inputs;
  pass.initial = initial.empty() ? RnnHiddenState::zeros(mlp_) : initial;
  if (recurrent_ && static_cast<int>(pass.initial.q.size()) != M) {
    throw std::invalid_argument("hidden state does not match the network");
  }
  const int steps = static_cast<int>(inputs.size());
  pass.pre.resize(steps);
  pass.hidden.resize(steps);
  pass.out_pre.resize(steps, O);
  pass.out.resize(steps, O);

  for (int k = 0; k < steps; ++k) {
    if (inputs[k].size() != input_width()) {
      throw std::invalid_argument("network input has the wrong width");
    }
    pass.pre[k].resize(M);
    pass.hidden[k].resize(M);
    const Eigen::VectorXd* in = &inputs[k];
    for (int j = 0; j < M; ++j) {
      const DenseLayer& l = mlp_.layers[j];
      Eigen::VectorXd a = l.W * (*in) + l.b;
      if (recurrent_) {
        const Eigen::VectorXd& q_prev = k == 0 ? pass.initial.q[j] : pass.hidden[k - 1][j];
        a += wq_[j] * q_prev;
      }
      pass.hidden[k][j] = a.cwiseMax(0.0);
      pass.pre[k][j] = std::move(a);
      in = &pass.hidden[k][j];
    }
    const DenseLayer& out = mlp_.layers.back();
    const Eigen::VectorXd a = out.W * (*in) + out.b;
    pass.out_pre.row(k) = a.transpose();
    for (int i = 0; i < O; ++i) pass.out(k, i) = sigmoid(a(i));
  }
  return pass;
}

void DecayNetwork::backward(const NetworkPass& pass, const Eigen::MatrixXd& seed,
                            Eigen::VectorXd* param_grad,
                            std::vector<Eigen::VectorXd>* input_grad) const {
  const int M = hidden_layers();
  const int steps = pass.steps();
  const int L = M + 1;

  // Parameter offsets in the flattened layout.
  std::vector<int> w_off(L), b_off(L), q_off(M);
  int off = 0;
  for (int j = 0; j < L; ++j) {
    w_off[j] = off;
    off += static_cast<int>(mlp_.layers[j].W.size());
    b_off[j] = off;
    off += static_cast<int>(mlp_.layers[j].b.size());
  }
  for (int j = 0; j < static_cast<int>(wq_.size()); ++j) {
    q_off[j] = off;
    off += static_cast<int>(wq_[j].size());
  }
  if (param_grad && param_grad->size() != num_parameters()) {
    *param_grad = Eigen::VectorXd::Zero(num_parameters());
  }
  if (input_grad) {
    input_grad->resize(steps);
    for (auto& g : *input_grad) g = Eigen::VectorXd::Zero(input_width());
  }

  auto add_outer = [&](int offset, const Eigen::VectorXd& left, const Eigen::VectorXd& right) {
    double* g = param_grad->data() + offset;
    for (Eigen::Index r = 0; r < left.size(); ++r) {
      if (left(r) == 0.0) continue;
      for (Eigen::Index c = 0; c < right.size(); ++c) g[r * right.size() + c] += left(r) * right(c);
    }
  };

  // Adjoints of the hidden outputs flowing back from step k+1.
  std::vector<Eigen::VectorXd> carry(M);
  for (int j = 0; j < M; ++j) carry[j] = Eigen::VectorXd::Zero(mlp_.layers[j].W.rows());

  for (int k = steps - 1; k >= 0; --k) {
    const Eigen::VectorXd s = seed.row(k).transpose();
    const DenseLayer& out = mlp_.layers.back();
    const Eigen::VectorXd& top = M > 0 ? pass.hidden[k][M - 1] : pass.inputs[k];
    if (param_grad) {
      add_outer(w_off[M], s, top);
      param_grad->segment(b_off[M], s.size()) += s;
    }
    Eigen::VectorXd delta = out.W.transpose() * s;  // adjoint of layer M output
    if (M == 0) {
      if (input_grad) (*input_grad)[k] += delta;
      continue;
    }
    std::vector<Eigen::VectorXd> next_carry(M);
    for (int j = M - 1; j >= 0; --j) {
      Eigen::VectorXd dq = delta + carry[j];
      Eigen::VectorXd dpre = (pass.pre[k][j].array() > 0.0).select(dq, 0.0);
      const Eigen::VectorXd& in = j == 0 ? pass.inputs[k] : pass.hidden[k][j - 1];
      if (param_grad) {
        add_outer(w_off[j], dpre, in);
        param_grad->segment(b_off[j], dpre.size()) += dpre;
      }
      if (recurrent_) {
        const Eigen::VectorXd& q_prev = k == 0 ? pass.initial.q[j] : pass.hidden[k - 1][j];
        if (param_grad) add_outer(q_off[j], dpre, q_prev);
        next_carry[j] = wq_[j].transpose() * dpre;
      } else {
        next_carry[j] = Eigen::VectorXd::Zero(dpre.size());
      }
      delta = mlp_.layers[j].W.transpose() * dpre;
    }
    if (input_grad) (*input_grad)[k] += delta;
    carry = std::move(next_carry);
  }
}

Eigen::MatrixXd DecayNetwork::output_param_jacobian(const NetworkPass& pass, int step) const {
  const int O = output_width();
  Eigen::MatrixXd jac(O, num_parameters());
  for (int i = 0; i < O; ++i) {
    Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(pass.steps(), O);
    const double g = pass.out(step, i);
    seed(step, i) = g * (1.0 - g);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(num_parameters());
    backward(pass, seed, &grad, nullptr);
    jac.row(i) = grad.transpose();
  }
  return jac;
}

namespace {

DenseLayer uniform_layer(int rows, int cols, std::mt19937_64& rng, double scale) {
  const double a = scale / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> dist(-a, a);
  DenseLayer l{Eigen::MatrixXd(rows, cols), Eigen::VectorXd::Zero(rows)};
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) l.W(r, c) = dist(rng);
  return l;
}

}  // namespace

MlpParams init_mlp(int input_width, const std::vector<int>& hidden, int output_width,
                   std::mt19937_64& rng, double initial_decay, double output_weight_scale) {
  MlpParams p;
  int fan_in = input_width;
  for (int width : hidden) {
    p.layers.push_back(uniform_layer(width, fan_in, rng, 1.0));
    fan_in = width;
  }
  DenseLayer out = uniform_layer(output_width, fan_in, rng, output_weight_scale);
  out.b.setConstant(logit(initial_decay));
  p.layers.push_back(std::move(out));
  return p;
}

RnnParams init_rnn(int input_width, const std::vector<int>& hidden, int output_width,
                   std::mt19937_64& rng, double initial_decay, double output_weight_scale) {
  RnnParams p;
  p.mlp = init_mlp(input_width, hidden, output_width, rng, initial_decay, output_weight_scale);
  for (int width : hidden) p.Wq.push_back(uniform_layer(width, width, rng, 1.0).W);
  return p;
}

Eigen::VectorXd mlp_forward(const MlpParams& p, const NetInput& z) {
  const DecayNetwork net(p);
  return net.forward({z.flatten()}, {}).out.row(0).transpose();
}

std::pair<Eigen::VectorXd, RnnHiddenState> rnn_forward(const RnnParams& p, const NetInput& z,
                                                       const RnnHiddenState& q_prev) {
  const DecayNetwork net(p);
  NetworkPass pass = net.forward({z.flatten()}, q_prev);
  RnnHiddenState next;
  next.q = pass.hidden[0];
  return {pass.out.row(0).transpose(), std::move(next)};
}

Eigen::MatrixXd mlp_param_jacobian(const MlpParams& p, const NetInput& z) {
  const DecayNetwork net(p);
  return net.output_param_jacobian(net.forward({z.flatten()}, {}), 0);
}

Eigen::MatrixXd rnn_param_jacobian(const RnnParams& p, const NetInput& z,
                                   const RnnHiddenState& q_prev) {
  const DecayNetwork net(p);
  return net.output_param_jacobian(net.forward({z.flatten()}, q_prev), 0);
}

}  // namespace cbfmpc
