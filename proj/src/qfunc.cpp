#include "offrl/qfunc.hpp"

#include <cmath>
#include <string>

#include "offrl/errors.hpp"

namespace offrl {

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::tabular: return "tabular";
    case Architecture::linear: return "linear";
    case Architecture::mlp: return "mlp";
  }
  return "tabular";
}

std::string_view to_string(Topology t) { return t == Topology::multi_head ? "multi-head" : "separate"; }
std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Architecture parse_architecture(std::string_view name) {
  if (name == "tabular") return Architecture::tabular;
  if (name == "linear") return Architecture::linear;
  if (name == "mlp") return Architecture::mlp;
  throw InvalidArgument("unknown architecture '" + std::string(name) + "'");
}

Topology parse_topology(std::string_view name) {
  if (name == "multi-head") return Topology::multi_head;
  if (name == "separate") return Topology::separate;
  throw InvalidArgument("unknown topology '" + std::string(name) + "'");
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

void NetworkSpec::validate() const {
  if (heads == 0 || heads > kMaxHeads) throw InvalidArgument("number of heads must lie in [1, 256]");
  if (input_dim == 0 || num_actions == 0) throw InvalidArgument("network needs positive input and action counts");
  if (architecture == Architecture::mlp && hidden.empty()) throw InvalidArgument("mlp needs at least one hidden layer");
  for (std::size_t h : hidden)
    if (h == 0) throw InvalidArgument("hidden layer sizes must be positive");
}

std::size_t NetworkSpec::parameter_count() const {
  if (architecture == Architecture::tabular) return heads * input_dim * num_actions;
  auto affine = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::vector<std::size_t> hid = architecture == Architecture::mlp ? hidden : std::vector<std::size_t>{};
  std::size_t trunk = 0;
  std::size_t in = input_dim;
  for (std::size_t h : hid) {
    trunk += affine(in, h);
    in = h;
  }
  const std::size_t head = affine(in, num_actions);
  if (topology == Topology::multi_head) return trunk + heads * head;
  return heads * (trunk + head);
}

struct QEnsemble::Activations {
  std::vector<Eigen::MatrixXd> z;  // pre-activation of each layer
  std::vector<Eigen::MatrixXd> h;  // h[0] is the input; h[j + 1] follows layer j
};

namespace {

Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
  return a == Activation::relu ? Eigen::MatrixXd(z.cwiseMax(0.0)) : Eigen::MatrixXd(z.array().tanh().matrix());
}

Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& z, const Eigen::MatrixXd& h, Activation a) {
  if (a == Activation::relu) return (z.array() > 0.0).cast<double>().matrix();
  return (1.0 - h.array().square()).matrix();
}

}  // namespace

QEnsemble::QEnsemble(NetworkSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec_.parameter_count()));
  build_layout();
}

void QEnsemble::build_layout() {
  if (spec_.architecture == Architecture::tabular) return;
  std::size_t offset = 0;
  auto add = [&](std::vector<Layer>& chain, std::size_t in, std::size_t out) {
    chain.push_back({in, out, offset});
    offset += in * out + out;
  };
  const std::vector<std::size_t> hid =
      spec_.architecture == Architecture::mlp ? spec_.hidden : std::vector<std::size_t>{};
  const std::size_t last = hid.empty() ? spec_.input_dim : hid.back();
  head_chains_.assign(spec_.heads, {});
  if (spec_.topology == Topology::multi_head) {
    std::size_t in = spec_.input_dim;
    for (std::size_t h : hid) {
      add(trunk_, in, h);
      in = h;
    }
    for (auto& chain : head_chains_) add(chain, last, spec_.num_actions);
  } else {
    for (auto& chain : head_chains_) {
      std::size_t in = spec_.input_dim;
      for (std::size_t h : hid) {
        add(chain, in, h);
        in = h;
      }
      add(chain, last, spec_.num_actions);
    }
  }
}

QEnsemble QEnsemble::initialized(NetworkSpec spec, Rng& rng, double tabular_scale) {
  QEnsemble q(std::move(spec));
  if (q.spec_.architecture == Architecture::tabular) {
    if (tabular_scale > 0.0) {
      std::uniform_real_distribution<double> u(-tabular_scale, tabular_scale);
      for (Eigen::Index i = 0; i < q.params_.size(); ++i) q.params_[i] = u(rng);
    }
    return q;
  }
  // Hidden layers use std sqrt(2 / fan_in), output layers sqrt(1 / fan_in).
  auto fill = [&](const Layer& layer, bool output) {
    std::normal_distribution<double> n(0.0, std::sqrt((output ? 1.0 : 2.0) / static_cast<double>(layer.in)));
    for (std::size_t i = 0; i < layer.in * layer.out; ++i) q.params_[static_cast<Eigen::Index>(layer.offset + i)] = n(rng);
  };
  for (const Layer& layer : q.trunk_) fill(layer, false);
  for (const auto& chain : q.head_chains_)
    for (std::size_t j = 0; j < chain.size(); ++j) fill(chain[j], j + 1 == chain.size());
  return q;
}

void QEnsemble::check_finite() const {
  if (!params_.allFinite()) throw DivergenceError("non-finite network parameter detected");
}

std::vector<std::size_t> QEnsemble::tabular_states(std::span<const float> observations, std::size_t count) const {
  const std::size_t S = spec_.input_dim;
  if (count == 0 || observations.size() % count != 0) throw EncodingMismatch("observation batch is ragged");
  const std::size_t dim = observations.size() / count;
  std::vector<std::size_t> states(count);
  for (std::size_t b = 0; b < count; ++b) {
    const float* o = observations.data() + b * dim;
    if (dim == 1) {
      const float v = o[0];
      if (!(v >= 0.0f) || v != std::floor(v) || static_cast<std::size_t>(v) >= S)
        throw EncodingMismatch("tabular network received an invalid state index");
      states[b] = static_cast<std::size_t>(v);
    } else if (dim == S) {
      std::size_t hot = S, ones = 0;
      for (std::size_t i = 0; i < S; ++i) {
        if (o[i] == 1.0f) {
          hot = i;
          ++ones;
        } else if (o[i] != 0.0f) {
          ones = 2;
        }
      }
      if (ones != 1) throw EncodingMismatch("tabular network received a vector that is not one-hot");
      states[b] = hot;
    } else {
      throw EncodingMismatch("tabular network expects a state index or a one-hot vector");
    }
  }
  return states;
}

Eigen::MatrixXd QEnsemble::features(std::span<const float> observations, std::size_t count) const {
  const std::size_t D = spec_.input_dim;
  if (count == 0 || observations.size() != D * count)
    throw EncodingMismatch("observation dimension does not match the network input");
  Eigen::Map<const Eigen::MatrixXf> x(observations.data(), static_cast<Eigen::Index>(D),
                                      static_cast<Eigen::Index>(count));
  return x.cast<double>();
}

void QEnsemble::run_chain(const std::vector<Layer>& chain, Activations& acts) const {
  // Activates every layer; head chains take their output from z.back().
  for (const Layer& layer : chain) {
    Eigen::Map<const Eigen::MatrixXd> w(params_.data() + layer.offset, static_cast<Eigen::Index>(layer.out),
                                        static_cast<Eigen::Index>(layer.in));
    Eigen::Map<const Eigen::VectorXd> bias(params_.data() + layer.offset + layer.in * layer.out,
                                           static_cast<Eigen::Index>(layer.out));
    Eigen::MatrixXd z = w * acts.h.back();
    z.colwise() += bias;
    acts.z.push_back(std::move(z));
    acts.h.push_back(activate(acts.z.back(), spec_.activation));
  }
}

Eigen::MatrixXd QEnsemble::forward(std::span<const float> observation) const {
  const Eigen::MatrixXd col = forward_batch(observation, 1);
  Eigen::MatrixXd out(spec_.heads, spec_.num_actions);
  for (std::size_t k = 0; k < spec_.heads; ++k)
    for (std::size_t a = 0; a < spec_.num_actions; ++a)
      out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(a)) =
          col(static_cast<Eigen::Index>(k * spec_.num_actions + a), 0);
  return out;
}

Eigen::MatrixXd QEnsemble::forward_batch(std::span<const float> observations, std::size_t count) const {
  check_finite();
  const std::size_t K = spec_.heads, A = spec_.num_actions;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(K * A), static_cast<Eigen::Index>(count));
  if (spec_.architecture == Architecture::tabular) {
    const auto states = tabular_states(observations, count);
    const std::size_t S = spec_.input_dim;
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t a = 0; a < A; ++a)
          out(static_cast<Eigen::Index>(k * A + a), static_cast<Eigen::Index>(b)) =
              params_[static_cast<Eigen::Index>((k * S + states[b]) * A + a)];
    return out;
  }
  Activations trunk;
  trunk.h.push_back(features(observations, count));
  run_chain(trunk_, trunk);
  for (std::size_t k = 0; k < K; ++k) {
    Activations head;
    head.h.push_back(trunk.h.back());
    run_chain(head_chains_[k], head);
    out.middleRows(static_cast<Eigen::Index>(k * A), static_cast<Eigen::Index>(A)) = head.z.back();
  }
  return out;
}

Eigen::VectorXd QEnsemble::backward(std::span<const float> observations, std::size_t count,
                                    const Eigen::MatrixXd& upstream) const {
  const std::size_t K = spec_.heads, A = spec_.num_actions;
  if (upstream.rows() != static_cast<Eigen::Index>(K * A) || upstream.cols() != static_cast<Eigen::Index>(count))
    throw InvalidArgument("upstream gradient shape does not match the forward output");
  check_finite();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params_.size());

  if (spec_.architecture == Architecture::tabular) {
    const auto states = tabular_states(observations, count);
    const std::size_t S = spec_.input_dim;
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t a = 0; a < A; ++a)
          grad[static_cast<Eigen::Index>((k * S + states[b]) * A + a)] +=
              upstream(static_cast<Eigen::Index>(k * A + a), static_cast<Eigen::Index>(b));
    return grad;
  }

  auto weights = [&](const Layer& layer) {
    return Eigen::Map<const Eigen::MatrixXd>(params_.data() + layer.offset, static_cast<Eigen::Index>(layer.out),
                                             static_cast<Eigen::Index>(layer.in));
  };
  // Accumulates parameter gradients of `chain` given dL/dz of its last layer;
  // returns dL/d(chain input).
  auto backprop = [&](const std::vector<Layer>& chain, const Activations& acts, Eigen::MatrixXd dz,
                      bool need_input_grad) {
    Eigen::MatrixXd dh;
    for (std::size_t j = chain.size(); j-- > 0;) {
      const Layer& layer = chain[j];
      Eigen::Map<Eigen::MatrixXd> dw(grad.data() + layer.offset, static_cast<Eigen::Index>(layer.out),
                                     static_cast<Eigen::Index>(layer.in));
      Eigen::Map<Eigen::VectorXd> db(grad.data() + layer.offset + layer.in * layer.out,
                                     static_cast<Eigen::Index>(layer.out));
      dw.noalias() += dz * acts.h[j].transpose();
      db += dz.rowwise().sum();
      if (j == 0 && !need_input_grad) break;
      dh = weights(layer).transpose() * dz;
      if (j > 0) dz = dh.cwiseProduct(activation_grad(acts.z[j - 1], acts.h[j], spec_.activation));
    }
    return dh;
  };

  Activations trunk;
  trunk.h.push_back(features(observations, count));
  run_chain(trunk_, trunk);
  const bool has_trunk = !trunk_.empty();
  Eigen::MatrixXd d_trunk_out;
  if (has_trunk) d_trunk_out = Eigen::MatrixXd::Zero(trunk.h.back().rows(), trunk.h.back().cols());

  for (std::size_t k = 0; k < K; ++k) {
    Activations head;
    head.h.push_back(trunk.h.back());
    run_chain(head_chains_[k], head);
    Eigen::MatrixXd dz = upstream.middleRows(static_cast<Eigen::Index>(k * A), static_cast<Eigen::Index>(A));
    Eigen::MatrixXd dh = backprop(head_chains_[k], head, std::move(dz), has_trunk);
    if (has_trunk) d_trunk_out += dh;
  }
  if (has_trunk) {
    Eigen::MatrixXd dz = d_trunk_out.cwiseProduct(
        activation_grad(trunk.z.back(), trunk.h.back(), spec_.activation));
    backprop(trunk_, trunk, std::move(dz), false);
  }
  return grad;
}

std::vector<std::pair<std::size_t, std::size_t>> QEnsemble::head_parameter_ranges(std::size_t k) const {
  if (k >= spec_.heads) throw InvalidArgument("head index out of range");
  if (spec_.architecture == Architecture::tabular) {
    const std::size_t block = spec_.input_dim * spec_.num_actions;
    return {{k * block, block}};
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const Layer& layer : head_chains_[k]) out.emplace_back(layer.offset, layer.in * layer.out + layer.out);
  return out;
}

Eigen::VectorXd q_average(const Eigen::MatrixXd& values) {
  if (values.size() == 0) throw InvalidArgument("cannot average an empty value matrix");
  return values.colwise().mean().transpose();
}

std::size_t greedy_action(const Eigen::VectorXd& values) {
  if (values.size() == 0) throw InvalidArgument("no actions to choose from");
  std::size_t best = 0;
  for (Eigen::Index a = 1; a < values.size(); ++a)
    if (values[a] > values[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(a);
  return best;
}

TargetSnapshot sync_target(const QEnsemble& online, std::uint64_t update_count) {
  return TargetSnapshot{online, update_count};
}

void sync_target(const QEnsemble& online, TargetSnapshot& target, std::uint64_t update_count) {
  if (!(target.network.spec() == online.spec())) throw InvalidArgument("target shape does not match online network");
  target.network.parameters() = online.parameters();
  target.sync_step = update_count;
}

OptimizerState::OptimizerState(AdamConfig cfg, std::size_t parameter_count)
    : config(cfg),
      first_moment(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count))),
      second_moment(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count))) {
  if (!(cfg.learning_rate > 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
      !(cfg.epsilon > 0.0))
    throw InvalidArgument("invalid optimizer hyperparameters");
}

void apply_update(OptimizerState& opt, QEnsemble& q, const Eigen::VectorXd& grad) {
  Eigen::VectorXd& theta = q.parameters();
  if (grad.size() != theta.size() || opt.first_moment.size() != theta.size())
    throw InvalidArgument("gradient and optimizer shapes must match the parameters");
  if (!grad.allFinite()) throw DivergenceError("non-finite gradient; update refused");
  const auto& c = opt.config;
  ++opt.step;
  opt.first_moment = c.beta1 * opt.first_moment + (1.0 - c.beta1) * grad;
  opt.second_moment = c.beta2 * opt.second_moment + (1.0 - c.beta2) * grad.cwiseProduct(grad);
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  theta.array() -= c.learning_rate * (opt.first_moment.array() / bc1) /
                   ((opt.second_moment.array() / bc2).sqrt() + c.epsilon);
}

}  // namespace offrl
