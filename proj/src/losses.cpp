#include "offrl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "offrl/errors.hpp"

namespace offrl {

double huber(double u, double lambda) {
  const double a = std::abs(u);
  return a <= lambda ? 0.5 * u * u : lambda * (a - 0.5 * lambda);
}

double huber_derivative(double u, double lambda) {
  if (std::abs(u) <= lambda) return u;
  return u > 0.0 ? lambda : -lambda;
}

SimplexWeights::SimplexWeights(std::vector<double> alpha) : alpha_(std::move(alpha)) {
  if (alpha_.empty()) throw InvalidArgument("simplex weights need at least one entry");
  double total = 0.0;
  for (double a : alpha_) {
    if (!(a >= 0.0)) throw InvalidArgument("simplex weights must be nonnegative");
    total += a;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("simplex weights must sum to 1");
}

SimplexWeights SimplexWeights::one_hot(std::size_t k, std::size_t index) {
  if (index >= k) throw InvalidArgument("one-hot index out of range");
  std::vector<double> a(k, 0.0);
  a[index] = 1.0;
  return SimplexWeights(std::move(a));
}

SimplexWeights SimplexWeights::uniform(std::size_t k) {
  if (k == 0) throw InvalidArgument("simplex weights need at least one entry");
  return SimplexWeights(std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

Eigen::VectorXd SimplexWeights::mix(const Eigen::MatrixXd& heads) const {
  if (static_cast<std::size_t>(heads.rows()) != alpha_.size())
    throw InvalidArgument("mixture size does not match the number of heads");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(heads.cols());
  for (std::size_t k = 0; k < alpha_.size(); ++k) out += alpha_[k] * heads.row(static_cast<Eigen::Index>(k)).transpose();
  return out;
}

SimplexWeights sample_simplex(std::size_t k, Rng& rng) {
  if (k == 0) throw InvalidArgument("simplex dimension must be positive");
  std::vector<double> a(k);
  double total = 0.0;
  while (total <= 0.0) {
    total = 0.0;
    for (auto& v : a) {
      v = uniform01(rng);
      total += v;
    }
  }
  for (auto& v : a) v /= total;
  return SimplexWeights(std::move(a));
}

std::vector<double> quantile_midpoints(std::size_t k) {
  std::vector<double> tau(k);
  for (std::size_t i = 0; i < k; ++i) tau[i] = (2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(k));
  return tau;
}

namespace {

// Forward passes shared by every loss.
struct Evaluated {
  std::size_t batch = 0, heads = 0, actions = 0;
  Eigen::MatrixXd online;  // (K*A) x B
  Eigen::MatrixXd next;    // (K*A) x B from the target network

  double online_at(std::size_t k, std::size_t a, std::size_t b) const {
    return online(static_cast<Eigen::Index>(k * actions + a), static_cast<Eigen::Index>(b));
  }
  double next_at(std::size_t k, std::size_t a, std::size_t b) const {
    return next(static_cast<Eigen::Index>(k * actions + a), static_cast<Eigen::Index>(b));
  }
};

Evaluated evaluate(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                   const TdSettings& td) {
  if (!(td.discount >= 0.0 && td.discount < 1.0)) throw InvalidArgument("discount must lie in [0, 1)");
  if (!(td.threshold > 0.0)) throw InvalidArgument("Huber threshold must be positive");
  if (target.network.spec().heads != q.num_heads() || target.network.num_actions() != q.num_actions())
    throw InvalidArgument("target network shape does not match the online network");
  batch.validate(q.num_actions());
  Evaluated e;
  e.batch = batch.size();
  e.heads = q.num_heads();
  e.actions = q.num_actions();
  e.online = q.forward_batch(batch.observations, e.batch);
  e.next = target.network.forward_batch(batch.next_observations, e.batch);
  return e;
}

LossReport finish(const QEnsemble& q, const MiniBatch& batch, double loss, const Eigen::MatrixXd& upstream,
                  const std::vector<double>& abs_td) {
  if (!std::isfinite(loss)) throw DivergenceError("non-finite loss");
  LossReport r;
  r.loss = loss;
  r.gradient = q.backward(batch.observations, batch.size(), upstream);
  if (!abs_td.empty()) {
    r.mean_abs_td = std::accumulate(abs_td.begin(), abs_td.end(), 0.0) / static_cast<double>(abs_td.size());
    r.max_abs_td = *std::max_element(abs_td.begin(), abs_td.end());
  }
  return r;
}

double max_over_actions(const Evaluated& e, std::size_t k, std::size_t b) {
  double best = e.next_at(k, 0, b);
  for (std::size_t a = 1; a < e.actions; ++a) best = std::max(best, e.next_at(k, a, b));
  return best;
}

// Per-head TD regression: head k against bootstrap value `next_value(k, b)`.
template <typename NextValue>
LossReport per_head_loss(const QEnsemble& q, const Evaluated& e, const MiniBatch& batch, const TdSettings& td,
                         NextValue next_value) {
  const double scale = 1.0 / static_cast<double>(e.batch * e.heads);
  Eigen::MatrixXd upstream = Eigen::MatrixXd::Zero(e.online.rows(), e.online.cols());
  std::vector<double> abs_td;
  abs_td.reserve(e.batch * e.heads);
  double loss = 0.0;
  for (std::size_t b = 0; b < e.batch; ++b) {
    const std::size_t a = batch.actions[b];
    for (std::size_t k = 0; k < e.heads; ++k) {
      double y = batch.rewards[b];
      if (batch.bootstraps(b)) y += td.discount * next_value(k, b);
      const double delta = e.online_at(k, a, b) - y;
      loss += huber(delta, td.threshold) * scale;
      upstream(static_cast<Eigen::Index>(k * e.actions + a), static_cast<Eigen::Index>(b)) =
          huber_derivative(delta, td.threshold) * scale;
      abs_td.push_back(std::abs(delta));
    }
  }
  return finish(q, batch, loss, upstream, abs_td);
}

template <typename AlphaOf>
LossReport rem_impl(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch, const TdSettings& td,
                    AlphaOf alpha_of) {
  const Evaluated e = evaluate(q, target, batch, td);
  const double scale = 1.0 / static_cast<double>(e.batch);
  Eigen::MatrixXd upstream = Eigen::MatrixXd::Zero(e.online.rows(), e.online.cols());
  std::vector<double> abs_td;
  abs_td.reserve(e.batch);
  double loss = 0.0;
  for (std::size_t b = 0; b < e.batch; ++b) {
    const SimplexWeights& alpha = alpha_of(b);
    if (alpha.size() != e.heads) throw InvalidArgument("mixture size does not match the number of heads");
    const std::size_t a = batch.actions[b];
    double mixed = 0.0;
    for (std::size_t k = 0; k < e.heads; ++k) mixed += alpha[k] * e.online_at(k, a, b);
    double y = batch.rewards[b];
    if (batch.bootstraps(b)) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t next_a = 0; next_a < e.actions; ++next_a) {
        double m = 0.0;
        for (std::size_t k = 0; k < e.heads; ++k) m += alpha[k] * e.next_at(k, next_a, b);
        best = std::max(best, m);
      }
      y += td.discount * best;
    }
    const double delta = mixed - y;
    loss += huber(delta, td.threshold) * scale;
    const double g = huber_derivative(delta, td.threshold) * scale;
    for (std::size_t k = 0; k < e.heads; ++k)
      upstream(static_cast<Eigen::Index>(k * e.actions + a), static_cast<Eigen::Index>(b)) = alpha[k] * g;
    abs_td.push_back(std::abs(delta));
  }
  return finish(q, batch, loss, upstream, abs_td);
}

}  // namespace

LossReport dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch, const TdSettings& td) {
  if (q.num_heads() != 1) throw InvalidArgument("dqn_loss requires a single-head network");
  const Evaluated e = evaluate(q, target, batch, td);
  return per_head_loss(q, e, batch, td, [&](std::size_t k, std::size_t b) { return max_over_actions(e, k, b); });
}

LossReport ensemble_dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                             const TdSettings& td) {
  const Evaluated e = evaluate(q, target, batch, td);
  return per_head_loss(q, e, batch, td, [&](std::size_t k, std::size_t b) { return max_over_actions(e, k, b); });
}

LossReport averaged_ensemble_dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                                      const TdSettings& td) {
  const Evaluated e = evaluate(q, target, batch, td);
  std::vector<double> shared(e.batch);
  for (std::size_t b = 0; b < e.batch; ++b) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < e.actions; ++a) {
      double mean = 0.0;
      for (std::size_t k = 0; k < e.heads; ++k) mean += e.next_at(k, a, b);
      best = std::max(best, mean / static_cast<double>(e.heads));
    }
    shared[b] = best;
  }
  return per_head_loss(q, e, batch, td, [&](std::size_t, std::size_t b) { return shared[b]; });
}

LossReport rem_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                    const SimplexWeights& alpha, const TdSettings& td) {
  return rem_impl(q, target, batch, td, [&](std::size_t) -> const SimplexWeights& { return alpha; });
}

LossReport rem_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                    std::span<const SimplexWeights> alphas, const TdSettings& td) {
  if (alphas.size() != batch.size()) throw InvalidArgument("need one mixture per transition");
  return rem_impl(q, target, batch, td, [&](std::size_t b) -> const SimplexWeights& { return alphas[b]; });
}

LossReport qr_dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                       const TdSettings& td) {
  const Evaluated e = evaluate(q, target, batch, td);
  const std::size_t K = e.heads;
  const double kappa = td.threshold;
  const std::vector<double> tau = quantile_midpoints(K);
  const double scale = 1.0 / (static_cast<double>(e.batch) * static_cast<double>(K));
  Eigen::MatrixXd upstream = Eigen::MatrixXd::Zero(e.online.rows(), e.online.cols());
  std::vector<double> abs_td;
  abs_td.reserve(e.batch);
  std::vector<double> samples(K);
  double loss = 0.0;
  for (std::size_t b = 0; b < e.batch; ++b) {
    const std::size_t a = batch.actions[b];
    if (batch.bootstraps(b)) {
      std::size_t best_a = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t next_a = 0; next_a < e.actions; ++next_a) {
        double mean = 0.0;
        for (std::size_t j = 0; j < K; ++j) mean += e.next_at(j, next_a, b);
        if (mean > best) {
          best = mean;
          best_a = next_a;
        }
      }
      for (std::size_t j = 0; j < K; ++j) samples[j] = batch.rewards[b] + td.discount * e.next_at(j, best_a, b);
    } else {
      std::fill(samples.begin(), samples.end(), batch.rewards[b]);
    }
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      const double theta = e.online_at(i, a, b);
      double g = 0.0;
      for (std::size_t j = 0; j < K; ++j) {
        const double u = samples[j] - theta;
        const double weight = std::abs(tau[i] - (u < 0.0 ? 1.0 : 0.0));
        loss += weight * huber(u, kappa) / kappa * scale;
        // d/dtheta of huber(u) is -huber'(u).
        g -= weight * huber_derivative(u, kappa) / kappa * scale;
        abs_sum += std::abs(u);
      }
      upstream(static_cast<Eigen::Index>(i * e.actions + a), static_cast<Eigen::Index>(b)) = g;
    }
    abs_td.push_back(abs_sum / static_cast<double>(K * K));
  }
  return finish(q, batch, loss, upstream, abs_td);
}

}  // namespace offrl
