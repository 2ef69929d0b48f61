#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <vector>

#include "offrl/qfunc.hpp"
#include "offrl/replay.hpp"
#include "offrl/rng.hpp"

namespace offrl {

// l(u) = u^2 / 2 for |u| <= lambda, lambda * (|u| - lambda / 2) otherwise.
double huber(double u, double lambda);
double huber_derivative(double u, double lambda);

// A point on the (K-1)-simplex. Construction enforces nonnegativity and unit
// sum (within 1e-9).
class SimplexWeights {
 public:
  explicit SimplexWeights(std::vector<double> alpha);
  static SimplexWeights one_hot(std::size_t k, std::size_t index);
  static SimplexWeights uniform(std::size_t k);

  std::size_t size() const { return alpha_.size(); }
  double operator[](std::size_t i) const { return alpha_[i]; }
  std::span<const double> values() const { return alpha_; }
  // alpha-weighted sum of the rows of a K x A matrix.
  Eigen::VectorXd mix(const Eigen::MatrixXd& heads) const;

  friend bool operator==(const SimplexWeights&, const SimplexWeights&) = default;

 private:
  std::vector<double> alpha_;
};

// alpha'_k ~ U(0, 1) i.i.d., alpha = alpha' / sum(alpha'). An all-zero draw
// is redrawn.
SimplexWeights sample_simplex(std::size_t k, Rng& rng);

struct LossReport {
  double loss = 0.0;
  Eigen::VectorXd gradient;
  double mean_abs_td = 0.0;
  double max_abs_td = 0.0;
};

struct TdSettings {
  double discount = 0.99;
  // Huber threshold for TD losses, kappa for the quantile loss.
  double threshold = 1.0;
};

// All losses are batch means, treat the target network as constant, and drop
// the bootstrap term on transitions flagged terminal. Each throws
// DivergenceError when the loss is not finite and InvalidArgument on shape
// mismatches.

// Requires a single head.
LossReport dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                    const TdSettings& td);

// Mean over heads of per-head DQN losses, head k against target head k.
LossReport ensemble_dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                             const TdSettings& td);

// Huber of alpha.Q(s,a) - r - gamma * max_a' alpha.Q'(s',a'); the max is
// taken after mixing the target heads.
LossReport rem_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                    const SimplexWeights& alpha, const TdSettings& td);
// One mixture per transition.
LossReport rem_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                    std::span<const SimplexWeights> alphas, const TdSettings& td);

// Every head regressed onto r + gamma * max_a' mean_k Q'_k(s', a').
LossReport averaged_ensemble_dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                                      const TdSettings& td);

// Heads are quantiles at midpoints (2i - 1) / 2K. The next action maximizes
// the target quantile mean; per transition the loss is
//   sum_i (1/K) sum_j |tau_i - 1{u_ij < 0}| * huber(u_ij, kappa) / kappa,
// u_ij = r + gamma * theta'_j(s', a*) - theta_i(s, a).
LossReport qr_dqn_loss(const QEnsemble& q, const TargetSnapshot& target, const MiniBatch& batch,
                       const TdSettings& td);

// Midpoint quantile levels for K heads.
std::vector<double> quantile_midpoints(std::size_t k);

}  // namespace offrl
