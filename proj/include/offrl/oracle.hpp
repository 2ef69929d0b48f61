#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <filesystem>
#include <iosfwd>

#include "offrl/env.hpp"
#include "offrl/replay.hpp"

namespace offrl {

struct QTable {
  Eigen::MatrixXd values;  // num_states x num_actions
  double discount = 0.0;
  double bellman_residual = 0.0;
  std::size_t sweeps = 0;

  std::size_t num_states() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t num_actions() const { return static_cast<std::size_t>(values.cols()); }
  Eigen::VectorXd state_values() const { return values.rowwise().maxCoeff(); }
};

struct PolicySpec {
  Eigen::MatrixXd action_probs;  // num_states x num_actions

  void validate() const;
};

inline constexpr std::size_t kMaxSweeps = 100000;

// One synchronous Bellman optimality backup; terminal rows are zero.
Eigen::MatrixXd bellman_optimality_backup(const MdpSpec& mdp, const Eigen::MatrixXd& q);
Eigen::MatrixXd bellman_policy_backup(const MdpSpec& mdp, const PolicySpec& policy, const Eigen::MatrixXd& q);

// Sup-norm Bellman residual of the returned table is at most tol. Throws
// ConvergenceError after max_sweeps.
QTable value_iteration(const MdpSpec& mdp, double tol, std::size_t max_sweeps = kMaxSweeps);
QTable policy_evaluation(const MdpSpec& mdp, const PolicySpec& policy, double tol,
                         std::size_t max_sweeps = kMaxSweeps);

// Lowest-index argmax per state.
PolicySpec greedy_policy(const Eigen::MatrixXd& q);
PolicySpec uniform_policy(const MdpSpec& mdp);
// Expected discounted return from the initial distribution.
double initial_value(const MdpSpec& mdp, const QTable& q, const PolicySpec& policy);

// Unvisited (s, a) pairs become self-loops paying `reward`.
struct UnvisitedRule {
  double reward = 0.0;
};

// Empirical model: count-ratio transitions, mean rewards, next states of
// terminal-flagged transitions made absorbing, initial distribution from
// episode starts.
MdpSpec induced_mdp(const LoggedDataset& dataset, UnvisitedRule fallback = {});

// Visit counts per (s, a), row-major.
std::vector<std::size_t> visit_counts(const LoggedDataset& dataset);

void write_qtable_csv(const QTable& q, std::ostream& out);
void write_qtable_csv(const QTable& q, const std::filesystem::path& path);
void write_mdp_csv(const MdpSpec& mdp, std::ostream& out);

}  // namespace offrl
