#include "offrl/oracle.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "offrl/errors.hpp"

namespace offrl {

namespace {

double sup_norm(const Eigen::MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

template <typename Backup>
QTable iterate_to_fixed_point(const MdpSpec& mdp, double tol, std::size_t max_sweeps, Backup backup) {
  if (!(tol > 0.0)) throw InvalidArgument("solver tolerance must be positive");
  mdp.validate();
  QTable out;
  out.discount = mdp.discount;
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(mdp.num_states, mdp.num_actions);
  for (std::size_t sweep = 1; sweep <= max_sweeps; ++sweep) {
    Eigen::MatrixXd next = backup(q);
    const double change = sup_norm(next - q);
    q = std::move(next);
    // residual(q) <= discount * change <= change
    if (change <= tol) {
      out.values = std::move(q);
      out.bellman_residual = sup_norm(backup(out.values) - out.values);
      out.sweeps = sweep;
      return out;
    }
  }
  throw ConvergenceError("solver did not converge within " + std::to_string(max_sweeps) + " sweeps");
}

}  // namespace

void PolicySpec::validate() const {
  for (Eigen::Index s = 0; s < action_probs.rows(); ++s) {
    if ((action_probs.row(s).array() < 0.0).any()) throw InvalidArgument("negative policy probability");
    if (std::abs(action_probs.row(s).sum() - 1.0) > 1e-9) throw InvalidArgument("policy row does not sum to 1");
  }
}

Eigen::MatrixXd bellman_optimality_backup(const MdpSpec& mdp, const Eigen::MatrixXd& q) {
  const Eigen::VectorXd v = q.rowwise().maxCoeff();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(mdp.num_states, mdp.num_actions);
  for (std::size_t s = 0; s < mdp.num_states; ++s) {
    if (mdp.is_terminal(s)) continue;
    for (std::size_t a = 0; a < mdp.num_actions; ++a) {
      const auto row = mdp.row(s, a);
      double expected = 0.0;
      for (std::size_t t = 0; t < mdp.num_states; ++t) expected += row[t] * v[static_cast<Eigen::Index>(t)];
      out(s, a) = mdp.r(s, a) + mdp.discount * expected;
    }
  }
  return out;
}

Eigen::MatrixXd bellman_policy_backup(const MdpSpec& mdp, const PolicySpec& policy, const Eigen::MatrixXd& q) {
  const Eigen::VectorXd v = (q.array() * policy.action_probs.array()).rowwise().sum();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(mdp.num_states, mdp.num_actions);
  for (std::size_t s = 0; s < mdp.num_states; ++s) {
    if (mdp.is_terminal(s)) continue;
    for (std::size_t a = 0; a < mdp.num_actions; ++a) {
      const auto row = mdp.row(s, a);
      double expected = 0.0;
      for (std::size_t t = 0; t < mdp.num_states; ++t) expected += row[t] * v[static_cast<Eigen::Index>(t)];
      out(s, a) = mdp.r(s, a) + mdp.discount * expected;
    }
  }
  return out;
}

QTable value_iteration(const MdpSpec& mdp, double tol, std::size_t max_sweeps) {
  return iterate_to_fixed_point(mdp, tol, max_sweeps,
                                [&](const Eigen::MatrixXd& q) { return bellman_optimality_backup(mdp, q); });
}

QTable policy_evaluation(const MdpSpec& mdp, const PolicySpec& policy, double tol, std::size_t max_sweeps) {
  if (static_cast<std::size_t>(policy.action_probs.rows()) != mdp.num_states ||
      static_cast<std::size_t>(policy.action_probs.cols()) != mdp.num_actions)
    throw InvalidArgument("policy shape does not match the MDP");
  policy.validate();
  return iterate_to_fixed_point(mdp, tol, max_sweeps,
                                [&](const Eigen::MatrixXd& q) { return bellman_policy_backup(mdp, policy, q); });
}

PolicySpec greedy_policy(const Eigen::MatrixXd& q) {
  PolicySpec p{Eigen::MatrixXd::Zero(q.rows(), q.cols())};
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    Eigen::Index best = 0;
    q.row(s).maxCoeff(&best);
    p.action_probs(s, best) = 1.0;
  }
  return p;
}

PolicySpec uniform_policy(const MdpSpec& mdp) {
  return {Eigen::MatrixXd::Constant(mdp.num_states, mdp.num_actions, 1.0 / mdp.num_actions)};
}

double initial_value(const MdpSpec& mdp, const QTable& q, const PolicySpec& policy) {
  const Eigen::VectorXd v = (q.values.array() * policy.action_probs.array()).rowwise().sum();
  double total = 0.0;
  for (std::size_t s = 0; s < mdp.num_states; ++s) total += mdp.initial_distribution[s] * v[static_cast<Eigen::Index>(s)];
  return total;
}

std::vector<std::size_t> visit_counts(const LoggedDataset& dataset) {
  const ObservationCodec codec = dataset.codec();
  const std::size_t actions = dataset.header().num_actions;
  std::vector<std::size_t> counts(codec.num_states() * actions, 0);
  for (const Transition& t : dataset.transitions()) ++counts[codec.decode(t.observation) * actions + t.action];
  return counts;
}

MdpSpec induced_mdp(const LoggedDataset& dataset, UnvisitedRule fallback) {
  if (dataset.empty()) throw InvalidArgument("cannot induce an MDP from an empty dataset");
  const ObservationCodec codec = dataset.codec();
  const std::size_t S = codec.num_states();
  const std::size_t A = dataset.header().num_actions;
  MdpSpec mdp(S, A, dataset.header().discount);
  mdp.descriptor = descriptor_env(dataset.header().descriptor);

  std::vector<double> counts(S * A, 0.0);
  std::vector<double> reward_sums(S * A, 0.0);
  double starts = 0.0;
  for (const Transition& t : dataset.transitions()) {
    const std::size_t s = codec.decode(t.observation);
    const std::size_t next = codec.decode(t.next_observation);
    counts[s * A + t.action] += 1.0;
    reward_sums[s * A + t.action] += t.reward;
    mdp.p(s, t.action, next) += 1.0;
    if (t.end == EpisodeEnd::terminal) mdp.terminal[next] = 1;
    if (t.step_in_episode == 0) {
      mdp.initial_distribution[s] += 1.0;
      starts += 1.0;
    }
  }
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      const double n = counts[s * A + a];
      if (mdp.is_terminal(s) || n == 0.0) {
        for (std::size_t t = 0; t < S; ++t) mdp.p(s, a, t) = 0.0;
        mdp.p(s, a, s) = 1.0;
        mdp.r(s, a) = mdp.is_terminal(s) ? 0.0 : fallback.reward;
        continue;
      }
      for (std::size_t t = 0; t < S; ++t) mdp.p(s, a, t) /= n;
      mdp.r(s, a) = reward_sums[s * A + a] / n;
    }
  }
  for (double& p : mdp.initial_distribution) p /= starts;
  mdp.validate();
  return mdp;
}

void write_qtable_csv(const QTable& q, std::ostream& out) {
  out << "state,action,value\n" << std::setprecision(17);
  for (Eigen::Index s = 0; s < q.values.rows(); ++s)
    for (Eigen::Index a = 0; a < q.values.cols(); ++a) out << s << ',' << a << ',' << q.values(s, a) << '\n';
}

void write_qtable_csv(const QTable& q, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  write_qtable_csv(q, out);
}

void write_mdp_csv(const MdpSpec& mdp, std::ostream& out) {
  out << "state,action,next_state,probability,reward_mean,terminal\n" << std::setprecision(17);
  for (std::size_t s = 0; s < mdp.num_states; ++s)
    for (std::size_t a = 0; a < mdp.num_actions; ++a)
      for (std::size_t t = 0; t < mdp.num_states; ++t)
        if (mdp.p(s, a, t) > 0.0)
          out << s << ',' << a << ',' << t << ',' << mdp.p(s, a, t) << ',' << mdp.r(s, a) << ','
              << (mdp.is_terminal(s) ? 1 : 0) << '\n';
}

}  // namespace offrl
