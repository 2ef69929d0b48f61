#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "offrl/env.hpp"
#include "offrl/qfunc.hpp"
#include "offrl/replay.hpp"

namespace testing {

using namespace offrl;

inline MdpSpec random_mdp(std::size_t states, std::size_t actions, std::uint64_t seed, double gamma) {
  EnvOptions o;
  o.num_actions = actions;
  o.discount = gamma;
  return make_env(EnvKind::random_mdp, states, seed, o);
}

// Exact value of a deterministic policy: (I - gamma P_pi) v = r_pi, with
// terminal states pinned to zero.
inline Eigen::VectorXd exact_policy_value(const MdpSpec& mdp, const std::vector<std::size_t>& policy) {
  const auto S = static_cast<Eigen::Index>(mdp.num_states);
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(S, S);
  Eigen::VectorXd r = Eigen::VectorXd::Zero(S);
  for (std::size_t s = 0; s < mdp.num_states; ++s) {
    if (mdp.is_terminal(s)) continue;
    const std::size_t a = policy[s];
    r[static_cast<Eigen::Index>(s)] = mdp.r(s, a);
    for (std::size_t t = 0; t < mdp.num_states; ++t)
      if (!mdp.is_terminal(t))
        m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) -= mdp.discount * mdp.p(s, a, t);
  }
  return m.fullPivLu().solve(r);
}

struct Enumerated {
  std::vector<std::size_t> policy;
  Eigen::VectorXd values;
};

// Best deterministic policy by brute force over all A^S policies, compared
// by the sum of state values (the optimal policy dominates pointwise).
inline Enumerated enumerate_best_policy(const MdpSpec& mdp) {
  const std::size_t S = mdp.num_states, A = mdp.num_actions;
  std::vector<std::size_t> policy(S, 0);
  Enumerated best;
  double best_total = -INFINITY;
  while (true) {
    const Eigen::VectorXd v = exact_policy_value(mdp, policy);
    if (v.sum() > best_total + 1e-12) {
      best_total = v.sum();
      best = {policy, v};
    }
    std::size_t i = 0;
    while (i < S && ++policy[i] == A) policy[i++] = 0;
    if (i == S) break;
  }
  return best;
}

// Central differences of f around x.
inline Eigen::VectorXd finite_difference(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                         double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

struct GradientAgreement {
  double fraction_within = 0.0;  // coordinates within rel_tol
  double worst_relative = 0.0;
};

// |a - n| <= rel * max(|a|, |n|) + floor counts as agreement.
inline GradientAgreement compare_gradients(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                                           double rel_tol, double floor = 1e-8) {
  GradientAgreement out;
  std::size_t ok = 0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double scale = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    if (diff <= rel_tol * scale + floor) ++ok;
    const double rel = diff <= floor ? 0.0 : diff / std::max(scale, 1e-300);
    out.worst_relative = std::max(out.worst_relative, rel);
  }
  out.fraction_within = analytic.size() ? static_cast<double>(ok) / static_cast<double>(analytic.size()) : 1.0;
  return out;
}

// Random batch of transitions over `states` states in the given encoding.
inline MiniBatch random_batch(const ObservationCodec& codec, std::size_t actions, std::size_t n, Rng& rng,
                              double terminal_prob = 0.2) {
  std::uniform_int_distribution<std::size_t> state(0, codec.num_states() - 1);
  std::uniform_int_distribution<std::size_t> action(0, actions - 1);
  std::uniform_real_distribution<double> reward(-1.0, 1.0);
  MiniBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    Transition t;
    const auto o = codec.encode(state(rng));
    const auto next = codec.encode(state(rng));
    t.observation.assign(o.begin(), o.end());
    t.next_observation.assign(next.begin(), next.end());
    t.action = static_cast<std::uint32_t>(action(rng));
    t.reward = static_cast<float>(reward(rng));
    t.end = uniform01(rng) < terminal_prob ? EpisodeEnd::terminal : EpisodeEnd::none;
    b.push_back(t);
  }
  return b;
}

inline QEnsemble random_network(NetworkSpec spec, Rng& rng, double scale = 1.0) {
  QEnsemble q(std::move(spec));
  std::normal_distribution<double> n(0.0, scale);
  for (Eigen::Index i = 0; i < q.parameters().size(); ++i) q.parameters()[i] = n(rng);
  return q;
}

// Head k of an ensemble as a standalone single-head network: shared trunk
// (multi-head mlp) followed by the head's own parameter slices.
inline QEnsemble single_head(const QEnsemble& q, std::size_t k) {
  NetworkSpec spec = q.spec();
  spec.heads = 1;
  QEnsemble out(spec);
  std::vector<double> flat;
  std::size_t owned = 0;
  for (std::size_t j = 0; j < q.num_heads(); ++j)
    for (auto [off, len] : q.head_parameter_ranges(j)) owned += len;
  const std::size_t trunk = static_cast<std::size_t>(q.parameters().size()) - owned;
  for (std::size_t i = 0; i < trunk; ++i) flat.push_back(q.parameters()[static_cast<Eigen::Index>(i)]);
  for (auto [off, len] : q.head_parameter_ranges(k))
    for (std::size_t i = 0; i < len; ++i) flat.push_back(q.parameters()[static_cast<Eigen::Index>(off + i)]);
  out.parameters() = Eigen::Map<const Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
  return out;
}

// K copies of one single-head network's parameters.
inline QEnsemble replicate_heads(const QEnsemble& one, std::size_t k) {
  NetworkSpec spec = one.spec();
  spec.heads = k;
  QEnsemble out(spec);
  const auto head = one.head_parameter_ranges(0);
  std::size_t own = 0;
  for (auto [off, len] : head) own += len;
  const std::size_t trunk = static_cast<std::size_t>(one.parameters().size()) - own;
  for (std::size_t i = 0; i < trunk; ++i) out.parameters()[static_cast<Eigen::Index>(i)] = one.parameters()[static_cast<Eigen::Index>(i)];
  for (std::size_t j = 0; j < k; ++j) {
    auto dst = out.head_parameter_ranges(j);
    for (std::size_t r = 0; r < head.size(); ++r)
      for (std::size_t i = 0; i < head[r].second; ++i)
        out.parameters()[static_cast<Eigen::Index>(dst[r].first + i)] =
            one.parameters()[static_cast<Eigen::Index>(head[r].first + i)];
  }
  return out;
}

// Synthetic logged dataset: `episodes` episodes of random lengths in
// [1, max_len] over `states` index-encoded states. Every episode ends with a
// terminal or truncated flag except, optionally, the last.
inline LoggedDataset synthetic_dataset(std::size_t episodes, std::size_t max_len, std::size_t states,
                                       std::size_t actions, Rng& rng, bool partial_tail = false) {
  DatasetHeader h;
  h.encoding = ObservationEncoding::index;
  h.obs_dim = 1;
  h.num_actions = static_cast<std::uint32_t>(actions);
  h.discount = 0.9;
  h.seed = 42;
  h.descriptor = "env=custom;size=0;seed=0;states=" + std::to_string(states);
  DatasetWriter w(h);
  std::uniform_int_distribution<std::size_t> len(1, max_len), st(0, states - 1), ac(0, actions - 1);
  std::uniform_real_distribution<float> rw(-1.0f, 1.0f);
  for (std::size_t e = 0; e < episodes; ++e) {
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
      Transition t;
      t.observation = {static_cast<float>(st(rng))};
      t.next_observation = {static_cast<float>(st(rng))};
      t.action = static_cast<std::uint32_t>(ac(rng));
      t.reward = rw(rng);
      const bool last = i + 1 == n && !(partial_tail && e + 1 == episodes);
      t.end = last ? (uniform01(rng) < 0.5 ? EpisodeEnd::terminal : EpisodeEnd::truncated) : EpisodeEnd::none;
      t.episode_id = e;
      t.step_in_episode = i;
      w.append(std::move(t));
    }
  }
  return std::move(w).finalize();
}

}  // namespace testing
