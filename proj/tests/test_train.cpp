#include <doctest.h>

#include <cmath>
#include <map>

#include "offrl/errors.hpp"
#include "offrl/oracle.hpp"
#include "offrl/train.hpp"
#include "support.hpp"

using namespace offrl;

namespace {

TrainConfig small(AgentKind agent, std::uint64_t seed) {
  TrainConfig c;
  c.agent = agent;
  c.architecture = Architecture::tabular;
  c.heads = 4;
  c.optimizer.learning_rate = 0.003;
  c.iterations = 10;
  c.env_steps_per_iteration = 1000;
  c.gradient_updates_per_iteration = 250;
  c.min_replay = 200;
  c.target_sync_period = 50;
  c.update_period = 1;
  c.epsilon_decay_steps = 3000;
  c.eval_episodes = 10;
  c.seed = seed;
  return c;
}

Eigen::MatrixXd table_of(const QEnsemble& q, const ObservationCodec& codec) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(codec.num_states()), static_cast<Eigen::Index>(q.num_actions()));
  for (std::size_t s = 0; s < codec.num_states(); ++s)
    out.row(static_cast<Eigen::Index>(s)) = q_average(q.forward(codec.encode(s))).transpose();
  return out;
}

// Uniform-behavior log over random-mdp: every (s, a) pair visited many times.
LoggedDataset uniform_log(const MdpSpec& mdp, std::size_t n, std::uint64_t seed) {
  DatasetHeader h;
  h.encoding = ObservationEncoding::one_hot;
  h.obs_dim = static_cast<std::uint32_t>(mdp.num_states);
  h.num_actions = static_cast<std::uint32_t>(mdp.num_actions);
  h.discount = mdp.discount;
  h.seed = seed;
  h.descriptor = make_descriptor(mdp.descriptor, mdp.num_states, "uniform");
  const ObservationCodec codec(ObservationEncoding::one_hot, mdp);
  DatasetWriter w(h);
  EnvState env(seed, 50);
  Rng pick(seed + 1);
  std::size_t s = reset(env, mdp).state;
  std::uint64_t ep = 0, t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = pick() % mdp.num_actions;
    const StepOutcome o = step(env, mdp, a, 0.0);
    Transition tr;
    const auto obs = codec.encode(s), next = codec.encode(o.state);
    tr.observation.assign(obs.begin(), obs.end());
    tr.next_observation.assign(next.begin(), next.end());
    tr.action = static_cast<std::uint32_t>(a);
    tr.reward = static_cast<float>(o.reward);
    tr.episode_id = ep;
    tr.step_in_episode = t++;
    tr.end = o.truncated ? EpisodeEnd::truncated : o.terminal ? EpisodeEnd::terminal : EpisodeEnd::none;
    w.append(tr);
    s = o.state;
    if (env.done) {
      s = reset(env, mdp).state;
      ++ep;
      t = 0;
    }
  }
  return std::move(w).finalize();
}

double final_return(const RunResult& r) { return r.curve.back().mean_return; }

}  // namespace

TEST_CASE("linear epsilon schedule") {
  CHECK(linear_epsilon(1.0, 0.01, 1000, 500) == doctest::Approx(0.505).epsilon(1e-12));
  CHECK(linear_epsilon(1.0, 0.01, 1000, 0) == 1.0);
  CHECK(linear_epsilon(1.0, 0.01, 1000, 1000) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(linear_epsilon(1.0, 0.01, 1000, 5000) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("config validation") {
  TrainConfig c = small(AgentKind::rem, 0);
  CHECK_NOTHROW(c.validate());
  c.epsilon_start = 1.5;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small(AgentKind::rem, 0);
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small(AgentKind::rem, 0);
  c.discount = 1.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small(AgentKind::rem, 0);
  c.batch_size = 0;
  CHECK_THROWS_AS(run_online_training(c, make_env("chain", 4, 0)), InvalidArgument);
  CHECK_THROWS_AS(run_online_collection(small(AgentKind::rem, 0), make_env("chain", 4, 0)), InvalidArgument);
  CHECK_THROWS_AS(run_online_rem(small(AgentKind::dqn, 0), make_env("chain", 4, 0)), InvalidArgument);
  CHECK(parse_agent_kind("averaged-ensemble-dqn") == AgentKind::averaged_ensemble_dqn);
  CHECK(to_string(AgentKind::qr_dqn) == "qr-dqn");
  CHECK_THROWS_AS(parse_agent_kind("c51"), InvalidArgument);
}

TEST_CASE("greedy evaluation of Q* on a deterministic chain earns the optimal return") {
  EnvOptions o;
  o.discount = 0.9;
  const MdpSpec chain = make_env("chain", 7, 0, o);
  const QTable star = value_iteration(chain, 1e-12);
  const ObservationCodec codec(ObservationEncoding::index, chain);
  NetworkSpec spec;
  spec.architecture = Architecture::tabular;
  spec.heads = 1;
  spec.input_dim = chain.num_states;
  spec.num_actions = chain.num_actions;
  QEnsemble q(spec);
  for (std::size_t s = 0; s < chain.num_states; ++s)
    for (std::size_t a = 0; a < 2; ++a)
      q.parameters()[static_cast<Eigen::Index>(s * 2 + a)] = star.values(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));

  // Follow the greedy path of the oracle table to get the optimal return.
  double optimal = 0.0;
  std::size_t s = 0;
  while (!chain.is_terminal(s)) {
    const std::size_t a = greedy_action(star.values.row(static_cast<Eigen::Index>(s)).transpose());
    optimal += chain.r(s, a);
    std::size_t next = s;
    for (std::size_t t = 0; t < chain.num_states; ++t)
      if (chain.p(s, a, t) == 1.0) next = t;
    s = next;
  }
  Rng rng(5);
  const EvalRecord r = evaluate_policy(q, chain, codec, EvalSettings{0.0, 5, 0.0, 200}, rng);
  CHECK(r.episodes == 5);
  CHECK(r.mean_return == optimal);
  CHECK(r.std_return == 0.0);
}

TEST_CASE("evaluation is deterministic in its seed") {
  const MdpSpec grid = make_env("gridworld", 4, 0);
  const ObservationCodec codec(ObservationEncoding::one_hot, grid);
  Rng init(3);
  NetworkSpec spec;
  spec.architecture = Architecture::mlp;
  spec.heads = 2;
  spec.hidden = {8};
  spec.input_dim = codec.dim();
  spec.num_actions = grid.num_actions;
  const QEnsemble q = QEnsemble::initialized(spec, init);
  Rng a(11), b(11);
  const EvalRecord x = evaluate_policy(q, grid, codec, EvalSettings{0.1, 7, 0.25, 50}, a);
  const EvalRecord y = evaluate_policy(q, grid, codec, EvalSettings{0.1, 7, 0.25, 50}, b);
  CHECK(x.mean_return == y.mean_return);
  CHECK(x.std_return == y.std_return);
  CHECK(x.episodes == 7);
  CHECK(a() == b());
}

TEST_CASE("uniform evaluation matches exact policy evaluation") {
  // Quickly terminating MDP with discount close to one, so the exact value is
  // the expected undiscounted return.
  MdpSpec m(4, 2, 1.0 - 1e-9);
  Rng gen(9);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t a = 0; a < 2; ++a) {
      double total = 0.0;
      for (std::size_t t = 0; t < 3; ++t) total += (m.p(s, a, t) = uniform01(gen));
      for (std::size_t t = 0; t < 3; ++t) m.p(s, a, t) *= 0.7 / total;
      m.p(s, a, 3) = 0.3;
      m.r(s, a) = 2.0 * uniform01(gen) - 1.0;
    }
  m.p(3, 0, 3) = m.p(3, 1, 3) = 1.0;
  m.terminal[3] = 1;
  m.initial_distribution[0] = 1.0;
  m.validate();
  const PolicySpec pi = uniform_policy(m);
  const double exact = initial_value(m, policy_evaluation(m, pi, 1e-13), pi);

  const EvalSettings settings{1.0, 20000, 0.0, 400};
  Rng r1(4);
  const EvalRecord random = evaluate_random_policy(m, settings, r1);
  CHECK(std::abs(random.mean_return - exact) <= 3.0 * random.std_return / std::sqrt(20000.0));

  const ObservationCodec codec(ObservationEncoding::index, m.descriptor, m.num_states);
  NetworkSpec spec;
  spec.architecture = Architecture::tabular;
  spec.heads = 1;
  spec.input_dim = m.num_states;
  spec.num_actions = 2;
  Rng init(2);
  const QEnsemble q = testing::random_network(spec, init);
  Rng r2(8);
  const EvalRecord eps1 = evaluate_policy(q, m, codec, settings, r2);
  CHECK(std::abs(eps1.mean_return - exact) <= 3.0 * eps1.std_return / std::sqrt(20000.0));
}

TEST_CASE("collection logs every executed transition") {
  const MdpSpec grid = make_env("gridworld", 5, 0);
  TrainConfig c = small(AgentKind::dqn, 1);
  c.iterations = 3;
  std::vector<BehaviorStep> steps;
  RunHooks hooks;
  hooks.on_step = [&](const BehaviorStep& s) { steps.push_back(s); };
  const RunResult r = run_online_collection(c, grid, hooks);
  REQUIRE(r.dataset);
  const LoggedDataset& d = *r.dataset;
  CHECK(d.size() == 3000);
  CHECK(r.training_env_steps == 3000);
  REQUIRE(steps.size() == d.size());
  std::size_t sticky = 0, flags = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d[i].action == steps[i].executed_action);
    sticky += steps[i].executed_action != steps[i].requested_action;
    flags += d[i].ends_episode();
  }
  CHECK(sticky > 0);
  CHECK(d.complete_episode_count() == flags);
  CHECK(d.episode_count() == flags + (d.has_partial_episode() ? 1 : 0));
  CHECK(steps[500].epsilon == doctest::Approx(linear_epsilon(1.0, 0.01, 3000, 500)));
  CHECK(d.header().descriptor == "env=gridworld;size=5;seed=0;states=26;agent=dqn");
  CHECK(r.curve.size() == 3);
  for (const EvalRecord& e : r.curve) CHECK(e.episodes == c.eval_episodes);
}

TEST_CASE("target syncs land on multiples of the period") {
  TrainConfig c = small(AgentKind::rem, 2);
  c.iterations = 2;
  c.target_sync_period = 37;
  std::vector<std::uint64_t> syncs;
  RunHooks hooks;
  hooks.on_sync = [&](std::uint64_t u) { syncs.push_back(u); };
  const RunResult online = run_online_training(c, make_env("gridworld", 4, 0), hooks);
  REQUIRE(!syncs.empty());
  for (auto u : syncs) CHECK(u % 37 == 0);
  CHECK(syncs.size() == online.gradient_updates / 37);
}

TEST_CASE("online agents beat the uniform policy") {
  SUBCASE("chain") {
    EnvOptions o;
    o.discount = 0.95;
    const MdpSpec chain = make_env("chain", 20, 0, o);
    const RunResult r = run_online_collection(small(AgentKind::dqn, 3), chain);
    Rng rng = make_rng(derive_seed(3, Stream::evaluation), Stream::evaluation);
    const EvalRecord random = evaluate_random_policy(chain, EvalSettings{1.0, 200, 0.25, 200}, rng);
    CHECK(final_return(r) >= random.mean_return);
  }
  SUBCASE("gridworld") {
    const MdpSpec grid = make_env("gridworld", 5, 0);
    const RunResult r = run_online_collection(small(AgentKind::dqn, 4), grid);
    Rng rng(17);
    const EvalRecord random = evaluate_random_policy(grid, EvalSettings{1.0, 200, 0.25, 200}, rng);
    CHECK(final_return(r) >= random.mean_return);
  }
}

TEST_CASE("later collection episodes do better than early ones") {
  const MdpSpec grid = make_env("gridworld", 5, 0);
  const RunResult r = run_online_collection(small(AgentKind::dqn, 5), grid);
  const LoggedDataset& d = *r.dataset;
  const LoggedDataset head = take_prefix(d, d.size() / 10);
  const std::vector<double> all = episode_returns(d);
  const std::size_t tail = std::max<std::size_t>(1, all.size() / 10);
  double tail_mean = 0.0;
  for (std::size_t i = all.size() - tail; i < all.size(); ++i) tail_mean += all[i] / static_cast<double>(tail);
  CHECK(average_episode_return(head) <= tail_mean);
}

TEST_CASE("online REM holds one mixture per episode") {
  TrainConfig c = small(AgentKind::rem, 6);
  c.iterations = 2;
  c.topology = Topology::separate;
  std::map<std::uint64_t, std::vector<double>> per_episode;
  bool constant = true;
  RunHooks hooks;
  hooks.on_step = [&](const BehaviorStep& s) {
    REQUIRE(s.mixture != nullptr);
    const std::vector<double> w(s.mixture->values().begin(), s.mixture->values().end());
    auto [it, fresh] = per_episode.emplace(s.episode, w);
    if (!fresh && it->second != w) constant = false;
  };
  run_online_rem(c, make_env("gridworld", 5, 0), hooks);
  CHECK(constant);
  REQUIRE(per_episode.size() > 2);
  std::size_t changes = 0;
  for (auto it = std::next(per_episode.begin()); it != per_episode.end(); ++it)
    changes += it->second != std::prev(it)->second;
  CHECK(changes == per_episode.size() - 1);
}

TEST_CASE("single-head online REM behaves like online DQN") {
  const MdpSpec grid = make_env("gridworld", 5, 0);
  TrainConfig rem = small(AgentKind::rem, 7);
  rem.heads = 1;
  rem.iterations = 4;
  TrainConfig dqn = rem;
  dqn.agent = AgentKind::dqn;
  std::vector<std::pair<std::size_t, std::size_t>> a, b;
  RunHooks ha, hb;
  ha.on_step = [&](const BehaviorStep& s) { a.emplace_back(s.requested_action, s.executed_action); };
  hb.on_step = [&](const BehaviorStep& s) { b.emplace_back(s.requested_action, s.executed_action); };
  const RunResult x = run_online_rem(rem, grid, ha);
  const RunResult y = run_online_collection(dqn, grid, hb);
  CHECK(a == b);
  REQUIRE(x.curve.size() == y.curve.size());
  for (std::size_t i = 0; i < x.curve.size(); ++i) CHECK(x.curve[i].mean_return == y.curve[i].mean_return);
}

TEST_CASE("online REM matches online DQN on gridworld") {
  const MdpSpec grid = make_env("gridworld", 5, 0);
  double rem_total = 0.0, dqn_total = 0.0, random_total = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig c = small(AgentKind::rem, seed);
    c.topology = Topology::separate;
    c.iterations = 20;
    c.eval_episodes = 30;
    TrainConfig d = c;
    d.agent = AgentKind::dqn;
    rem_total += final_return(run_online_rem(c, grid));
    dqn_total += final_return(run_online_collection(d, grid));
    Rng rng = make_rng(derive_seed(seed, Stream::evaluation), Stream::evaluation);
    random_total += evaluate_random_policy(grid, EvalSettings{1.0, 30, 0.25, 200}, rng).mean_return;
  }
  MESSAGE("online REM " << rem_total / 5 << ", online DQN " << dqn_total / 5 << ", random " << random_total / 5);
  CHECK(rem_total >= random_total);
  CHECK(std::abs(rem_total - dqn_total) <= 0.05 * std::abs(dqn_total));
}

TEST_CASE("offline training never steps the environment for learning") {
  Rng rng(1);
  const MdpSpec grid = make_env("gridworld", 4, 0);
  TrainConfig collect = small(AgentKind::dqn, 8);
  collect.iterations = 2;
  const LoggedDataset data = *run_online_collection(collect, grid).dataset;
  const auto before = crc32_of(encode_dataset(data));
  const LoggedDataset copy = data;

  TrainConfig c = small(AgentKind::rem, 9);
  c.iterations = 3;
  const RunResult r = run_offline_training(c, data, grid);
  CHECK(r.training_env_steps == 0);
  CHECK(r.evaluation_env_steps > 0);
  CHECK(r.gradient_updates == 750);
  CHECK_FALSE(r.dataset.has_value());
  CHECK(crc32_of(encode_dataset(data)) == before);
  CHECK(data == copy);
  for (std::size_t i = 0; i < r.curve.size(); ++i) CHECK(r.curve[i].env_steps == 0);
}

TEST_CASE("offline header checks") {
  Rng rng(2);
  const LoggedDataset data = testing::synthetic_dataset(5, 4, 16, 2, rng);
  TrainConfig c = small(AgentKind::dqn, 0);
  c.observation = ObservationEncoding::one_hot;
  CHECK_THROWS_AS(run_offline_training(c, data, make_env("gridworld", 4, 0)), FormatError);
}

TEST_CASE("single-head REM and DQN produce the same offline loss sequence") {
  const MdpSpec grid = make_env("gridworld", 4, 0);
  TrainConfig collect = small(AgentKind::dqn, 10);
  collect.iterations = 2;
  const LoggedDataset data = *run_online_collection(collect, grid).dataset;
  TrainConfig rem = small(AgentKind::rem, 11);
  rem.heads = 1;
  rem.iterations = 4;
  TrainConfig dqn = rem;
  dqn.agent = AgentKind::dqn;
  std::vector<double> a, b;
  RunHooks ha, hb;
  ha.on_update = [&](std::uint64_t, const LossReport& r) { a.push_back(r.loss); };
  hb.on_update = [&](std::uint64_t, const LossReport& r) { b.push_back(r.loss); };
  run_offline_training(rem, data, grid, ha);
  run_offline_training(dqn, data, grid, hb);
  REQUIRE(a.size() == 1000);
  REQUIRE(b.size() == 1000);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  CHECK(worst <= 1e-7);
}

TEST_CASE("offline tabular DQN reaches the optimum of the induced MDP") {
  EnvOptions o;
  o.num_actions = 2;
  o.discount = 0.9;
  const MdpSpec m = make_env("random-mdp", 5, 21, o);
  const LoggedDataset data = uniform_log(m, 4000, 3);
  const MdpSpec induced = induced_mdp(data);
  REQUIRE(induced.terminals().empty());
  const QTable star = value_iteration(induced, 1e-10);
  const PolicySpec best = greedy_policy(star.values);
  const double optimal = initial_value(induced, star, best);

  TrainConfig c = small(AgentKind::dqn, 12);
  c.observation = ObservationEncoding::one_hot;
  c.batch_size = 0;
  c.iterations = 10;
  c.gradient_updates_per_iteration = 500;
  c.eval_episodes = 2;
  const RunResult r = run_offline_training(c, data, m);
  REQUIRE(r.final_network);
  const PolicySpec learned = greedy_policy(table_of(*r.final_network, data.codec()));
  const double got = initial_value(induced, policy_evaluation(induced, learned, 1e-10), learned);
  CHECK(std::abs(got - optimal) <= 0.01 * std::abs(optimal));
}

TEST_CASE("runs are reproducible and report their best evaluation") {
  const MdpSpec grid = make_env("gridworld", 4, 0);
  TrainConfig c = small(AgentKind::qr_dqn, 13);
  c.iterations = 5;
  const RunResult a = run_online_training(c, grid);
  const RunResult b = run_online_training(c, grid);
  REQUIRE(a.curve.size() == b.curve.size());
  double best = -INFINITY;
  std::size_t best_at = 0;
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].mean_return == b.curve[i].mean_return);
    CHECK(a.curve[i].std_return == b.curve[i].std_return);
    CHECK(a.curve[i].mean_abs_td_error == b.curve[i].mean_abs_td_error);
    if (a.curve[i].mean_return > best) {
      best = a.curve[i].mean_return;
      best_at = a.curve[i].iteration;
    }
  }
  CHECK(a.final_network->parameters() == b.final_network->parameters());
  CHECK(a.best_score == best);
  CHECK(a.best_iteration == best_at);

  TrainConfig collect = small(AgentKind::dqn, 14);
  collect.iterations = 2;
  const RunResult x = run_online_collection(collect, grid);
  const RunResult y = run_online_collection(collect, grid);
  CHECK(encode_dataset(*x.dataset) == encode_dataset(*y.dataset));
  TrainConfig off = small(AgentKind::averaged_ensemble_dqn, 15);
  off.iterations = 3;
  const RunResult p = run_offline_training(off, *x.dataset, grid);
  const RunResult q = run_offline_training(off, *x.dataset, grid);
  CHECK(p.final_network->parameters() == q.final_network->parameters());
  CHECK(p.best_network->parameters() == q.best_network->parameters());
}

TEST_CASE("divergence is flagged and recorded") {
  const MdpSpec grid = make_env("gridworld", 4, 0);
  TrainConfig c = small(AgentKind::dqn, 16);
  c.architecture = Architecture::linear;
  c.optimizer.learning_rate = 1e308;
  c.iterations = 3;
  const RunResult r = run_online_collection(c, grid);
  CHECK(r.diverged);
  CHECK_FALSE(r.divergence_reason.empty());
  REQUIRE_FALSE(r.curve.empty());
  CHECK(r.curve.back().diverged);
  CHECK(std::isnan(r.curve.back().mean_return));
  REQUIRE(r.dataset);
  CHECK(r.dataset->size() > 0);
}
