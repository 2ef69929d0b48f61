#include "offrl/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "offrl/errors.hpp"

namespace offrl {

std::string_view to_string(AgentKind kind) {
  switch (kind) {
    case AgentKind::dqn: return "dqn";
    case AgentKind::ensemble_dqn: return "ensemble-dqn";
    case AgentKind::averaged_ensemble_dqn: return "averaged-ensemble-dqn";
    case AgentKind::rem: return "rem";
    case AgentKind::qr_dqn: return "qr-dqn";
  }
  return "dqn";
}

AgentKind parse_agent_kind(std::string_view name) {
  if (name == "dqn") return AgentKind::dqn;
  if (name == "ensemble-dqn") return AgentKind::ensemble_dqn;
  if (name == "averaged-ensemble-dqn") return AgentKind::averaged_ensemble_dqn;
  if (name == "rem") return AgentKind::rem;
  if (name == "qr-dqn") return AgentKind::qr_dqn;
  throw InvalidArgument("unknown agent '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw InvalidArgument(what);
  };
  require(heads >= 1 && heads <= kMaxHeads, "heads must lie in [1, 256]");
  require(tabular_init_scale >= 0.0, "tabular_init_scale must be nonnegative");
  require(!discount || (*discount >= 0.0 && *discount < 1.0), "discount must lie in [0, 1)");
  require(huber_lambda > 0.0, "huber_lambda must be positive");
  require(kappa > 0.0, "kappa must be positive");
  require(target_sync_period > 0, "target_sync_period must be positive");
  require(iterations > 0, "iterations must be positive");
  require(env_steps_per_iteration > 0, "env_steps_per_iteration must be positive");
  require(gradient_updates_per_iteration > 0, "gradient_updates_per_iteration must be positive");
  require(offline_multiplier > 0.0 && std::isfinite(offline_multiplier), "offline_multiplier must be positive");
  require(update_period > 0, "update_period must be positive");
  require(replay_capacity > 0, "replay_capacity must be positive");
  require(epsilon_start >= 0.0 && epsilon_start <= 1.0, "epsilon_start must lie in [0, 1]");
  require(epsilon_end >= 0.0 && epsilon_end <= 1.0, "epsilon_end must lie in [0, 1]");
  require(eval_epsilon >= 0.0 && eval_epsilon <= 1.0, "eval_epsilon must lie in [0, 1]");
  require(eval_episodes > 0, "eval_episodes must be positive");
  require(sticky_prob >= 0.0 && sticky_prob < 1.0, "sticky_prob must lie in [0, 1)");
  require(episode_cap > 0, "episode_cap must be positive");
  require(optimizer.learning_rate > 0.0 && optimizer.epsilon > 0.0, "optimizer rates must be positive");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0,
          "optimizer betas must lie in [0, 1)");
}

std::size_t TrainConfig::effective_heads() const { return agent == AgentKind::dqn ? 1 : heads; }

std::size_t TrainConfig::offline_updates_per_iteration() const {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(offline_multiplier * static_cast<double>(gradient_updates_per_iteration))));
}

NetworkSpec network_spec(const TrainConfig& config, const ObservationCodec& codec, std::size_t num_actions) {
  NetworkSpec spec;
  spec.architecture = config.architecture;
  spec.topology = config.topology;
  spec.heads = config.effective_heads();
  spec.input_dim = config.architecture == Architecture::tabular ? codec.num_states() : codec.dim();
  spec.num_actions = num_actions;
  if (config.architecture == Architecture::mlp) spec.hidden = config.hidden;
  spec.activation = config.activation;
  if (config.architecture == Architecture::tabular && codec.encoding() == ObservationEncoding::coords)
    throw EncodingMismatch("tabular networks need index or one-hot observations");
  return spec;
}

double linear_epsilon(double start, double end, std::uint64_t decay_steps, std::uint64_t step) {
  if (decay_steps == 0 || step >= decay_steps) return end;
  const double frac = static_cast<double>(step) / static_cast<double>(decay_steps);
  return start + (end - start) * frac;
}

namespace {

std::size_t epsilon_greedy(const Eigen::VectorXd& values, double epsilon, Rng& rng) {
  if (uniform01(rng) < epsilon)
    return std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(values.size()) - 1)(rng);
  return greedy_action(values);
}

struct Evaluation {
  EvalRecord record;
  std::uint64_t steps = 0;
};

// `q` may be null only when epsilon is 1.
Evaluation run_evaluation(const QEnsemble* q, const MdpSpec& mdp, const ObservationCodec* codec,
                          const EvalSettings& settings, Rng& rng) {
  if (settings.episodes == 0) throw InvalidArgument("evaluation needs at least one episode");
  if (!(settings.epsilon >= 0.0 && settings.epsilon <= 1.0)) throw InvalidArgument("evaluation epsilon must lie in [0, 1]");
  EnvState env(rng(), settings.episode_cap);
  Rng agent(rng());
  const Eigen::VectorXd zeros = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mdp.num_actions));
  Evaluation out;
  std::vector<double> returns;
  returns.reserve(settings.episodes);
  for (std::size_t ep = 0; ep < settings.episodes; ++ep) {
    StepOutcome o = reset(env, mdp);
    while (!env.done) {
      const Eigen::VectorXd values = q ? q_average(q->forward(codec->encode(o.state))) : zeros;
      o = step(env, mdp, epsilon_greedy(values, settings.epsilon, agent), settings.sticky_prob);
      ++out.steps;
    }
    returns.push_back(env.episode_return);
  }
  const double n = static_cast<double>(returns.size());
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= n;
  double ss = 0.0;
  for (double r : returns) ss += (r - mean) * (r - mean);
  out.record.mean_return = mean;
  out.record.std_return = returns.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  out.record.episodes = returns.size();
  return out;
}

double resolve_discount(const TrainConfig& config, double fallback) { return config.discount.value_or(fallback); }

// Online network, target, optimizer and loss dispatch.
class Learner {
 public:
  Learner(const TrainConfig& config, const NetworkSpec& spec, double discount, Rng& init_rng, Rng& mixture_rng)
      : config_(config),
        q_(QEnsemble::initialized(spec, init_rng, config.tabular_init_scale)),
        target_(sync_target(q_, 0)),
        opt_(config.optimizer, static_cast<std::size_t>(q_.parameters().size())),
        mixture_rng_(mixture_rng) {
    td_.discount = discount;
    td_.threshold = config.agent == AgentKind::qr_dqn ? config.kappa : config.huber_lambda;
  }

  const QEnsemble& network() const { return q_; }
  std::uint64_t updates() const { return updates_; }

  LossReport update(MiniBatch batch, const RunHooks& hooks) {
    if (config_.reward_clip)
      for (double& r : batch.rewards) r = std::clamp(r, -1.0, 1.0);
    LossReport report = loss(batch);
    apply_update(opt_, q_, report.gradient);
    ++updates_;
    if (hooks.on_update) hooks.on_update(updates_, report);
    if (updates_ % config_.target_sync_period == 0) {
      sync_target(q_, target_, updates_);
      if (hooks.on_sync) hooks.on_sync(updates_);
    }
    return report;
  }

 private:
  LossReport loss(const MiniBatch& batch) {
    switch (config_.agent) {
      case AgentKind::dqn: return dqn_loss(q_, target_, batch, td_);
      case AgentKind::ensemble_dqn: return ensemble_dqn_loss(q_, target_, batch, td_);
      case AgentKind::averaged_ensemble_dqn: return averaged_ensemble_dqn_loss(q_, target_, batch, td_);
      case AgentKind::qr_dqn: return qr_dqn_loss(q_, target_, batch, td_);
      case AgentKind::rem:
        if (config_.per_sample_alpha) {
          std::vector<SimplexWeights> alphas;
          alphas.reserve(batch.size());
          for (std::size_t i = 0; i < batch.size(); ++i) alphas.push_back(sample_simplex(q_.num_heads(), mixture_rng_));
          return rem_loss(q_, target_, batch, alphas, td_);
        }
        return rem_loss(q_, target_, batch, sample_simplex(q_.num_heads(), mixture_rng_), td_);
    }
    throw InvalidArgument("unknown agent");
  }

  const TrainConfig& config_;
  QEnsemble q_;
  TargetSnapshot target_;
  OptimizerState opt_;
  Rng& mixture_rng_;
  TdSettings td_;
  std::uint64_t updates_ = 0;
};

EvalSettings eval_settings(const TrainConfig& config) {
  return EvalSettings{config.eval_epsilon, config.eval_episodes, config.sticky_prob, config.episode_cap};
}

// Shared end-of-iteration bookkeeping.
class CurveTracker {
 public:
  CurveTracker(RunResult& result, const TrainConfig& config, const MdpSpec& mdp, const ObservationCodec& codec)
      : result_(result), config_(config), mdp_(mdp), codec_(codec), eval_rng_(make_rng(config.seed, Stream::evaluation)) {
    result_.best_score = -std::numeric_limits<double>::infinity();
  }

  void note_td(double mean_abs_td) {
    td_sum_ += mean_abs_td;
    ++td_count_;
  }

  void evaluate(std::size_t iteration, const Learner& learner, std::uint64_t env_steps) {
    Evaluation e = run_evaluation(&learner.network(), mdp_, &codec_, eval_settings(config_), eval_rng_);
    e.record.iteration = iteration;
    e.record.env_steps = env_steps;
    e.record.gradient_updates = learner.updates();
    e.record.mean_abs_td_error = td_count_ ? td_sum_ / static_cast<double>(td_count_) : 0.0;
    td_sum_ = 0.0;
    td_count_ = 0;
    result_.evaluation_env_steps += e.steps;
    result_.curve.push_back(e.record);
    if (e.record.mean_return > result_.best_score) {
      result_.best_score = e.record.mean_return;
      result_.best_iteration = iteration;
      result_.best_network = learner.network();
    }
  }

  void diverged(std::size_t iteration, const Learner& learner, std::uint64_t env_steps, const std::string& why) {
    EvalRecord r;
    r.iteration = iteration;
    r.env_steps = env_steps;
    r.gradient_updates = learner.updates();
    r.mean_return = std::numeric_limits<double>::quiet_NaN();
    r.std_return = std::numeric_limits<double>::quiet_NaN();
    r.mean_abs_td_error = td_count_ ? td_sum_ / static_cast<double>(td_count_) : 0.0;
    r.diverged = true;
    result_.curve.push_back(r);
    result_.diverged = true;
    result_.divergence_reason = why;
  }

 private:
  RunResult& result_;
  const TrainConfig& config_;
  const MdpSpec& mdp_;
  const ObservationCodec& codec_;
  Rng eval_rng_;
  double td_sum_ = 0.0;
  std::size_t td_count_ = 0;
};

enum class Behavior { head_average, episode_mixture };

RunResult run_online(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks, Behavior behavior,
                     bool log) {
  config.validate();
  mdp.validate();
  if (config.batch_size == 0) throw InvalidArgument("online training needs a positive batch size");
  const ObservationCodec codec(config.observation, mdp);
  const NetworkSpec spec = network_spec(config, codec, mdp.num_actions);

  Rng env_rng = make_rng(config.seed, Stream::environment);
  Rng agent_rng = make_rng(config.seed, Stream::agent);
  Rng shuffle_rng = make_rng(config.seed, Stream::shuffle);
  Rng mixture_rng = make_rng(config.seed, Stream::mixture);
  Rng init_rng = make_rng(config.seed, Stream::init);

  RunResult result;
  Learner learner(config, spec, resolve_discount(config, mdp.discount), init_rng, mixture_rng);
  CurveTracker tracker(result, config, mdp, codec);
  ReplayBuffer buffer(config.replay_capacity);

  std::optional<DatasetWriter> writer;
  if (log) {
    DatasetHeader header;
    header.encoding = config.observation;
    header.obs_dim = static_cast<std::uint32_t>(codec.dim());
    header.num_actions = static_cast<std::uint32_t>(mdp.num_actions);
    header.discount = resolve_discount(config, mdp.discount);
    header.seed = config.seed;
    header.descriptor = make_descriptor(mdp.descriptor, mdp.num_states, to_string(config.agent));
    writer.emplace(std::move(header));
  }

  EnvState env(env_rng(), config.episode_cap);
  std::size_t state = reset(env, mdp).state;
  std::uint64_t episode_id = 0, step_in_episode = 0, env_steps = 0;
  std::optional<SimplexWeights> mixture;
  if (behavior == Behavior::episode_mixture) mixture = sample_simplex(spec.heads, mixture_rng);

  std::size_t iteration = 0;
  try {
    for (; iteration < config.iterations; ++iteration) {
      for (std::size_t t = 0; t < config.env_steps_per_iteration; ++t) {
        const double eps = linear_epsilon(config.epsilon_start, config.epsilon_end, config.epsilon_decay_steps, env_steps);
        const auto obs = codec.encode(state);
        const Eigen::MatrixXd heads = learner.network().forward(obs);
        const Eigen::VectorXd values = mixture ? mixture->mix(heads) : q_average(heads);
        const std::size_t requested = epsilon_greedy(values, eps, agent_rng);
        const StepOutcome out = step(env, mdp, requested, config.sticky_prob);

        Transition tr;
        tr.observation.assign(obs.begin(), obs.end());
        tr.action = static_cast<std::uint32_t>(out.executed_action);
        tr.reward = static_cast<float>(out.reward);
        const auto next = codec.encode(out.state);
        tr.next_observation.assign(next.begin(), next.end());
        tr.end = !out.terminal ? EpisodeEnd::none : out.truncated ? EpisodeEnd::truncated : EpisodeEnd::terminal;
        tr.episode_id = episode_id;
        tr.step_in_episode = step_in_episode;
        if (writer) writer->append(tr);
        buffer.append(std::move(tr));

        if (hooks.on_step) {
          BehaviorStep b;
          b.env_step = env_steps;
          b.episode = episode_id;
          b.requested_action = requested;
          b.executed_action = out.executed_action;
          b.epsilon = eps;
          b.mixture = mixture ? &*mixture : nullptr;
          hooks.on_step(b);
        }
        ++env_steps;
        result.training_env_steps = env_steps;

        if (out.terminal) {
          ++episode_id;
          step_in_episode = 0;
          state = reset(env, mdp).state;
          if (mixture) mixture = sample_simplex(spec.heads, mixture_rng);
        } else {
          ++step_in_episode;
          state = out.state;
        }

        if (buffer.size() >= std::max<std::size_t>(config.min_replay, 1) && env_steps % config.update_period == 0) {
          const LossReport r = learner.update(sample_batch(buffer, config.batch_size, shuffle_rng), hooks);
          tracker.note_td(r.mean_abs_td);
        }
      }
      tracker.evaluate(iteration, learner, env_steps);
    }
  } catch (const DivergenceError& e) {
    tracker.diverged(iteration, learner, env_steps, e.what());
  }

  result.gradient_updates = learner.updates();
  result.final_network = learner.network();
  if (!result.best_network) {
    result.best_network = learner.network();
    result.best_score = std::numeric_limits<double>::quiet_NaN();
  }
  if (writer) result.dataset = std::move(*writer).finalize();
  return result;
}

}  // namespace

EvalRecord evaluate_policy(const QEnsemble& q, const MdpSpec& mdp, const ObservationCodec& codec,
                           const EvalSettings& settings, Rng& rng) {
  if (q.num_actions() != mdp.num_actions) throw InvalidArgument("network and MDP disagree on the action count");
  return run_evaluation(&q, mdp, &codec, settings, rng).record;
}

EvalRecord evaluate_random_policy(const MdpSpec& mdp, const EvalSettings& settings, Rng& rng) {
  EvalSettings s = settings;
  s.epsilon = 1.0;
  return run_evaluation(nullptr, mdp, nullptr, s, rng).record;
}

RunResult run_online_collection(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks) {
  if (config.agent != AgentKind::dqn) throw InvalidArgument("data collection uses the dqn agent");
  return run_online(config, mdp, hooks, Behavior::head_average, true);
}

RunResult run_online_rem(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks) {
  if (config.agent != AgentKind::rem) throw InvalidArgument("online REM requires the rem agent");
  return run_online(config, mdp, hooks, Behavior::episode_mixture, false);
}

RunResult run_online_training(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks) {
  return run_online(config, mdp, hooks, Behavior::head_average, false);
}

RunResult run_offline_training(const TrainConfig& config, const LoggedDataset& dataset, const MdpSpec& mdp,
                               const RunHooks& hooks) {
  config.validate();
  mdp.validate();
  const DatasetHeader& header = dataset.header();
  if (dataset.empty()) throw InvalidArgument("offline training needs a non-empty dataset");
  if (header.encoding != config.observation)
    throw EncodingMismatch("dataset encoding '" + std::string(to_string(header.encoding)) +
                           "' does not match the configured '" + std::string(to_string(config.observation)) + "'");
  if (header.num_actions != mdp.num_actions) throw EncodingMismatch("dataset action count does not match the MDP");
  const ObservationCodec codec = dataset.codec();
  if (codec.num_states() != mdp.num_states || codec.dim() != header.obs_dim)
    throw EncodingMismatch("dataset state space does not match the MDP");
  const NetworkSpec spec = network_spec(config, codec, mdp.num_actions);

  Rng shuffle_rng = make_rng(config.seed, Stream::shuffle);
  Rng mixture_rng = make_rng(config.seed, Stream::mixture);
  Rng init_rng = make_rng(config.seed, Stream::init);

  RunResult result;
  Learner learner(config, spec, resolve_discount(config, header.discount), init_rng, mixture_rng);
  CurveTracker tracker(result, config, mdp, codec);
  std::optional<MiniBatch> whole;
  if (config.batch_size == 0) whole = full_batch(dataset);

  const std::size_t per_iteration = config.offline_updates_per_iteration();
  std::size_t iteration = 0;
  try {
    for (; iteration < config.iterations; ++iteration) {
      for (std::size_t u = 0; u < per_iteration; ++u) {
        const LossReport r =
            learner.update(whole ? *whole : sample_batch(dataset, config.batch_size, shuffle_rng), hooks);
        tracker.note_td(r.mean_abs_td);
      }
      tracker.evaluate(iteration, learner, 0);
    }
  } catch (const DivergenceError& e) {
    tracker.diverged(iteration, learner, 0, e.what());
  }

  result.gradient_updates = learner.updates();
  result.final_network = learner.network();
  if (!result.best_network) {
    result.best_network = learner.network();
    result.best_score = std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

}  // namespace offrl
