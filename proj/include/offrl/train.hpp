#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "offrl/env.hpp"
#include "offrl/losses.hpp"
#include "offrl/qfunc.hpp"
#include "offrl/replay.hpp"

namespace offrl {

enum class AgentKind { dqn, ensemble_dqn, averaged_ensemble_dqn, rem, qr_dqn };

std::string_view to_string(AgentKind kind);
AgentKind parse_agent_kind(std::string_view name);

// Desk-scale protocol. Iteration budgets: online runs take
// env_steps_per_iteration environment steps per iteration; offline runs take
// offline_multiplier * gradient_updates_per_iteration updates per iteration.
struct TrainConfig {
  AgentKind agent = AgentKind::dqn;
  Architecture architecture = Architecture::tabular;
  Topology topology = Topology::multi_head;
  std::size_t heads = 4;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  double tabular_init_scale = 0.0;
  ObservationEncoding observation = ObservationEncoding::one_hot;

  AdamConfig optimizer;
  std::optional<double> discount;  // defaults to the MDP / dataset discount
  double huber_lambda = 1.0;
  double kappa = 1.0;
  bool reward_clip = false;
  bool per_sample_alpha = false;

  std::size_t batch_size = 32;  // 0 means the whole dataset (offline only)
  std::size_t target_sync_period = 200;
  std::size_t iterations = 100;
  std::size_t env_steps_per_iteration = 4000;
  std::size_t gradient_updates_per_iteration = 1000;
  double offline_multiplier = 1.0;
  std::size_t update_period = 4;
  std::size_t min_replay = 500;
  std::size_t replay_capacity = 100000;

  double epsilon_start = 1.0;
  double epsilon_end = 0.01;
  std::size_t epsilon_decay_steps = 4000;
  double eval_epsilon = 0.001;
  std::size_t eval_episodes = 30;
  double sticky_prob = 0.25;
  std::size_t episode_cap = 200;

  std::uint64_t seed = 0;

  // Throws InvalidArgument for out-of-range rates or zero counts.
  void validate() const;
  // Single head for dqn, `heads` otherwise.
  std::size_t effective_heads() const;
  std::size_t offline_updates_per_iteration() const;
};

NetworkSpec network_spec(const TrainConfig& config, const ObservationCodec& codec, std::size_t num_actions);

struct EvalRecord {
  std::size_t iteration = 0;
  std::uint64_t env_steps = 0;
  std::uint64_t gradient_updates = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  std::size_t episodes = 0;
  double mean_abs_td_error = 0.0;
  bool diverged = false;
};

struct EvalSettings {
  double epsilon = 0.001;
  std::size_t episodes = 30;
  double sticky_prob = 0.25;
  std::size_t episode_cap = 200;
};

// Epsilon-greedy on the head average; sticky actions apply. The rng seeds a
// private environment and action stream, so nothing else is touched.
EvalRecord evaluate_policy(const QEnsemble& q, const MdpSpec& mdp, const ObservationCodec& codec,
                           const EvalSettings& settings, Rng& rng);
EvalRecord evaluate_random_policy(const MdpSpec& mdp, const EvalSettings& settings, Rng& rng);

// Linear interpolation from start to end over decay_steps, then flat.
double linear_epsilon(double start, double end, std::uint64_t decay_steps, std::uint64_t step);

struct BehaviorStep {
  std::uint64_t env_step = 0;
  std::uint64_t episode = 0;
  std::size_t requested_action = 0;
  std::size_t executed_action = 0;
  double epsilon = 0.0;
  const SimplexWeights* mixture = nullptr;  // per-episode mixture (online REM)
};

struct RunHooks {
  std::function<void(std::uint64_t update, const LossReport& report)> on_update;
  std::function<void(const BehaviorStep& step)> on_step;
  std::function<void(std::uint64_t update)> on_sync;
};

struct RunResult {
  std::vector<EvalRecord> curve;
  std::optional<QEnsemble> final_network;
  std::optional<QEnsemble> best_network;
  double best_score = 0.0;
  std::size_t best_iteration = 0;
  bool diverged = false;
  std::string divergence_reason;
  std::uint64_t gradient_updates = 0;
  std::uint64_t training_env_steps = 0;
  std::uint64_t evaluation_env_steps = 0;
  std::optional<LoggedDataset> dataset;
};

// Online DQN that logs every transition (executed action) in experience
// order. Requires agent dqn.
RunResult run_online_collection(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks = {});

// Online REM: one mixture per episode drives behavior; training uses the REM
// loss with a fresh mixture per mini-batch and a FIFO buffer. Requires rem.
RunResult run_online_rem(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks = {});

// Online training of any agent with head-average behavior and no logging.
RunResult run_online_training(const TrainConfig& config, const MdpSpec& mdp, const RunHooks& hooks = {});

// Trains from the frozen dataset only; `mdp` is used for evaluation, whose
// transitions never reach any buffer.
RunResult run_offline_training(const TrainConfig& config, const LoggedDataset& dataset, const MdpSpec& mdp,
                               const RunHooks& hooks = {});

}  // namespace offrl
