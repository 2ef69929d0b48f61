#include "offrl/env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "offrl/errors.hpp"

namespace offrl {

namespace {

constexpr double kStepCost = -0.01;
constexpr double kRowTolerance = 1e-9;

// Grid moves: up, right, down, left.
constexpr int kDr[4] = {-1, 0, 1, 0};
constexpr int kDc[4] = {0, 1, 0, -1};

std::size_t grid_move(std::size_t rows, std::size_t cols, std::size_t cell, int dir) {
  const int r = static_cast<int>(cell / cols) + kDr[dir];
  const int c = static_cast<int>(cell % cols) + kDc[dir];
  if (r < 0 || c < 0 || r >= static_cast<int>(rows) || c >= static_cast<int>(cols)) return cell;
  return static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c);
}

// Shared layout of gridworld and cliff: rows x cols cells plus one absorbing
// state. Exit cells lead to the absorbing state with their exit reward under
// every action; all other cells move with slip.
MdpSpec make_grid(std::size_t rows, std::size_t cols, std::size_t start,
                  const std::vector<std::pair<std::size_t, double>>& exits,
                  const EnvOptions& options) {
  const std::size_t cells = rows * cols;
  const std::size_t absorbing = cells;
  MdpSpec mdp(cells + 1, 4, options.discount);
  std::vector<double> exit_reward(cells, std::nan(""));
  for (auto [cell, reward] : exits) exit_reward[cell] = reward;

  for (std::size_t s = 0; s < cells; ++s) {
    for (std::size_t a = 0; a < 4; ++a) {
      if (!std::isnan(exit_reward[s])) {
        mdp.p(s, a, absorbing) = 1.0;
        mdp.r(s, a) = exit_reward[s];
        continue;
      }
      for (int d = 0; d < 4; ++d) {
        const double mass = d == static_cast<int>(a) ? 1.0 - options.slip : options.slip / 3.0;
        mdp.p(s, a, grid_move(rows, cols, s, d)) += mass;
      }
      mdp.r(s, a) = kStepCost;
    }
  }
  for (std::size_t a = 0; a < 4; ++a) mdp.p(absorbing, a, absorbing) = 1.0;
  mdp.terminal[absorbing] = 1;
  mdp.initial_distribution[start] = 1.0;
  return mdp;
}

MdpSpec make_chain(std::size_t n, const EnvOptions& options) {
  // States 0..n-1 plus absorbing n. Action 0 advances, action 1 steps back.
  MdpSpec mdp(n + 1, 2, options.discount);
  for (std::size_t s = 0; s < n; ++s) {
    mdp.p(s, 0, s + 1) = 1.0;
    mdp.r(s, 0) = s + 1 == n ? 1.0 : 0.0;
    mdp.p(s, 1, s == 0 ? 0 : s - 1) = 1.0;
  }
  mdp.p(n, 0, n) = 1.0;
  mdp.p(n, 1, n) = 1.0;
  mdp.terminal[n] = 1;
  mdp.initial_distribution[0] = 1.0;
  return mdp;
}

MdpSpec make_random(std::size_t n, std::uint64_t seed, const EnvOptions& options) {
  const std::size_t actions = options.num_actions.value_or(3);
  if (actions == 0 || actions > 64) throw InvalidArgument("random-mdp: num_actions must be in [1, 64]");
  MdpSpec mdp(n, actions, options.discount);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> reward(-1.0, 1.0);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t a = 0; a < actions; ++a) {
      double total = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        // Bounded away from zero so every row has full support.
        mdp.p(s, a, t) = 0.05 + unit(rng);
        total += mdp.p(s, a, t);
      }
      for (std::size_t t = 0; t < n; ++t) mdp.p(s, a, t) /= total;
      mdp.r(s, a) = reward(rng);
    }
  }
  std::fill(mdp.initial_distribution.begin(), mdp.initial_distribution.end(), 1.0 / n);
  return mdp;
}

}  // namespace

std::string_view to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::chain: return "chain";
    case EnvKind::gridworld: return "gridworld";
    case EnvKind::cliff: return "cliff";
    case EnvKind::random_mdp: return "random-mdp";
    case EnvKind::custom: return "custom";
  }
  return "custom";
}

EnvKind parse_env_kind(std::string_view name) {
  if (name == "chain") return EnvKind::chain;
  if (name == "gridworld") return EnvKind::gridworld;
  if (name == "cliff") return EnvKind::cliff;
  if (name == "random-mdp") return EnvKind::random_mdp;
  if (name == "custom") return EnvKind::custom;
  throw InvalidArgument("unknown environment kind '" + std::string(name) + "'");
}

std::pair<std::size_t, std::size_t> size_bounds(EnvKind kind) {
  switch (kind) {
    case EnvKind::chain: return {1, 1000};
    case EnvKind::gridworld: return {2, 32};
    case EnvKind::cliff: return {3, 64};
    case EnvKind::random_mdp: return {1, 64};
    case EnvKind::custom: break;
  }
  throw InvalidArgument("environment kind 'custom' cannot be generated");
}

MdpSpec::MdpSpec(std::size_t states, std::size_t actions, double gamma)
    : num_states(states),
      num_actions(actions),
      transition(states * actions * states, 0.0),
      reward_mean(states * actions, 0.0),
      reward_noise(states * actions, 0.0),
      discount(gamma),
      terminal(states, 0),
      initial_distribution(states, 0.0) {}

std::vector<std::size_t> MdpSpec::terminals() const {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < num_states; ++s)
    if (terminal[s]) out.push_back(s);
  return out;
}

void MdpSpec::validate() const {
  if (num_states == 0 || num_actions == 0) throw InvalidArgument("MDP must have states and actions");
  if (transition.size() != num_states * num_actions * num_states ||
      reward_mean.size() != num_states * num_actions ||
      reward_noise.size() != num_states * num_actions || terminal.size() != num_states ||
      initial_distribution.size() != num_states)
    throw InvalidArgument("MDP table shapes are inconsistent");
  if (!(discount >= 0.0 && discount < 1.0)) throw InvalidArgument("discount must lie in [0, 1)");
  for (std::size_t s = 0; s < num_states; ++s) {
    for (std::size_t a = 0; a < num_actions; ++a) {
      double total = 0.0;
      for (double v : row(s, a)) {
        if (!(v >= 0.0)) throw InvalidArgument("negative transition probability");
        total += v;
      }
      if (std::abs(total - 1.0) > kRowTolerance)
        throw InvalidArgument("transition row (" + std::to_string(s) + "," + std::to_string(a) +
                              ") does not sum to 1");
      if (!std::isfinite(r(s, a)) || !(reward_noise[s * num_actions + a] >= 0.0))
        throw InvalidArgument("reward table entries must be finite with nonnegative noise");
    }
  }
  double init = 0.0;
  for (double v : initial_distribution) {
    if (!(v >= 0.0)) throw InvalidArgument("negative initial probability");
    init += v;
  }
  if (std::abs(init - 1.0) > kRowTolerance) throw InvalidArgument("initial distribution does not sum to 1");
}

MdpSpec make_env(EnvKind kind, std::size_t size, std::uint64_t seed, const EnvOptions& options) {
  const auto [lo, hi] = size_bounds(kind);
  if (size < lo || size > hi)
    throw InvalidArgument(std::string(to_string(kind)) + " size " + std::to_string(size) +
                          " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  if (!(options.slip >= 0.0 && options.slip <= 1.0)) throw InvalidArgument("slip must lie in [0, 1]");
  if (!(options.reward_noise >= 0.0)) throw InvalidArgument("reward noise must be nonnegative");

  MdpSpec mdp;
  switch (kind) {
    case EnvKind::chain:
      mdp = make_chain(size, options);
      break;
    case EnvKind::gridworld: {
      const std::size_t goal = size * size - 1;
      mdp = make_grid(size, size, 0, {{goal, 1.0}}, options);
      break;
    }
    case EnvKind::cliff: {
      // Four rows; start bottom-left, goal bottom-right, cliff between them.
      const std::size_t rows = 4, cols = size;
      std::vector<std::pair<std::size_t, double>> exits{{(rows - 1) * cols + cols - 1, 1.0}};
      for (std::size_t c = 1; c + 1 < cols; ++c) exits.emplace_back((rows - 1) * cols + c, -1.0);
      mdp = make_grid(rows, cols, (rows - 1) * cols, exits, options);
      break;
    }
    case EnvKind::random_mdp:
      mdp = make_random(size, seed, options);
      break;
    case EnvKind::custom:
      break;
  }
  mdp.noise_clip = options.noise_clip;
  for (std::size_t s = 0; s < mdp.num_states; ++s)
    if (!mdp.is_terminal(s))
      for (std::size_t a = 0; a < mdp.num_actions; ++a)
        mdp.reward_noise[s * mdp.num_actions + a] = options.reward_noise;
  mdp.descriptor = {kind, size, seed};
  mdp.validate();
  return mdp;
}

MdpSpec make_env(std::string_view kind, std::size_t size, std::uint64_t seed, const EnvOptions& options) {
  return make_env(parse_env_kind(kind), size, seed, options);
}

std::string_view to_string(ObservationEncoding encoding) {
  switch (encoding) {
    case ObservationEncoding::index: return "index";
    case ObservationEncoding::one_hot: return "one-hot";
    case ObservationEncoding::coords: return "coords";
  }
  return "index";
}

ObservationEncoding parse_encoding(std::string_view name) {
  if (name == "index") return ObservationEncoding::index;
  if (name == "one-hot") return ObservationEncoding::one_hot;
  if (name == "coords") return ObservationEncoding::coords;
  throw InvalidArgument("unknown observation encoding '" + std::string(name) + "'");
}

ObservationCodec::ObservationCodec(ObservationEncoding encoding, const EnvDescriptor& descriptor,
                                   std::size_t num_states)
    : encoding_(encoding), num_states_(num_states) {
  if (num_states == 0) throw InvalidArgument("codec needs at least one state");
  switch (encoding) {
    case ObservationEncoding::index:
      dim_ = 1;
      table_.resize(num_states);
      for (std::size_t s = 0; s < num_states; ++s) table_[s] = static_cast<float>(s);
      break;
    case ObservationEncoding::one_hot:
      dim_ = num_states;
      table_.assign(num_states * num_states, 0.0f);
      for (std::size_t s = 0; s < num_states; ++s) table_[s * num_states + s] = 1.0f;
      break;
    case ObservationEncoding::coords: {
      if (descriptor.kind == EnvKind::chain) {
        const std::size_t n = descriptor.size;
        if (num_states != n + 1) throw InvalidArgument("chain descriptor does not match state count");
        dim_ = 2;
        table_.resize(num_states * 2);
        for (std::size_t s = 0; s < num_states; ++s) {
          table_[2 * s] = static_cast<float>(static_cast<double>(s) / static_cast<double>(n));
          table_[2 * s + 1] = s == n ? 1.0f : 0.0f;
        }
      } else if (descriptor.kind == EnvKind::gridworld || descriptor.kind == EnvKind::cliff) {
        const std::size_t rows = descriptor.kind == EnvKind::gridworld ? descriptor.size : 4;
        const std::size_t cols = descriptor.size;
        if (num_states != rows * cols + 1) throw InvalidArgument("grid descriptor does not match state count");
        dim_ = 3;
        table_.assign(num_states * 3, 0.0f);
        for (std::size_t s = 0; s < rows * cols; ++s) {
          table_[3 * s] = static_cast<float>(static_cast<double>(s / cols) / static_cast<double>(rows - 1));
          table_[3 * s + 1] = static_cast<float>(static_cast<double>(s % cols) / static_cast<double>(cols - 1));
        }
        table_[3 * (rows * cols) + 2] = 1.0f;
      } else {
        throw InvalidArgument("coords encoding is only defined for chain, gridworld and cliff");
      }
      break;
    }
  }
  for (std::size_t s = 0; s < num_states; ++s) {
    auto e = encode(s);
    lookup_.emplace(std::vector<float>(e.begin(), e.end()), s);
  }
}

std::span<const float> ObservationCodec::encode(std::size_t state) const {
  if (state >= num_states_) throw InvalidArgument("state index out of range");
  return {table_.data() + state * dim_, dim_};
}

std::size_t ObservationCodec::decode(std::span<const float> observation) const {
  if (observation.size() != dim_) throw EncodingMismatch("observation dimension does not match codec");
  auto it = lookup_.find(std::vector<float>(observation.begin(), observation.end()));
  if (it == lookup_.end()) throw EncodingMismatch("observation does not encode any state");
  return it->second;
}

std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cumulative += probs[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  // Rounding left u above the accumulated mass.
  return last_positive;
}

StepOutcome reset(EnvState& env, const MdpSpec& mdp) {
  env.current_state = sample_categorical(mdp.initial_distribution, env.rng);
  env.previous_action.reset();
  env.steps_elapsed = 0;
  env.episode_return = 0.0;
  env.done = false;
  StepOutcome out;
  out.state = env.current_state;
  return out;
}

StepOutcome step(EnvState& env, const MdpSpec& mdp, std::size_t action, double sticky_prob) {
  if (env.done) throw EpisodeError("step called on a finished episode; reset first");
  if (action >= mdp.num_actions) throw InvalidArgument("action index out of range");
  if (!(sticky_prob >= 0.0 && sticky_prob <= 1.0)) throw InvalidArgument("sticky probability must lie in [0, 1]");

  StepOutcome out;
  out.executed_action = action;
  if (env.previous_action) {
    if (uniform01(env.rng) < sticky_prob) {
      out.executed_action = *env.previous_action;
      out.sticky_fired = true;
    }
  }
  const std::size_t s = env.current_state;
  const std::size_t a = out.executed_action;
  out.state = sample_categorical(mdp.row(s, a), env.rng);
  out.reward = mdp.r(s, a);
  const double sd = mdp.reward_noise[s * mdp.num_actions + a];
  if (sd > 0.0) {
    const double noise = std::normal_distribution<double>(0.0, sd)(env.rng);
    out.reward += std::clamp(noise, -mdp.noise_clip, mdp.noise_clip);
  }

  env.current_state = out.state;
  env.previous_action = a;
  ++env.steps_elapsed;
  env.episode_return += out.reward;
  if (mdp.is_terminal(out.state)) {
    out.terminal = true;
  } else if (env.steps_elapsed >= env.episode_cap) {
    out.terminal = true;
    out.truncated = true;
  }
  env.done = out.terminal;
  return out;
}

}  // namespace offrl
