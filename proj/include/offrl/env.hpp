#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "offrl/rng.hpp"

namespace offrl {

enum class EnvKind { chain, gridworld, cliff, random_mdp, custom };

std::string_view to_string(EnvKind kind);
EnvKind parse_env_kind(std::string_view name);

// Identifies how an MdpSpec was produced; enough to rebuild it and its
// observation codec.
struct EnvDescriptor {
  EnvKind kind = EnvKind::custom;
  std::size_t size = 0;
  std::uint64_t seed = 0;
};

struct EnvOptions {
  // Only random-mdp honours this; the other kinds have fixed action sets.
  std::optional<std::size_t> num_actions;
  double discount = 0.99;
  double reward_noise = 0.0;
  double noise_clip = 1.0;
  // Probability mass moved off the intended direction (gridworld, cliff).
  double slip = 0.1;
};

// Tabular MDP. Dense storage: transition is indexed [s][a][s'], reward tables
// [s][a]. Terminal states are absorbing and carry zero value.
struct MdpSpec {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<double> transition;
  std::vector<double> reward_mean;
  std::vector<double> reward_noise;
  double noise_clip = 1.0;
  double discount = 0.99;
  std::vector<std::uint8_t> terminal;
  std::vector<double> initial_distribution;
  EnvDescriptor descriptor;

  MdpSpec() = default;
  MdpSpec(std::size_t states, std::size_t actions, double gamma);

  double& p(std::size_t s, std::size_t a, std::size_t next) {
    return transition[(s * num_actions + a) * num_states + next];
  }
  double p(std::size_t s, std::size_t a, std::size_t next) const {
    return transition[(s * num_actions + a) * num_states + next];
  }
  std::span<const double> row(std::size_t s, std::size_t a) const {
    return {transition.data() + (s * num_actions + a) * num_states, num_states};
  }
  double& r(std::size_t s, std::size_t a) { return reward_mean[s * num_actions + a]; }
  double r(std::size_t s, std::size_t a) const { return reward_mean[s * num_actions + a]; }
  bool is_terminal(std::size_t s) const { return terminal[s] != 0; }
  std::vector<std::size_t> terminals() const;

  // Throws InvalidArgument when a probability row or the initial
  // distribution is malformed, or discount is outside [0, 1).
  void validate() const;
};

MdpSpec make_env(EnvKind kind, std::size_t size, std::uint64_t seed,
                 const EnvOptions& options = {});
MdpSpec make_env(std::string_view kind, std::size_t size, std::uint64_t seed,
                 const EnvOptions& options = {});

// Legal size range per kind.
std::pair<std::size_t, std::size_t> size_bounds(EnvKind kind);

enum class ObservationEncoding : std::uint8_t { index = 0, one_hot = 1, coords = 2 };

std::string_view to_string(ObservationEncoding encoding);
ObservationEncoding parse_encoding(std::string_view name);

// Maps state indices to float feature vectors and back.
class ObservationCodec {
 public:
  ObservationCodec(ObservationEncoding encoding, const EnvDescriptor& descriptor,
                   std::size_t num_states);
  ObservationCodec(ObservationEncoding encoding, const MdpSpec& mdp)
      : ObservationCodec(encoding, mdp.descriptor, mdp.num_states) {}

  ObservationEncoding encoding() const { return encoding_; }
  std::size_t dim() const { return dim_; }
  std::size_t num_states() const { return num_states_; }

  std::span<const float> encode(std::size_t state) const;
  // Throws EncodingMismatch for vectors no state encodes to.
  std::size_t decode(std::span<const float> observation) const;

 private:
  ObservationEncoding encoding_;
  std::size_t num_states_;
  std::size_t dim_;
  std::vector<float> table_;
  std::map<std::vector<float>, std::size_t> lookup_;
};

struct EnvState {
  std::size_t current_state = 0;
  std::optional<std::size_t> previous_action;
  std::size_t steps_elapsed = 0;
  std::size_t episode_cap = 200;
  Rng rng;
  double episode_return = 0.0;
  bool done = true;

  explicit EnvState(std::uint64_t seed, std::size_t cap = 200) : episode_cap(cap), rng(seed) {}
};

struct StepOutcome {
  std::size_t state = 0;
  double reward = 0.0;
  // Episode over, either by reaching a terminal state or by the step cap.
  bool terminal = false;
  // Over only because of the step cap; the state itself is not absorbing.
  bool truncated = false;
  std::size_t executed_action = 0;
  bool sticky_fired = false;
};

StepOutcome reset(EnvState& env, const MdpSpec& mdp);

// With probability sticky_prob the previously executed action replaces the
// requested one. Throws EpisodeError when the episode is already over.
StepOutcome step(EnvState& env, const MdpSpec& mdp, std::size_t action, double sticky_prob);

// Samples an index from a probability row by inverse CDF.
std::size_t sample_categorical(std::span<const double> probs, Rng& rng);

}  // namespace offrl
