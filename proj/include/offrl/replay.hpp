#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "offrl/env.hpp"
#include "offrl/rng.hpp"

namespace offrl {

// Stored as the record's terminal byte.
enum class EpisodeEnd : std::uint8_t {
  none = 0,
  terminal = 1,   // next state is absorbing; no bootstrap
  truncated = 2,  // step cap reached; bootstrap retained
};

struct Transition {
  std::vector<float> observation;
  std::uint32_t action = 0;
  float reward = 0.0f;
  std::vector<float> next_observation;
  EpisodeEnd end = EpisodeEnd::none;
  std::uint64_t episode_id = 0;
  std::uint64_t step_in_episode = 0;

  bool ends_episode() const { return end != EpisodeEnd::none; }
  bool bootstraps() const { return end != EpisodeEnd::terminal; }
  friend bool operator==(const Transition&, const Transition&) = default;
};

// Throws EpisodeError when `next` cannot follow `prev` (step gap, id reused
// across an episode boundary, or a new episode not starting at step 0).
void check_continuity(const Transition* prev, const Transition& next);

struct MiniBatch {
  std::size_t obs_dim = 0;
  std::vector<float> observations;
  std::vector<std::uint32_t> actions;
  std::vector<double> rewards;
  std::vector<float> next_observations;
  std::vector<EpisodeEnd> ends;

  std::size_t size() const { return actions.size(); }
  std::span<const float> observation(std::size_t i) const {
    return {observations.data() + i * obs_dim, obs_dim};
  }
  std::span<const float> next_observation(std::size_t i) const {
    return {next_observations.data() + i * obs_dim, obs_dim};
  }
  bool bootstraps(std::size_t i) const { return ends[i] != EpisodeEnd::terminal; }

  void push_back(const Transition& t);
  // Throws InvalidArgument when arrays disagree, an action is out of range or
  // a reward is not finite.
  void validate(std::size_t num_actions) const;
};

// FIFO ring of the most recent transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void append(Transition t);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return size_ == 0; }
  // 0 is the oldest retained transition.
  const Transition& operator[](std::size_t i) const;

 private:
  std::size_t capacity_;
  std::vector<Transition> ring_;
  std::size_t cursor_ = 0;
  std::size_t size_ = 0;
  bool has_last_ = false;
  Transition last_;
};

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDescriptorBytes = 64;

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  ObservationEncoding encoding = ObservationEncoding::index;
  std::uint32_t obs_dim = 1;
  std::uint32_t num_actions = 1;
  double discount = 0.99;
  std::uint64_t seed = 0;
  // Semicolon separated key=value pairs, at most 64 bytes, e.g.
  // "env=gridworld;size=6;seed=1;states=37;agent=dqn".
  std::string descriptor;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

std::string make_descriptor(const EnvDescriptor& env, std::size_t num_states, std::string_view agent);
// Empty string when the key is absent.
std::string descriptor_field(std::string_view descriptor, std::string_view key);
EnvDescriptor descriptor_env(std::string_view descriptor);

struct EpisodeRange {
  std::uint64_t episode_id = 0;
  std::size_t first = 0;
  std::size_t count = 0;

  friend bool operator==(const EpisodeRange&, const EpisodeRange&) = default;
};

// Finalized, immutable transition log.
class LoggedDataset {
 public:
  LoggedDataset() = default;

  const DatasetHeader& header() const { return header_; }
  std::span<const Transition> transitions() const { return transitions_; }
  const Transition& operator[](std::size_t i) const { return transitions_[i]; }
  std::size_t size() const { return transitions_.size(); }
  bool empty() const { return transitions_.empty(); }
  std::size_t transition_count() const { return transitions_.size(); }
  std::size_t episode_count() const { return episodes_.size(); }
  std::span<const EpisodeRange> episodes() const { return episodes_; }
  // True when the last episode has no end flag (collection stopped mid-episode).
  bool has_partial_episode() const;
  std::size_t complete_episode_count() const { return episodes_.size() - (has_partial_episode() ? 1 : 0); }
  std::span<const Transition> episode(std::size_t index) const;

  ObservationCodec codec() const;
  std::size_t num_states() const;

  friend bool operator==(const LoggedDataset&, const LoggedDataset&) = default;

 private:
  friend class DatasetWriter;
  DatasetHeader header_;
  std::vector<Transition> transitions_;
  std::vector<EpisodeRange> episodes_;
};

// Append-only builder for a LoggedDataset. Never evicts.
class DatasetWriter {
 public:
  explicit DatasetWriter(DatasetHeader header);

  void append(Transition t);
  std::size_t size() const { return data_.transitions_.size(); }
  LoggedDataset finalize() &&;

 private:
  LoggedDataset data_;
};

std::vector<std::uint8_t> encode_dataset(const LoggedDataset& dataset);
LoggedDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const LoggedDataset& dataset, const std::filesystem::path& path);
LoggedDataset load_dataset(const std::filesystem::path& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

// Whole complete episodes in random order until the count first reaches
// fraction * original; output keeps chronological order.
LoggedDataset subsample_trajectories(const LoggedDataset& dataset, double fraction, Rng& rng);

// First k transitions extended to the end of the episode holding the k-th.
LoggedDataset take_prefix(const LoggedDataset& dataset, std::size_t first_k);

// Uniform with replacement.
MiniBatch sample_batch(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng);
MiniBatch sample_batch(const LoggedDataset& dataset, std::size_t batch_size, Rng& rng);
MiniBatch full_batch(const LoggedDataset& dataset);

// Mean undiscounted return of complete episodes; NaN when there are none.
double average_episode_return(const LoggedDataset& dataset);
std::vector<double> episode_returns(const LoggedDataset& dataset);

}  // namespace offrl
