#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "offrl/rng.hpp"

namespace offrl {

enum class Architecture : std::uint8_t { tabular = 0, linear = 1, mlp = 2 };
enum class Topology : std::uint8_t { multi_head = 0, separate = 1 };
enum class Activation : std::uint8_t { relu = 0, tanh = 1 };

std::string_view to_string(Architecture a);
std::string_view to_string(Topology t);
std::string_view to_string(Activation a);
Architecture parse_architecture(std::string_view name);
Topology parse_topology(std::string_view name);
Activation parse_activation(std::string_view name);

inline constexpr std::size_t kMaxHeads = 256;

struct NetworkSpec {
  Architecture architecture = Architecture::tabular;
  Topology topology = Topology::multi_head;
  std::size_t heads = 1;
  // Number of states for tabular; feature dimension otherwise.
  std::size_t input_dim = 1;
  std::size_t num_actions = 1;
  std::vector<std::size_t> hidden;  // mlp only
  Activation activation = Activation::relu;

  void validate() const;
  std::size_t parameter_count() const;
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// K Q-value heads over a flat parameter vector.
//
// Outputs for a batch of B observations are laid out as a (K*A) x B matrix,
// row k*A + a holding head k's value of action a. Tabular networks read an
// observation either as a state index (dimension 1) or a one-hot vector;
// linear and mlp networks read a feature vector of input_dim floats.
//
// In the multi-head topology every head shares the hidden layers and owns
// its final affine map. In the separate topology each head is a complete
// network. Linear and tabular networks have nothing to share, so the two
// topologies coincide for them.
class QEnsemble {
 public:
  // All parameters zero.
  explicit QEnsemble(NetworkSpec spec);
  // He-scaled normal weights and zero biases for mlp/linear, each head drawn
  // independently; tabular entries uniform in [-scale, scale].
  static QEnsemble initialized(NetworkSpec spec, Rng& rng, double tabular_scale = 0.0);

  const NetworkSpec& spec() const { return spec_; }
  std::size_t num_heads() const { return spec_.heads; }
  std::size_t num_actions() const { return spec_.num_actions; }

  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& parameters() { return params_; }

  // K x A.
  Eigen::MatrixXd forward(std::span<const float> observation) const;
  // (K*A) x B for `count` observations stored back to back.
  Eigen::MatrixXd forward_batch(std::span<const float> observations, std::size_t count) const;
  // Gradient of sum(upstream .* forward_batch(observations)) w.r.t. parameters.
  Eigen::VectorXd backward(std::span<const float> observations, std::size_t count,
                           const Eigen::MatrixXd& upstream) const;

  // Parameter slices that only influence head k: its final layer under the
  // multi-head topology, its whole network otherwise.
  std::vector<std::pair<std::size_t, std::size_t>> head_parameter_ranges(std::size_t k) const;

 private:
  struct Layer {
    std::size_t in = 0, out = 0, offset = 0;
  };
  struct Activations;

  void build_layout();
  std::vector<std::size_t> tabular_states(std::span<const float> observations, std::size_t count) const;
  Eigen::MatrixXd features(std::span<const float> observations, std::size_t count) const;
  void run_chain(const std::vector<Layer>& chain, Activations& acts) const;
  void check_finite() const;

  NetworkSpec spec_;
  Eigen::VectorXd params_;
  // Separate topology: heads_ * (hidden + 1) layers, one chain per head.
  // Multi-head: trunk_ then one output layer per head.
  std::vector<Layer> trunk_;
  std::vector<std::vector<Layer>> head_chains_;
};

// Mean over heads: K x A -> A.
Eigen::VectorXd q_average(const Eigen::MatrixXd& values);
// Lowest index among maximal entries.
std::size_t greedy_action(const Eigen::VectorXd& values);

struct TargetSnapshot {
  QEnsemble network;
  std::uint64_t sync_step = 0;
};

TargetSnapshot sync_target(const QEnsemble& online, std::uint64_t update_count);
void sync_target(const QEnsemble& online, TargetSnapshot& target, std::uint64_t update_count);

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 0.01 / 32.0;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;

  OptimizerState() = default;
  OptimizerState(AdamConfig cfg, std::size_t parameter_count);
};

// Bias-corrected adaptive-moment step. Throws DivergenceError, leaving both
// arguments untouched, when the gradient has non-finite entries.
void apply_update(OptimizerState& opt, QEnsemble& q, const Eigen::VectorXd& grad);

// Checkpoint: magic "OFRLQE01", architecture block, u64 length, f64
// parameters, CRC-32 of everything before it. Little-endian.
std::vector<std::uint8_t> encode_checkpoint(const QEnsemble& q);
QEnsemble decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const QEnsemble& q, const std::filesystem::path& path);
QEnsemble load_checkpoint(const std::filesystem::path& path);

}  // namespace offrl
