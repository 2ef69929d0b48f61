#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "offrl/env.hpp"
#include "offrl/train.hpp"

namespace offrl {

// Everything a command needs besides its file arguments.
struct RunConfig {
  EnvKind env_kind = EnvKind::gridworld;
  std::size_t env_size = 6;
  std::uint64_t env_seed = 0;
  EnvOptions env;
  TrainConfig train;
};

// INI text with [env], [agent], [optimizer] and [train] sections. Unknown
// sections or keys are rejected with InvalidArgument.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

// `key` is "section.name".
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);
// "section.name=value".
void apply_override(RunConfig& config, std::string_view assignment);

// Every key, in a fixed order; parse_config reads it back to an equal config.
void write_config(const RunConfig& config, std::ostream& out);
std::string config_to_string(const RunConfig& config);

std::vector<std::string> config_keys();

MdpSpec make_env(const RunConfig& config);

}  // namespace offrl
