#include "offrl/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "offrl/errors.hpp"

namespace offrl {

namespace {

std::string key_error(std::string_view key, std::string_view value, std::string_view what) {
  return "config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " + std::string(what);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text, std::string_view what) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty())
    throw InvalidArgument(key_error(key, text, what));
  return value;
}

double parse_double(std::string_view key, std::string_view text) { return parse_number<double>(key, text, "a number"); }
std::size_t parse_size(std::string_view key, std::string_view text) {
  return parse_number<std::size_t>(key, text, "a nonnegative integer");
}
std::uint64_t parse_u64(std::string_view key, std::string_view text) {
  return parse_number<std::uint64_t>(key, text, "a nonnegative integer");
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw InvalidArgument(key_error(key, text, "a boolean"));
}

std::string show(double v) {
  // Shortest text that parses back to the same double.
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string show(bool v) { return v ? "true" : "false"; }

std::vector<std::size_t> parse_list(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size() && !text.empty()) {
    const std::size_t end = std::min(text.find(',', pos), text.size());
    out.push_back(parse_size(key, text.substr(pos, end - pos)));
    pos = end + 1;
  }
  return out;
}

std::string show_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  const char* section;
  const char* name;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define OFRL_DOUBLE(sec, nm, member)                                                                \
  Field {                                                                                           \
    sec, nm, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_double(k, v); }, \
        [](const RunConfig& c) { return show(c.member); }                                           \
  }
#define OFRL_SIZE(sec, nm, member)                                                                \
  Field {                                                                                         \
    sec, nm, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_size(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                               \
  }
#define OFRL_BOOL(sec, nm, member)                                                                \
  Field {                                                                                         \
    sec, nm, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_bool(k, v); }, \
        [](const RunConfig& c) { return show(c.member); }                                         \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"env", "kind", [](RunConfig& c, std::string_view, std::string_view v) { c.env_kind = parse_env_kind(v); },
       [](const RunConfig& c) { return std::string(to_string(c.env_kind)); }},
      OFRL_SIZE("env", "size", env_size),
      {"env", "seed", [](RunConfig& c, std::string_view k, std::string_view v) { c.env_seed = parse_u64(k, v); },
       [](const RunConfig& c) { return std::to_string(c.env_seed); }},
      {"env", "actions",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         if (v.empty())
           c.env.num_actions.reset();
         else
           c.env.num_actions = parse_size(k, v);
       },
       [](const RunConfig& c) { return c.env.num_actions ? std::to_string(*c.env.num_actions) : std::string(); }},
      OFRL_DOUBLE("env", "discount", env.discount),
      OFRL_DOUBLE("env", "reward_noise", env.reward_noise),
      OFRL_DOUBLE("env", "noise_clip", env.noise_clip),
      OFRL_DOUBLE("env", "slip", env.slip),
      OFRL_DOUBLE("env", "sticky_prob", train.sticky_prob),
      OFRL_SIZE("env", "episode_cap", train.episode_cap),

      {"agent", "kind", [](RunConfig& c, std::string_view, std::string_view v) { c.train.agent = parse_agent_kind(v); },
       [](const RunConfig& c) { return std::string(to_string(c.train.agent)); }},
      {"agent", "architecture",
       [](RunConfig& c, std::string_view, std::string_view v) { c.train.architecture = parse_architecture(v); },
       [](const RunConfig& c) { return std::string(to_string(c.train.architecture)); }},
      {"agent", "topology", [](RunConfig& c, std::string_view, std::string_view v) { c.train.topology = parse_topology(v); },
       [](const RunConfig& c) { return std::string(to_string(c.train.topology)); }},
      OFRL_SIZE("agent", "heads", train.heads),
      {"agent", "hidden", [](RunConfig& c, std::string_view k, std::string_view v) { c.train.hidden = parse_list(k, v); },
       [](const RunConfig& c) { return show_list(c.train.hidden); }},
      {"agent", "activation",
       [](RunConfig& c, std::string_view, std::string_view v) { c.train.activation = parse_activation(v); },
       [](const RunConfig& c) { return std::string(to_string(c.train.activation)); }},
      OFRL_DOUBLE("agent", "tabular_init_scale", train.tabular_init_scale),
      {"agent", "observation",
       [](RunConfig& c, std::string_view, std::string_view v) { c.train.observation = parse_encoding(v); },
       [](const RunConfig& c) { return std::string(to_string(c.train.observation)); }},
      OFRL_DOUBLE("agent", "huber_lambda", train.huber_lambda),
      OFRL_DOUBLE("agent", "kappa", train.kappa),
      OFRL_BOOL("agent", "per_sample_alpha", train.per_sample_alpha),

      OFRL_DOUBLE("optimizer", "learning_rate", train.optimizer.learning_rate),
      OFRL_DOUBLE("optimizer", "beta1", train.optimizer.beta1),
      OFRL_DOUBLE("optimizer", "beta2", train.optimizer.beta2),
      OFRL_DOUBLE("optimizer", "epsilon", train.optimizer.epsilon),

      {"train", "discount",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         if (v.empty())
           c.train.discount.reset();
         else
           c.train.discount = parse_double(k, v);
       },
       [](const RunConfig& c) { return c.train.discount ? show(*c.train.discount) : std::string(); }},
      OFRL_SIZE("train", "batch_size", train.batch_size),
      OFRL_SIZE("train", "target_sync_period", train.target_sync_period),
      OFRL_SIZE("train", "iterations", train.iterations),
      OFRL_SIZE("train", "env_steps_per_iteration", train.env_steps_per_iteration),
      OFRL_SIZE("train", "gradient_updates_per_iteration", train.gradient_updates_per_iteration),
      OFRL_DOUBLE("train", "offline_multiplier", train.offline_multiplier),
      OFRL_SIZE("train", "update_period", train.update_period),
      OFRL_SIZE("train", "min_replay", train.min_replay),
      OFRL_SIZE("train", "replay_capacity", train.replay_capacity),
      OFRL_DOUBLE("train", "epsilon_start", train.epsilon_start),
      OFRL_DOUBLE("train", "epsilon_end", train.epsilon_end),
      OFRL_SIZE("train", "epsilon_decay_steps", train.epsilon_decay_steps),
      OFRL_DOUBLE("train", "eval_epsilon", train.eval_epsilon),
      OFRL_SIZE("train", "eval_episodes", train.eval_episodes),
      OFRL_BOOL("train", "reward_clip", train.reward_clip),
  };
  return table;
}

#undef OFRL_DOUBLE
#undef OFRL_SIZE
#undef OFRL_BOOL

const Field& find_field(std::string_view section, std::string_view name) {
  for (const Field& f : fields())
    if (section == f.section && name == f.name) return f;
  throw InvalidArgument("unknown config key '" + std::string(section) + "." + std::string(name) + "'");
}

}  // namespace

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  const std::size_t dot = key.find('.');
  if (dot == std::string_view::npos) throw InvalidArgument("config key '" + std::string(key) + "' lacks a section");
  find_field(key.substr(0, dot), key.substr(dot + 1)).set(config, key, value);
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos) throw InvalidArgument("override '" + std::string(assignment) + "' is not key=value");
  apply_setting(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

RunConfig parse_config(std::istream& in, RunConfig base) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InvalidArgument(std::string("malformed config: ") + e.message());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw InvalidArgument("config key '" + section + "' must sit inside a section");
    for (const auto& [name, value] : body) apply_setting(base, section + "." + name, value.data());
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read config '" + path.string() + "'");
  return parse_config(in, std::move(base));
}

void write_config(const RunConfig& config, std::ostream& out) {
  std::string_view current;
  for (const Field& f : fields()) {
    if (current != f.section) {
      if (!current.empty()) out << '\n';
      out << '[' << f.section << "]\n";
      current = f.section;
    }
    out << f.name << " = " << f.get(config) << '\n';
  }
}

std::string config_to_string(const RunConfig& config) {
  std::ostringstream s;
  write_config(config, s);
  return s.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(std::string(f.section) + "." + f.name);
  return keys;
}

MdpSpec make_env(const RunConfig& config) { return make_env(config.env_kind, config.env_size, config.env_seed, config.env); }

}  // namespace offrl
