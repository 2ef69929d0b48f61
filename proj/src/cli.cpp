#include "offrl/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>

#include "offrl/config.hpp"
#include "offrl/errors.hpp"
#include "offrl/metrics.hpp"
#include "offrl/oracle.hpp"
#include "offrl/qfunc.hpp"
#include "offrl/replay.hpp"
#include "offrl/train.hpp"

#ifndef OFRL_VERSION
#define OFRL_VERSION "0.0.0"
#endif

namespace offrl {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path resolve_out(const std::string& p) {
  fs::path path(p);
  if (path.is_relative())
    if (const char* root = std::getenv("OFRL_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

// Relative inputs are looked up under the output root first, so a chain of
// commands can refer to earlier outputs by the same relative names.
fs::path resolve_in(const std::string& p) {
  const fs::path under_root = resolve_out(p);
  return under_root != fs::path(p) && fs::exists(under_root) ? under_root : fs::path(p);
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
}

// Resolved output file path with its parent directory created.
fs::path out_file(const std::string& p) {
  const fs::path path = resolve_out(p);
  if (path.has_parent_path()) make_dir(path.parent_path());
  return path;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) make_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string env_id(const EnvDescriptor& d) {
  return std::string(to_string(d.kind)) + "-" + std::to_string(d.size) + "-s" + std::to_string(d.seed);
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Options shared by the commands that build or load a run configuration.
struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> env;
  std::optional<std::size_t> size;
  std::optional<std::uint64_t> env_seed;

  void add_to(CLI::App* cmd, bool with_env) {
    cmd->add_option("--config", config_path, "INI config file");
    cmd->add_option("--set", overrides, "Override a config key: section.key=value");
    if (with_env) {
      cmd->add_option("--env", env, "chain | gridworld | cliff | random-mdp");
      cmd->add_option("--size", size, "Environment size");
      cmd->add_option("--env-seed", env_seed, "Seed for generated environments");
    }
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig c = config_path.empty() ? base : load_config(config_path, base);
    if (env) c.env_kind = parse_env_kind(*env);
    if (size) c.env_size = *size;
    if (env_seed) c.env_seed = *env_seed;
    for (const auto& o : overrides) apply_override(c, o);
    return c;
  }
};

struct RunOutputs {
  fs::path dir;
  std::string command;
  std::string agent_label;
  std::string environment;
  std::uint64_t seed = 0;
  std::string config_path;
  std::vector<std::string> datasets;
  json results = json::object();
};

void write_run(const RunOutputs& o, const RunConfig& config, const RunResult& result) {
  make_dir(o.dir);
  write_text(o.dir / "config.ini", config_to_string(config));
  std::ostringstream curve;
  const fs::path id = o.dir.filename().empty() ? o.dir.parent_path().filename() : o.dir.filename();
  write_curves_csv({CurveLog{id.string(), o.agent_label, o.seed, result.curve}}, curve);
  write_text(o.dir / "curves.csv", curve.str());
  if (result.final_network) save_checkpoint(*result.final_network, o.dir / "final.ckpt");
  if (result.best_network) save_checkpoint(*result.best_network, o.dir / "best.ckpt");

  json results = o.results;
  results["best_score"] = finite_or_null(result.best_score);
  results["best_iteration"] = result.best_iteration;
  results["final_score"] = result.curve.empty() ? json(nullptr) : finite_or_null(result.curve.back().mean_return);
  results["diverged"] = result.diverged;
  if (result.diverged) results["divergence_reason"] = result.divergence_reason;
  results["gradient_updates"] = result.gradient_updates;
  results["training_env_steps"] = result.training_env_steps;
  results["evaluation_env_steps"] = result.evaluation_env_steps;

  json m;
  m["command"] = o.command;
  m["tool_version"] = OFRL_VERSION;
  m["created"] = utc_timestamp();
  m["config_path"] = o.config_path;
  m["resolved_config"] = config_to_string(config);
  m["output_dir"] = o.dir.string();
  m["seeds"] = json::array({o.seed});
  m["datasets"] = o.datasets;
  m["agent"] = o.agent_label;
  m["environment"] = o.environment;
  m["results"] = results;
  write_text(o.dir / "manifest.json", m.dump(2) + "\n");
}

MdpSpec env_from_dataset(const LoggedDataset& data, RunConfig& config) {
  const EnvDescriptor d = descriptor_env(data.header().descriptor);
  if (d.kind == EnvKind::custom) throw FormatError("dataset does not name a generating environment");
  config.env_kind = d.kind;
  config.env_size = d.size;
  config.env_seed = d.seed;
  if (d.kind == EnvKind::random_mdp) config.env.num_actions = data.header().num_actions;
  MdpSpec mdp = make_env(config);
  if (mdp.num_states != data.num_states() || mdp.num_actions != data.header().num_actions)
    throw EncodingMismatch("dataset does not match the environment it names");
  return mdp;
}

EvalSettings eval_settings_of(const TrainConfig& t) {
  return EvalSettings{t.eval_epsilon, t.eval_episodes, t.sticky_prob, t.episode_cap};
}

int status_of(const RunResult& r) { return r.diverged ? kExitDivergence : kExitOk; }

void print_summary(std::ostream& out, const RunResult& r) {
  out << "iterations=" << r.curve.size() << " gradient_updates=" << r.gradient_updates
      << " best_score=" << format_number(r.best_score)
      << " final_score=" << format_number(r.curve.empty() ? NAN : r.curve.back().mean_return)
      << (r.diverged ? " diverged=1" : "") << '\n';
}

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("run directory '" + dir.string() + "' has no manifest.json");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest in '" + dir.string() + "': " + e.what());
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream s(line);
  std::string cell;
  while (std::getline(s, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& s) {
  if (s == "nan") return NAN;
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError("bad number '" + s + "' in curves.csv");
  return v;
}

CurveLog read_curve(const fs::path& dir) {
  std::ifstream in(dir / "curves.csv");
  if (!in) throw FormatError("run directory '" + dir.string() + "' has no curves.csv");
  CurveLog log;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 9) throw FormatError("curves.csv row has " + std::to_string(c.size()) + " fields");
    try {
      log.run_id = c[0];
      log.agent = c[1];
      log.seed = std::stoull(c[2]);
      EvalRecord r;
      r.iteration = std::stoull(c[3]);
      r.gradient_updates = std::stoull(c[4]);
      r.mean_return = parse_cell(c[5]);
      r.std_return = parse_cell(c[6]);
      r.mean_abs_td_error = parse_cell(c[7]);
      r.diverged = c[8] == "1";
      log.records.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError("malformed curves.csv in '" + dir.string() + "'");
    }
  }
  return log;
}

double json_number(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) return NAN;
  return j[key].get<double>();
}

// Runs without a finite score (divergence before the first evaluation) are skipped.
double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : NAN;
}

}  // namespace

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Offline Q-learning toolkit: collect, train, evaluate and report on small MDPs", "offrl"};
  app.require_subcommand(1);
  app.set_version_flag("--version", OFRL_VERSION);

  std::uint64_t seed = 0;
  std::string out_path;
  std::string agent_name;
  std::string data_path;
  std::string in_path;
  ConfigOptions cfg;

  auto* collect = app.add_subcommand("collect", "Train online DQN and log every transition");
  cfg.add_to(collect, true);
  collect->add_option("--seed", seed, "Master seed")->required();
  collect->add_option("--out", out_path, "Run directory")->required();

  auto* offline = app.add_subcommand("train-offline", "Train an agent from a logged dataset");
  cfg.add_to(offline, false);
  offline->add_option("--agent", agent_name, "dqn | ensemble-dqn | averaged-ensemble-dqn | rem | qr-dqn")->required();
  offline->add_option("--data", data_path, "Dataset file")->required();
  offline->add_option("--seed", seed, "Master seed")->required();
  offline->add_option("--out", out_path, "Run directory")->required();

  auto* online = app.add_subcommand("train-online", "Train an agent online without logging");
  cfg.add_to(online, true);
  online->add_option("--agent", agent_name, "Agent kind")->required();
  online->add_option("--seed", seed, "Master seed")->required();
  online->add_option("--out", out_path, "Run directory")->required();

  std::string checkpoint_path;
  std::optional<std::size_t> episodes;
  std::optional<double> epsilon;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint online");
  cfg.add_to(evaluate, true);
  evaluate->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  evaluate->add_option("--data", data_path, "Take the environment and encoding from this dataset");
  evaluate->add_option("--episodes", episodes, "Evaluation episodes");
  evaluate->add_option("--epsilon", epsilon, "Evaluation epsilon");
  evaluate->add_option("--seed", seed, "Master seed")->required();

  double fraction = 1.0;
  auto* subsample = app.add_subcommand("subsample", "Keep a random fraction of whole episodes");
  subsample->add_option("--in", in_path, "Input dataset")->required();
  subsample->add_option("--fraction", fraction, "Fraction in (0, 1]")->required();
  subsample->add_option("--seed", seed, "Master seed")->required();
  subsample->add_option("--out", out_path, "Output dataset")->required();

  std::optional<std::size_t> transitions;
  std::optional<double> prefix_fraction;
  auto* prefix = app.add_subcommand("prefix", "Keep the earliest transitions, extended to an episode boundary");
  prefix->add_option("--in", in_path, "Input dataset")->required();
  auto* by_count = prefix->add_option("--transitions", transitions, "Number of transitions");
  auto* by_fraction = prefix->add_option("--fraction", prefix_fraction, "Fraction of transitions");
  by_count->excludes(by_fraction);
  prefix->add_option("--out", out_path, "Output dataset")->required();

  double unvisited_reward = 0.0;
  auto* induce = app.add_subcommand("induce-mdp", "Estimate the empirical MDP of a dataset");
  induce->add_option("--data", data_path, "Dataset file")->required();
  induce->add_option("--unvisited-reward", unvisited_reward, "Reward of unvisited state-action self-loops");
  induce->add_option("--out", out_path, "CSV output (stdout when omitted)");

  std::string method = "optimal";
  double tol = 1e-10;
  auto* solve = app.add_subcommand("solve", "Exact Q-values by value iteration or policy evaluation");
  cfg.add_to(solve, true);
  solve->add_option("--data", data_path, "Solve the induced MDP of this dataset");
  solve->add_option("--method", method, "optimal | uniform")->check(CLI::IsMember({"optimal", "uniform"}));
  solve->add_option("--tol", tol, "Bellman residual tolerance");
  solve->add_option("--out", out_path, "Q-table CSV");

  std::vector<std::string> runs;
  auto* report = app.add_subcommand("report", "Aggregate run directories into CSV reports");
  report->add_option("--runs", runs, "Run directories")->required();
  report->add_option("--out", out_path, "Report directory")->required();

  std::vector<const char*> cargs;
  for (const auto& a : argv) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "offrl: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (collect->parsed()) {
      RunConfig c = cfg.resolve();
      c.train.agent = AgentKind::dqn;
      c.train.seed = seed;
      const MdpSpec mdp = make_env(c);
      const RunResult r = run_online_collection(c.train, mdp);
      Rng baseline_rng = make_rng(derive_seed(seed, Stream::evaluation), Stream::evaluation);
      const EvalRecord random = evaluate_random_policy(mdp, eval_settings_of(c.train), baseline_rng);

      RunOutputs o;
      o.dir = resolve_out(out_path);
      o.command = "collect";
      o.agent_label = "online-dqn";
      o.environment = env_id(mdp.descriptor);
      o.seed = seed;
      o.config_path = cfg.config_path;
      o.datasets = {(o.dir / "data.ofrlds").string()};
      o.results["random_score"] = random.mean_return;
      o.results["dataset_transitions"] = r.dataset->transition_count();
      o.results["dataset_episodes"] = r.dataset->episode_count();
      o.results["dataset_average_return"] = finite_or_null(average_episode_return(*r.dataset));
      make_dir(o.dir);
      save_dataset(*r.dataset, o.dir / "data.ofrlds");
      write_run(o, c, r);
      out << "transitions=" << r.dataset->transition_count() << " episodes=" << r.dataset->episode_count()
          << " random_score=" << format_number(random.mean_return) << '\n';
      print_summary(out, r);
      if (r.diverged) err << "offrl: divergence detected: " << r.divergence_reason << '\n';
      return status_of(r);
    }

    if (offline->parsed()) {
      const LoggedDataset data = load_dataset(resolve_in(data_path));
      RunConfig base;
      base.train.observation = data.header().encoding;
      RunConfig c = cfg.resolve(base);
      c.train.agent = parse_agent_kind(agent_name);
      c.train.seed = seed;
      const MdpSpec mdp = env_from_dataset(data, c);
      const RunResult r = run_offline_training(c.train, data, mdp);

      RunOutputs o;
      o.dir = resolve_out(out_path);
      o.command = "train-offline";
      o.agent_label = agent_name;
      o.environment = env_id(mdp.descriptor);
      o.seed = seed;
      o.config_path = cfg.config_path;
      o.datasets = {data_path};
      o.results["dataset_average_return"] = finite_or_null(average_episode_return(data));
      write_run(o, c, r);
      print_summary(out, r);
      if (r.diverged) err << "offrl: divergence detected: " << r.divergence_reason << '\n';
      return status_of(r);
    }

    if (online->parsed()) {
      RunConfig c = cfg.resolve();
      c.train.agent = parse_agent_kind(agent_name);
      c.train.seed = seed;
      const MdpSpec mdp = make_env(c);
      const RunResult r = c.train.agent == AgentKind::rem ? run_online_rem(c.train, mdp)
                                                          : run_online_training(c.train, mdp);
      RunOutputs o;
      o.dir = resolve_out(out_path);
      o.command = "train-online";
      o.agent_label = "online-" + agent_name;
      o.environment = env_id(mdp.descriptor);
      o.seed = seed;
      o.config_path = cfg.config_path;
      write_run(o, c, r);
      print_summary(out, r);
      if (r.diverged) err << "offrl: divergence detected: " << r.divergence_reason << '\n';
      return status_of(r);
    }

    if (evaluate->parsed()) {
      const QEnsemble q = load_checkpoint(resolve_in(checkpoint_path));
      RunConfig c;
      MdpSpec mdp;
      if (!data_path.empty()) {
        const LoggedDataset data = load_dataset(resolve_in(data_path));
        RunConfig base;
        base.train.observation = data.header().encoding;
        c = cfg.resolve(base);
        mdp = env_from_dataset(data, c);
      } else {
        c = cfg.resolve();
        mdp = make_env(c);
      }
      EvalSettings s = eval_settings_of(c.train);
      if (episodes) s.episodes = *episodes;
      if (epsilon) s.epsilon = *epsilon;
      const ObservationCodec codec(c.train.observation, mdp);
      Rng rng = make_rng(seed, Stream::evaluation);
      const EvalRecord e = evaluate_policy(q, mdp, codec, s, rng);
      out << "mean_return=" << format_number(e.mean_return) << " std_return=" << format_number(e.std_return)
          << " episodes=" << e.episodes << '\n';
      return kExitOk;
    }

    if (subsample->parsed()) {
      const LoggedDataset data = load_dataset(resolve_in(in_path));
      Rng rng = make_rng(seed, Stream::shuffle);
      const LoggedDataset sub = subsample_trajectories(data, fraction, rng);
      save_dataset(sub, out_file(out_path));
      out << "transitions=" << sub.transition_count() << " episodes=" << sub.episode_count() << " of "
          << data.transition_count() << '\n';
      return kExitOk;
    }

    if (prefix->parsed()) {
      const LoggedDataset data = load_dataset(resolve_in(in_path));
      std::size_t k = 0;
      if (transitions) {
        k = *transitions;
      } else if (prefix_fraction) {
        if (!(*prefix_fraction > 0.0 && *prefix_fraction <= 1.0)) throw InvalidArgument("fraction must lie in (0, 1]");
        k = static_cast<std::size_t>(std::ceil(*prefix_fraction * static_cast<double>(data.transition_count())));
      } else {
        throw InvalidArgument("prefix needs --transitions or --fraction");
      }
      const LoggedDataset pre = take_prefix(data, k);
      save_dataset(pre, out_file(out_path));
      out << "transitions=" << pre.transition_count() << " episodes=" << pre.episode_count() << '\n';
      return kExitOk;
    }

    if (induce->parsed()) {
      const MdpSpec mdp = induced_mdp(load_dataset(resolve_in(data_path)), UnvisitedRule{unvisited_reward});
      if (out_path.empty()) {
        write_mdp_csv(mdp, out);
      } else {
        std::ostringstream s;
        write_mdp_csv(mdp, s);
        write_text(out_file(out_path), s.str());
        out << "states=" << mdp.num_states << " actions=" << mdp.num_actions << '\n';
      }
      return kExitOk;
    }

    if (solve->parsed()) {
      RunConfig c = cfg.resolve();
      const MdpSpec mdp = data_path.empty() ? make_env(c) : induced_mdp(load_dataset(resolve_in(data_path)));
      QTable q;
      PolicySpec policy;
      if (method == "optimal") {
        q = value_iteration(mdp, tol);
        policy = greedy_policy(q.values);
      } else {
        policy = uniform_policy(mdp);
        q = policy_evaluation(mdp, policy, tol);
      }
      if (!out_path.empty()) write_qtable_csv(q, out_file(out_path));
      out << "initial_value=" << format_number(initial_value(mdp, q, policy))
          << " residual=" << format_number(q.bellman_residual) << " sweeps=" << q.sweeps << '\n';
      return kExitOk;
    }

    if (report->parsed()) {
      struct Baseline {
        std::vector<double> dqn, random;
      };
      std::map<std::string, Baseline> baselines;
      std::map<std::string, std::map<std::string, std::vector<double>>> agent_scores;  // agent -> env -> scores
      std::vector<CurveLog> curves;
      for (const auto& dir : runs) {
        const json m = read_manifest(resolve_in(dir));
        const std::string env = m.value("environment", "");
        const std::string agent = m.value("agent", "");
        const json results = m.value("results", json::object());
        if (m.value("command", "") == "collect") {
          baselines[env].dqn.push_back(json_number(results, "best_score"));
          baselines[env].random.push_back(json_number(results, "random_score"));
        }
        agent_scores[agent][env].push_back(json_number(results, "best_score"));
        curves.push_back(read_curve(resolve_in(dir)));
      }
      std::vector<AggregateReport> reports;
      for (const auto& [agent, by_env] : agent_scores) {
        std::vector<EnvironmentScore> scores;
        for (const auto& [env, values] : by_env) {
          const auto b = baselines.find(env);
          if (b == baselines.end()) throw InvalidArgument("no collect run for environment '" + env + "'");
          EnvironmentScore s;
          s.environment = env;
          s.agent = agent;
          s.runs = values.size();
          s.scores = {mean_of(values), mean_of(b->second.dqn), mean_of(b->second.random)};
          scores.push_back(s);
        }
        AggregateReport r = aggregate(scores);
        for (const auto& w : r.warnings) err << "offrl: warning: " << w << '\n';
        reports.push_back(std::move(r));
      }
      const fs::path dir = resolve_out(out_path);
      emit_report(reports, curves, dir);
      for (const auto& r : reports)
        out << r.environments.front().input.agent << " median_normalized=" << format_number(r.median_normalized)
            << " beats_dqn=" << r.beats_dqn_count << "/" << r.environments.size() << '\n';
      return kExitOk;
    }
  } catch (const DivergenceError& e) {
    err << "offrl: divergence detected: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const InvalidArgument& e) {
    err << "offrl: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "offrl: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

int run_command(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace offrl
