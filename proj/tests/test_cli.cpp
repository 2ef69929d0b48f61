#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "offrl/cli.hpp"
#include "offrl/config.hpp"
#include "offrl/errors.hpp"
#include "offrl/replay.hpp"

using namespace offrl;
namespace fs = std::filesystem;

namespace {

const char* kConfig = R"([env]
episode_cap = 100

[agent]
architecture = tabular
heads = 2

[optimizer]
learning_rate = 0.003

[train]
iterations = 3
env_steps_per_iteration = 600
gradient_updates_per_iteration = 150
min_replay = 100
target_sync_period = 50
update_period = 1
epsilon_decay_steps = 1200
eval_episodes = 5
)";

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "offrl");
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Scratch directory that doubles as the output root.
struct Workspace {
  fs::path root;
  fs::path config;
  std::string saved_root;

  explicit Workspace(const std::string& name) {
    root = fs::temp_directory_path() / name;
    fs::remove_all(root);
    fs::create_directories(root);
    config = root / "cfg.ini";
    std::ofstream(config) << kConfig;
    if (const char* r = std::getenv("OFRL_OUTPUT_ROOT")) saved_root = r;
    setenv("OFRL_OUTPUT_ROOT", root.c_str(), 1);
  }
  ~Workspace() {
    if (saved_root.empty()) {
      unsetenv("OFRL_OUTPUT_ROOT");
    } else {
      setenv("OFRL_OUTPUT_ROOT", saved_root.c_str(), 1);
    }
    fs::remove_all(root);
  }
};

}  // namespace

TEST_CASE("config files round trip") {
  RunConfig c;
  c.env_kind = EnvKind::random_mdp;
  c.env_size = 5;
  c.env_seed = 7;
  c.env.num_actions = 2;
  c.env.discount = 0.9;
  c.env.slip = 1.0 / 3.0;
  c.train.agent = AgentKind::qr_dqn;
  c.train.architecture = Architecture::mlp;
  c.train.topology = Topology::separate;
  c.train.hidden = {16, 8, 4};
  c.train.activation = Activation::tanh;
  c.train.observation = ObservationEncoding::index;
  c.train.kappa = 0.1;
  c.train.optimizer.learning_rate = 0.000123456789;
  c.train.discount = 0.95;
  c.train.batch_size = 0;
  c.train.reward_clip = true;
  c.train.per_sample_alpha = true;
  const std::string text = config_to_string(c);
  std::istringstream in(text);
  const RunConfig back = parse_config(in);
  CHECK(config_to_string(back) == text);
  CHECK(back.train.optimizer.learning_rate == c.train.optimizer.learning_rate);
  CHECK(back.env.slip == c.env.slip);
  CHECK(back.train.hidden == c.train.hidden);
  CHECK(*back.train.discount == 0.95);
  CHECK(*back.env.num_actions == 2);
  CHECK(back.train.topology == Topology::separate);

  const RunConfig defaults;
  std::istringstream plain(config_to_string(defaults));
  CHECK(config_to_string(parse_config(plain)) == config_to_string(defaults));
  CHECK(config_keys().size() == 10 + 11 + 4 + 16);
}

TEST_CASE("config errors") {
  std::istringstream unknown("[train]\nbogus = 1\n");
  CHECK_THROWS_AS(parse_config(unknown), InvalidArgument);
  std::istringstream bad_number("[train]\nbatch_size = many\n");
  CHECK_THROWS_AS(parse_config(bad_number), InvalidArgument);
  std::istringstream bad_kind("[agent]\nkind = c51\n");
  CHECK_THROWS_AS(parse_config(bad_kind), InvalidArgument);
  RunConfig c;
  CHECK_THROWS_AS(apply_override(c, "train.iterations"), InvalidArgument);
  apply_override(c, "train.iterations=7");
  CHECK(c.train.iterations == 7);
  CHECK_THROWS_AS(load_config("/nonexistent/cfg.ini"), Error);
}

TEST_CASE("pipeline smoke") {
  Workspace w("offrl_cli_pipeline");
  const std::string cfg = w.config.string();

  Outcome o = run({"collect", "--env", "gridworld", "--size", "6", "--config", cfg, "--seed", "1", "--out", "run1/"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  for (const char* f : {"data.ofrlds", "curves.csv", "final.ckpt", "best.ckpt", "config.ini", "manifest.json"})
    CHECK(fs::exists(w.root / "run1" / f));
  const LoggedDataset full = load_dataset(w.root / "run1" / "data.ofrlds");
  CHECK(full.size() == 1800);

  o = run({"subsample", "--in", "run1/data.ofrlds", "--fraction", "0.1", "--seed", "2", "--out", "d10.ofrlds"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const LoggedDataset d10 = load_dataset(w.root / "d10.ofrlds");
  CHECK_FALSE(d10.has_partial_episode());
  CHECK(d10.size() >= 180);

  o = run({"train-offline", "--agent", "rem", "--data", "d10.ofrlds", "--config", cfg, "--seed", "3", "--out", "run2/"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(fs::exists(w.root / "run2" / "best.ckpt"));

  o = run({"train-online", "--agent", "qr-dqn", "--env", "gridworld", "--size", "6", "--config", cfg, "--seed", "4",
           "--out", "run3"});
  REQUIRE_MESSAGE(o.code == 0, o.err);

  o = run({"report", "--runs", "run1", "run2", "run3", "--out", "report/"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const std::string agg = slurp(w.root / "report" / "aggregate.csv");
  CHECK(agg.find("gridworld-6-s0,rem,") != std::string::npos);
  CHECK(agg.find("gridworld-6-s0,online-dqn,") != std::string::npos);
  CHECK(agg.find("gridworld-6-s0,online-qr-dqn,") != std::string::npos);
  CHECK(std::count(agg.begin(), agg.end(), '\n') == 4);
  const std::string curves = slurp(w.root / "report" / "curves.csv");
  CHECK(std::count(curves.begin(), curves.end(), '\n') == 1 + 3 * 3);

  o = run({"prefix", "--in", "run1/data.ofrlds", "--fraction", "0.2", "--out", "p20.ofrlds"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(load_dataset(w.root / "p20.ofrlds").size() >= 360);

  o = run({"evaluate", "--checkpoint", "run2/best.ckpt", "--data", "d10.ofrlds", "--config", cfg, "--seed", "5",
           "--episodes", "4"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(o.out.find("episodes=4") != std::string::npos);

  o = run({"induce-mdp", "--data", "run1/data.ofrlds", "--out", "mdp.csv"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(fs::exists(w.root / "mdp.csv"));

  o = run({"solve", "--env", "chain", "--size", "2", "--set", "env.discount=0.5", "--out", "q.csv"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(o.out.rfind("initial_value=0.5 ", 0) == 0);
  CHECK(slurp(w.root / "q.csv").find("1,0,1\n") != std::string::npos);
  o = run({"solve", "--data", "run1/data.ofrlds", "--method", "uniform"});
  CHECK(o.code == 0);

  // The resolved config reproduces the run.
  o = run({"collect", "--config", (w.root / "run1" / "config.ini").string(), "--seed", "1", "--out", "again/run1"});
  REQUIRE(o.code == 0);
  CHECK(slurp(w.root / "again" / "run1" / "data.ofrlds") == slurp(w.root / "run1" / "data.ofrlds"));
}

TEST_CASE("reruns are byte-identical apart from the manifest") {
  Workspace w("offrl_cli_rerun");
  const std::string cfg = w.config.string();
  for (const char* top : {"a", "b"}) {
    const std::string t = top;
    REQUIRE(run({"collect", "--env", "cliff", "--size", "6", "--config", cfg, "--seed", "9", "--out", t + "/c"}).code == 0);
    REQUIRE(run({"subsample", "--in", t + "/c/data.ofrlds", "--fraction", "0.5", "--seed", "1", "--out", t + "/h.ofrlds"})
                .code == 0);
    REQUIRE(run({"train-offline", "--agent", "averaged-ensemble-dqn", "--data", t + "/h.ofrlds", "--config", cfg,
                 "--seed", "2", "--out", t + "/o"})
                .code == 0);
    REQUIRE(run({"report", "--runs", t + "/c", t + "/o", "--out", t + "/r"}).code == 0);
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(w.root / "a")) {
    if (!entry.is_regular_file() || entry.path().filename() == "manifest.json") continue;
    const fs::path rel = fs::relative(entry.path(), w.root / "a");
    CAPTURE(rel.string());
    CHECK(slurp(entry.path()) == slurp(w.root / "b" / rel));
    ++compared;
  }
  CHECK(compared == 5 + 1 + 4 + 3);
}

TEST_CASE("exit codes") {
  Workspace w("offrl_cli_codes");
  const std::string cfg = w.config.string();
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"bogus"}).code == kExitUsage);
  CHECK(run({"collect", "--seed", "1"}).code == kExitUsage);
  CHECK(run({"collect", "--seed", "1", "--out", "x", "--frobnicate"}).code == kExitUsage);
  CHECK(run({"collect", "--seed", "1", "--out", "x", "--set", "train.nope=1"}).code == kExitUsage);
  CHECK(run({"collect", "--seed", "1", "--out", "x", "--env", "torus"}).code == kExitUsage);
  CHECK(run({"subsample", "--in", "missing.ofrlds", "--fraction", "0.5", "--seed", "1", "--out", "y"}).code ==
        kExitData);
  CHECK(run({"report", "--runs", "nowhere", "--out", "r"}).code == kExitData);

  std::ofstream(w.root / "junk.ofrlds") << "not a dataset";
  const Outcome junk = run({"train-offline", "--agent", "dqn", "--data", "junk.ofrlds", "--seed", "1", "--out", "j"});
  CHECK(junk.code == kExitData);
  CHECK(std::count(junk.err.begin(), junk.err.end(), '\n') == 1);

  const Outcome diverged = run({"collect", "--env", "gridworld", "--size", "4", "--config", cfg, "--seed", "1", "--set",
                                "agent.architecture=linear", "--set", "optimizer.learning_rate=1e308", "--out", "div"});
  CHECK(diverged.code == kExitDivergence);
  CHECK(fs::exists(w.root / "div" / "data.ofrlds"));
  CHECK(run({"--version"}).code == kExitOk);
}

TEST_CASE("absolute outputs ignore the output root") {
  Workspace w("offrl_cli_root");
  const fs::path elsewhere = fs::temp_directory_path() / "offrl_cli_absolute.csv";
  fs::remove(elsewhere);
  REQUIRE(run({"solve", "--env", "chain", "--size", "3", "--out", elsewhere.string()}).code == 0);
  CHECK(fs::exists(elsewhere));
  CHECK_FALSE(fs::exists(w.root / elsewhere.filename()));
  fs::remove(elsewhere);
  REQUIRE(run({"solve", "--env", "chain", "--size", "3", "--out", "nested/q.csv"}).code == 0);
  CHECK(fs::exists(w.root / "nested" / "q.csv"));
}
