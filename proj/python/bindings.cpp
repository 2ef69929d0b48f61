#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "offrl/cli.hpp"
#include "offrl/config.hpp"
#include "offrl/errors.hpp"
#include "offrl/metrics.hpp"
#include "offrl/oracle.hpp"
#include "offrl/replay.hpp"
#include "offrl/train.hpp"

namespace py = pybind11;
using namespace offrl;

namespace {

py::list curve_to_list(const std::vector<EvalRecord>& curve) {
  py::list out;
  for (const EvalRecord& e : curve) {
    py::dict d;
    d["iteration"] = e.iteration;
    d["env_steps"] = e.env_steps;
    d["gradient_updates"] = e.gradient_updates;
    d["mean_return"] = e.mean_return;
    d["std_return"] = e.std_return;
    d["episodes"] = e.episodes;
    d["mean_abs_td_error"] = e.mean_abs_td_error;
    d["diverged"] = e.diverged;
    out.append(d);
  }
  return out;
}

py::dict run_to_dict(const RunResult& r) {
  py::dict d;
  d["curve"] = curve_to_list(r.curve);
  d["diverged"] = r.diverged;
  d["best_score"] = r.best_score;
  d["best_iteration"] = r.best_iteration;
  d["gradient_updates"] = r.gradient_updates;
  if (r.dataset) d["dataset"] = *r.dataset;
  return d;
}

RunConfig config_from(const py::dict& settings) {
  RunConfig c;
  for (auto [k, v] : settings) apply_setting(c, py::str(k).cast<std::string>(), py::str(v).cast<std::string>());
  return c;
}

}  // namespace

PYBIND11_MODULE(_offrl, m) {
  m.doc() = "Offline RL testbed core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base.ptr());
  auto format = py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<EncodingMismatch>(m, "EncodingMismatch", format.ptr());
  py::register_exception<ChecksumMismatch>(m, "ChecksumMismatch", format.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());
  py::register_exception<EpisodeError>(m, "EpisodeError", base.ptr());

  py::class_<MdpSpec>(m, "Mdp")
      .def_readonly("num_states", &MdpSpec::num_states)
      .def_readonly("num_actions", &MdpSpec::num_actions)
      .def_readonly("discount", &MdpSpec::discount)
      .def_readonly("initial_distribution", &MdpSpec::initial_distribution)
      .def("terminals", &MdpSpec::terminals)
      .def_property_readonly("transition",
                             [](const MdpSpec& s) {
                               py::array_t<double> a({s.num_states, s.num_actions, s.num_states});
                               std::copy(s.transition.begin(), s.transition.end(), a.mutable_data());
                               return a;
                             })
      .def_property_readonly("reward", [](const MdpSpec& s) {
        py::array_t<double> a({s.num_states, s.num_actions});
        std::copy(s.reward_mean.begin(), s.reward_mean.end(), a.mutable_data());
        return a;
      });

  m.def(
      "make_env",
      [](const std::string& kind, std::size_t size, std::uint64_t seed, double discount,
         std::optional<std::size_t> num_actions, double slip) {
        EnvOptions o;
        o.discount = discount;
        o.num_actions = num_actions;
        o.slip = slip;
        return make_env(kind, size, seed, o);
      },
      py::arg("kind"), py::arg("size"), py::arg("seed") = 0, py::arg("discount") = 0.99,
      py::arg("num_actions") = py::none(), py::arg("slip") = 0.1);

  py::class_<QTable>(m, "QTable")
      .def_readonly("values", &QTable::values)
      .def_readonly("discount", &QTable::discount)
      .def_readonly("bellman_residual", &QTable::bellman_residual)
      .def_readonly("sweeps", &QTable::sweeps)
      .def("state_values", &QTable::state_values);

  m.def("value_iteration", [](const MdpSpec& mdp, double tol) { return value_iteration(mdp, tol); }, py::arg("mdp"),
        py::arg("tol") = 1e-8);
  m.def(
      "evaluate_uniform",
      [](const MdpSpec& mdp, double tol) { return policy_evaluation(mdp, uniform_policy(mdp), tol); },
      py::arg("mdp"), py::arg("tol") = 1e-8);
  m.def(
      "initial_value",
      [](const MdpSpec& mdp, const QTable& q) { return initial_value(mdp, q, greedy_policy(q.values)); },
      "Value of the greedy policy of q from the initial distribution.");

  py::class_<LoggedDataset>(m, "Dataset")
      .def("__len__", &LoggedDataset::size)
      .def_property_readonly("episode_count", &LoggedDataset::episode_count)
      .def_property_readonly("complete_episode_count", &LoggedDataset::complete_episode_count)
      .def_property_readonly("has_partial_episode", &LoggedDataset::has_partial_episode)
      .def_property_readonly("num_states", &LoggedDataset::num_states)
      .def_property_readonly("num_actions", [](const LoggedDataset& d) { return d.header().num_actions; })
      .def_property_readonly("discount", [](const LoggedDataset& d) { return d.header().discount; })
      .def_property_readonly("descriptor", [](const LoggedDataset& d) { return d.header().descriptor; })
      .def_property_readonly("actions",
                             [](const LoggedDataset& d) {
                               py::array_t<std::uint32_t> a(d.size());
                               for (std::size_t i = 0; i < d.size(); ++i) a.mutable_at(i) = d[i].action;
                               return a;
                             })
      .def_property_readonly("rewards",
                             [](const LoggedDataset& d) {
                               py::array_t<float> a(d.size());
                               for (std::size_t i = 0; i < d.size(); ++i) a.mutable_at(i) = d[i].reward;
                               return a;
                             })
      .def("episode_returns", [](const LoggedDataset& d) { return episode_returns(d); })
      .def("average_return", [](const LoggedDataset& d) { return average_episode_return(d); })
      .def("to_bytes",
           [](const LoggedDataset& d) {
             const auto b = encode_dataset(d);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def_static("from_bytes",
                  [](const py::bytes& b) {
                    const std::string s = b;
                    return decode_dataset({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
                  })
      .def("__eq__", [](const LoggedDataset& a, const LoggedDataset& b) { return a == b; });

  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def(
      "subsample",
      [](const LoggedDataset& d, double fraction, std::uint64_t seed) {
        Rng rng = make_rng(seed, Stream::shuffle);
        return subsample_trajectories(d, fraction, rng);
      },
      py::arg("dataset"), py::arg("fraction"), py::arg("seed"));
  m.def("take_prefix", &take_prefix, py::arg("dataset"), py::arg("first_k"));
  m.def("induced_mdp", [](const LoggedDataset& d) { return induced_mdp(d); }, py::arg("dataset"));

  m.def(
      "collect",
      [](const py::dict& settings, std::uint64_t seed) {
        RunConfig c = config_from(settings);
        c.train.agent = AgentKind::dqn;
        c.train.seed = seed;
        return run_to_dict(run_online_collection(c.train, make_env(c)));
      },
      py::arg("settings") = py::dict(), py::arg("seed") = 0,
      "Online DQN collection; settings map 'section.key' to values.");
  m.def(
      "train_offline",
      [](const std::string& agent, const LoggedDataset& data, const py::dict& settings, std::uint64_t seed) {
        RunConfig c = config_from(settings);
        c.train.agent = parse_agent_kind(agent);
        c.train.seed = seed;
        const EnvDescriptor e = descriptor_env(data.header().descriptor);
        EnvOptions o = c.env;
        o.discount = data.header().discount;
        if (e.kind == EnvKind::random_mdp) o.num_actions = data.header().num_actions;
        return run_to_dict(run_offline_training(c.train, data, make_env(e.kind, e.size, e.seed, o)));
      },
      py::arg("agent"), py::arg("dataset"), py::arg("settings") = py::dict(), py::arg("seed") = 0);

  m.def("config_keys", &config_keys);
  m.def("config_text", [](const py::dict& settings) { return config_to_string(config_from(settings)); },
        py::arg("settings") = py::dict());

  m.def("normalized_score",
        [](double agent, double dqn, double random) { return normalized_score({agent, dqn, random}); },
        py::arg("agent"), py::arg("dqn"), py::arg("random"));
  m.def("improvement_pct", &improvement_pct);
  m.def("median", &median);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "offrl");
        std::ostringstream out, err;
        const int code = run_command(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI command in-process; returns (exit_code, stdout, stderr).");
}
