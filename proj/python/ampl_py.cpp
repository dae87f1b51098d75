#include "ampl/dataset.hpp"
#include "ampl/pointmass.hpp"
#include "ampl/tabular.hpp"
#include "ampl/trainer.hpp"
#include "ampl/verify.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace ampl;

namespace {

py::dict metrics_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["seed"] = m.seed;
  d["mean_return"] = m.mean_return;
  d["std_return"] = m.std_return;
  d["critic_loss"] = m.critic_loss;
  d["disc_loss"] = m.disc_loss;
  d["actor_loss"] = m.actor_loss;
  d["model_holdout_nll"] = m.model_holdout_nll;
  d["miw_mean_raw"] = m.miw_mean_raw;
  d["miw_std_raw"] = m.miw_std_raw;
  d["n_penalized_rollouts"] = m.n_penalized_rollouts;
  return d;
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

RunConfig config_from(const py::object& overrides, const RunConfig& base) {
  if (overrides.is_none()) return base;
  std::vector<std::string> errors;
  RunConfig c = RunConfig::from_json(py_to_json(overrides), base, errors);
  if (!errors.empty()) {
    std::ostringstream msg;
    for (const auto& e : errors) msg << e << "\n";
    throw py::value_error(msg.str());
  }
  return c;
}

// Rows stacked as (n x dim) arrays, the numpy convention.
py::dict dataset_arrays(const OfflineDataset& ds) {
  const auto n = static_cast<Eigen::Index>(ds.size());
  Matrix s(n, ds.state_dim), a(n, ds.action_dim), s2(n, ds.state_dim);
  Vector r(n);
  std::vector<bool> done(ds.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = ds.transitions[static_cast<std::size_t>(i)];
    s.row(i) = t.s.transpose();
    a.row(i) = t.a.transpose();
    s2.row(i) = t.s_next.transpose();
    r[i] = t.r;
    done[static_cast<std::size_t>(i)] = t.done;
  }
  py::dict d;
  d["states"] = s;
  d["actions"] = a;
  d["rewards"] = r;
  d["next_states"] = s2;
  d["dones"] = done;
  return d;
}

}  // namespace

PYBIND11_MODULE(_ampl, m) {
  m.doc() = "Offline model-based RL with marginal importance weights";

  // --- tabular ------------------------------------------------------------
  auto tab = m.def_submodule("tabular", "Finite MDPs and exact oracles");
  py::class_<tabular::TabularMdp>(tab, "TabularMdp")
      .def_readonly("n_states", &tabular::TabularMdp::n_states)
      .def_readonly("n_actions", &tabular::TabularMdp::n_actions)
      .def_readwrite("transition", &tabular::TabularMdp::transition)
      .def_readwrite("reward", &tabular::TabularMdp::reward)
      .def_readwrite("r_max", &tabular::TabularMdp::r_max)
      .def_readwrite("gamma", &tabular::TabularMdp::gamma)
      .def_readwrite("mu0", &tabular::TabularMdp::mu0)
      .def("validate", &tabular::TabularMdp::validate)
      .def("to_json", [](const tabular::TabularMdp& x) { return json_to_py(x.to_json()); })
      .def_static("from_json", [](const py::object& o) { return tabular::TabularMdp::from_json(py_to_json(o)); });
  py::class_<tabular::TabularPolicy>(tab, "TabularPolicy")
      .def(py::init([](const Matrix& probs) {
             tabular::TabularPolicy p{probs};
             p.validate();
             return p;
           }),
           py::arg("probs"))
      .def_readonly("probs", &tabular::TabularPolicy::probs);

  tab.def(
      "random_mdp",
      [](int s, int a, std::uint64_t seed, double gamma) {
        Rng rng(seed);
        return tabular::random_mdp(s, a, rng, gamma);
      },
      py::arg("n_states"), py::arg("n_actions"), py::arg("seed"), py::arg("gamma") = 0.95);
  tab.def(
      "random_policy",
      [](int s, int a, std::uint64_t seed) {
        Rng rng(seed);
        return tabular::random_policy(s, a, rng);
      },
      py::arg("n_states"), py::arg("n_actions"), py::arg("seed"));
  tab.def(
      "perturb_model",
      [](const tabular::TabularMdp& mdp, double eps, std::uint64_t seed) {
        Rng rng(seed);
        return tabular::perturb_model(mdp, eps, rng);
      },
      py::arg("mdp"), py::arg("eps"), py::arg("seed"));
  tab.def("mix_policies", &tabular::mix_policies, py::arg("base"), py::arg("other"), py::arg("eps"));
  tab.def("stationary_distribution", &tabular::stationary_distribution, py::arg("mdp"), py::arg("pi"));
  tab.def("exact_q", &tabular::exact_q, py::arg("mdp"), py::arg("pi"));
  tab.def("expected_return", &tabular::expected_return, py::arg("mdp"), py::arg("pi"));
  tab.def("true_miw", &tabular::true_miw, py::arg("mdp"), py::arg("pi"), py::arg("pi_b"));
  tab.def(
      "apply_weight_operator",
      [](const tabular::TabularMdp& mdp, const tabular::TabularPolicy& pi, const tabular::TabularPolicy& pi_b,
         const Matrix& omega) { return tabular::apply_weight_operator(mdp, pi, pi_b, omega); },
      py::arg("mdp"), py::arg("pi"), py::arg("pi_b"), py::arg("omega"));
  tab.def("contraction_constant", &tabular::contraction_constant, py::arg("mdp"), py::arg("pi"), py::arg("pi_b"));
  tab.def(
      "evaluation_error_bound",
      [](const tabular::TabularMdp& mdp, const tabular::TabularMdp& model, const tabular::TabularPolicy& pi,
         const tabular::TabularPolicy& pi_b) {
        auto b = tabular::evaluation_error_bound(mdp, model, pi, pi_b);
        py::dict d;
        d["lhs"] = b.lhs;
        d["rhs"] = b.rhs;
        d["weighted_kl"] = b.weighted_kl;
        return d;
      },
      py::arg("mdp"), py::arg("model"), py::arg("pi"), py::arg("pi_b"));
  tab.def("fixed_point_identity_residual", &tabular::fixed_point_identity_residual, py::arg("mdp"), py::arg("pi"),
          py::arg("pi_b"), py::arg("omega"), py::arg("q"));
  tab.def("kl_discrete", &tabular::kl_discrete, py::arg("p"), py::arg("q"));
  tab.def("conditional_kl_gap", &tabular::conditional_kl_gap, py::arg("p_star"), py::arg("p_hat"), py::arg("pi_b"),
          py::arg("pi"));

  // --- verification suite -----------------------------------------------------
  m.def(
      "verify",
      [](std::uint64_t seed, int num_mdps, int num_discrete, const std::string& tolerances, bool inject_fault) {
        verify::Options o;
        o.seed = seed;
        o.num_mdps = num_mdps;
        o.num_discrete = num_discrete;
        if (!tolerances.empty()) o.tolerance_overrides = verify::parse_tolerance_overrides(tolerances);
        if (inject_fault) o.prefactor_sign = -1.0;
        verify::Report r;
        {
          py::gil_scoped_release release;
          r = verify::run_suite(o);
        }
        py::list checks;
        for (const auto& c : r.checks) {
          py::dict d;
          d["name"] = c.name;
          d["instances"] = c.instances;
          d["max_violation"] = c.max_violation;
          d["tolerance"] = c.tolerance;
          d["passed"] = c.passed;
          d["violating_instance"] = c.violating_instance ? json_to_py(*c.violating_instance) : py::none();
          checks.append(d);
        }
        py::dict out;
        out["checks"] = checks;
        out["passed"] = r.all_passed();
        out["seconds"] = r.seconds;
        return out;
      },
      py::arg("seed") = 0, py::arg("num_mdps") = 100, py::arg("num_discrete") = 1000, py::arg("tolerances") = "",
      py::arg("inject_fault") = false, "Runs the tabular verification suite.");

  // --- data -----------------------------------------------------------------
  py::class_<OfflineDataset>(m, "Dataset")
      .def_property_readonly("size", &OfflineDataset::size)
      .def("__len__", &OfflineDataset::size)
      .def_readonly("state_dim", &OfflineDataset::state_dim)
      .def_readonly("action_dim", &OfflineDataset::action_dim)
      .def_readonly("quality", &OfflineDataset::quality)
      .def_readonly("seed", &OfflineDataset::seed)
      .def_readonly("rewards_normalized", &OfflineDataset::rewards_normalized)
      .def("episode_returns", &OfflineDataset::episode_returns)
      .def("mean_episode_return", &OfflineDataset::mean_episode_return)
      .def("validate", &OfflineDataset::validate)
      .def("arrays", &dataset_arrays, "Transitions as numpy arrays, one row per transition.")
      .def("save", [](const OfflineDataset& d, const std::filesystem::path& p) { d.save(p); }, py::arg("path"))
      .def_static("load", [](const std::filesystem::path& p) { return OfflineDataset::load(p); }, py::arg("path"));

  m.def(
      "collect_dataset",
      [](const std::string& quality, int episodes, std::uint64_t seed) {
        auto q = pointmass::parse_quality(quality);
        if (!q) throw py::value_error("unknown quality: " + quality);
        return pointmass::collect_dataset(*q, episodes, seed);
      },
      py::arg("quality"), py::arg("episodes"), py::arg("seed"), "Point-mass behaviour data.");

  // --- training ---------------------------------------------------------------
  m.def(
      "desk_config", [](const py::object& overrides) { return json_to_py(config_from(overrides, RunConfig::desk()).to_json()); },
      py::arg("overrides") = py::none(), "Desk-scale run configuration as a dict, with optional overrides applied.");
  m.def(
      "paper_config",
      [](const py::object& overrides) { return json_to_py(config_from(overrides, RunConfig::paper_scale()).to_json()); },
      py::arg("overrides") = py::none());
  m.def(
      "expected_schedule",
      [](const py::object& config) { return json_to_py(expected_schedule(config_from(config, RunConfig::desk())).to_json()); },
      py::arg("config") = py::none());
  m.def(
      "train",
      [](const OfflineDataset& dataset, std::uint64_t seed, const py::object& config,
         const std::optional<std::filesystem::path>& out_dir) {
        RunConfig c = config_from(config, RunConfig::desk());
        if (auto errs = c.validate(); !errs.empty()) throw py::value_error(errs.front());
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_ampl(c, dataset, seed, out_dir.value_or(std::filesystem::path{}));
        }
        py::list metrics;
        for (const auto& e : r.metrics) metrics.append(metrics_dict(e));
        py::dict out;
        out["metrics"] = metrics;
        out["counts"] = json_to_py(r.counts.to_json());
        out["dataset_mean_return"] = r.dataset_mean_return;
        return out;
      },
      py::arg("dataset"), py::arg("seed") = 0, py::arg("config") = py::none(), py::arg("out_dir") = py::none(),
      "Trains one seed. `config` overrides fields of the desk configuration; checkpoints go to `out_dir` if given.");
}
