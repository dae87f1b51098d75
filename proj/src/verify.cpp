#include "ampl/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ampl::verify {

using nlohmann::json;
using namespace ampl::tabular;

namespace {

constexpr int kPowerIterationSteps = 10000;
constexpr int kTraceSteps = 200;
constexpr int kTablesPerMdp = 5;

json policy_json(const TabularPolicy& p) {
  json rows = json::array();
  for (Eigen::Index s = 0; s < p.probs.rows(); ++s) {
    json row = json::array();
    for (Eigen::Index a = 0; a < p.probs.cols(); ++a) row.push_back(p.probs(s, a));
    rows.push_back(row);
  }
  return rows;
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

json vector_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

/// Iterates the state-action stationary recursion.
Matrix power_iteration(const TabularMdp& mdp, const TabularPolicy& pi, int steps) {
  const int S = mdp.n_states, A = mdp.n_actions;
  Matrix d = Matrix::Zero(S, A);
  Matrix start(S, A);
  for (int s = 0; s < S; ++s) start.row(s) = (1.0 - mdp.gamma) * mdp.mu0[s] * pi.probs.row(s);
  for (int k = 0; k < steps; ++k) {
    Vector next_state = Vector::Zero(S);
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) next_state += d(s, a) * mdp.transition.row(mdp.row(s, a)).transpose();
    Matrix nd = start;
    for (int s = 0; s < S; ++s) nd.row(s) += mdp.gamma * next_state[s] * pi.probs.row(s);
    d = std::move(nd);
  }
  return d;
}

class Check {
 public:
  Check(std::string name, double tolerance) { r_.name = std::move(name), r_.tolerance = tolerance; }

  /// Records one instance; passes iff violation <= tolerance (or < for strict).
  void record(double violation, const std::function<json()>& instance, bool strict = false) {
    ++r_.instances;
    if (r_.instances == 1 || violation > r_.max_violation || std::isnan(violation)) r_.max_violation = violation;
    bool ok = strict ? violation < r_.tolerance : violation <= r_.tolerance;
    if (!ok && r_.passed) {
      r_.passed = false;
      r_.violating_instance = instance();
    }
  }
  CheckResult result() && { return std::move(r_); }

 private:
  CheckResult r_;
};

double tol(const Options& o, const std::string& name) {
  auto it = o.tolerance_overrides.find(name);
  return it != o.tolerance_overrides.end() ? it->second : default_tolerances().at(name);
}

}  // namespace

bool Report::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

const CheckResult* Report::find(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

const std::map<std::string, double>& default_tolerances() {
  static const std::map<std::string, double> t = {
      {"bound", 1e-9},
      {"kl_gap", 1e-12},
      {"kl_joint_remark", 1e-12},
      {"stationary_power_iteration", 1e-8},
      {"stationary_recursion", 1e-10},
      {"return_forms", 1e-9},
      {"bellman_residual", 1e-10},
      {"miw_normalization", 1e-9},
      {"weight_operator_fixed_point", 1e-9},
      {"contraction_below_one", 1.0},
      {"contraction_trace", 1e-10},
      {"fixed_point_identity", 1e-9},
  };
  return t;
}

std::map<std::string, double> parse_tolerance_overrides(const std::string& text) {
  std::map<std::string, double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("tolerance override '" + item + "' is not name=value");
    std::string name = item.substr(0, eq);
    if (!default_tolerances().count(name)) throw std::invalid_argument("unknown check '" + name + "'");
    std::size_t used = 0;
    double v;
    try {
      v = std::stod(item.substr(eq + 1), &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("tolerance for '" + name + "' is not a number");
    }
    if (used != item.size() - eq - 1 || !(v >= 0.0))
      throw std::invalid_argument("tolerance for '" + name + "' must be a nonnegative number");
    out[name] = v;
  }
  return out;
}

json BoundInstance::to_json() const {
  return {{"mdp", mdp.to_json()},
          {"model", model.to_json()},
          {"pi", policy_json(pi)},
          {"pi_b", policy_json(pi_b)},
          {"model_eps", model_eps},
          {"policy_mix", policy_mix}};
}

BoundInstance bound_instance(std::uint64_t seed) {
  static constexpr double kEps[] = {0.01, 0.1, 0.3};
  static constexpr double kMix[] = {0.1, 0.5, 1.0};
  Rng rng(derive_seed(seed, 0xB0));
  BoundInstance b;
  const int S = 2 + static_cast<int>(seed % 15);
  const int A = 2 + static_cast<int>(seed % 3);
  b.model_eps = kEps[seed % 3];
  b.policy_mix = kMix[(seed / 3) % 3];
  b.mdp = random_mdp(S, A, rng);
  b.model = perturb_model(b.mdp, b.model_eps, rng);
  b.pi_b = random_policy(S, A, rng);
  b.pi = mix_policies(b.pi_b, random_policy(S, A, rng), b.policy_mix);
  return b;
}

OnPolicyInstance on_policy_instance(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x0C));
  const int S = 2 + static_cast<int>(seed % 11);
  const int A = 1 + static_cast<int>(seed % 4);
  OnPolicyInstance o;
  o.mdp = random_mdp(S, A, rng);
  o.pi = random_policy(S, A, rng);
  return o;
}

std::vector<Matrix> weight_operator_trace(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b,
                                          const Matrix& omega0, int steps) {
  Matrix d_b = stationary_distribution(mdp, pi_b);
  std::vector<Matrix> trace{omega0};
  for (int k = 0; k < steps; ++k) trace.push_back(apply_weight_operator(mdp, pi, d_b, trace.back()));
  return trace;
}

Report run_suite(const Options& o) {
  if (o.num_mdps < 1) throw std::invalid_argument("num_mdps must be >= 1");
  if (o.num_discrete < 1) throw std::invalid_argument("num_discrete must be >= 1");
  auto t0 = std::chrono::steady_clock::now();
  Report report;
  const int n_mdp_small = std::min(o.num_mdps, 50);

  {
    Check c("bound", tol(o, "bound"));
    for (int i = 0; i < o.num_mdps; ++i) {
      std::uint64_t seed = o.seed + static_cast<std::uint64_t>(i);
      BoundInstance b = bound_instance(seed);
      BoundCheck bc = evaluation_error_bound(b.mdp, b.model, b.pi, b.pi_b, o.prefactor_sign);
      c.record(bc.lhs - bc.rhs, [&] {
        json j = b.to_json();
        j["seed"] = seed;
        j["lhs"] = bc.lhs;
        j["rhs"] = bc.rhs;
        return j;
      });
    }
    report.checks.push_back(std::move(c).result());
  }

  {
    Check gap("kl_gap", tol(o, "kl_gap"));
    Check remark("kl_joint_remark", tol(o, "kl_joint_remark"));
    for (int i = 0; i < o.num_discrete; ++i) {
      std::uint64_t seed = o.seed + static_cast<std::uint64_t>(i);
      Rng rng(derive_seed(seed, 0x1A));
      const int n = 2 + static_cast<int>(seed % 5);
      const int m = 2 + static_cast<int>(seed % 3);
      Vector p_star = dirichlet_ones(n, rng), p_hat = dirichlet_ones(n, rng);
      TabularPolicy pi_b = random_policy(n, m, rng), pi = random_policy(n, m, rng);
      double g = conditional_kl_gap(p_star, p_hat, pi_b.probs, pi.probs);
      gap.record(-g, [&] {
        return json{{"seed", seed},
                    {"p_star", vector_json(p_star)},
                    {"p_hat", vector_json(p_hat)},
                    {"pi_b", policy_json(pi_b)},
                    {"pi", policy_json(pi)},
                    {"gap", g}};
      });

      const int S = 2 + static_cast<int>(seed % 3);
      TabularMdp mdp = random_mdp(S, m, rng);
      TabularMdp model = perturb_model(mdp, 0.3, rng);
      TabularPolicy rb = random_policy(S, m, rng), rp = random_policy(S, m, rng);
      JointKlComparison jk = joint_kl_comparison(mdp, model, rp, rb);
      remark.record(jk.expected_conditional_kl - jk.joint_kl, [&] {
        return json{{"seed", seed},
                    {"mdp", mdp.to_json()},
                    {"model", model.to_json()},
                    {"pi", policy_json(rp)},
                    {"pi_b", policy_json(rb)},
                    {"expected_conditional_kl", jk.expected_conditional_kl},
                    {"joint_kl", jk.joint_kl}};
      });
    }
    report.checks.push_back(std::move(gap).result());
    report.checks.push_back(std::move(remark).result());
  }

  {
    Check power("stationary_power_iteration", tol(o, "stationary_power_iteration"));
    Check recursion("stationary_recursion", tol(o, "stationary_recursion"));
    Check forms("return_forms", tol(o, "return_forms"));
    Check bellman("bellman_residual", tol(o, "bellman_residual"));
    Check norm("miw_normalization", tol(o, "miw_normalization"));
    Check fixed("weight_operator_fixed_point", tol(o, "weight_operator_fixed_point"));
    Check identity("fixed_point_identity", tol(o, "fixed_point_identity"));
    for (int i = 0; i < n_mdp_small; ++i) {
      std::uint64_t seed = o.seed + static_cast<std::uint64_t>(i);
      BoundInstance b = bound_instance(seed);
      auto instance = [&] {
        json j = b.to_json();
        j["seed"] = seed;
        return j;
      };
      Matrix d = stationary_distribution(b.mdp, b.pi);
      power.record((d - power_iteration(b.mdp, b.pi, kPowerIterationSteps)).cwiseAbs().maxCoeff(), instance);
      recursion.record(std::max(stationary_residual(b.mdp, b.pi, d), std::abs(d.sum() - 1.0)), instance);
      forms.record(std::abs(expected_return(b.mdp, b.pi) - expected_return_stationary(b.mdp, b.pi)), instance);
      Matrix q = exact_q(b.mdp, b.pi);
      bellman.record(bellman_residual(b.mdp, b.pi, q), instance);

      Matrix w = true_miw(b.mdp, b.pi, b.pi_b);
      Matrix d_b = stationary_distribution(b.mdp, b.pi_b);
      norm.record(std::abs(d_b.cwiseProduct(w).sum() - 1.0), instance);
      fixed.record((apply_weight_operator(b.mdp, b.pi, d_b, w) - w).cwiseAbs().maxCoeff(), instance);

      Rng rng(derive_seed(seed, 0x9E));
      std::vector<Matrix> tables = {q, b.mdp.reward};
      while (static_cast<int>(tables.size()) < kTablesPerMdp)
        tables.push_back(Matrix::NullaryExpr(b.mdp.n_states, b.mdp.n_actions,
                                             [&] { return 2.0 * uniform01(rng) - 1.0; }));
      for (const Matrix& t : tables)
        identity.record(std::abs(fixed_point_identity_residual(b.mdp, b.pi, b.pi_b, w, t)), [&] {
          json j = instance();
          j["q"] = matrix_json(t);
          return j;
        });
    }
    for (Check* c : {&power, &recursion, &forms, &bellman, &norm, &fixed, &identity})
      report.checks.push_back(std::move(*c).result());
  }

  {
    Check below("contraction_below_one", tol(o, "contraction_below_one"));
    Check trace("contraction_trace", tol(o, "contraction_trace"));
    for (int i = 0; i < n_mdp_small; ++i) {
      std::uint64_t seed = o.seed + static_cast<std::uint64_t>(i);
      OnPolicyInstance inst = on_policy_instance(seed);
      auto instance = [&] {
        return json{{"seed", seed}, {"mdp", inst.mdp.to_json()}, {"pi", policy_json(inst.pi)}};
      };
      double c = contraction_constant(inst.mdp, inst.pi, inst.pi);
      below.record(c, instance, true);
      Matrix w = true_miw(inst.mdp, inst.pi, inst.pi);
      auto tr = weight_operator_trace(inst.mdp, inst.pi, inst.pi, Matrix::Zero(w.rows(), w.cols()), kTraceSteps);
      const double e0 = (tr[0] - w).cwiseAbs().maxCoeff();
      double worst = -std::numeric_limits<double>::infinity();
      for (int k = 0; k <= kTraceSteps; ++k)
        worst = std::max(worst, (tr[static_cast<std::size_t>(k)] - w).cwiseAbs().maxCoeff() - std::pow(c, k) * e0);
      trace.record(worst, [&] {
        json j = instance();
        j["c"] = c;
        return j;
      });
    }
    report.checks.push_back(std::move(below).result());
    report.checks.push_back(std::move(trace).result());
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void print_report(const Report& report, std::ostream& out) {
  char line[256];
  std::snprintf(line, sizeof line, "%-30s %9s %14s %10s  %s\n", "check", "instances", "max_violation", "tolerance",
                "result");
  out << line;
  for (const auto& c : report.checks) {
    std::snprintf(line, sizeof line, "%-30s %9d %14.3e %10.1e  %s\n", c.name.c_str(), c.instances, c.max_violation,
                  c.tolerance, c.passed ? "PASS" : "FAIL");
    out << line;
  }
  std::snprintf(line, sizeof line, "%zu checks, %s, %.2f s\n", report.checks.size(),
                report.all_passed() ? "all passed" : "FAILURES", report.seconds);
  out << line;
}

}  // namespace ampl::verify
