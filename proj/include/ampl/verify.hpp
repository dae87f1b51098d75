#pragma once

#include "ampl/common.hpp"
#include "ampl/tabular.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

// The tabular verification suite: every exact inequality, identity and
// operator property, checked on generated MDP instances.
namespace ampl::verify {

struct Options {
  std::uint64_t seed = 0;
  int num_mdps = 100;         // instances for the bound check; the other MDP checks use min(num_mdps, 50)
  int num_discrete = 1000;    // instances for the KL-gap checks
  std::map<std::string, double> tolerance_overrides;
  double prefactor_sign = 1.0;  // -1 injects a fault into the bound
};

struct CheckResult {
  std::string name;
  int instances = 0;
  double max_violation = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  std::optional<nlohmann::json> violating_instance;  // first failing instance
};

struct Report {
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool all_passed() const;
  const CheckResult* find(const std::string& name) const;
};

/// Names accepted by tolerance overrides, with their defaults.
const std::map<std::string, double>& default_tolerances();

/// Parses "name=value[,name=value...]"; throws std::invalid_argument on unknown
/// names or malformed values.
std::map<std::string, double> parse_tolerance_overrides(const std::string& text);

Report run_suite(const Options& options);
void print_report(const Report& report, std::ostream& out);

/// Instances shared with the tests so that both see the same generator.
struct BoundInstance {
  tabular::TabularMdp mdp, model;
  tabular::TabularPolicy pi, pi_b;
  double model_eps = 0.0;
  double policy_mix = 0.0;
  nlohmann::json to_json() const;
};
BoundInstance bound_instance(std::uint64_t seed);

/// Random MDP with pi = pi_b.
struct OnPolicyInstance {
  tabular::TabularMdp mdp;
  tabular::TabularPolicy pi;
};
OnPolicyInstance on_policy_instance(std::uint64_t seed);

/// omega_k = T^k omega_0 for k = 0..steps.
std::vector<Matrix> weight_operator_trace(const tabular::TabularMdp& mdp, const tabular::TabularPolicy& pi,
                                          const tabular::TabularPolicy& pi_b, const Matrix& omega0, int steps);

}  // namespace ampl::verify
