#include "ampl/verify.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace ampl;
using namespace ampl::verify;

TEST(Verify, SuitePassesOnDefaults) {
  Options o;
  o.num_mdps = 20;
  o.num_discrete = 200;
  Report r = run_suite(o);
  for (const auto& c : r.checks) EXPECT_TRUE(c.passed) << c.name << " violation " << c.max_violation;
  EXPECT_TRUE(r.all_passed());
  ASSERT_NE(r.find("bound"), nullptr);
  EXPECT_EQ(r.find("bound")->instances, 20);
  EXPECT_EQ(r.find("no_such_check"), nullptr);
}

TEST(Verify, InjectedFaultIsCaught) {
  Options o;
  o.num_mdps = 10;
  o.num_discrete = 10;
  o.prefactor_sign = -1.0;
  Report r = run_suite(o);
  EXPECT_FALSE(r.all_passed());
  const CheckResult* b = r.find("bound");
  ASSERT_NE(b, nullptr);
  EXPECT_FALSE(b->passed);
  ASSERT_TRUE(b->violating_instance.has_value());
  EXPECT_TRUE(b->violating_instance->contains("mdp"));
}

TEST(Verify, ToleranceOverridesParse) {
  auto m = parse_tolerance_overrides("bound=1e-6,kl_gap=0");
  EXPECT_EQ(m.at("bound"), 1e-6);
  EXPECT_EQ(m.at("kl_gap"), 0.0);
  EXPECT_TRUE(parse_tolerance_overrides("").empty());
  EXPECT_THROW(parse_tolerance_overrides("nope=1"), std::invalid_argument);
  EXPECT_THROW(parse_tolerance_overrides("bound=abc"), std::invalid_argument);
  EXPECT_THROW(parse_tolerance_overrides("bound"), std::invalid_argument);
}

TEST(Verify, NegativeToleranceForcesFailure) {
  Options o;
  o.num_mdps = 3;
  o.num_discrete = 3;
  o.tolerance_overrides = {{"stationary_power_iteration", -1.0}};
  Report r = run_suite(o);
  EXPECT_FALSE(r.find("stationary_power_iteration")->passed);
  EXPECT_TRUE(r.find("bound")->passed);
}

TEST(Verify, SingleInstanceReportIsDeterministic) {
  Options o;
  o.num_mdps = 1;
  o.num_discrete = 1;
  std::ostringstream a, b;
  Report ra = run_suite(o), rb = run_suite(o);
  for (std::size_t i = 0; i < ra.checks.size(); ++i) {
    EXPECT_EQ(ra.checks[i].max_violation, rb.checks[i].max_violation);
    EXPECT_EQ(ra.checks[i].instances, rb.checks[i].instances);
  }
}

TEST(Verify, BoundInstancesStayWithinLimits) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    BoundInstance in = bound_instance(s);
    EXPECT_LE(in.mdp.n_states, 16);
    EXPECT_EQ(in.mdp.gamma, 0.95);
    EXPECT_NO_THROW(in.mdp.validate());
    EXPECT_NO_THROW(in.model.validate());
    EXPECT_NO_THROW(in.pi.validate());
  }
}

TEST(Verify, WeightOperatorTraceContracts) {
  OnPolicyInstance in = on_policy_instance(5);
  double c = tabular::contraction_constant(in.mdp, in.pi, in.pi);
  Matrix w_star = tabular::true_miw(in.mdp, in.pi, in.pi);
  Matrix w0 = Matrix::Constant(in.mdp.n_states, in.mdp.n_actions, 3.0);
  auto trace = weight_operator_trace(in.mdp, in.pi, in.pi, w0, 50);
  ASSERT_EQ(trace.size(), 51u);
  double e0 = (w0 - w_star).cwiseAbs().maxCoeff();
  for (std::size_t k = 0; k < trace.size(); ++k)
    EXPECT_LE((trace[k] - w_star).cwiseAbs().maxCoeff(), std::pow(c, static_cast<double>(k)) * e0 + 1e-10);
}
