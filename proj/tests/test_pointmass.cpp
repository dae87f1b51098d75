#include "ampl/dataset.hpp"
#include "ampl/pointmass.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ampl;
using namespace ampl::pointmass;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ampl_pm_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(PointMass, ResetIsInsideBoxAtRest) {
  Rng rng(0);
  for (int i = 0; i < 1000; ++i) {
    PointMassState s = reset(rng);
    EXPECT_GE(s.position.minCoeff(), kResetLow);
    EXPECT_LE(s.position.maxCoeff(), kResetHigh);
    EXPECT_EQ(s.velocity, Eigen::Vector2d::Zero());
  }
  Rng a(4), b(4);
  EXPECT_EQ(reset(a).position, reset(b).position);
}

TEST(PointMass, NoiselessStepFollowsDynamics) {
  PointMassState s;
  s.position << 0.1, -0.2;
  s.velocity << 0.3, 0.0;
  Eigen::Vector2d a(0.5, -1.0);
  Rng rng(0);
  StepResult r = step(s, a, rng, 0.0);
  Eigen::Vector2d v = kFriction * s.velocity + kGain * a;
  EXPECT_NEAR((r.next.velocity - v).norm(), 0.0, 1e-15);
  EXPECT_NEAR((r.next.position - (s.position + kDt * v)).norm(), 0.0, 1e-15);
  EXPECT_FALSE(r.done);
  EXPECT_LT(r.reward, 0.0);
}

TEST(PointMass, ActionsAreClipped) {
  PointMassState s;
  Rng rng(0);
  StepResult big = step(s, Eigen::Vector2d(10.0, -10.0), rng, 0.0);
  StepResult unit = step(s, Eigen::Vector2d(kMaxAction, -kMaxAction), rng, 0.0);
  EXPECT_EQ(big.next.position, unit.next.position);
}

TEST(PointMass, GoalTerminates) {
  Vector at_goal(kStateDim);
  at_goal << kGoalX, kGoalY, 0.0, 0.0;
  EXPECT_TRUE(is_terminal(at_goal));
  Vector far = Vector::Zero(kStateDim);
  EXPECT_FALSE(is_terminal(far));
}

TEST(PointMass, PoliciesAreOrderedByReturn) {
  double expert = evaluate_policy(expert_policy(), 50, 1).mean_return;
  double medium = evaluate_policy(behavior_policy(Quality::kMedium), 50, 1).mean_return;
  double random = evaluate_policy(uniform_random_policy(), 50, 1).mean_return;
  EXPECT_GT(expert, medium);
  EXPECT_GT(medium, random);
}

TEST(PointMass, EvaluationIsDeterministic) {
  auto a = evaluate_policy(behavior_policy(Quality::kMedium), kEvalEpisodes, 9);
  auto b = evaluate_policy(behavior_policy(Quality::kMedium), kEvalEpisodes, 9);
  EXPECT_EQ(a.returns, b.returns);
  EXPECT_EQ(a.returns.size(), static_cast<std::size_t>(kEvalEpisodes));
}

TEST(PointMass, ZeroPolicyWithoutNoiseIsReproducible) {
  Policy zero = [](const Vector&, Rng&) { return Eigen::Vector2d::Zero().eval(); };
  PointMassState start;
  start.position << -0.8, -0.8;
  Rng r1(0), r2(123);
  double a = episode_return(zero, start, r1, 0.0);
  double b = episode_return(zero, start, r2, 0.0);
  EXPECT_EQ(a, b);
  // at rest the state never moves: each step costs the same
  StepResult s = step(start, Eigen::Vector2d::Zero(), r1, 0.0);
  EXPECT_NEAR(a, kHorizon * s.reward, 1e-12);
}

TEST(PointMass, QualityNames) {
  for (Quality q : {Quality::kMedium, Quality::kMediumReplay, Quality::kExpert})
    EXPECT_EQ(parse_quality(to_string(q)), q);
  EXPECT_FALSE(parse_quality("bogus").has_value());
}

TEST(Dataset, CollectionIsConsistent) {
  OfflineDataset ds = collect_dataset(Quality::kMedium, 20, 3);
  EXPECT_NO_THROW(ds.validate());
  EXPECT_EQ(ds.state_dim, kStateDim);
  EXPECT_EQ(ds.action_dim, kActionDim);
  EXPECT_EQ(ds.episode_lengths.size(), 20u);
  std::size_t total = 0;
  for (auto n : ds.episode_lengths) total += n;
  EXPECT_EQ(total, ds.size());
  EXPECT_EQ(ds.initial_states.size(), static_cast<std::size_t>(kInitialPoolSize));
  EXPECT_FALSE(ds.rewards_normalized);
  // an episode ends exactly at its done flag or at the horizon
  std::size_t row = 0;
  for (auto n : ds.episode_lengths) {
    for (std::size_t i = 0; i + 1 < n; ++i) EXPECT_FALSE(ds.transitions[row + i].done);
    const auto& last = ds.transitions[row + n - 1];
    EXPECT_TRUE(last.done || n == static_cast<std::size_t>(kHorizon));
    row += n;
  }
}

TEST(Dataset, ReturnsSumRewards) {
  OfflineDataset ds = collect_dataset(Quality::kExpert, 5, 0);
  auto returns = ds.episode_returns();
  double first = 0.0;
  for (std::size_t i = 0; i < ds.episode_lengths[0]; ++i) first += ds.transitions[i].r;
  EXPECT_DOUBLE_EQ(returns[0], first);
}

TEST(Dataset, StatsMatchData) {
  OfflineDataset ds = collect_dataset(Quality::kMediumReplay, 10, 1);
  double lo = 1e300, hi = -1e300, mean = 0.0;
  for (const auto& t : ds.transitions) {
    lo = std::min(lo, t.r);
    hi = std::max(hi, t.r);
    mean += t.r / static_cast<double>(ds.size());
  }
  double var = 0.0;
  for (const auto& t : ds.transitions) var += (t.r - mean) * (t.r - mean) / static_cast<double>(ds.size());
  EXPECT_EQ(ds.reward_stats.r_min, lo);
  EXPECT_EQ(ds.reward_stats.r_max, hi);
  EXPECT_NEAR(ds.reward_stats.sigma_r, std::sqrt(var), 1e-12);
  EXPECT_EQ(ds.normalization.input_mean.size(), kStateDim + kActionDim);
  EXPECT_EQ(ds.normalization.target_mean.size(), 1 + kStateDim);
}

TEST(Dataset, SameSeedGivesByteIdenticalFile) {
  auto dir = scratch("det");
  collect_dataset(Quality::kMedium, 10, 5).save(dir / "a.jsonl");
  collect_dataset(Quality::kMedium, 10, 5).save(dir / "b.jsonl");
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  collect_dataset(Quality::kMedium, 10, 6).save(dir / "c.jsonl");
  EXPECT_NE(slurp(dir / "a.jsonl"), slurp(dir / "c.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST(Dataset, SaveLoadRoundTrip) {
  auto dir = scratch("rt");
  OfflineDataset ds = collect_dataset(Quality::kExpert, 8, 2);
  ds.save(dir / "d.jsonl");
  EXPECT_TRUE(std::filesystem::exists(metadata_path(dir / "d.jsonl")));
  EXPECT_TRUE(std::filesystem::exists(initial_states_path(dir / "d.jsonl")));
  OfflineDataset back = OfflineDataset::load(dir / "d.jsonl");
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.transitions[i].s, ds.transitions[i].s);
    EXPECT_EQ(back.transitions[i].a, ds.transitions[i].a);
    EXPECT_EQ(back.transitions[i].r, ds.transitions[i].r);
    EXPECT_EQ(back.transitions[i].s_next, ds.transitions[i].s_next);
    EXPECT_EQ(back.transitions[i].done, ds.transitions[i].done);
  }
  EXPECT_EQ(back.episode_lengths, ds.episode_lengths);
  EXPECT_EQ(back.initial_states.size(), ds.initial_states.size());
  EXPECT_EQ(back.quality, ds.quality);
  EXPECT_EQ(back.mean_episode_return(), ds.mean_episode_return());
  std::filesystem::remove_all(dir);
}

TEST(Dataset, LoadRejectsCorruptLine) {
  auto dir = scratch("bad");
  collect_dataset(Quality::kExpert, 2, 0).save(dir / "d.jsonl");
  {
    std::ofstream out(dir / "d.jsonl", std::ios::app);
    out << "{not json\n";
  }
  EXPECT_ANY_THROW(OfflineDataset::load(dir / "d.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST(Dataset, ValidateCatchesStaleStats) {
  OfflineDataset ds = collect_dataset(Quality::kExpert, 3, 0);
  ds.transitions[0].r += 100.0;
  EXPECT_THROW(ds.validate(), std::invalid_argument);
  ds.recompute_stats();
  EXPECT_NO_THROW(ds.validate());
}
