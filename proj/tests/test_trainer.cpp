#include "ampl/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace ampl;

namespace {

// Small networks and short epochs: exercises every stage of the loop quickly.
RunConfig tiny_config() {
  RunConfig c = RunConfig::desk();
  c.epochs = 2;
  c.iterations_per_epoch = 60;
  c.batch_size = 16;
  c.warm_epochs = 1;
  c.rollout_freq = 25;
  c.rollout_samples = 16;
  c.model_retrain_period = 1;
  c.hidden = {8, 8};
  c.eval_episodes = 2;
  c.ensemble.hidden = {8};
  c.ensemble.steps_per_epoch = 10;
  c.ensemble.batch_size = 32;
  c.miw.hidden = {8};
  c.miw.n_steps = 10;
  c.miw.batch_size = 32;
  c.miw.init_batch_size = 32;
  return c;
}

OfflineDataset medium(int episodes = 10, std::uint64_t seed = 0) {
  return pointmass::collect_dataset(pointmass::Quality::kMedium, episodes, seed);
}

}  // namespace

TEST(Rewards, NormalizationFormula) {
  OfflineDataset ds = medium();
  const double lo = ds.reward_stats.r_min, hi = ds.reward_stats.r_max;
  const double raw = ds.transitions[3].r;
  const double zero = normalized_zero_reward(ds);
  normalize_rewards(ds);
  EXPECT_TRUE(ds.rewards_normalized);
  EXPECT_NEAR(ds.transitions[3].r, (raw - lo + 0.001) / (hi - lo), 1e-15);
  EXPECT_NEAR(zero, (0.0 - lo + 0.001) / (hi - lo), 1e-15);
  EXPECT_NEAR(ds.reward_stats.r_min, 0.001 / (hi - lo), 1e-15);
  EXPECT_NO_THROW(ds.validate());
  EXPECT_THROW(normalize_rewards(ds), std::logic_error);
}

TEST(Rewards, ConstantRewardsAreRefused) {
  OfflineDataset ds = medium(2);
  for (auto& t : ds.transitions) t.r = -1.0;
  ds.recompute_stats();
  EXPECT_THROW(normalize_rewards(ds), std::logic_error);
}

TEST(ReplayBuffer, OverwritesOldestFirst) {
  ReplayBuffer b(3);
  for (std::size_t i = 0; i < 5; ++i) {
    BufferItem it;
    it.origin = i;
    b.push(it);
  }
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(b.total_pushed(), 5u);
  std::vector<std::size_t> origins;
  for (std::size_t i = 0; i < 3; ++i) origins.push_back(b.at(i).origin);
  std::sort(origins.begin(), origins.end());
  EXPECT_EQ(origins, (std::vector<std::size_t>{2, 3, 4}));
}

TEST(MixedSample, FallsBackToDatasetWhenBufferEmpty) {
  OfflineDataset ds = medium();
  ReplayBuffer empty(10);
  Rng rng(0);
  MixedStats st;
  auto b = mixed_sample(ds, empty, 0.5, 64, {}, rng, &st);
  EXPECT_TRUE(st.fell_back);
  EXPECT_EQ(st.from_env, 64u);
  EXPECT_EQ(b.size(), 64);
  EXPECT_EQ(b.weight, Vector::Ones(64));
}

TEST(MixedSample, FractionFromDatasetFollowsF) {
  OfflineDataset ds = medium();
  ReplayBuffer buf(100);
  for (int i = 0; i < 100; ++i) {
    BufferItem it;
    it.t = ds.transitions[0];
    it.t.r = 1e6;  // marks model rows
    buf.push(it);
  }
  Rng rng(1);
  std::size_t env = 0;
  const int n = 20000;
  MixedStats st;
  auto b = mixed_sample(ds, buf, 0.3, n, {}, rng, &st);
  for (Eigen::Index i = 0; i < b.size(); ++i) env += b.r[i] != 1e6;
  EXPECT_EQ(env, st.from_env);
  // binomial sd is about 0.0032 at this n
  EXPECT_NEAR(static_cast<double>(env) / n, 0.3, 0.015);
}

TEST(MixedSample, PenalisedRowsAreNotAbsorbing) {
  OfflineDataset ds = medium();
  ReplayBuffer buf(2);
  BufferItem pen;
  pen.t = ds.transitions[0];
  pen.t.done = true;
  pen.penalized = true;
  buf.push(pen);
  Rng rng(2);
  auto b = mixed_sample(ds, buf, 0.0, 50, {}, rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    EXPECT_TRUE(b.done[static_cast<std::size_t>(i)]);
    EXPECT_FALSE(b.absorbing[static_cast<std::size_t>(i)]);
  }
  auto e = mixed_sample(ds, ReplayBuffer(1), 1.0, 500, {}, rng);
  for (Eigen::Index i = 0; i < e.size(); ++i)
    EXPECT_EQ(e.absorbing[static_cast<std::size_t>(i)], e.done[static_cast<std::size_t>(i)]);
}

TEST(MixedSample, EnvWeightsFillBatchWeights) {
  OfflineDataset ds = medium(3);
  std::vector<double> w(ds.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 + static_cast<double>(i);
  Rng rng(3);
  auto b = mixed_sample(ds, ReplayBuffer(1), 1.0, 30, w, rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    // recover the row from its reward and action
    bool found = false;
    for (std::size_t r = 0; r < ds.size() && !found; ++r)
      if (ds.transitions[r].a == Vector(b.a.col(i)) && ds.transitions[r].s == Vector(b.s.col(i)))
        found = b.weight[i] == w[r];
    EXPECT_TRUE(found);
  }
}

TEST(Schedule, ClosedFormForThreeEpochs) {
  RunConfig c = RunConfig::desk();
  c.epochs = 3;
  c.model_retrain_period = 1;
  ScheduleCounts s = expected_schedule(c);
  EXPECT_EQ(s.critic_steps, 3000);
  EXPECT_EQ(s.discriminator_steps, 3000);
  EXPECT_EQ(s.actor_steps, 1500);
  EXPECT_EQ(s.rollout_generations, 12);
  EXPECT_EQ(s.model_retrains, 2);
  EXPECT_EQ(s.miw_trainings, 2);
  c.variant = Variant::kNw;
  EXPECT_EQ(expected_schedule(c).model_retrains, 0);
  c.variant = Variant::kMain;
  c.model_retrain_period = 10;
  EXPECT_EQ(expected_schedule(c).model_retrains, 0);
}

TEST(Schedule, ObservedMatchesExpected) {
  for (Variant v : {Variant::kMain, Variant::kNw}) {
    RunConfig c = tiny_config();
    c.variant = v;
    RunResult r = run_ampl(c, medium(), 0);
    EXPECT_EQ(r.counts, expected_schedule(c)) << to_string(v) << "\n"
                                              << r.counts.to_json().dump() << "\n"
                                              << expected_schedule(c).to_json().dump();
    ASSERT_EQ(r.metrics.size(), 2u);
    EXPECT_EQ(r.metrics[0].epoch, 1);
  }
}

TEST(Trainer, VariantsChangeOnlyTheirComponent) {
  OfflineDataset ds = medium();
  RunConfig c = tiny_config();
  c.variant = Variant::kRewTest;
  Trainer rew(c, ds, 0);
  EXPECT_EQ(rew.config().miw.test_function, miw::TestFunctionMode::kReward);
  c.variant = Variant::kGaussian;
  Trainer g(c, ds, 0);
  EXPECT_EQ(g.agent().config().head, agent::PolicyHead::kGaussian);
  c.variant = Variant::kMain;
  Trainer m(c, ds, 0);
  EXPECT_EQ(m.agent().config().head, agent::PolicyHead::kImplicit);
  EXPECT_EQ(m.config().miw.test_function, miw::TestFunctionMode::kCritic);
}

TEST(Trainer, TerminalValueIsAbsorbingZeroReward) {
  OfflineDataset ds = medium();
  double zero = normalized_zero_reward(ds);
  RunConfig c = tiny_config();
  Trainer t(c, ds, 0);
  EXPECT_NEAR(t.terminal_value(), zero / (1.0 - c.gamma), 1e-12);
  EXPECT_EQ(t.agent().config().terminal_value, t.terminal_value());
  EXPECT_TRUE(t.dataset().rewards_normalized);
  c.shift_invariant_terminals = false;
  EXPECT_EQ(Trainer(c, ds, 0).terminal_value(), 0.0);
}

TEST(Trainer, RetrainSetsUnitMeanWeights) {
  RunConfig c = tiny_config();
  Trainer t(c, medium(), 1);
  t.initialize();
  EXPECT_TRUE(t.env_weights().empty());
  t.retrain_model();
  ASSERT_EQ(t.env_weights().size(), t.dataset().size());
  double mean = 0.0;
  for (double w : t.env_weights()) mean += w / static_cast<double>(t.env_weights().size());
  EXPECT_NEAR(mean, 1.0, 1e-9);
  EXPECT_TRUE(t.miw().trained());
}

TEST(Trainer, RunIsDeterministic) {
  RunConfig c = tiny_config();
  auto a = run_ampl(c, medium(), 3);
  auto b = run_ampl(c, medium(), 3);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i)
    EXPECT_EQ(metrics_csv_row(a.metrics[i]), metrics_csv_row(b.metrics[i]));
}

TEST(Trainer, CheckpointsAreWritten) {
  auto dir = std::filesystem::temp_directory_path() / "ampl_trainer_ck";
  std::filesystem::remove_all(dir);
  RunConfig c = tiny_config();
  c.epochs = 1;
  run_ampl(c, medium(), 0, dir);
  for (const char* stem : {"agent", "model", "miw"}) EXPECT_TRUE(std::filesystem::exists(dir / (std::string(stem) + ".json")));
  std::filesystem::remove_all(dir);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = RunConfig::desk();
  c.lambda_prime = 3.5;
  c.variant = Variant::kWpr;
  c.miw.alpha = 0.75;
  std::vector<std::string> errors;
  RunConfig back = RunConfig::from_json(c.to_json(), RunConfig::paper_scale(), errors);
  EXPECT_TRUE(errors.empty());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfig, ErrorsAreReportedPerField) {
  std::vector<std::string> errors;
  nlohmann::json j = {{"epochs", "many"}, {"bogus", 1}, {"gamma", 0.9}};
  RunConfig c = RunConfig::from_json(j, RunConfig::desk(), errors);
  EXPECT_EQ(errors.size(), 2u);
  EXPECT_EQ(c.gamma, 0.9);
  c.gamma = 1.0;
  c.batch_size = 0;
  EXPECT_EQ(c.validate().size(), 2u);
}

TEST(RunConfig, PaperScaleDefaults) {
  RunConfig p = RunConfig::paper_scale();
  EXPECT_EQ(p.epochs, 1000);
  EXPECT_EQ(p.batch_size, 512);
  EXPECT_EQ(p.k_policy_freq, 2);
  EXPECT_EQ(p.rollout_freq, 250);
  EXPECT_EQ(p.miw.n_steps, 100000);
  EXPECT_TRUE(p.validate().empty());
}

TEST(Variant, Names) {
  for (Variant v : {Variant::kMain, Variant::kNw, Variant::kWpr, Variant::kRewTest, Variant::kValueDisc,
                    Variant::kGaussian})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("x"), std::invalid_argument);
}

TEST(Metrics, CsvRowHasOneFieldPerHeaderColumn) {
  EpochMetrics m;
  m.miw_mean_raw = std::numeric_limits<double>::quiet_NaN();
  auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(count(metrics_csv_row(m)), count(metrics_csv_header()));
}
