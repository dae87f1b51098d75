#pragma once

#include "ampl/common.hpp"
#include "ampl/dataset.hpp"

#include <functional>
#include <optional>
#include <string>

// A 2-D point mass driven towards a fixed goal. Small enough to simulate
// thousands of episodes per second, rich enough (continuous state, inertia,
// goal termination) to exercise every part of the offline pipeline.
namespace ampl::pointmass {

// Environment constants. These are plumbing choices, fixed once so that
// datasets and returns are reproducible across the project.
inline constexpr double kFriction = 0.9;
inline constexpr double kGain = 0.1;
inline constexpr double kDt = 0.1;
inline constexpr double kNoiseStd = 0.01;
inline constexpr double kGoalX = 0.8;
inline constexpr double kGoalY = 0.8;
inline constexpr double kGoalRadius = 0.1;
inline constexpr int kHorizon = 100;
inline constexpr double kResetLow = -0.9;
inline constexpr double kResetHigh = -0.7;
inline constexpr int kStateDim = 4;
inline constexpr int kActionDim = 2;
inline constexpr double kMaxAction = 1.0;
inline constexpr int kInitialPoolSize = 10000;
inline constexpr int kEvalEpisodes = 10;

// Behaviour-policy constants.
inline constexpr double kExpertPositionGain = 2.0;
inline constexpr double kExpertVelocityGain = 1.0;
inline constexpr double kMediumNoiseStd = 0.3;
inline constexpr double kReplayRandomProb = 0.3;

struct PointMassState {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();

  Vector to_vector() const;
  static PointMassState from_vector(const Vector& v);
};

struct StepResult {
  PointMassState next;
  double reward = 0.0;
  bool done = false;
};

enum class Quality { kMedium, kMediumReplay, kExpert };

std::string to_string(Quality q);
std::optional<Quality> parse_quality(const std::string& name);

Eigen::Vector2d goal();
PointMassState reset(Rng& rng);
/// `noise_std` = 0 suppresses the velocity noise (no random draws happen).
StepResult step(const PointMassState& state, const Eigen::Vector2d& action, Rng& rng, double noise_std = kNoiseStd);
/// Goal test on a flat state vector; used as the known termination rule for
/// model rollouts.
bool is_terminal(const Vector& state);

Eigen::Vector2d expert_action(const PointMassState& state);
/// `noise_std` scales the medium-tier action noise; 0 suppresses it.
Eigen::Vector2d behavior_action(const PointMassState& state, Quality quality, Rng& rng,
                                double noise_std = kMediumNoiseStd);

OfflineDataset collect_dataset(Quality quality, int n_episodes, std::uint64_t seed);

/// Maps a flat state to an action; the rng feeds any internal noise.
using Policy = std::function<Eigen::Vector2d(const Vector& state, Rng& rng)>;

struct EvalResult {
  double mean_return = 0.0;
  double std_return = 0.0;
  std::vector<double> returns;
};

/// Undiscounted return of one episode of at most kHorizon steps.
double episode_return(const Policy& policy, PointMassState start, Rng& rng, double noise_std = kNoiseStd);

/// Each episode gets its own rng stream derived from `seed`, so the result
/// does not depend on how episodes are scheduled across threads.
EvalResult evaluate_policy(const Policy& policy, int n_episodes, std::uint64_t seed, double noise_std = kNoiseStd);

Policy expert_policy();
Policy behavior_policy(Quality quality);
Policy uniform_random_policy();

}  // namespace ampl::pointmass
