#include "ampl/pointmass.hpp"

#include <cmath>
#include <numeric>

namespace ampl::pointmass {

namespace {

Eigen::Vector2d clamp_unit(const Eigen::Vector2d& v) { return v.cwiseMax(-1.0).cwiseMin(1.0); }

}  // namespace

Vector PointMassState::to_vector() const {
  Vector v(kStateDim);
  v << position, velocity;
  return v;
}

PointMassState PointMassState::from_vector(const Vector& v) {
  if (v.size() != kStateDim) throw std::invalid_argument("point-mass state must have 4 coordinates");
  return {v.head<2>(), v.tail<2>()};
}

std::string to_string(Quality q) {
  switch (q) {
    case Quality::kMedium: return "medium";
    case Quality::kMediumReplay: return "medium-replay";
    case Quality::kExpert: return "expert";
  }
  return "unknown";
}

std::optional<Quality> parse_quality(const std::string& name) {
  if (name == "medium") return Quality::kMedium;
  if (name == "medium-replay") return Quality::kMediumReplay;
  if (name == "expert") return Quality::kExpert;
  return std::nullopt;
}

Eigen::Vector2d goal() { return {kGoalX, kGoalY}; }

PointMassState reset(Rng& rng) {
  std::uniform_real_distribution<double> u(kResetLow, kResetHigh);
  PointMassState s;
  s.position.x() = u(rng);
  s.position.y() = u(rng);
  return s;
}

StepResult step(const PointMassState& state, const Eigen::Vector2d& action, Rng& rng, double noise_std) {
  if (!state.position.allFinite() || !state.velocity.allFinite() || !action.allFinite())
    throw std::invalid_argument("point-mass step received a non-finite state or action");
  Eigen::Vector2d a = clamp_unit(action);
  Eigen::Vector2d noise = Eigen::Vector2d::Zero();
  if (noise_std > 0.0) {
    std::normal_distribution<double> n(0.0, noise_std);
    noise.x() = n(rng);
    noise.y() = n(rng);
  }
  StepResult out;
  out.next.velocity = clamp_unit(kFriction * state.velocity + kGain * a + noise);
  out.next.position = clamp_unit(state.position + kDt * out.next.velocity);
  double dist = (out.next.position - goal()).norm();
  out.reward = -dist;
  out.done = dist < kGoalRadius;
  return out;
}

bool is_terminal(const Vector& state) { return (state.head<2>() - goal()).norm() < kGoalRadius; }

Eigen::Vector2d expert_action(const PointMassState& state) {
  return clamp_unit(kExpertPositionGain * (goal() - state.position) - kExpertVelocityGain * state.velocity);
}

Eigen::Vector2d behavior_action(const PointMassState& state, Quality quality, Rng& rng, double noise_std) {
  auto medium = [&] {
    Eigen::Vector2d a = expert_action(state);
    if (noise_std > 0.0) {
      std::normal_distribution<double> n(0.0, noise_std);
      a.x() += n(rng);
      a.y() += n(rng);
    }
    return clamp_unit(a);
  };
  switch (quality) {
    case Quality::kExpert: return expert_action(state);
    case Quality::kMedium: return medium();
    case Quality::kMediumReplay: {
      if (uniform01(rng) < kReplayRandomProb) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        double x = u(rng);
        double y = u(rng);
        return {x, y};
      }
      return medium();
    }
  }
  return Eigen::Vector2d::Zero();
}

OfflineDataset collect_dataset(Quality quality, int n_episodes, std::uint64_t seed) {
  if (n_episodes < 1) throw std::invalid_argument("collect_dataset needs at least one episode");
  Rng rng(seed);
  OfflineDataset ds;
  ds.state_dim = kStateDim;
  ds.action_dim = kActionDim;
  ds.quality = to_string(quality);
  ds.seed = seed;
  for (int ep = 0; ep < n_episodes; ++ep) {
    PointMassState s = reset(rng);
    std::size_t len = 0;
    for (int t = 0; t < kHorizon; ++t) {
      Eigen::Vector2d a = behavior_action(s, quality, rng);
      StepResult res = step(s, a, rng);
      // The horizon cut-off is stored as done = false: only reaching the
      // goal is a true terminal.
      ds.transitions.push_back({s.to_vector(), Vector(a), res.reward, res.next.to_vector(), res.done});
      ++len;
      s = res.next;
      if (res.done) break;
    }
    ds.episode_lengths.push_back(len);
  }
  ds.initial_states.reserve(kInitialPoolSize);
  for (int i = 0; i < kInitialPoolSize; ++i) ds.initial_states.push_back(reset(rng).to_vector());
  ds.recompute_stats();
  return ds;
}

double episode_return(const Policy& policy, PointMassState start, Rng& rng, double noise_std) {
  PointMassState s = start;
  double total = 0.0;
  for (int t = 0; t < kHorizon; ++t) {
    Eigen::Vector2d a = policy(s.to_vector(), rng);
    StepResult res = step(s, a, rng, noise_std);
    total += res.reward;
    s = res.next;
    if (res.done) break;
  }
  return total;
}

EvalResult evaluate_policy(const Policy& policy, int n_episodes, std::uint64_t seed, double noise_std) {
  if (n_episodes < 1) throw std::invalid_argument("evaluate_policy needs at least one episode");
  EvalResult out;
  out.returns.assign(static_cast<std::size_t>(n_episodes), 0.0);
  parallel_for(out.returns.size(), [&](std::size_t ep) {
    Rng rng(derive_seed(seed, ep));
    PointMassState start = reset(rng);
    out.returns[ep] = episode_return(policy, start, rng, noise_std);
  });
  out.mean_return = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / n_episodes;
  double var = 0.0;
  for (double r : out.returns) var += (r - out.mean_return) * (r - out.mean_return);
  out.std_return = std::sqrt(var / n_episodes);
  return out;
}

Policy expert_policy() {
  return [](const Vector& s, Rng&) { return expert_action(PointMassState::from_vector(s)); };
}

Policy behavior_policy(Quality quality) {
  return [quality](const Vector& s, Rng& rng) { return behavior_action(PointMassState::from_vector(s), quality, rng); };
}

Policy uniform_random_policy() {
  return [](const Vector&, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double x = u(rng);
    double y = u(rng);
    return Eigen::Vector2d(x, y);
  };
}

}  // namespace ampl::pointmass
