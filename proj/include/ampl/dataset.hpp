#pragma once

#include "ampl/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ampl {

struct Transition {
  Vector s;
  Vector a;
  double r = 0.0;
  Vector s_next;
  bool done = false;
};

struct RewardStats {
  double r_min = 0.0;
  double r_max = 0.0;
  double sigma_r = 0.0;
};

/// Per-coordinate moments of the model input (s, a) and target (r, s' - s).
/// Standard deviations are population (1/n) values, not floored.
struct NormalizationStats {
  Vector input_mean;
  Vector input_std;
  Vector target_mean;
  Vector target_std;
};

/// Immutable-by-convention offline data: transitions, a pool of initial-state
/// samples, and statistics derived from the transitions.
struct OfflineDataset {
  std::vector<Transition> transitions;
  std::vector<Vector> initial_states;
  std::vector<std::size_t> episode_lengths;  // consecutive episodes in `transitions`
  int state_dim = 0;
  int action_dim = 0;
  RewardStats reward_stats;
  NormalizationStats normalization;
  bool rewards_normalized = false;
  std::string quality;
  std::uint64_t seed = 0;

  std::size_t size() const { return transitions.size(); }
  void recompute_stats();
  /// Checks dimensions, finiteness and that stored stats match the data.
  void validate() const;
  std::vector<double> episode_returns() const;
  double mean_episode_return() const;

  /// Writes `<path>` (JSON Lines, one transition per line) plus
  /// `<stem>.meta.json` and `<stem>.init.jsonl` beside it.
  void save(const std::filesystem::path& jsonl_path) const;
  static OfflineDataset load(const std::filesystem::path& jsonl_path);
};

std::filesystem::path metadata_path(const std::filesystem::path& jsonl_path);
std::filesystem::path initial_states_path(const std::filesystem::path& jsonl_path);

RewardStats compute_reward_stats(const std::vector<Transition>& transitions);
NormalizationStats compute_normalization_stats(const std::vector<Transition>& transitions);

}  // namespace ampl
