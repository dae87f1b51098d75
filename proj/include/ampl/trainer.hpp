#pragma once

#include "ampl/agent.hpp"
#include "ampl/common.hpp"
#include "ampl/dataset.hpp"
#include "ampl/dynamics.hpp"
#include "ampl/miw.hpp"
#include "ampl/pointmass.hpp"

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

// The alternating training loop: reward normalisation, model initialisation,
// warm start, then iterations of critic / discriminator / actor updates with
// periodic rollouts and weighted model retraining.
namespace ampl {

enum class Variant { kMain, kNw, kWpr, kRewTest, kValueDisc, kGaussian };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct RunConfig {
  int epochs = 1000;
  int iterations_per_epoch = 1000;
  int batch_size = 512;
  double gamma = 0.99;
  double beta = 0.005;
  double c_mix = 0.75;
  double sigma_noise = 1.0;
  int k_policy_freq = 2;
  int rollout_freq = 250;
  int rollout_samples = 128;
  int retain_epochs = 5;
  double f_real = 0.5;
  int warm_epochs = 40;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  int horizon = 1;
  int model_retrain_period = 100;  // epochs
  int model_init_epochs = 5;       // model epochs for the initial MLE fit
  int model_retrain_epochs = 1;    // model epochs per retrain event
  double lambda_prime = 10.0;
  double critic_lr = 3e-4;
  double actor_lr = 2e-4;
  double disc_lr = 2e-4;
  double gan_beta1 = 0.4;
  double huber_delta = 500.0;
  double critic_grad_clip = 0.1;
  std::vector<int> hidden = {400, 300};
  int noise_dim = -1;
  int eval_episodes = 10;
  dynamics::EnsembleConfig ensemble;
  miw::MiwConfig miw;
  Variant variant = Variant::kMain;
  bool desk_scale = false;
  /// Terminal (non-penalised) rows bootstrap from an absorbing state whose raw
  /// reward is 0, so the reward shift of normalisation does not turn reaching
  /// a terminal into a loss. Off: terminal target = r.
  bool shift_invariant_terminals = false;

  static RunConfig paper_scale();
  static RunConfig desk();

  long total_iterations() const { return static_cast<long>(epochs) * iterations_per_epoch; }
  std::size_t model_buffer_capacity() const;
  /// Empty when the configuration is usable; otherwise one message per field.
  std::vector<std::string> validate() const;
  nlohmann::json to_json() const;
  /// Starts from `base` and overrides fields present in `j`. Unknown fields
  /// and type errors are collected in `errors`, one entry per field.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base, std::vector<std::string>& errors);
};

/// Rescales rewards to (r - r_min + 0.001) / (r_max - r_min) and recomputes
/// the statistics. Refuses constant rewards and already-normalised data.
void normalize_rewards(OfflineDataset& dataset);

/// Image of a raw reward of 0 under the normalisation of `raw`.
double normalized_zero_reward(const OfflineDataset& raw);

struct BufferItem {
  Transition t;
  std::size_t origin = 0;  // dataset row the rollout branched from
  bool penalized = false;
};

/// Fixed-capacity FIFO ring; the oldest items are overwritten first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}
  void push(BufferItem item);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const BufferItem& at(std::size_t i) const { return items_.at(i); }
  const BufferItem& sample(Rng& rng) const { return items_[uniform_index(rng, items_.size())]; }
  std::size_t total_pushed() const { return total_pushed_; }

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::size_t total_pushed_ = 0;
  std::vector<BufferItem> items_;
};

struct RolloutStats {
  std::size_t transitions = 0;
  std::size_t penalized = 0;
};

/// Branch rollouts of at most `horizon` steps from uniformly drawn dataset
/// states, truncated at predicted termination.
RolloutStats generate_rollouts(const agent::Agent& agent, const dynamics::DynamicsEnsemble& model,
                               const OfflineDataset& dataset, int horizon, int n_samples, ReplayBuffer& buffer,
                               Rng& rng);

struct MixedStats {
  std::size_t from_env = 0;
  bool fell_back = false;
};

/// Each row comes from the dataset with probability f, otherwise from the
/// model buffer; an empty model buffer sends every draw to the dataset.
/// `env_weights` (per dataset row, may be empty) fills the batch weights.
/// Done rows are absorbing unless they came from a penalised prediction.
agent::TransitionBatch mixed_sample(const OfflineDataset& dataset, const ReplayBuffer& model_buffer, double f,
                                    int batch_size, const std::vector<double>& env_weights, Rng& rng,
                                    MixedStats* stats = nullptr);

/// Main-loop counters; the warm start is counted separately.
struct ScheduleCounts {
  long iterations = 0;
  long critic_steps = 0;
  long discriminator_steps = 0;
  long actor_steps = 0;
  long warm_iterations = 0;
  long warm_discriminator_steps = 0;
  long warm_actor_steps = 0;
  long rollout_generations = 0;
  long model_retrains = 0;
  long miw_trainings = 0;

  nlohmann::json to_json() const;
  bool operator==(const ScheduleCounts&) const = default;
};

/// Counts implied by the configuration alone.
ScheduleCounts expected_schedule(const RunConfig& config);

struct EpochMetrics {
  int epoch = 0;
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double critic_loss = 0.0;
  double disc_loss = 0.0;
  double actor_loss = 0.0;
  double model_holdout_nll = 0.0;
  double miw_mean_raw = 0.0;  // NaN until omega has been trained
  double miw_std_raw = 0.0;
  long n_penalized_rollouts = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

/// Environment-specific pieces the loop needs.
struct EnvironmentHooks {
  std::function<bool(const Vector&)> termination;
  /// Mean and std of returns of the agent's stochastic policy.
  std::function<pointmass::EvalResult(const agent::Agent&, int n_episodes, std::uint64_t seed)> evaluate;

  static EnvironmentHooks pointmass();
};

class Trainer {
 public:
  /// `dataset` holds raw rewards; they are normalised here.
  Trainer(RunConfig config, OfflineDataset dataset, std::uint64_t seed, EnvironmentHooks hooks = EnvironmentHooks::pointmass());

  /// Model MLE fit and warm start.
  void initialize();
  /// One iteration (1-based index = completed iterations + 1).
  void iterate();
  /// Omega training then weighted (or value-discriminated) model retrain.
  void retrain_model();
  EpochMetrics end_epoch(int epoch);
  std::vector<EpochMetrics> run(const std::function<void(const EpochMetrics&)>& on_epoch = {});

  const RunConfig& config() const { return config_; }
  RunConfig& mutable_config() { return config_; }
  const OfflineDataset& dataset() const { return dataset_; }
  const agent::Agent& agent() const { return agent_; }
  agent::Agent& mutable_agent() { return agent_; }
  const dynamics::DynamicsEnsemble& model() const { return model_; }
  const miw::MiwEstimator& miw() const { return miw_; }
  const ReplayBuffer& model_buffer() const { return model_buffer_; }
  const ScheduleCounts& counts() const { return counts_; }
  const std::vector<double>& env_weights() const { return env_weights_; }
  double terminal_value() const { return terminal_value_; }
  double last_actor_loss() const { return last_actor_loss_; }
  std::uint64_t seed() const { return seed_; }
  bool initialized() const { return initialized_; }

  void save_checkpoints(const std::filesystem::path& dir) const;

 private:
  agent::AgentConfig agent_config() const;
  void warm_start();

  RunConfig config_;
  OfflineDataset dataset_;
  std::uint64_t seed_;
  EnvironmentHooks hooks_;
  Rng rng_;
  agent::Agent agent_;
  dynamics::DynamicsEnsemble model_;
  miw::MiwEstimator miw_;
  ReplayBuffer model_buffer_;
  std::vector<double> env_weights_;  // normalised omega per dataset row; empty until trained
  ScheduleCounts counts_;
  bool initialized_ = false;
  double last_actor_loss_ = 0.0;
  double terminal_value_ = 0.0;

  // Per-epoch accumulators.
  double sum_critic_ = 0.0, sum_disc_ = 0.0, sum_actor_ = 0.0;
  long n_critic_ = 0, n_disc_ = 0, n_actor_ = 0;
  long penalized_ = 0;
};

struct RunResult {
  std::vector<EpochMetrics> metrics;
  ScheduleCounts counts;
  double dataset_mean_return = 0.0;
};

/// Trains one seed end to end; writes checkpoints under `out_dir` when it is
/// not empty.
RunResult run_ampl(const RunConfig& config, const OfflineDataset& dataset, std::uint64_t seed,
                   const std::filesystem::path& out_dir = {},
                   const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace ampl
