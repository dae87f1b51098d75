#pragma once

#include "ampl/common.hpp"
#include "ampl/dataset.hpp"
#include "ampl/nn.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

// Ensemble of Gaussian probabilistic networks over the normalised target
// (r, s' - s). Each member has a double head: the first D outputs are the
// mean, the last D the log standard deviation.
namespace ampl::dynamics {

struct EnsembleConfig {
  int n_members = 7;
  int n_elites = 5;
  std::vector<int> hidden = {400, 300};
  double lr = 1e-3;
  int batch_size = 256;
  int steps_per_epoch = 1000;
  double holdout_fraction = 0.1;

  static EnsembleConfig desk_scale();
};

inline constexpr double kStdFloor = 1e-6;

struct ModelStats {
  Vector input_mean, input_std;    // over (s, a); std floored at kStdFloor
  Vector target_mean, target_std;  // over (r, s' - s)
  double r_range = 0.0;
  Vector state_abs_max;  // max |s| and |s'| per coordinate in the data
};

/// r_range = max(|r_min - 10 sigma_r|, |r_max + 10 sigma_r|).
ModelStats fit_stats(const OfflineDataset& dataset);

/// Frozen state-value estimate used to discriminate model transitions.
class StateValueFn {
 public:
  virtual ~StateValueFn() = default;
  virtual Vector value(const Matrix& states) const = 0;
  /// dV/ds, one column per state.
  virtual Matrix gradient(const Matrix& states) const = 0;
};

struct BatchPrediction {
  Matrix s_next;
  Vector reward;
  std::vector<char> done;
  std::vector<char> penalized;
};

struct Prediction {
  Vector s_next;
  double reward = 0.0;
  bool done = false;
  bool penalized = false;
};

/// Randomness consumed by one batched prediction: which member serves each
/// column and the standard-normal draw for its Gaussian head.
struct PredictionNoise {
  std::vector<std::size_t> member;
  Matrix eps;  // target_dim x n
};

/// Forward record for differentiating sampled next states w.r.t. actions.
struct ReparamTape {
  std::vector<std::size_t> member;
  Matrix eps;
  std::vector<nn::Tape> tapes;                    // one per member, empty if unused
  std::vector<std::vector<Eigen::Index>> columns;  // columns served by each member
  Matrix raw_out;                                  // 2D x n network outputs
};

class DynamicsEnsemble {
 public:
  DynamicsEnsemble() = default;
  DynamicsEnsemble(int state_dim, int action_dim, EnsembleConfig config, Rng& rng);

  const EnsembleConfig& config() const { return config_; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  int target_dim() const { return 1 + state_dim_; }
  const ModelStats& stats() const { return stats_; }
  const std::vector<std::size_t>& elites() const { return elites_; }
  const nn::ParamVector& member_params(std::size_t m) const { return members_.at(m).params; }
  nn::ParamVector& member_params(std::size_t m) { return members_.at(m).params; }
  const nn::Mlp& network() const { return net_; }
  std::size_t n_members() const { return members_.size(); }

  /// Fits normalisation statistics, fixes the holdout split, and draws each
  /// member's bootstrap sample of the training split.
  void prepare(const OfflineDataset& dataset, Rng& rng);
  bool prepared() const { return prepared_; }

  void train_mle(const OfflineDataset& dataset, int epochs, Rng& rng);
  /// Minimises -mean(w_i log p(target_i)) with weights rescaled to mean 1.
  /// Continues from the current parameters.
  void train_weighted_mle(const OfflineDataset& dataset, std::span<const double> weights, int epochs, Rng& rng);
  /// Value-discriminated variant: the next-state head follows
  /// E[w |V(s') - V(s_hat')|], the reward head the weighted likelihood.
  void train_value_discriminated(const OfflineDataset& dataset, std::span<const double> weights,
                                 const StateValueFn& value_fn, int epochs, Rng& rng);

  /// Mean held-out negative log-likelihood of each member.
  std::vector<double> holdout_nll(const OfflineDataset& dataset) const;
  /// Keeps the n_elites members with the lowest held-out NLL (ties: lower index).
  const std::vector<std::size_t>& select_elites(const OfflineDataset& dataset);
  void set_elites(std::vector<std::size_t> elites);
  double elite_holdout_nll(const OfflineDataset& dataset) const;

  PredictionNoise draw_noise(std::size_t n, Rng& rng) const;
  BatchPrediction predict(const Matrix& states, const Matrix& actions, Rng& rng) const;
  BatchPrediction predict(const Matrix& states, const Matrix& actions, const PredictionNoise& noise) const;
  Prediction predict(const Vector& s, const Vector& a, Rng& rng) const;

  /// Denormalised reward-head mean averaged over the elites.
  Vector mean_reward(const Matrix& states, const Matrix& actions) const;

  /// Sampled next states s + denormalised delta, recording what
  /// `next_state_backward` needs.
  Matrix next_state_forward(const Matrix& states, const Matrix& actions, const PredictionNoise& noise,
                            ReparamTape& tape) const;
  /// Returns d(loss)/d(actions) given d(loss)/d(next states).
  Matrix next_state_backward(const ReparamTape& tape, const Matrix& d_next_states) const;

  /// Known environment termination applied to in-range predictions.
  std::function<bool(const Vector&)> termination;
  /// Test hook: replaces every predicted log-std (normalised units).
  std::optional<double> log_std_override;

  /// Weighted NLL of one member's parameters over `rows`, averaged over the
  /// rows; `weights` is indexed by dataset row (empty means all ones). Adds
  /// the gradient into `grad` when given.
  double weighted_nll_loss(const nn::ParamVector& params, const OfflineDataset& dataset,
                           std::span<const std::size_t> rows, std::span<const double> weights,
                           nn::ParamVector* grad) const;
  /// Value-discriminated loss of one member; `eps` is target_dim x rows.size().
  double value_discriminated_loss(const nn::ParamVector& params, const OfflineDataset& dataset,
                                  std::span<const std::size_t> rows, std::span<const double> weights,
                                  const StateValueFn& value_fn, const Matrix& eps, nn::ParamVector* grad) const;

  nn::Checkpoint to_checkpoint() const;
  void load_checkpoint(const nn::Checkpoint& ck);

  const std::vector<std::size_t>& holdout_rows() const { return holdout_; }
  const std::vector<std::size_t>& bootstrap_rows(std::size_t m) const { return members_.at(m).bootstrap; }

 private:
  struct Member {
    nn::ParamVector params;
    nn::AdamState adam;
    std::vector<std::size_t> bootstrap;
  };

  Matrix normalized_inputs(const Matrix& states, const Matrix& actions) const;
  Matrix normalized_inputs(const OfflineDataset& dataset, std::span<const std::size_t> rows) const;
  Matrix normalized_targets(const OfflineDataset& dataset, std::span<const std::size_t> rows) const;
  /// Raw network outputs, column i computed by member[i]; fills `tape` if given.
  Matrix member_forward(const Matrix& x, const std::vector<std::size_t>& member, ReparamTape* tape) const;
  double effective_log_std(double raw) const;
  bool log_std_active(double raw) const;
  template <typename StepFn>
  void train_members(int epochs, Rng& rng, StepFn&& step);

  EnsembleConfig config_;
  int state_dim_ = 0;
  int action_dim_ = 0;
  nn::Mlp net_;
  std::vector<Member> members_;
  std::vector<std::size_t> elites_;
  std::vector<std::size_t> holdout_;
  ModelStats stats_;
  bool prepared_ = false;
  std::size_t prepared_size_ = 0;
};

/// w / mean(w). The mean is taken relative to w[0], so a constant vector maps
/// to exactly 1.0 everywhere. Throws on negative or all-zero weights.
std::vector<double> normalize_to_unit_mean(std::span<const double> weights);

/// Categorical next-state model over a finite MDP, one softmax row per (s, a).
/// Unobserved successors carry logit -inf; the last observed one is pinned at 0.
struct CategoricalModel {
  int n_states = 0;
  int n_actions = 0;
  Matrix logits;  // (S*A) x S

  Matrix probabilities() const;
};

struct DiscreteTransition {
  int s = 0;
  int a = 0;
  int s_next = 0;
};

/// Minimises the unit-mean-weighted NLL of `data` over the categorical family
/// with Newton steps. Rows with no data keep uniform probabilities. Every
/// observed (s, a) row needs positive weight on every next state for the
/// minimiser to be finite.
CategoricalModel fit_weighted_categorical(int n_states, int n_actions, std::span<const DiscreteTransition> data,
                                          std::span<const double> weights, int max_iters = 100);

}  // namespace ampl::dynamics
