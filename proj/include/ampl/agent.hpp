#pragma once

#include "ampl/common.hpp"
#include "ampl/dynamics.hpp"
#include "ampl/nn.hpp"

#include <string>
#include <vector>

// Policy-side networks and losses: an implicit (or Gaussian) policy, twin
// critics with conservative targets, and a discriminator over (s, a) pairs
// that regularises the policy adversarially.
namespace ampl::agent {

enum class GeneratorLoss { kNonSaturating, kSaturating };
enum class PolicyHead { kImplicit, kGaussian };

struct AgentConfig {
  int state_dim = 0;
  int action_dim = 0;
  double max_action = 1.0;
  std::vector<int> hidden = {400, 300};
  int noise_dim = -1;  // < 0 selects min(10, state_dim / 2)
  double sigma_noise = 1.0;
  double gamma = 0.99;
  double beta = 0.005;
  double c_mix = 0.75;
  double lambda_prime = 10.0;
  double critic_lr = 3e-4;
  double actor_lr = 2e-4;
  double disc_lr = 2e-4;
  double gan_beta1 = 0.4;
  double huber_delta = 500.0;
  double critic_grad_clip = 0.1;
  double q_bootstrap_limit = 2000.0;
  double label_low = 0.8;
  double label_high = 1.0;
  bool smooth_labels = true;
  double disc_clamp = 1e-6;
  double q_avg_init = 1.0;
  double terminal_value = 0.0;  // value of the absorbing state behind `absorbing` terminal rows
  GeneratorLoss generator_loss = GeneratorLoss::kNonSaturating;
  PolicyHead head = PolicyHead::kImplicit;
  bool stop_model_gradient = false;

  int resolved_noise_dim() const;
};

/// Rows of a training batch. `weight` carries the frozen normalised omega of
/// each row's source transition (ones when unused).
struct TransitionBatch {
  Matrix s, a;
  Vector r;
  Matrix s_next;
  std::vector<char> done;
  std::vector<char> absorbing;  // done rows that bootstrap from terminal_value; empty means none
  Vector weight;

  Eigen::Index size() const { return s.cols(); }
};

struct FakeBatch {
  Matrix states, actions;
  std::vector<Eigen::Index> source;  // column of the state batch each row came from
  Eigen::Index n_first = 0;          // rows [0, n_first) are (s, a); the rest (s', a')

  Eigen::Index size() const { return states.cols(); }
};

struct PolicyTape {
  nn::Tape tape;
  Matrix z;
  Matrix raw;  // Gaussian head only: pre-squash network output
};

/// a = max_action * tanh(f([s; z])) for the implicit head; the Gaussian head
/// squashes mean + exp(log_std) * z with z standard normal.
class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(int state_dim, int action_dim, double max_action, PolicyHead head, int noise_dim,
            const std::vector<int>& hidden);

  const nn::Mlp& network() const { return net_; }
  PolicyHead head() const { return head_; }
  int noise_rows() const;
  Matrix draw_noise(Eigen::Index n, double sigma, Rng& rng) const;
  Matrix forward(const nn::ParamVector& params, const Matrix& states, const Matrix& z) const;
  Matrix forward(const nn::ParamVector& params, const Matrix& states, const Matrix& z, PolicyTape& tape) const;
  /// Accumulates the parameter gradient; returns d(loss)/d(states).
  Matrix backward(const nn::ParamVector& params, const PolicyTape& tape, const Matrix& d_actions,
                  nn::ParamVector& grad) const;

 private:
  int state_dim_ = 0;
  int action_dim_ = 0;
  double max_action_ = 1.0;
  PolicyHead head_ = PolicyHead::kImplicit;
  int noise_dim_ = 0;
  nn::Mlp net_;
};

/// Noise consumed by one actor loss evaluation.
struct ActorNoise {
  Matrix z;                          // policy noise at s
  dynamics::PredictionNoise model;   // model draw for s'
  Matrix z_next;                     // policy noise at s'
};

struct ActorLossTerms {
  double q_term = 0.0;     // -lambda mean min_j Q_j(s, pi(s, z))
  double generator = 0.0;  // L_g over the fake batch
  double total = 0.0;
  double lambda = 0.0;
  Eigen::Index fake_rows = 0;
};

struct CriticStats {
  double loss1 = 0.0;
  double loss2 = 0.0;
  double mean() const { return 0.5 * (loss1 + loss2); }
};

class Agent {
 public:
  Agent() = default;
  Agent(AgentConfig config, Rng& rng);

  const AgentConfig& config() const { return config_; }
  AgentConfig& mutable_config() { return config_; }
  const PolicyNet& policy() const { return policy_; }
  const nn::Mlp& critic_net() const { return critic_net_; }
  const nn::Mlp& discriminator_net() const { return disc_net_; }

  nn::ParamVector policy_params, policy_target_params;
  nn::ParamVector critic1_params, critic2_params, critic1_target_params, critic2_target_params;
  nn::ParamVector discriminator_params;
  double q_avg = 1.0;

  double lambda() const;

  Matrix sample_actions(const Matrix& states, Rng& rng) const;
  Matrix sample_target_actions(const Matrix& states, Rng& rng) const;
  Vector q_value(const nn::ParamVector& critic, const Matrix& states, const Matrix& actions) const;
  Vector discriminator(const Matrix& states, const Matrix& actions) const;

  /// Targets with target-policy noise `z_next` at the next states.
  Vector conservative_target(const TransitionBatch& batch, const Matrix& z_next) const;
  Vector conservative_target(const TransitionBatch& batch, Rng& rng) const;

  double critic_loss(const nn::ParamVector& critic, const TransitionBatch& batch, const Vector& targets,
                     nn::ParamVector* grad) const;
  double discriminator_loss(const nn::ParamVector& params, const Matrix& true_x, const Vector& labels,
                            const Matrix& fake_x, nn::ParamVector* grad) const;
  ActorNoise draw_actor_noise(Eigen::Index n, const dynamics::DynamicsEnsemble& model, Rng& rng) const;
  /// Actor objective with all randomness supplied. Q term only when
  /// `include_q_term`; `weights` (size n or empty) scale generator terms.
  ActorLossTerms actor_loss(const nn::ParamVector& params, const Matrix& states, const Vector& weights,
                            const dynamics::DynamicsEnsemble& model, const ActorNoise& noise, bool include_q_term,
                            nn::ParamVector* grad) const;

  FakeBatch build_fake_batch(const Matrix& states, const dynamics::DynamicsEnsemble& model, Rng& rng) const;
  Matrix stack(const Matrix& states, const Matrix& actions) const;

  CriticStats critic_update(const TransitionBatch& batch, Rng& rng);
  /// One step on |fake| true pairs sampled by the caller and a fake batch.
  double discriminator_update(const Matrix& true_states, const Matrix& true_actions, const FakeBatch& fake,
                              Rng& rng);
  ActorLossTerms actor_update(const Matrix& states, const Vector& weights, const dynamics::DynamicsEnsemble& model,
                              Rng& rng, bool include_q_term = true);
  void post_step_updates(const Matrix& states, Rng& rng);

  nn::Checkpoint to_checkpoint() const;
  void load_checkpoint(const nn::Checkpoint& ck);
  /// Rebuilds the networks from the checkpoint metadata; optimiser state is fresh.
  static Agent from_checkpoint(const nn::Checkpoint& ck);

  long critic_steps() const { return critic_steps_; }
  long discriminator_steps() const { return disc_steps_; }
  long actor_steps() const { return actor_steps_; }

 private:
  AgentConfig config_;
  PolicyNet policy_;
  nn::Mlp critic_net_;
  nn::Mlp disc_net_;
  nn::AdamState policy_adam_, critic1_adam_, critic2_adam_, disc_adam_;
  long critic_steps_ = 0;
  long disc_steps_ = 0;
  long actor_steps_ = 0;
};

GeneratorLoss parse_generator_loss(const std::string& name);
std::string to_string(GeneratorLoss g);
PolicyHead parse_policy_head(const std::string& name);
std::string to_string(PolicyHead h);

}  // namespace ampl::agent
