#pragma once

#include "ampl/common.hpp"
#include "ampl/dataset.hpp"
#include "ampl/nn.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Marginal importance weights omega(s, a) learned by the fixed-point loss
//   (mean_B[omega Q] - y)^2,  y = gamma mean_B[omega' Q'(s', a')] + (1 - gamma) mean_init[Q'(s0, a0)]
// with a hinge penalty keeping the batch mean of omega below g.
namespace ampl::miw {

enum class TestFunctionMode { kCritic, kReward };

std::string to_string(TestFunctionMode mode);
TestFunctionMode parse_test_function_mode(const std::string& name);

struct MiwConfig {
  double alpha = 0.5;
  double g_constraint = 10.0;
  double penalty_kappa = 100.0;
  double ema_rate = 0.01;
  double lr = 1e-6;
  int batch_size = 1024;
  int init_batch_size = 2048;
  double grad_clip = 1.0;
  int n_steps = 100000;
  std::vector<int> hidden = {400, 300};
  double last_layer_init = 0.003;
  TestFunctionMode test_function = TestFunctionMode::kCritic;

  static MiwConfig desk_scale();
};

/// Actions for a batch of states (one column each).
using PolicySampler = std::function<Matrix(const Matrix& states, Rng& rng)>;

/// The function omega is tested against. `live` is Q, `target` is Q'.
class TestFunction {
 public:
  virtual ~TestFunction() = default;
  virtual Vector live(const Matrix& states, const Matrix& actions) const = 0;
  virtual Vector target(const Matrix& states, const Matrix& actions) const = 0;
  /// Called after every omega step with the estimator's EMA rate.
  virtual void soft_update(double /*rate*/) {}
};

/// Live Q frozen at a critic snapshot; Q' starts at the critic target and
/// tracks Q by soft updates.
class CriticTestFunction : public TestFunction {
 public:
  CriticTestFunction(nn::Mlp net, nn::ParamVector q, nn::ParamVector q_target);
  Vector live(const Matrix& states, const Matrix& actions) const override;
  Vector target(const Matrix& states, const Matrix& actions) const override;
  void soft_update(double rate) override;
  const nn::ParamVector& q_params() const { return q_; }
  const nn::ParamVector& q_target_params() const { return q_target_; }

 private:
  nn::Mlp net_;
  nn::ParamVector q_;
  nn::ParamVector q_target_;
};

/// A fixed function used as both Q and Q'.
class FixedTestFunction : public TestFunction {
 public:
  using Fn = std::function<Vector(const Matrix& states, const Matrix& actions)>;
  explicit FixedTestFunction(Fn fn) : fn_(std::move(fn)) {}
  Vector live(const Matrix& s, const Matrix& a) const override { return fn_(s, a); }
  Vector target(const Matrix& s, const Matrix& a) const override { return fn_(s, a); }

 private:
  Fn fn_;
};

/// Test-function values for one minibatch; only omega depends on parameters.
struct MiwBatch {
  Matrix states, actions;  // the (s, a) of B
  Vector q;                // Q(s, a)
  Vector q_next_target;    // Q'(s', a'), zero where s' is terminal
  Vector q_init_target;    // Q'(s0, a0) over B_init
};

struct ResidualTerms {
  double l1 = 0.0;
  double y = 0.0;
  double mean_omega = 0.0;
  double penalty = 0.0;
  double loss = 0.0;
};

/// Loss pieces from omega values on B and target omega' values on B.
ResidualTerms residual_terms(const Vector& omega, const Vector& omega_target, const MiwBatch& batch, double gamma,
                             const MiwConfig& config);

struct MiwTrainStats {
  int steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double mean_loss = 0.0;
};

class MiwEstimator {
 public:
  MiwEstimator() = default;
  MiwEstimator(int state_dim, int action_dim, MiwConfig config, Rng& rng);

  const MiwConfig& config() const { return config_; }
  MiwConfig& mutable_config() { return config_; }
  const nn::Mlp& network() const { return net_; }
  const nn::ParamVector& params() const { return params_; }
  const nn::ParamVector& target_params() const { return target_; }
  void set_params(nn::ParamVector p);
  void set_target_params(nn::ParamVector p);
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  bool trained() const { return total_steps_ > 0; }
  long total_steps() const { return total_steps_; }

  Vector forward(const Matrix& states, const Matrix& actions) const;
  Vector forward_target(const Matrix& states, const Matrix& actions) const;

  /// Test hook: zero last-layer weights and a bias giving omega == value
  /// everywhere, for both omega and omega'.
  void set_constant(double value);

  MiwBatch make_batch(const OfflineDataset& dataset, std::span<const std::size_t> rows,
                      std::span<const std::size_t> init_rows, const PolicySampler& policy,
                      const TestFunction& test_fn, Rng& rng) const;

  /// Loss of `params` on a batch, with omega' from the current target; adds
  /// the gradient into `grad` when given.
  double minibatch_loss(const nn::ParamVector& params, const MiwBatch& batch, double gamma,
                        nn::ParamVector* grad) const;

  /// n_steps Adam updates, continuing from the current parameters.
  MiwTrainStats train(const OfflineDataset& dataset, TestFunction& test_fn, const PolicySampler& policy, double gamma,
                      int n_steps, Rng& rng);

  std::vector<double> raw_weights(const OfflineDataset& dataset) const;
  /// Raw weights divided by their dataset mean.
  std::vector<double> normalized_weights(const OfflineDataset& dataset) const;

  nn::Checkpoint to_checkpoint() const;
  static MiwEstimator from_checkpoint(const nn::Checkpoint& ck);

 private:
  Matrix inputs(const Matrix& states, const Matrix& actions) const;

  MiwConfig config_;
  int state_dim_ = 0;
  int action_dim_ = 0;
  nn::Mlp net_;
  nn::ParamVector params_;
  nn::ParamVector target_;
  nn::AdamState adam_;
  long total_steps_ = 0;
};

/// Writes `index,raw_omega,normalized_omega,log_normalized_omega` rows.
void write_weights_csv(const std::string& path, const std::vector<double>& raw);

}  // namespace ampl::miw
