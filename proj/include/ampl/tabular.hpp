#pragma once

#include "ampl/common.hpp"

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

// Finite MDPs and exact linear-algebra oracles for the distributional
// quantities the training pipeline only ever estimates: discounted stationary
// distributions, action values, marginal importance weights, the weight
// operator and its contraction constant, and the model-error bound.
//
// Tables over (s, a) are S x A matrices. Transitions are stored as an
// (S * A) x S matrix whose row s * A + a is P(. | s, a).
namespace ampl::tabular {

/// (s, a) pairs where the behaviour distribution has no mass.
class ZeroSupportError : public std::runtime_error {
 public:
  explicit ZeroSupportError(std::vector<std::pair<int, int>> pairs);
  const std::vector<std::pair<int, int>>& pairs() const { return pairs_; }

 private:
  std::vector<std::pair<int, int>> pairs_;
};

/// KL(p || q) is infinite: q vanishes where p does not.
class AbsoluteContinuityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TabularMdp {
  int n_states = 0;
  int n_actions = 0;
  Matrix transition;  // (S*A) x S
  Matrix reward;      // S x A
  double r_max = 1.0;
  double gamma = 0.95;
  Vector mu0;

  Eigen::Index row(int s, int a) const { return static_cast<Eigen::Index>(s) * n_actions + a; }
  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static TabularMdp from_json(const nlohmann::json& j);
};

struct TabularPolicy {
  Matrix probs;  // S x A, rows sum to one

  int n_states() const { return static_cast<int>(probs.rows()); }
  int n_actions() const { return static_cast<int>(probs.cols()); }
  void validate() const;
};

inline constexpr double kSumTolerance = 1e-12;

Matrix stationary_distribution(const TabularMdp& mdp, const TabularPolicy& pi);
/// Largest entrywise violation of the stationary recursion by `d`.
double stationary_residual(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& d);

Matrix exact_q(const TabularMdp& mdp, const TabularPolicy& pi);
double bellman_residual(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& q);

/// (1 - gamma) E_{mu0, pi}[Q]
double expected_return(const TabularMdp& mdp, const TabularPolicy& pi);
/// E_{d_pi}[r], the stationary-distribution form of the same quantity.
double expected_return_stationary(const TabularMdp& mdp, const TabularPolicy& pi);

/// d_pi / d_pi_b. Throws ZeroSupportError where d_pi_b vanishes.
Matrix true_miw(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b);

/// One application of the weight operator whose fixed point is true_miw.
Matrix apply_weight_operator(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b,
                             const Matrix& omega);
/// Same, with the behaviour distribution already computed.
Matrix apply_weight_operator(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& d_behavior,
                             const Matrix& omega);

/// max_{s',a'} pi(a'|s') / pi_b(a'|s') * c(s'). Values >= 1 are returned as-is.
double contraction_constant(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b);

struct BoundCheck {
  double lhs = 0.0;  // |J(pi, P*) - J(pi, P_hat)|
  double rhs = 0.0;  // gamma r_max / (sqrt(2)(1 - gamma)) * sqrt(D_pi)
  double weighted_kl = 0.0;
};

/// Exact evaluation of both sides of the model-error bound. `model` shares
/// reward, gamma and mu0 with `mdp`; only its transitions differ.
/// `prefactor_sign` exists so the verification suite can inject a fault.
BoundCheck evaluation_error_bound(const TabularMdp& mdp, const TabularMdp& model, const TabularPolicy& pi,
                                  const TabularPolicy& pi_b, double prefactor_sign = 1.0);

/// l1(omega) - l2(omega) for the test table q, by exact summation.
double fixed_point_identity_residual(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b,
                                     const Matrix& omega, const Matrix& q);

double kl_discrete(const Vector& p, const Vector& q);

/// KL(P* pi_b || P_hat pi) - KL(P* || P_hat) for one conditional (s, a):
/// `p_star`, `p_hat` are distributions over s', `pi_b`, `pi` are S x A.
double conditional_kl_gap(const Vector& p_star, const Vector& p_hat, const Matrix& pi_b, const Matrix& pi);

struct JointKlComparison {
  double expected_conditional_kl = 0.0;  // E_{d_b(s,a)} KL(P* pi_b || P_hat pi)
  double joint_kl = 0.0;                 // KL(d_b(s,a) P* pi_b || d_b(s) pi(a|s) P_hat pi)
};
JointKlComparison joint_kl_comparison(const TabularMdp& mdp, const TabularMdp& model, const TabularPolicy& pi,
                                      const TabularPolicy& pi_b);

// --- generators ----------------------------------------------------------

Vector dirichlet_ones(int n, Rng& rng);
/// Dirichlet(1) rows, rewards U[-1, 1], uniform mu0.
TabularMdp random_mdp(int n_states, int n_actions, Rng& rng, double gamma = 0.95);
TabularPolicy random_policy(int n_states, int n_actions, Rng& rng);
/// Each transition row mixed with an independent Dirichlet(1) row at rate eps.
TabularMdp perturb_model(const TabularMdp& mdp, double eps, Rng& rng);
/// (1 - eps) * base + eps * other, row by row.
TabularPolicy mix_policies(const TabularPolicy& base, const TabularPolicy& other, double eps);

}  // namespace ampl::tabular
