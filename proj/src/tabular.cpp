#include "ampl/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ampl::tabular {

namespace {

std::string describe_pairs(const std::vector<std::pair<int, int>>& pairs) {
  std::ostringstream os;
  os << "behaviour distribution has zero mass at " << pairs.size() << " (s,a) pair(s):";
  for (std::size_t i = 0; i < pairs.size() && i < 16; ++i) os << " (" << pairs[i].first << "," << pairs[i].second << ")";
  if (pairs.size() > 16) os << " ...";
  return os.str();
}

void check_shapes(const TabularMdp& mdp, const TabularPolicy& pi) {
  if (pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions)
    throw std::invalid_argument("policy shape does not match the MDP");
}

// P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)
Matrix state_kernel(const TabularMdp& mdp, const TabularPolicy& pi) {
  Matrix k = Matrix::Zero(mdp.n_states, mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) k.row(s) += pi.probs(s, a) * mdp.transition.row(mdp.row(s, a));
  return k;
}

// (P pi q)(s, a) = sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') q(s', a')
Matrix next_expectation(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& q) {
  Vector v = (pi.probs.cwiseProduct(q)).rowwise().sum();
  Vector flat = mdp.transition * v;
  Matrix out(mdp.n_states, mdp.n_actions);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) out(s, a) = flat[mdp.row(s, a)];
  return out;
}

Matrix checked_behavior(const TabularMdp& mdp, const TabularPolicy& pi_b) {
  Matrix d = stationary_distribution(mdp, pi_b);
  std::vector<std::pair<int, int>> zero;
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a)
      if (!(d(s, a) > 0.0)) zero.emplace_back(s, a);
  if (!zero.empty()) throw ZeroSupportError(std::move(zero));
  return d;
}

void check_probability_vector(const Eigen::Ref<const Vector>& p, const std::string& what) {
  if ((p.array() < 0.0).any()) throw std::invalid_argument(what + " has a negative entry");
  if (std::abs(p.sum() - 1.0) > kSumTolerance) throw std::invalid_argument(what + " does not sum to 1");
}

}  // namespace

ZeroSupportError::ZeroSupportError(std::vector<std::pair<int, int>> pairs)
    : std::runtime_error(describe_pairs(pairs)), pairs_(std::move(pairs)) {}

void TabularMdp::validate() const {
  if (n_states <= 0 || n_actions <= 0) throw std::invalid_argument("MDP needs at least one state and one action");
  if (transition.rows() != n_states * n_actions || transition.cols() != n_states)
    throw std::invalid_argument("transition must be (S*A) x S");
  if (reward.rows() != n_states || reward.cols() != n_actions) throw std::invalid_argument("reward must be S x A");
  if (mu0.size() != n_states) throw std::invalid_argument("mu0 must have S entries");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
  if (!(r_max > 0.0)) throw std::invalid_argument("r_max must be positive");
  for (Eigen::Index r = 0; r < transition.rows(); ++r)
    check_probability_vector(transition.row(r).transpose(), "transition row " + std::to_string(r));
  check_probability_vector(mu0, "mu0");
  if (reward.cwiseAbs().maxCoeff() > r_max) throw std::invalid_argument("|reward| exceeds r_max");
}

nlohmann::json TabularMdp::to_json() const {
  nlohmann::json j;
  j["n_states"] = n_states;
  j["n_actions"] = n_actions;
  j["gamma"] = gamma;
  j["r_max"] = r_max;
  j["mu0"] = std::vector<double>(mu0.data(), mu0.data() + mu0.size());
  auto& t = j["transition"] = nlohmann::json::array();
  auto& r = j["reward"] = nlohmann::json::array();
  for (int s = 0; s < n_states; ++s) {
    nlohmann::json per_action = nlohmann::json::array();
    nlohmann::json rewards = nlohmann::json::array();
    for (int a = 0; a < n_actions; ++a) {
      Vector p = transition.row(row(s, a)).transpose();
      per_action.push_back(std::vector<double>(p.data(), p.data() + p.size()));
      rewards.push_back(reward(s, a));
    }
    t.push_back(per_action);
    r.push_back(rewards);
  }
  return j;
}

TabularMdp TabularMdp::from_json(const nlohmann::json& j) {
  TabularMdp m;
  m.n_states = j.at("n_states");
  m.n_actions = j.at("n_actions");
  m.gamma = j.at("gamma");
  auto mu = j.at("mu0").get<std::vector<double>>();
  m.mu0 = Eigen::Map<Vector>(mu.data(), static_cast<Eigen::Index>(mu.size()));
  m.transition = Matrix::Zero(m.n_states * m.n_actions, m.n_states);
  m.reward = Matrix::Zero(m.n_states, m.n_actions);
  const auto& t = j.at("transition");
  const auto& r = j.at("reward");
  if (t.size() != static_cast<std::size_t>(m.n_states) || r.size() != static_cast<std::size_t>(m.n_states))
    throw std::invalid_argument("transition/reward outer dimension must equal n_states");
  for (int s = 0; s < m.n_states; ++s) {
    if (t[s].size() != static_cast<std::size_t>(m.n_actions) || r[s].size() != static_cast<std::size_t>(m.n_actions))
      throw std::invalid_argument("transition/reward inner dimension must equal n_actions");
    for (int a = 0; a < m.n_actions; ++a) {
      auto row = t[s][a].get<std::vector<double>>();
      if (row.size() != static_cast<std::size_t>(m.n_states))
        throw std::invalid_argument("transition rows must have n_states entries");
      for (int sp = 0; sp < m.n_states; ++sp) m.transition(m.row(s, a), sp) = row[sp];
      m.reward(s, a) = r[s][a].get<double>();
    }
  }
  m.r_max = j.contains("r_max") ? j.at("r_max").get<double>() : std::max(m.reward.cwiseAbs().maxCoeff(), 1e-300);
  m.validate();
  return m;
}

void TabularPolicy::validate() const {
  for (Eigen::Index s = 0; s < probs.rows(); ++s)
    check_probability_vector(probs.row(s).transpose(), "policy row " + std::to_string(s));
}

Matrix stationary_distribution(const TabularMdp& mdp, const TabularPolicy& pi) {
  check_shapes(mdp, pi);
  const int n = mdp.n_states;
  Matrix system = Matrix::Identity(n, n) - mdp.gamma * state_kernel(mdp, pi).transpose();
  Eigen::PartialPivLU<Matrix> lu(system);
  Vector d_state = lu.solve((1.0 - mdp.gamma) * mdp.mu0);
  if (!d_state.allFinite()) throw std::runtime_error("stationary_distribution: linear solve failed");
  Matrix d(n, mdp.n_actions);
  for (int s = 0; s < n; ++s) d.row(s) = d_state[s] * pi.probs.row(s);
  return d;
}

double stationary_residual(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& d) {
  // gamma * pi(a'|s') * sum_{s,a} P(s'|s,a) d(s,a) + (1-gamma) mu0(s') pi(a'|s') - d(s',a')
  Vector inflow = Vector::Zero(mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) inflow += d(s, a) * mdp.transition.row(mdp.row(s, a)).transpose();
  double worst = 0.0;
  for (int sp = 0; sp < mdp.n_states; ++sp)
    for (int ap = 0; ap < mdp.n_actions; ++ap) {
      double rhs = (mdp.gamma * inflow[sp] + (1.0 - mdp.gamma) * mdp.mu0[sp]) * pi.probs(sp, ap);
      worst = std::max(worst, std::abs(rhs - d(sp, ap)));
    }
  return worst;
}

Matrix exact_q(const TabularMdp& mdp, const TabularPolicy& pi) {
  check_shapes(mdp, pi);
  const int n = mdp.n_states;
  Vector r_pi = (pi.probs.cwiseProduct(mdp.reward)).rowwise().sum();
  Matrix system = Matrix::Identity(n, n) - mdp.gamma * state_kernel(mdp, pi);
  Vector v = Eigen::PartialPivLU<Matrix>(system).solve(r_pi);
  if (!v.allFinite()) throw std::runtime_error("exact_q: linear solve failed");
  Vector next = mdp.transition * v;
  Matrix q(n, mdp.n_actions);
  for (int s = 0; s < n; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) q(s, a) = mdp.reward(s, a) + mdp.gamma * next[mdp.row(s, a)];
  return q;
}

double bellman_residual(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& q) {
  return (mdp.reward + mdp.gamma * next_expectation(mdp, pi, q) - q).cwiseAbs().maxCoeff();
}

double expected_return(const TabularMdp& mdp, const TabularPolicy& pi) {
  Matrix q = exact_q(mdp, pi);
  Vector v = (pi.probs.cwiseProduct(q)).rowwise().sum();
  return (1.0 - mdp.gamma) * mdp.mu0.dot(v);
}

double expected_return_stationary(const TabularMdp& mdp, const TabularPolicy& pi) {
  return stationary_distribution(mdp, pi).cwiseProduct(mdp.reward).sum();
}

Matrix true_miw(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b) {
  check_shapes(mdp, pi_b);
  Matrix d_b = checked_behavior(mdp, pi_b);
  return stationary_distribution(mdp, pi).cwiseQuotient(d_b);
}

Matrix apply_weight_operator(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b,
                             const Matrix& omega) {
  check_shapes(mdp, pi_b);
  return apply_weight_operator(mdp, pi, checked_behavior(mdp, pi_b), omega);
}

Matrix apply_weight_operator(const TabularMdp& mdp, const TabularPolicy& pi, const Matrix& d_behavior,
                             const Matrix& omega) {
  check_shapes(mdp, pi);
  Vector inflow = Vector::Zero(mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a)
      inflow += omega(s, a) * d_behavior(s, a) * mdp.transition.row(mdp.row(s, a)).transpose();
  Matrix out(mdp.n_states, mdp.n_actions);
  for (int sp = 0; sp < mdp.n_states; ++sp)
    for (int ap = 0; ap < mdp.n_actions; ++ap)
      out(sp, ap) = (mdp.gamma * inflow[sp] + (1.0 - mdp.gamma) * mdp.mu0[sp]) * pi.probs(sp, ap) /
                    d_behavior(sp, ap);
  return out;
}

double contraction_constant(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b) {
  check_shapes(mdp, pi);
  check_shapes(mdp, pi_b);
  Matrix d_b = stationary_distribution(mdp, pi_b);
  Vector inflow = Vector::Zero(mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a)
      inflow += d_b(s, a) * mdp.transition.row(mdp.row(s, a)).transpose();
  double c = 0.0;
  for (int sp = 0; sp < mdp.n_states; ++sp) {
    double start = (1.0 - mdp.gamma) * mdp.mu0[sp];
    double c_state = 1.0 - start / (mdp.gamma * inflow[sp] + start);
    for (int ap = 0; ap < mdp.n_actions; ++ap) {
      if (pi.probs(sp, ap) == 0.0) continue;
      if (pi_b.probs(sp, ap) == 0.0)
        throw std::domain_error("contraction_constant: pi_b(" + std::to_string(ap) + "|" + std::to_string(sp) +
                                ") = 0 where pi is positive");
      c = std::max(c, pi.probs(sp, ap) / pi_b.probs(sp, ap) * c_state);
    }
  }
  return c;
}

double kl_discrete(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_discrete: size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (!(q[i] > 0.0))
      throw AbsoluteContinuityError("kl_discrete: q vanishes at index " + std::to_string(i) + " where p > 0");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

namespace {

// KL(P*(.|s,a) pi_b(.|.) || P_hat(.|s,a) pi(.|.)) over (s', a').
double joint_conditional_kl(const Vector& p_star, const Vector& p_hat, const Matrix& pi_b, const Matrix& pi) {
  const Eigen::Index n_s = p_star.size();
  const Eigen::Index n_a = pi_b.cols();
  Vector p(n_s * n_a), q(n_s * n_a);
  for (Eigen::Index sp = 0; sp < n_s; ++sp)
    for (Eigen::Index ap = 0; ap < n_a; ++ap) {
      p[sp * n_a + ap] = p_star[sp] * pi_b(sp, ap);
      q[sp * n_a + ap] = p_hat[sp] * pi(sp, ap);
    }
  return kl_discrete(p, q);
}

}  // namespace

double conditional_kl_gap(const Vector& p_star, const Vector& p_hat, const Matrix& pi_b, const Matrix& pi) {
  return joint_conditional_kl(p_star, p_hat, pi_b, pi) - kl_discrete(p_star, p_hat);
}

BoundCheck evaluation_error_bound(const TabularMdp& mdp, const TabularMdp& model, const TabularPolicy& pi,
                                  const TabularPolicy& pi_b, double prefactor_sign) {
  if (model.n_states != mdp.n_states || model.n_actions != mdp.n_actions)
    throw std::invalid_argument("model must share the state and action spaces of the MDP");
  TabularMdp known_reward = model;
  known_reward.reward = mdp.reward;
  known_reward.gamma = mdp.gamma;
  known_reward.mu0 = mdp.mu0;

  Matrix d_b = checked_behavior(mdp, pi_b);
  Matrix omega = stationary_distribution(mdp, pi).cwiseQuotient(d_b);
  double weighted_kl = 0.0;
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) {
      Vector p_star = mdp.transition.row(mdp.row(s, a)).transpose();
      Vector p_hat = model.transition.row(mdp.row(s, a)).transpose();
      weighted_kl += d_b(s, a) * omega(s, a) * joint_conditional_kl(p_star, p_hat, pi_b.probs, pi.probs);
    }
  BoundCheck out;
  out.weighted_kl = weighted_kl;
  out.lhs = std::abs(expected_return(mdp, pi) - expected_return(known_reward, pi));
  out.rhs = prefactor_sign * mdp.gamma * mdp.r_max / (std::sqrt(2.0) * (1.0 - mdp.gamma)) *
            std::sqrt(std::max(weighted_kl, 0.0));
  return out;
}

double fixed_point_identity_residual(const TabularMdp& mdp, const TabularPolicy& pi, const TabularPolicy& pi_b,
                                     const Matrix& omega, const Matrix& q) {
  Matrix d_b = stationary_distribution(mdp, pi_b);
  double l1 = d_b.cwiseProduct(omega).cwiseProduct(q).sum();
  double l2 = mdp.gamma * d_b.cwiseProduct(omega).cwiseProduct(next_expectation(mdp, pi, q)).sum() +
              (1.0 - mdp.gamma) * mdp.mu0.dot((pi.probs.cwiseProduct(q)).rowwise().sum());
  return l1 - l2;
}

JointKlComparison joint_kl_comparison(const TabularMdp& mdp, const TabularMdp& model, const TabularPolicy& pi,
                                      const TabularPolicy& pi_b) {
  Matrix d_b = checked_behavior(mdp, pi_b);
  Vector d_b_state = d_b.rowwise().sum();
  const int n_s = mdp.n_states;
  const int n_a = mdp.n_actions;
  JointKlComparison out;
  std::vector<double> p, q;
  p.reserve(static_cast<std::size_t>(n_s * n_a * n_s * n_a));
  q.reserve(p.capacity());
  for (int s = 0; s < n_s; ++s)
    for (int a = 0; a < n_a; ++a) {
      Vector p_star = mdp.transition.row(mdp.row(s, a)).transpose();
      Vector p_hat = model.transition.row(mdp.row(s, a)).transpose();
      out.expected_conditional_kl += d_b(s, a) * joint_conditional_kl(p_star, p_hat, pi_b.probs, pi.probs);
      for (int sp = 0; sp < n_s; ++sp)
        for (int ap = 0; ap < n_a; ++ap) {
          p.push_back(d_b(s, a) * p_star[sp] * pi_b.probs(sp, ap));
          q.push_back(d_b_state[s] * pi.probs(s, a) * p_hat[sp] * pi.probs(sp, ap));
        }
    }
  out.joint_kl = kl_discrete(Eigen::Map<Vector>(p.data(), static_cast<Eigen::Index>(p.size())),
                             Eigen::Map<Vector>(q.data(), static_cast<Eigen::Index>(q.size())));
  return out;
}

Vector dirichlet_ones(int n, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = e(rng);
  return v / v.sum();
}

TabularMdp random_mdp(int n_states, int n_actions, Rng& rng, double gamma) {
  TabularMdp m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  m.transition.resize(n_states * n_actions, n_states);
  for (Eigen::Index r = 0; r < m.transition.rows(); ++r) m.transition.row(r) = dirichlet_ones(n_states, rng).transpose();
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  m.reward.resize(n_states, n_actions);
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) m.reward(s, a) = u(rng);
  m.r_max = std::max(m.reward.cwiseAbs().maxCoeff(), 1e-12);
  m.mu0 = Vector::Constant(n_states, 1.0 / n_states);
  return m;
}

TabularPolicy random_policy(int n_states, int n_actions, Rng& rng) {
  TabularPolicy p;
  p.probs.resize(n_states, n_actions);
  for (int s = 0; s < n_states; ++s) p.probs.row(s) = dirichlet_ones(n_actions, rng).transpose();
  return p;
}

TabularMdp perturb_model(const TabularMdp& mdp, double eps, Rng& rng) {
  TabularMdp model = mdp;
  for (Eigen::Index r = 0; r < model.transition.rows(); ++r)
    model.transition.row(r) = (1.0 - eps) * mdp.transition.row(r) + eps * dirichlet_ones(mdp.n_states, rng).transpose();
  return model;
}

TabularPolicy mix_policies(const TabularPolicy& base, const TabularPolicy& other, double eps) {
  TabularPolicy p;
  p.probs = (1.0 - eps) * base.probs + eps * other.probs;
  return p;
}

}  // namespace ampl::tabular
