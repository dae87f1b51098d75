#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace oracle {

namespace tab = ampl::tabular;

Vector fd_gradient(const std::function<double(const ampl::nn::ParamVector&)>& f, ampl::nn::ParamVector p,
                   double h) {
  Vector g(static_cast<Eigen::Index>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = p[i];
    p[i] = x + h;
    const double up = f(p);
    p[i] = x - h;
    const double down = f(p);
    p[i] = x;
    g[static_cast<Eigen::Index>(i)] = (up - down) / (2.0 * h);
  }
  return g;
}

Matrix fd_gradient(const std::function<double(const Matrix&)>& f, Matrix x, double h) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double v = x(i, j);
      x(i, j) = v + h;
      const double up = f(x);
      x(i, j) = v - h;
      const double down = f(x);
      x(i, j) = v;
      g(i, j) = (up - down) / (2.0 * h);
    }
  return g;
}

double max_relative_error(const Vector& analytic, const Vector& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw std::invalid_argument("size mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

namespace {

double best_of_two(const Vector& analytic, const Vector& coarse, const Vector& fine, double floor) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    auto rel = [&](double n) { return std::abs(analytic[i] - n) / std::max({std::abs(analytic[i]), std::abs(n), floor}); };
    worst = std::max(worst, std::min(rel(coarse[i]), rel(fine[i])));
  }
  return worst;
}

}  // namespace

double gradient_check(const std::function<double(const ampl::nn::ParamVector&)>& f, const ampl::nn::ParamVector& p,
                      const Vector& analytic, double floor) {
  return best_of_two(analytic, fd_gradient(f, p, 1e-5), fd_gradient(f, p, 1e-6), floor);
}

double gradient_check(const std::function<double(const Matrix&)>& f, const Matrix& x, const Matrix& analytic,
                      double floor) {
  return best_of_two(analytic.reshaped(), fd_gradient(f, x, 1e-5).reshaped(), fd_gradient(f, x, 1e-6).reshaped(),
                     floor);
}

Matrix stationary_by_iteration(const tab::TabularMdp& mdp, const tab::TabularPolicy& pi, int steps) {
  const int S = mdp.n_states, A = mdp.n_actions;
  // state-level kernel under pi
  Matrix p_pi = Matrix::Zero(S, S);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) p_pi.row(s) += pi.probs(s, a) * mdp.transition.row(mdp.row(s, a));
  Vector d = mdp.mu0;
  for (int k = 0; k < steps; ++k) d = (1.0 - mdp.gamma) * mdp.mu0 + mdp.gamma * (p_pi.transpose() * d);
  Matrix out(S, A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) out(s, a) = d[s] * pi.probs(s, a);
  return out;
}

Matrix q_by_value_iteration(const tab::TabularMdp& mdp, const tab::TabularPolicy& pi, double tol) {
  const int S = mdp.n_states, A = mdp.n_actions;
  Matrix q = Matrix::Zero(S, A);
  for (int it = 0; it < 100000; ++it) {
    Vector v = (q.array() * pi.probs.array()).rowwise().sum();
    Matrix next(S, A);
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) next(s, a) = mdp.reward(s, a) + mdp.gamma * mdp.transition.row(mdp.row(s, a)).dot(v);
    const double diff = (next - q).cwiseAbs().maxCoeff();
    q = next;
    if (diff < tol) return q;
  }
  throw std::runtime_error("value iteration did not converge");
}

namespace {

int sample_categorical(const Eigen::Ref<const Vector>& p, Rng& rng) {
  double u = ampl::uniform01(rng);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

}  // namespace

Matrix visitation_monte_carlo(const tab::TabularMdp& mdp, const tab::TabularPolicy& pi, long n, Rng& rng) {
  Matrix counts = Matrix::Zero(mdp.n_states, mdp.n_actions);
  for (long i = 0; i < n; ++i) {
    int s = sample_categorical(mdp.mu0, rng);
    while (true) {
      const int a = sample_categorical(pi.probs.row(s).transpose(), rng);
      if (ampl::uniform01(rng) < 1.0 - mdp.gamma) {
        counts(s, a) += 1.0;
        break;
      }
      s = sample_categorical(mdp.transition.row(mdp.row(s, a)).transpose(), rng);
    }
  }
  return counts / static_cast<double>(n);
}

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  if (n <= 0 || n % 2 != 0) throw std::invalid_argument("simpson needs an even interval count");
  const double h = (b - a) / n;
  double sum = f(a) + f(b);
  for (int i = 1; i < n; ++i) sum += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return sum * h / 3.0;
}

Matrix weighted_counts(int n_states, int n_actions, const std::vector<int>& s, const std::vector<int>& a,
                       const std::vector<int>& s_next, const std::vector<double>& w) {
  Matrix c = Matrix::Zero(static_cast<Eigen::Index>(n_states) * n_actions, n_states);
  for (std::size_t i = 0; i < s.size(); ++i) c(s[i] * n_actions + a[i], s_next[i]) += w[i];
  for (Eigen::Index r = 0; r < c.rows(); ++r) {
    const double total = c.row(r).sum();
    if (total > 0.0) c.row(r) /= total;
  }
  return c;
}

double normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

// --- one-hot embedding --------------------------------------------------

Vector OneHotProblem::state(int s) const { return Vector::Unit(mdp.n_states, s); }
Vector OneHotProblem::action(int a) const { return Vector::Unit(mdp.n_actions, a); }

int OneHotProblem::decode_state(const Vector& x) const {
  Eigen::Index i = 0;
  x.maxCoeff(&i);
  return static_cast<int>(i);
}

ampl::miw::PolicySampler OneHotProblem::sampler() const {
  return [this](const Matrix& states, Rng& rng) {
    Matrix out = Matrix::Zero(mdp.n_actions, states.cols());
    for (Eigen::Index j = 0; j < states.cols(); ++j) {
      const int s = decode_state(states.col(j));
      out(sample_categorical(pi.probs.row(s).transpose(), rng), j) = 1.0;
    }
    return out;
  };
}

std::function<Vector(const Matrix&, const Matrix&)> OneHotProblem::q_table() const {
  return [this](const Matrix& states, const Matrix& actions) {
    Vector out(states.cols());
    for (Eigen::Index j = 0; j < states.cols(); ++j) {
      Eigen::Index s = 0, a = 0;
      states.col(j).maxCoeff(&s);
      actions.col(j).maxCoeff(&a);
      out[j] = q_pi(s, a);
    }
    return out;
  };
}

Matrix OneHotProblem::evaluate(const ampl::miw::MiwEstimator& est) const {
  const int S = mdp.n_states, A = mdp.n_actions;
  Matrix states(S, S * A), actions(A, S * A);
  states.setZero();
  actions.setZero();
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      states(s, s * A + a) = 1.0;
      actions(a, s * A + a) = 1.0;
    }
  Vector w = est.forward(states, actions);
  Matrix out(S, A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) out(s, a) = w[s * A + a];
  return out;
}

OneHotProblem one_hot_problem(std::uint64_t seed, double tv, int n_transitions, int n_states, int n_actions,
                              double gamma) {
  Rng rng(seed);
  OneHotProblem p;
  p.mdp = tab::random_mdp(n_states, n_actions, rng, gamma);
  // behaviour policy kept away from zero so every (s, a) is covered
  tab::TabularPolicy uniform{Matrix::Constant(n_states, n_actions, 1.0 / n_actions)};
  p.pi_b = tab::mix_policies(tab::random_policy(n_states, n_actions, rng), uniform, 0.5);
  tab::TabularPolicy other = tab::random_policy(n_states, n_actions, rng);
  double worst = 0.0;
  for (int s = 0; s < n_states; ++s)
    worst = std::max(worst, 0.5 * (p.pi_b.probs.row(s) - other.probs.row(s)).cwiseAbs().sum());
  const double eps = worst > 0.0 ? std::min(1.0, tv / worst) : 0.0;
  p.pi = tab::mix_policies(p.pi_b, other, eps);
  for (int s = 0; s < n_states; ++s)
    p.max_tv = std::max(p.max_tv, 0.5 * (p.pi.probs.row(s) - p.pi_b.probs.row(s)).cwiseAbs().sum());

  p.q_pi = q_by_value_iteration(p.mdp, p.pi);
  const Matrix d_pi = stationary_by_iteration(p.mdp, p.pi, 2000);
  const Matrix d_b = stationary_by_iteration(p.mdp, p.pi_b, 2000);
  p.omega_star = d_pi.cwiseQuotient(d_b);

  // (s, a) ~ d_b, s' ~ P(.|s, a)
  Vector flat(n_states * n_actions);
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) flat[s * n_actions + a] = d_b(s, a);
  flat /= flat.sum();
  auto& ds = p.dataset;
  ds.state_dim = n_states;
  ds.action_dim = n_actions;
  for (int i = 0; i < n_transitions; ++i) {
    const int k = sample_categorical(flat, rng);
    const int s = k / n_actions, a = k % n_actions;
    const int s2 = sample_categorical(p.mdp.transition.row(p.mdp.row(s, a)).transpose(), rng);
    ampl::Transition t;
    t.s = p.state(s);
    t.a = p.action(a);
    t.r = p.mdp.reward(s, a);
    t.s_next = p.state(s2);
    ds.transitions.push_back(std::move(t));
  }
  ds.episode_lengths = {static_cast<std::size_t>(n_transitions)};
  for (int i = 0; i < std::max(1000, n_transitions / 4); ++i)
    ds.initial_states.push_back(p.state(sample_categorical(p.mdp.mu0, rng)));
  ds.recompute_stats();
  return p;
}

}  // namespace oracle
