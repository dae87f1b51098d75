#include "ampl/miw.hpp"

#include "ampl/dynamics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace ampl::miw {

std::string to_string(TestFunctionMode mode) { return mode == TestFunctionMode::kReward ? "reward" : "critic"; }

TestFunctionMode parse_test_function_mode(const std::string& name) {
  if (name == "critic") return TestFunctionMode::kCritic;
  if (name == "reward") return TestFunctionMode::kReward;
  throw std::invalid_argument("unknown test function mode '" + name + "'");
}

MiwConfig MiwConfig::desk_scale() {
  MiwConfig c;
  c.n_steps = 5000;
  c.hidden = {64, 64};
  c.lr = 1e-4;
  c.batch_size = 256;
  c.init_batch_size = 512;
  return c;
}

CriticTestFunction::CriticTestFunction(nn::Mlp net, nn::ParamVector q, nn::ParamVector q_target)
    : net_(std::move(net)), q_(std::move(q)), q_target_(std::move(q_target)) {
  if (!q_.same_shape(q_target_)) throw std::invalid_argument("critic and target layouts differ");
}

namespace {

Matrix stack(const Matrix& s, const Matrix& a) {
  Matrix x(s.rows() + a.rows(), s.cols());
  x.topRows(s.rows()) = s;
  x.bottomRows(a.rows()) = a;
  return x;
}

}  // namespace

Vector CriticTestFunction::live(const Matrix& states, const Matrix& actions) const {
  return net_.forward(q_, stack(states, actions)).row(0).transpose();
}

Vector CriticTestFunction::target(const Matrix& states, const Matrix& actions) const {
  return net_.forward(q_target_, stack(states, actions)).row(0).transpose();
}

void CriticTestFunction::soft_update(double rate) { nn::soft_update(q_target_, q_, rate); }

ResidualTerms residual_terms(const Vector& omega, const Vector& omega_target, const MiwBatch& batch, double gamma,
                             const MiwConfig& config) {
  if (omega.size() != batch.q.size() || omega_target.size() != batch.q.size() ||
      batch.q_next_target.size() != batch.q.size() || batch.q_init_target.size() == 0 || batch.q.size() == 0)
    throw std::invalid_argument("inconsistent MIW batch");
  ResidualTerms t;
  t.l1 = omega.cwiseProduct(batch.q).mean();
  t.y = gamma * omega_target.cwiseProduct(batch.q_next_target).mean() + (1.0 - gamma) * batch.q_init_target.mean();
  t.mean_omega = omega.mean();
  double excess = std::max(0.0, t.mean_omega - config.g_constraint);
  t.penalty = config.penalty_kappa * excess * excess;
  t.loss = (t.l1 - t.y) * (t.l1 - t.y) + t.penalty;
  return t;
}

MiwEstimator::MiwEstimator(int state_dim, int action_dim, MiwConfig config, Rng& rng)
    : config_(std::move(config)), state_dim_(state_dim), action_dim_(action_dim) {
  if (!(config_.alpha > 0.0 && config_.alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
  net_ = nn::Mlp({state_dim + action_dim, config_.hidden, 1, nn::Activation::kLeakyRelu,
                  nn::OutputTransform::softplus_power(config_.alpha)});
  params_ = net_.init_params(rng, config_.last_layer_init);
  target_ = params_;
  adam_ = nn::AdamState::for_params(params_, {config_.lr});
}

void MiwEstimator::set_params(nn::ParamVector p) {
  if (!p.same_shape(params_)) throw std::invalid_argument("omega layout mismatch");
  params_ = std::move(p);
}

void MiwEstimator::set_target_params(nn::ParamVector p) {
  if (!p.same_shape(target_)) throw std::invalid_argument("omega target layout mismatch");
  target_ = std::move(p);
}

Matrix MiwEstimator::inputs(const Matrix& states, const Matrix& actions) const {
  if (states.rows() != state_dim_ || actions.rows() != action_dim_ || states.cols() != actions.cols())
    throw std::invalid_argument("omega input has wrong shape");
  return stack(states, actions);
}

Vector MiwEstimator::forward(const Matrix& states, const Matrix& actions) const {
  return net_.forward(params_, inputs(states, actions)).row(0).transpose();
}

Vector MiwEstimator::forward_target(const Matrix& states, const Matrix& actions) const {
  return net_.forward(target_, inputs(states, actions)).row(0).transpose();
}

void MiwEstimator::set_constant(double value) {
  if (!(value > 0.0)) throw std::invalid_argument("constant omega must be positive");
  double sp = std::pow(value, 1.0 / config_.alpha) - nn::kSoftplusFloor;
  double x = nn::kSoftplusFloor + std::log(std::expm1(sp));
  std::size_t last = net_.n_layers() - 1;
  params_.layer(2 * last).setZero();
  params_.layer(2 * last + 1).setConstant(x);
  target_ = params_;
}

MiwBatch MiwEstimator::make_batch(const OfflineDataset& dataset, std::span<const std::size_t> rows,
                                  std::span<const std::size_t> init_rows, const PolicySampler& policy,
                                  const TestFunction& test_fn, Rng& rng) const {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto n0 = static_cast<Eigen::Index>(init_rows.size());
  MiwBatch b;
  b.states.resize(state_dim_, n);
  b.actions.resize(action_dim_, n);
  Matrix s_next(state_dim_, n);
  Vector alive(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = dataset.transitions.at(rows[static_cast<std::size_t>(i)]);
    b.states.col(i) = t.s;
    b.actions.col(i) = t.a;
    s_next.col(i) = t.s_next;
    alive[i] = t.done ? 0.0 : 1.0;
  }
  Matrix s0(state_dim_, n0);
  for (Eigen::Index i = 0; i < n0; ++i) s0.col(i) = dataset.initial_states.at(init_rows[static_cast<std::size_t>(i)]);
  Matrix a_next = policy(s_next, rng);
  Matrix a0 = policy(s0, rng);
  b.q = test_fn.live(b.states, b.actions);
  b.q_next_target = test_fn.target(s_next, a_next).cwiseProduct(alive);
  b.q_init_target = test_fn.target(s0, a0);
  return b;
}

double MiwEstimator::minibatch_loss(const nn::ParamVector& params, const MiwBatch& batch, double gamma,
                                    nn::ParamVector* grad) const {
  Matrix x = inputs(batch.states, batch.actions);
  nn::Tape tape;
  Vector omega = net_.forward(params, x, tape).row(0).transpose();
  Vector omega_target = net_.forward(target_, x).row(0).transpose();
  ResidualTerms t = residual_terms(omega, omega_target, batch, gamma, config_);
  if (grad) {
    const double inv_n = 1.0 / static_cast<double>(omega.size());
    double excess = std::max(0.0, t.mean_omega - config_.g_constraint);
    Matrix dout(1, omega.size());
    dout.row(0) = (2.0 * (t.l1 - t.y) * inv_n * batch.q.array() + 2.0 * config_.penalty_kappa * excess * inv_n)
                      .matrix()
                      .transpose();
    net_.backward(params, tape, dout, *grad);
  }
  return t.loss;
}

MiwTrainStats MiwEstimator::train(const OfflineDataset& dataset, TestFunction& test_fn, const PolicySampler& policy,
                                  double gamma, int n_steps, Rng& rng) {
  if (dataset.transitions.empty() || dataset.initial_states.empty())
    throw std::invalid_argument("MIW training needs transitions and initial states");
  MiwTrainStats stats;
  std::vector<std::size_t> rows(static_cast<std::size_t>(config_.batch_size));
  std::vector<std::size_t> init_rows(static_cast<std::size_t>(config_.init_batch_size));
  double total = 0.0;
  for (int step = 0; step < n_steps; ++step) {
    for (auto& r : rows) r = uniform_index(rng, dataset.size());
    for (auto& r : init_rows) r = uniform_index(rng, dataset.initial_states.size());
    MiwBatch batch = make_batch(dataset, rows, init_rows, policy, test_fn, rng);
    nn::ParamVector grad = params_.zeros_like();
    double loss = minibatch_loss(params_, batch, gamma, &grad);
    if (!std::isfinite(loss) || !grad.all_finite())
      throw NonFiniteError("MIW loss became non-finite at step " + std::to_string(step) + " (loss " +
                           std::to_string(loss) + ")");
    nn::clip_grad_norm(grad, config_.grad_clip);
    nn::adam_step(adam_, params_, grad);
    nn::soft_update(target_, params_, config_.ema_rate);
    test_fn.soft_update(config_.ema_rate);
    if (step == 0) stats.first_loss = loss;
    stats.last_loss = loss;
    total += loss;
    ++stats.steps;
    ++total_steps_;
  }
  stats.mean_loss = stats.steps > 0 ? total / stats.steps : 0.0;
  return stats;
}

std::vector<double> MiwEstimator::raw_weights(const OfflineDataset& dataset) const {
  const auto n = static_cast<Eigen::Index>(dataset.size());
  Matrix s(state_dim_, n), a(action_dim_, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.col(i) = dataset.transitions[static_cast<std::size_t>(i)].s;
    a.col(i) = dataset.transitions[static_cast<std::size_t>(i)].a;
  }
  Vector w = forward(s, a);
  return {w.data(), w.data() + w.size()};
}

std::vector<double> MiwEstimator::normalized_weights(const OfflineDataset& dataset) const {
  return dynamics::normalize_to_unit_mean(raw_weights(dataset));
}

nn::Checkpoint MiwEstimator::to_checkpoint() const {
  nn::Checkpoint ck;
  ck.tensors["omega"] = params_;
  ck.tensors["omega_target"] = target_;
  ck.meta = {{"kind", "miw-estimator"},
             {"state_dim", state_dim_},
             {"action_dim", action_dim_},
             {"alpha", config_.alpha},
             {"hidden", config_.hidden},
             {"g_constraint", config_.g_constraint},
             {"ema_rate", config_.ema_rate},
             {"test_function", to_string(config_.test_function)},
             {"total_steps", total_steps_}};
  return ck;
}

MiwEstimator MiwEstimator::from_checkpoint(const nn::Checkpoint& ck) {
  const auto& m = ck.meta;
  if (m.value("kind", "") != "miw-estimator") throw std::invalid_argument("not an MIW checkpoint");
  MiwConfig config;
  config.alpha = m.at("alpha");
  config.hidden = m.at("hidden").get<std::vector<int>>();
  config.g_constraint = m.at("g_constraint");
  config.ema_rate = m.at("ema_rate");
  config.test_function = parse_test_function_mode(m.at("test_function"));
  Rng rng(0);
  MiwEstimator est(m.at("state_dim"), m.at("action_dim"), config, rng);
  est.set_params(ck.tensors.at("omega"));
  est.set_target_params(ck.tensors.at("omega_target"));
  est.total_steps_ = m.at("total_steps");
  return est;
}

void write_weights_csv(const std::string& path, const std::vector<double>& raw) {
  std::vector<double> norm = dynamics::normalize_to_unit_mean(raw);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "index,raw_omega,normalized_omega,log_normalized_omega\n" << std::setprecision(17);
  for (std::size_t i = 0; i < raw.size(); ++i)
    out << i << ',' << raw[i] << ',' << norm[i] << ',' << std::log(norm[i]) << '\n';
}

}  // namespace ampl::miw
