#include "ampl/agent.hpp"

#include <algorithm>
#include <cmath>

namespace ampl::agent {

namespace {

Vector row0(const Matrix& m) { return m.row(0).transpose(); }

}  // namespace

int AgentConfig::resolved_noise_dim() const { return noise_dim >= 0 ? noise_dim : std::min(10, state_dim / 2); }

GeneratorLoss parse_generator_loss(const std::string& name) {
  if (name == "non-saturating") return GeneratorLoss::kNonSaturating;
  if (name == "saturating") return GeneratorLoss::kSaturating;
  throw std::invalid_argument("unknown generator loss '" + name + "'");
}

std::string to_string(GeneratorLoss g) { return g == GeneratorLoss::kSaturating ? "saturating" : "non-saturating"; }

PolicyHead parse_policy_head(const std::string& name) {
  if (name == "implicit") return PolicyHead::kImplicit;
  if (name == "gaussian") return PolicyHead::kGaussian;
  throw std::invalid_argument("unknown policy head '" + name + "'");
}

std::string to_string(PolicyHead h) { return h == PolicyHead::kGaussian ? "gaussian" : "implicit"; }

// --- policy ------------------------------------------------------------------

PolicyNet::PolicyNet(int state_dim, int action_dim, double max_action, PolicyHead head, int noise_dim,
                     const std::vector<int>& hidden)
    : state_dim_(state_dim), action_dim_(action_dim), max_action_(max_action), head_(head), noise_dim_(noise_dim) {
  if (head == PolicyHead::kImplicit)
    net_ = nn::Mlp({state_dim + noise_dim, hidden, action_dim, nn::Activation::kLeakyRelu,
                    nn::OutputTransform::tanh_scaled(max_action)});
  else
    net_ = nn::Mlp({state_dim, hidden, 2 * action_dim, nn::Activation::kLeakyRelu, nn::OutputTransform::none()});
}

int PolicyNet::noise_rows() const { return head_ == PolicyHead::kImplicit ? noise_dim_ : action_dim_; }

Matrix PolicyNet::draw_noise(Eigen::Index n, double sigma, Rng& rng) const {
  return normal_matrix(rng, noise_rows(), n, head_ == PolicyHead::kImplicit ? sigma : 1.0);
}

Matrix PolicyNet::forward(const nn::ParamVector& params, const Matrix& states, const Matrix& z) const {
  PolicyTape tape;
  return forward(params, states, z, tape);
}

Matrix PolicyNet::forward(const nn::ParamVector& params, const Matrix& states, const Matrix& z,
                          PolicyTape& tape) const {
  if (z.rows() != noise_rows() || z.cols() != states.cols()) throw std::invalid_argument("policy noise shape mismatch");
  tape.z = z;
  if (head_ == PolicyHead::kImplicit) {
    Matrix x(state_dim_ + noise_dim_, states.cols());
    x.topRows(state_dim_) = states;
    x.bottomRows(noise_dim_) = z;
    return net_.forward(params, x, tape.tape);
  }
  tape.raw = net_.forward(params, states, tape.tape);
  Matrix ls = tape.raw.bottomRows(action_dim_).cwiseMax(nn::kLogStdMin).cwiseMin(nn::kLogStdMax);
  Matrix u = tape.raw.topRows(action_dim_) + ls.array().exp().matrix().cwiseProduct(z);
  return max_action_ * u.array().tanh().matrix();
}

Matrix PolicyNet::backward(const nn::ParamVector& params, const PolicyTape& tape, const Matrix& d_actions,
                           nn::ParamVector& grad) const {
  if (head_ == PolicyHead::kImplicit) {
    Matrix dx = net_.backward(params, tape.tape, d_actions, grad);
    return dx.topRows(state_dim_);
  }
  const Matrix& raw = tape.raw;
  Matrix d_raw = Matrix::Zero(raw.rows(), raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j)
    for (int k = 0; k < action_dim_; ++k) {
      double l = raw(action_dim_ + k, j);
      double sigma = std::exp(std::clamp(l, nn::kLogStdMin, nn::kLogStdMax));
      double t = std::tanh(raw(k, j) + sigma * tape.z(k, j));
      double du = d_actions(k, j) * max_action_ * (1.0 - t * t);
      d_raw(k, j) = du;
      if (l > nn::kLogStdMin && l < nn::kLogStdMax) d_raw(action_dim_ + k, j) = du * sigma * tape.z(k, j);
    }
  return net_.backward(params, tape.tape, d_raw, grad);
}

// --- agent -------------------------------------------------------------------

Agent::Agent(AgentConfig config, Rng& rng) : config_(std::move(config)) {
  const int sd = config_.state_dim;
  const int ad = config_.action_dim;
  if (sd < 1 || ad < 1) throw std::invalid_argument("agent dims must be positive");
  if (!(config_.c_mix >= 0.0 && config_.c_mix <= 1.0)) throw std::invalid_argument("c_mix must lie in [0, 1]");
  policy_ = PolicyNet(sd, ad, config_.max_action, config_.head, config_.resolved_noise_dim(), config_.hidden);
  critic_net_ = nn::Mlp({sd + ad, config_.hidden, 1, nn::Activation::kLeakyRelu, nn::OutputTransform::none()});
  disc_net_ = nn::Mlp({sd + ad, config_.hidden, 1, nn::Activation::kLeakyRelu, nn::OutputTransform::sigmoid()});
  policy_params = policy_.network().init_params(rng);
  critic1_params = critic_net_.init_params(rng);
  critic2_params = critic_net_.init_params(rng);
  discriminator_params = disc_net_.init_params(rng);
  policy_target_params = policy_params;
  critic1_target_params = critic1_params;
  critic2_target_params = critic2_params;
  policy_adam_ = nn::AdamState::for_params(policy_params, {config_.actor_lr, config_.gan_beta1});
  disc_adam_ = nn::AdamState::for_params(discriminator_params, {config_.disc_lr, config_.gan_beta1});
  critic1_adam_ = nn::AdamState::for_params(critic1_params, {config_.critic_lr});
  critic2_adam_ = nn::AdamState::for_params(critic2_params, {config_.critic_lr});
  q_avg = config_.q_avg_init;
}

double Agent::lambda() const {
  if (!(q_avg > 0.0)) throw std::domain_error("q_avg must be positive, got " + std::to_string(q_avg));
  return config_.lambda_prime / q_avg;
}

Matrix Agent::stack(const Matrix& states, const Matrix& actions) const {
  Matrix x(states.rows() + actions.rows(), states.cols());
  x.topRows(states.rows()) = states;
  x.bottomRows(actions.rows()) = actions;
  return x;
}

Matrix Agent::sample_actions(const Matrix& states, Rng& rng) const {
  return policy_.forward(policy_params, states, policy_.draw_noise(states.cols(), config_.sigma_noise, rng));
}

Matrix Agent::sample_target_actions(const Matrix& states, Rng& rng) const {
  return policy_.forward(policy_target_params, states, policy_.draw_noise(states.cols(), config_.sigma_noise, rng));
}

Vector Agent::q_value(const nn::ParamVector& critic, const Matrix& states, const Matrix& actions) const {
  return row0(critic_net_.forward(critic, stack(states, actions)));
}

Vector Agent::discriminator(const Matrix& states, const Matrix& actions) const {
  return row0(disc_net_.forward(discriminator_params, stack(states, actions)));
}

Vector Agent::conservative_target(const TransitionBatch& batch, const Matrix& z_next) const {
  Matrix a_next = policy_.forward(policy_target_params, batch.s_next, z_next);
  Vector q1 = q_value(critic1_target_params, batch.s_next, a_next);
  Vector q2 = q_value(critic2_target_params, batch.s_next, a_next);
  Vector target(batch.size());
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (batch.done[u]) {
      bool absorbing = !batch.absorbing.empty() && batch.absorbing[u];
      target[i] = batch.r[i] + (absorbing ? config_.gamma * config_.terminal_value : 0.0);
      continue;
    }
    double lo = std::min(q1[i], q2[i]);
    double hi = std::max(q1[i], q2[i]);
    double q_tilde = config_.c_mix * lo + (1.0 - config_.c_mix) * hi;
    double mask = std::abs(q_tilde) < config_.q_bootstrap_limit ? 1.0 : 0.0;
    target[i] = batch.r[i] + config_.gamma * q_tilde * mask;
  }
  return target;
}

Vector Agent::conservative_target(const TransitionBatch& batch, Rng& rng) const {
  return conservative_target(batch, policy_.draw_noise(batch.size(), config_.sigma_noise, rng));
}

double Agent::critic_loss(const nn::ParamVector& critic, const TransitionBatch& batch, const Vector& targets,
                          nn::ParamVector* grad) const {
  nn::Tape tape;
  Matrix q = critic_net_.forward(critic, stack(batch.s, batch.a), tape);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  Matrix dout(1, q.cols());
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    loss += nn::huber(q(0, i), targets[i], config_.huber_delta);
    dout(0, i) = inv_n * nn::huber_derivative(q(0, i), targets[i], config_.huber_delta);
  }
  if (grad) critic_net_.backward(critic, tape, dout, *grad);
  return loss * inv_n;
}

double Agent::discriminator_loss(const nn::ParamVector& params, const Matrix& true_x, const Vector& labels,
                                 const Matrix& fake_x, nn::ParamVector* grad) const {
  if (true_x.cols() == 0 || fake_x.cols() == 0) throw std::invalid_argument("discriminator needs both batches");
  const double lo = config_.disc_clamp;
  const double hi = 1.0 - config_.disc_clamp;
  nn::Tape t_true, t_fake;
  Matrix d_true = disc_net_.forward(params, true_x, t_true);
  Matrix d_fake = disc_net_.forward(params, fake_x, t_fake);
  const double inv_t = 1.0 / static_cast<double>(true_x.cols());
  const double inv_f = 1.0 / static_cast<double>(fake_x.cols());
  double loss = 0.0;
  Matrix g_true = Matrix::Zero(1, true_x.cols());
  Matrix g_fake = Matrix::Zero(1, fake_x.cols());
  for (Eigen::Index i = 0; i < true_x.cols(); ++i) {
    double raw = d_true(0, i);
    double d = std::clamp(raw, lo, hi);
    double l = labels[i];
    loss -= inv_t * (l * std::log(d) + (1.0 - l) * std::log(1.0 - d));
    if (raw > lo && raw < hi) g_true(0, i) = -inv_t * (l / d - (1.0 - l) / (1.0 - d));
  }
  for (Eigen::Index i = 0; i < fake_x.cols(); ++i) {
    double raw = d_fake(0, i);
    double d = std::clamp(raw, lo, hi);
    loss -= inv_f * std::log(1.0 - d);
    if (raw > lo && raw < hi) g_fake(0, i) = inv_f / (1.0 - d);
  }
  if (grad) {
    disc_net_.backward(params, t_true, g_true, *grad);
    disc_net_.backward(params, t_fake, g_fake, *grad);
  }
  return loss;
}

ActorNoise Agent::draw_actor_noise(Eigen::Index n, const dynamics::DynamicsEnsemble& model, Rng& rng) const {
  ActorNoise noise;
  noise.z = policy_.draw_noise(n, config_.sigma_noise, rng);
  noise.model = model.draw_noise(static_cast<std::size_t>(n), rng);
  noise.z_next = policy_.draw_noise(n, config_.sigma_noise, rng);
  return noise;
}

ActorLossTerms Agent::actor_loss(const nn::ParamVector& params, const Matrix& states, const Vector& weights,
                                 const dynamics::DynamicsEnsemble& model, const ActorNoise& noise,
                                 bool include_q_term, nn::ParamVector* grad) const {
  const Eigen::Index n = states.cols();
  const int sd = config_.state_dim;
  const int ad = config_.action_dim;
  if (n == 0) throw std::invalid_argument("actor loss needs states");
  if (weights.size() != 0 && weights.size() != n) throw std::invalid_argument("one weight per state required");
  ActorLossTerms terms;

  PolicyTape pt;
  Matrix a = policy_.forward(params, states, noise.z, pt);
  Matrix d_a = Matrix::Zero(ad, n);

  if (include_q_term) {
    terms.lambda = lambda();
    Matrix x = stack(states, a);
    nn::Tape t1, t2;
    Matrix q1 = critic_net_.forward(critic1_params, x, t1);
    Matrix q2 = critic_net_.forward(critic2_params, x, t2);
    Matrix g1 = Matrix::Zero(1, n), g2 = Matrix::Zero(1, n);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      // Ties go to the first critic.
      bool first = q1(0, i) <= q2(0, i);
      acc += first ? q1(0, i) : q2(0, i);
      (first ? g1 : g2)(0, i) = -terms.lambda / static_cast<double>(n);
    }
    terms.q_term = -terms.lambda * acc / static_cast<double>(n);
    if (grad) {
      nn::ParamVector scratch = critic1_params.zeros_like();
      d_a += critic_net_.backward(critic1_params, t1, g1, scratch).bottomRows(ad);
      d_a += critic_net_.backward(critic2_params, t2, g2, scratch).bottomRows(ad);
    }
  }

  // Fake batch: (s, a) for every state, (s', a') where the model does not terminate.
  dynamics::BatchPrediction pred = model.predict(states, a, noise.model);
  std::vector<Eigen::Index> alive;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!pred.done[static_cast<std::size_t>(i)]) alive.push_back(i);
  const auto n_alive = static_cast<Eigen::Index>(alive.size());
  dynamics::ReparamTape mt;
  Matrix s_next_all;
  Matrix s_next, a_next;
  PolicyTape pt_next;
  if (n_alive > 0) {
    s_next_all = model.next_state_forward(states, a, noise.model, mt);
    s_next = s_next_all(Eigen::all, alive);
    a_next = policy_.forward(params, s_next, noise.z_next(Eigen::all, alive), pt_next);
  }
  const Eigen::Index n_fake = n + n_alive;
  terms.fake_rows = n_fake;
  Matrix x_fake(sd + ad, n_fake);
  x_fake.leftCols(n) = stack(states, a);
  if (n_alive > 0) x_fake.rightCols(n_alive) = stack(s_next, a_next);
  nn::Tape td;
  Matrix d = disc_net_.forward(discriminator_params, x_fake, td);
  const double lo = config_.disc_clamp;
  const double hi = 1.0 - config_.disc_clamp;
  const double inv_f = 1.0 / static_cast<double>(n_fake);
  Matrix g_d = Matrix::Zero(1, n_fake);
  double gen = 0.0;
  for (Eigen::Index j = 0; j < n_fake; ++j) {
    Eigen::Index src = j < n ? j : alive[static_cast<std::size_t>(j - n)];
    double w = weights.size() ? weights[src] : 1.0;
    double raw = d(0, j);
    double dc = std::clamp(raw, lo, hi);
    bool active = raw > lo && raw < hi;
    if (config_.generator_loss == GeneratorLoss::kNonSaturating) {
      gen -= inv_f * w * std::log(dc);
      if (active) g_d(0, j) = -inv_f * w / dc;
    } else {
      gen += inv_f * w * std::log(1.0 - dc);
      if (active) g_d(0, j) = -inv_f * w / (1.0 - dc);
    }
  }
  terms.generator = gen;
  terms.total = terms.q_term + terms.generator;

  if (grad) {
    nn::ParamVector scratch = discriminator_params.zeros_like();
    Matrix dx = disc_net_.backward(discriminator_params, td, g_d, scratch);
    d_a += dx.block(sd, 0, ad, n);
    if (n_alive > 0) {
      Matrix d_s_next = dx.block(0, n, sd, n_alive);
      Matrix d_a_next = dx.block(sd, n, ad, n_alive);
      d_s_next += policy_.backward(params, pt_next, d_a_next, *grad);
      if (!config_.stop_model_gradient) {
        Matrix d_next_full = Matrix::Zero(sd, n);
        d_next_full(Eigen::all, alive) = d_s_next;
        d_a += model.next_state_backward(mt, d_next_full);
      }
    }
    policy_.backward(params, pt, d_a, *grad);
  }
  return terms;
}

FakeBatch Agent::build_fake_batch(const Matrix& states, const dynamics::DynamicsEnsemble& model, Rng& rng) const {
  const Eigen::Index n = states.cols();
  Matrix a = sample_actions(states, rng);
  dynamics::BatchPrediction pred = model.predict(states, a, rng);
  std::vector<Eigen::Index> alive;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!pred.done[static_cast<std::size_t>(i)]) alive.push_back(i);
  const auto n_alive = static_cast<Eigen::Index>(alive.size());
  FakeBatch fb;
  fb.n_first = n;
  fb.states.resize(config_.state_dim, n + n_alive);
  fb.actions.resize(config_.action_dim, n + n_alive);
  fb.states.leftCols(n) = states;
  fb.actions.leftCols(n) = a;
  fb.source.resize(static_cast<std::size_t>(n + n_alive));
  for (Eigen::Index i = 0; i < n; ++i) fb.source[static_cast<std::size_t>(i)] = i;
  if (n_alive > 0) {
    Matrix s_next = pred.s_next(Eigen::all, alive);
    fb.states.rightCols(n_alive) = s_next;
    fb.actions.rightCols(n_alive) = sample_actions(s_next, rng);
    for (Eigen::Index j = 0; j < n_alive; ++j) fb.source[static_cast<std::size_t>(n + j)] = alive[static_cast<std::size_t>(j)];
  }
  return fb;
}

CriticStats Agent::critic_update(const TransitionBatch& batch, Rng& rng) {
  Vector targets = conservative_target(batch, rng);
  CriticStats stats;
  auto step = [&](nn::ParamVector& params, nn::AdamState& adam) {
    nn::ParamVector grad = params.zeros_like();
    double loss = critic_loss(params, batch, targets, &grad);
    if (!std::isfinite(loss) || !grad.all_finite()) throw NonFiniteError("critic loss became non-finite");
    nn::clip_grad_norm(grad, config_.critic_grad_clip);
    nn::adam_step(adam, params, grad);
    return loss;
  };
  stats.loss1 = step(critic1_params, critic1_adam_);
  stats.loss2 = step(critic2_params, critic2_adam_);
  ++critic_steps_;
  return stats;
}

double Agent::discriminator_update(const Matrix& true_states, const Matrix& true_actions, const FakeBatch& fake,
                                   Rng& rng) {
  Vector labels(true_states.cols());
  if (config_.smooth_labels) {
    std::uniform_real_distribution<double> u(config_.label_low, config_.label_high);
    for (Eigen::Index i = 0; i < labels.size(); ++i) labels[i] = u(rng);
  } else {
    labels.setOnes();
  }
  nn::ParamVector grad = discriminator_params.zeros_like();
  double loss = discriminator_loss(discriminator_params, stack(true_states, true_actions),
                                   labels, stack(fake.states, fake.actions), &grad);
  if (!std::isfinite(loss) || !grad.all_finite()) throw NonFiniteError("discriminator loss became non-finite");
  nn::adam_step(disc_adam_, discriminator_params, grad);
  ++disc_steps_;
  return loss;
}

ActorLossTerms Agent::actor_update(const Matrix& states, const Vector& weights, const dynamics::DynamicsEnsemble& model,
                                   Rng& rng, bool include_q_term) {
  ActorNoise noise = draw_actor_noise(states.cols(), model, rng);
  nn::ParamVector grad = policy_params.zeros_like();
  ActorLossTerms terms = actor_loss(policy_params, states, weights, model, noise, include_q_term, &grad);
  if (!std::isfinite(terms.total) || !grad.all_finite()) throw NonFiniteError("actor loss became non-finite");
  nn::adam_step(policy_adam_, policy_params, grad);
  ++actor_steps_;
  return terms;
}

void Agent::post_step_updates(const Matrix& states, Rng& rng) {
  nn::soft_update(policy_target_params, policy_params, config_.beta);
  nn::soft_update(critic1_target_params, critic1_params, config_.beta);
  nn::soft_update(critic2_target_params, critic2_params, config_.beta);
  Matrix a = sample_actions(states, rng);
  Vector q = q_value(critic1_params, states, a).cwiseMin(q_value(critic2_params, states, a));
  q_avg = config_.beta * q.cwiseAbs().mean() + (1.0 - config_.beta) * q_avg;
}

nn::Checkpoint Agent::to_checkpoint() const {
  nn::Checkpoint ck;
  ck.tensors["policy"] = policy_params;
  ck.tensors["policy_target"] = policy_target_params;
  ck.tensors["critic1"] = critic1_params;
  ck.tensors["critic2"] = critic2_params;
  ck.tensors["critic1_target"] = critic1_target_params;
  ck.tensors["critic2_target"] = critic2_target_params;
  ck.tensors["discriminator"] = discriminator_params;
  ck.meta = {{"kind", "agent"},
             {"state_dim", config_.state_dim},
             {"action_dim", config_.action_dim},
             {"max_action", config_.max_action},
             {"hidden", config_.hidden},
             {"noise_dim", config_.resolved_noise_dim()},
             {"sigma_noise", config_.sigma_noise},
             {"head", to_string(config_.head)},
             {"q_avg", q_avg},
             {"critic_steps", critic_steps_},
             {"discriminator_steps", disc_steps_},
             {"actor_steps", actor_steps_}};
  return ck;
}

void Agent::load_checkpoint(const nn::Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "agent") throw std::invalid_argument("not an agent checkpoint");
  auto take = [&](const char* name, nn::ParamVector& dst) {
    const auto& src = ck.tensors.at(name);
    if (!src.same_shape(dst)) throw std::invalid_argument(std::string("agent tensor '") + name + "' has wrong layout");
    dst = src;
  };
  take("policy", policy_params);
  take("policy_target", policy_target_params);
  take("critic1", critic1_params);
  take("critic2", critic2_params);
  take("critic1_target", critic1_target_params);
  take("critic2_target", critic2_target_params);
  take("discriminator", discriminator_params);
  q_avg = ck.meta.at("q_avg");
  critic_steps_ = ck.meta.value("critic_steps", 0L);
  disc_steps_ = ck.meta.value("discriminator_steps", 0L);
  actor_steps_ = ck.meta.value("actor_steps", 0L);
}

Agent Agent::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "agent") throw std::invalid_argument("not an agent checkpoint");
  AgentConfig c;
  c.state_dim = ck.meta.at("state_dim");
  c.action_dim = ck.meta.at("action_dim");
  c.max_action = ck.meta.at("max_action");
  c.hidden = ck.meta.at("hidden").get<std::vector<int>>();
  c.noise_dim = ck.meta.at("noise_dim");
  c.sigma_noise = ck.meta.at("sigma_noise");
  c.head = parse_policy_head(ck.meta.at("head").get<std::string>());
  Rng rng(0);
  Agent agent(c, rng);
  agent.load_checkpoint(ck);
  return agent;
}

}  // namespace ampl::agent
