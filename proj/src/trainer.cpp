#include "ampl/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace ampl {

using nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kMain: return "main";
    case Variant::kNw: return "nw";
    case Variant::kWpr: return "wpr";
    case Variant::kRewTest: return "rew_test";
    case Variant::kValueDisc: return "value_disc";
    case Variant::kGaussian: return "gaussian";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::kMain, Variant::kNw, Variant::kWpr, Variant::kRewTest, Variant::kValueDisc,
                    Variant::kGaussian})
    if (to_string(v) == name) return v;
  throw std::invalid_argument("unknown variant '" + name + "' (main, nw, wpr, rew_test, value_disc, gaussian)");
}

// --- configuration -------------------------------------------------------------

RunConfig RunConfig::paper_scale() { return RunConfig{}; }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.epochs = 30;
  c.batch_size = 64;
  c.warm_epochs = 5;
  c.model_retrain_period = 10;
  c.hidden = {64, 64};
  c.ensemble = dynamics::EnsembleConfig::desk_scale();
  c.miw = miw::MiwConfig::desk_scale();
  c.miw.n_steps = 2000;
  c.desk_scale = true;
  c.shift_invariant_terminals = true;
  return c;
}

std::size_t RunConfig::model_buffer_capacity() const {
  auto per_epoch = static_cast<std::size_t>(iterations_per_epoch / rollout_freq) * static_cast<std::size_t>(rollout_samples);
  return static_cast<std::size_t>(retain_epochs) * per_epoch * static_cast<std::size_t>(horizon);
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> e;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) e.push_back(msg);
  };
  need(epochs >= 1, "epochs: must be >= 1");
  need(iterations_per_epoch >= 1, "iterations_per_epoch: must be >= 1");
  need(batch_size > 0, "batch_size: must be > 0");
  need(gamma >= 0.0 && gamma < 1.0, "gamma: must lie in [0, 1)");
  need(beta > 0.0 && beta <= 1.0, "beta: must lie in (0, 1]");
  need(c_mix >= 0.0 && c_mix <= 1.0, "c_mix: must lie in [0, 1]");
  need(sigma_noise >= 0.0, "sigma_noise: must be >= 0");
  need(k_policy_freq >= 1, "k_policy_freq: must be >= 1");
  need(rollout_freq >= 1, "rollout_freq: must be >= 1");
  need(rollout_freq < 1 || rollout_freq <= iterations_per_epoch,
       "rollout_freq: must not exceed iterations_per_epoch (the model buffer would have zero capacity)");
  need(rollout_samples >= 1, "rollout_samples: must be >= 1");
  need(retain_epochs >= 1, "retain_epochs: must be >= 1");
  need(f_real >= 0.0 && f_real <= 1.0, "f_real: must lie in [0, 1]");
  need(warm_epochs >= 0, "warm_epochs: must be >= 0");
  need(!seeds.empty(), "seeds: must be nonempty");
  need(horizon >= 1, "horizon: must be >= 1");
  need(model_retrain_period >= 1, "model_retrain_period: must be >= 1");
  need(model_init_epochs >= 0, "model_init_epochs: must be >= 0");
  need(model_retrain_epochs >= 0, "model_retrain_epochs: must be >= 0");
  need(lambda_prime >= 0.0, "lambda_prime: must be >= 0");
  need(critic_lr > 0.0, "critic_lr: must be > 0");
  need(actor_lr > 0.0, "actor_lr: must be > 0");
  need(disc_lr > 0.0, "disc_lr: must be > 0");
  need(gan_beta1 >= 0.0 && gan_beta1 < 1.0, "gan_beta1: must lie in [0, 1)");
  need(huber_delta > 0.0, "huber_delta: must be > 0");
  need(critic_grad_clip > 0.0, "critic_grad_clip: must be > 0");
  need(!hidden.empty(), "hidden: must be nonempty");
  for (int h : hidden) need(h > 0, "hidden: sizes must be positive");
  need(eval_episodes >= 1, "eval_episodes: must be >= 1");
  need(ensemble.n_members >= 1, "ensemble.n_members: must be >= 1");
  need(ensemble.n_elites >= 1 && ensemble.n_elites <= ensemble.n_members,
       "ensemble.n_elites: must lie in [1, n_members]");
  need(ensemble.batch_size > 0, "ensemble.batch_size: must be > 0");
  need(ensemble.steps_per_epoch >= 1, "ensemble.steps_per_epoch: must be >= 1");
  need(ensemble.lr > 0.0, "ensemble.lr: must be > 0");
  need(ensemble.holdout_fraction >= 0.0 && ensemble.holdout_fraction < 1.0,
       "ensemble.holdout_fraction: must lie in [0, 1)");
  need(miw.alpha > 0.0 && miw.alpha <= 1.0, "miw.alpha: must lie in (0, 1]");
  need(miw.g_constraint > 0.0, "miw.g_constraint: must be > 0");
  need(miw.ema_rate > 0.0 && miw.ema_rate <= 1.0, "miw.ema_rate: must lie in (0, 1]");
  need(miw.lr > 0.0, "miw.lr: must be > 0");
  need(miw.batch_size > 0, "miw.batch_size: must be > 0");
  need(miw.init_batch_size > 0, "miw.init_batch_size: must be > 0");
  need(miw.n_steps >= 0, "miw.n_steps: must be >= 0");
  need(miw.grad_clip > 0.0, "miw.grad_clip: must be > 0");
  return e;
}

json RunConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["iterations_per_epoch"] = iterations_per_epoch;
  j["batch_size"] = batch_size;
  j["gamma"] = gamma;
  j["beta"] = beta;
  j["c_mix"] = c_mix;
  j["sigma_noise"] = sigma_noise;
  j["k_policy_freq"] = k_policy_freq;
  j["rollout_freq"] = rollout_freq;
  j["rollout_samples"] = rollout_samples;
  j["retain_epochs"] = retain_epochs;
  j["f_real"] = f_real;
  j["warm_epochs"] = warm_epochs;
  j["seeds"] = seeds;
  j["horizon"] = horizon;
  j["model_retrain_period"] = model_retrain_period;
  j["model_init_epochs"] = model_init_epochs;
  j["model_retrain_epochs"] = model_retrain_epochs;
  j["lambda_prime"] = lambda_prime;
  j["critic_lr"] = critic_lr;
  j["actor_lr"] = actor_lr;
  j["disc_lr"] = disc_lr;
  j["gan_beta1"] = gan_beta1;
  j["huber_delta"] = huber_delta;
  j["critic_grad_clip"] = critic_grad_clip;
  j["hidden"] = hidden;
  j["noise_dim"] = noise_dim;
  j["eval_episodes"] = eval_episodes;
  j["variant"] = to_string(variant);
  j["desk_scale"] = desk_scale;
  j["shift_invariant_terminals"] = shift_invariant_terminals;
  j["ensemble"] = {{"n_members", ensemble.n_members},
                   {"n_elites", ensemble.n_elites},
                   {"hidden", ensemble.hidden},
                   {"lr", ensemble.lr},
                   {"batch_size", ensemble.batch_size},
                   {"steps_per_epoch", ensemble.steps_per_epoch},
                   {"holdout_fraction", ensemble.holdout_fraction}};
  j["miw"] = {{"alpha", miw.alpha},
              {"g_constraint", miw.g_constraint},
              {"penalty_kappa", miw.penalty_kappa},
              {"ema_rate", miw.ema_rate},
              {"lr", miw.lr},
              {"batch_size", miw.batch_size},
              {"init_batch_size", miw.init_batch_size},
              {"grad_clip", miw.grad_clip},
              {"n_steps", miw.n_steps},
              {"hidden", miw.hidden},
              {"last_layer_init", miw.last_layer_init},
              {"test_function", miw::to_string(miw.test_function)}};
  return j;
}

namespace {

using Setter = std::function<void(const json&)>;

template <typename T>
Setter bind(T& field) {
  return [&field](const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw std::invalid_argument("expected a number");
    } else if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::vector<std::uint64_t>>) {
      if (!v.is_array()) throw std::invalid_argument("expected an array of integers");
      for (const auto& x : v)
        if (!x.is_number_integer()) throw std::invalid_argument("expected an array of integers");
    }
    field = v.get<T>();
  };
}

void apply_fields(const json& j, const std::map<std::string, Setter>& setters, const std::string& prefix,
                  std::vector<std::string>& errors) {
  if (!j.is_object()) {
    errors.push_back((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
    return;
  }
  for (const auto& [key, value] : j.items()) {
    std::string name = prefix.empty() ? key : prefix + "." + key;
    auto it = setters.find(key);
    if (it == setters.end()) {
      errors.push_back(name + ": unknown field");
      continue;
    }
    try {
      it->second(value);
    } catch (const std::exception& e) {
      errors.push_back(name + ": " + e.what());
    }
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const RunConfig& base, std::vector<std::string>& errors) {
  RunConfig c = base;
  std::map<std::string, Setter> ens = {
      {"n_members", bind(c.ensemble.n_members)},       {"n_elites", bind(c.ensemble.n_elites)},
      {"hidden", bind(c.ensemble.hidden)},             {"lr", bind(c.ensemble.lr)},
      {"batch_size", bind(c.ensemble.batch_size)},     {"steps_per_epoch", bind(c.ensemble.steps_per_epoch)},
      {"holdout_fraction", bind(c.ensemble.holdout_fraction)}};
  std::map<std::string, Setter> miw_fields = {
      {"alpha", bind(c.miw.alpha)},
      {"g_constraint", bind(c.miw.g_constraint)},
      {"penalty_kappa", bind(c.miw.penalty_kappa)},
      {"ema_rate", bind(c.miw.ema_rate)},
      {"lr", bind(c.miw.lr)},
      {"batch_size", bind(c.miw.batch_size)},
      {"init_batch_size", bind(c.miw.init_batch_size)},
      {"grad_clip", bind(c.miw.grad_clip)},
      {"n_steps", bind(c.miw.n_steps)},
      {"hidden", bind(c.miw.hidden)},
      {"last_layer_init", bind(c.miw.last_layer_init)},
      {"test_function", [&](const json& v) {
         if (!v.is_string()) throw std::invalid_argument("expected a string");
         c.miw.test_function = miw::parse_test_function_mode(v.get<std::string>());
       }}};
  std::map<std::string, Setter> top = {
      {"epochs", bind(c.epochs)},
      {"iterations_per_epoch", bind(c.iterations_per_epoch)},
      {"batch_size", bind(c.batch_size)},
      {"gamma", bind(c.gamma)},
      {"beta", bind(c.beta)},
      {"c_mix", bind(c.c_mix)},
      {"sigma_noise", bind(c.sigma_noise)},
      {"k_policy_freq", bind(c.k_policy_freq)},
      {"rollout_freq", bind(c.rollout_freq)},
      {"rollout_samples", bind(c.rollout_samples)},
      {"retain_epochs", bind(c.retain_epochs)},
      {"f_real", bind(c.f_real)},
      {"warm_epochs", bind(c.warm_epochs)},
      {"seeds", bind(c.seeds)},
      {"horizon", bind(c.horizon)},
      {"model_retrain_period", bind(c.model_retrain_period)},
      {"model_init_epochs", bind(c.model_init_epochs)},
      {"model_retrain_epochs", bind(c.model_retrain_epochs)},
      {"lambda_prime", bind(c.lambda_prime)},
      {"critic_lr", bind(c.critic_lr)},
      {"actor_lr", bind(c.actor_lr)},
      {"disc_lr", bind(c.disc_lr)},
      {"gan_beta1", bind(c.gan_beta1)},
      {"huber_delta", bind(c.huber_delta)},
      {"critic_grad_clip", bind(c.critic_grad_clip)},
      {"hidden", bind(c.hidden)},
      {"noise_dim", bind(c.noise_dim)},
      {"eval_episodes", bind(c.eval_episodes)},
      {"desk_scale", bind(c.desk_scale)},
      {"shift_invariant_terminals", bind(c.shift_invariant_terminals)},
      {"variant", [&](const json& v) {
         if (!v.is_string()) throw std::invalid_argument("expected a string");
         c.variant = parse_variant(v.get<std::string>());
       }},
      {"ensemble", [&](const json& v) { apply_fields(v, ens, "ensemble", errors); }},
      {"miw", [&](const json& v) { apply_fields(v, miw_fields, "miw", errors); }}};
  apply_fields(j, top, "", errors);
  return c;
}

// --- data plumbing -------------------------------------------------------------

void normalize_rewards(OfflineDataset& dataset) {
  if (dataset.rewards_normalized) throw std::logic_error("dataset rewards are already normalised");
  if (dataset.transitions.empty()) throw std::invalid_argument("cannot normalise an empty dataset");
  RewardStats rs = compute_reward_stats(dataset.transitions);
  if (!(rs.r_max > rs.r_min))
    throw std::invalid_argument("constant rewards (r_max == r_min): normalisation is undefined and no offset is "
                                "substituted");
  const double span = rs.r_max - rs.r_min;
  for (auto& t : dataset.transitions) t.r = (t.r - rs.r_min + 0.001) / span;
  dataset.rewards_normalized = true;
  dataset.recompute_stats();
}

double normalized_zero_reward(const OfflineDataset& raw) {
  if (raw.rewards_normalized) throw std::logic_error("normalized_zero_reward needs raw rewards");
  RewardStats rs = compute_reward_stats(raw.transitions);
  if (!(rs.r_max > rs.r_min)) throw std::invalid_argument("constant rewards: normalisation is undefined");
  return (0.0 - rs.r_min + 0.001) / (rs.r_max - rs.r_min);
}

void ReplayBuffer::push(BufferItem item) {
  if (capacity_ == 0) throw std::logic_error("replay buffer has zero capacity");
  ++total_pushed_;
  if (items_.size() < capacity_) {
    items_.push_back(std::move(item));
    return;
  }
  items_[cursor_] = std::move(item);
  cursor_ = (cursor_ + 1) % capacity_;
}

RolloutStats generate_rollouts(const agent::Agent& agent, const dynamics::DynamicsEnsemble& model,
                               const OfflineDataset& dataset, int horizon, int n_samples, ReplayBuffer& buffer,
                               Rng& rng) {
  RolloutStats stats;
  const int sd = dataset.state_dim;
  std::vector<std::size_t> origin(static_cast<std::size_t>(n_samples));
  Matrix s(sd, n_samples);
  for (int i = 0; i < n_samples; ++i) {
    origin[static_cast<std::size_t>(i)] = uniform_index(rng, dataset.size());
    s.col(i) = dataset.transitions[origin[static_cast<std::size_t>(i)]].s;
  }
  for (int step = 0; step < horizon && s.cols() > 0; ++step) {
    Matrix a = agent.sample_actions(s, rng);
    dynamics::BatchPrediction pred = model.predict(s, a, rng);
    std::vector<Eigen::Index> alive;
    for (Eigen::Index i = 0; i < s.cols(); ++i) {
      auto u = static_cast<std::size_t>(i);
      buffer.push({{s.col(i), a.col(i), pred.reward[i], pred.s_next.col(i), pred.done[u] != 0}, origin[u],
                   pred.penalized[u] != 0});
      ++stats.transitions;
      if (pred.penalized[u]) ++stats.penalized;
      if (!pred.done[u]) alive.push_back(i);
    }
    std::vector<std::size_t> next_origin;
    for (auto i : alive) next_origin.push_back(origin[static_cast<std::size_t>(i)]);
    s = pred.s_next(Eigen::all, alive);
    origin = std::move(next_origin);
  }
  return stats;
}

agent::TransitionBatch mixed_sample(const OfflineDataset& dataset, const ReplayBuffer& model_buffer, double f,
                                    int batch_size, const std::vector<double>& env_weights, Rng& rng,
                                    MixedStats* stats) {
  if (dataset.transitions.empty()) throw std::invalid_argument("mixed_sample needs a nonempty dataset");
  agent::TransitionBatch b;
  b.s.resize(dataset.state_dim, batch_size);
  b.a.resize(dataset.action_dim, batch_size);
  b.r.resize(batch_size);
  b.s_next.resize(dataset.state_dim, batch_size);
  b.done.resize(static_cast<std::size_t>(batch_size));
  b.absorbing.resize(static_cast<std::size_t>(batch_size));
  b.weight.resize(batch_size);
  std::bernoulli_distribution from_env(f);
  std::size_t n_env = 0;
  for (int i = 0; i < batch_size; ++i) {
    bool env = from_env(rng) || model_buffer.empty();
    const Transition* t;
    std::size_t w_row;
    bool penalized = false;
    if (env) {
      w_row = uniform_index(rng, dataset.size());
      t = &dataset.transitions[w_row];
      ++n_env;
    } else {
      const BufferItem& item = model_buffer.sample(rng);
      t = &item.t;
      w_row = item.origin;
      penalized = item.penalized;
    }
    b.s.col(i) = t->s;
    b.a.col(i) = t->a;
    b.r[i] = t->r;
    b.s_next.col(i) = t->s_next;
    b.done[static_cast<std::size_t>(i)] = t->done ? 1 : 0;
    b.absorbing[static_cast<std::size_t>(i)] = t->done && !penalized ? 1 : 0;
    b.weight[i] = env_weights.empty() ? 1.0 : env_weights[w_row];
  }
  if (stats) {
    stats->from_env = n_env;
    stats->fell_back = model_buffer.empty();
  }
  return b;
}

json ScheduleCounts::to_json() const {
  return {{"iterations", iterations},
          {"critic_steps", critic_steps},
          {"discriminator_steps", discriminator_steps},
          {"actor_steps", actor_steps},
          {"warm_iterations", warm_iterations},
          {"warm_discriminator_steps", warm_discriminator_steps},
          {"warm_actor_steps", warm_actor_steps},
          {"rollout_generations", rollout_generations},
          {"model_retrains", model_retrains},
          {"miw_trainings", miw_trainings}};
}

ScheduleCounts expected_schedule(const RunConfig& c) {
  auto ceil_div = [](long a, long b) { return (a + b - 1) / b; };
  ScheduleCounts s;
  const long n = c.total_iterations();
  const long w = static_cast<long>(c.warm_epochs) * c.iterations_per_epoch;
  s.iterations = n;
  s.critic_steps = n;
  s.discriminator_steps = n;
  s.actor_steps = ceil_div(n, c.k_policy_freq);
  s.warm_iterations = w;
  s.warm_discriminator_steps = w;
  s.warm_actor_steps = ceil_div(w, c.k_policy_freq);
  s.rollout_generations = ceil_div(n, c.rollout_freq);
  long retrains = c.variant == Variant::kNw ? 0 : (n - 1) / (static_cast<long>(c.model_retrain_period) * c.iterations_per_epoch);
  s.model_retrains = retrains;
  s.miw_trainings = retrains;
  return s;
}

std::string metrics_csv_header() {
  return "epoch,seed,mean_return,std_return,critic_loss,disc_loss,actor_loss,model_holdout_nll,miw_mean_raw,"
         "miw_std_raw,n_penalized_rollouts";
}

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%ld", m.epoch,
                static_cast<unsigned long long>(m.seed), m.mean_return, m.std_return, m.critic_loss, m.disc_loss,
                m.actor_loss, m.model_holdout_nll, m.miw_mean_raw, m.miw_std_raw, m.n_penalized_rollouts);
  return buf;
}

EnvironmentHooks EnvironmentHooks::pointmass() {
  EnvironmentHooks h;
  h.termination = [](const Vector& s) { return pointmass::is_terminal(s); };
  h.evaluate = [](const agent::Agent& agent, int n_episodes, std::uint64_t seed) {
    pointmass::Policy policy = [&agent](const Vector& s, Rng& rng) -> Eigen::Vector2d {
      return agent.sample_actions(Matrix(s), rng).col(0);
    };
    return pointmass::evaluate_policy(policy, n_episodes, seed);
  };
  return h;
}

// --- trainer -----------------------------------------------------------------

namespace {

/// V(s) = min_j Q_j(s, pi(s, 0)), frozen at construction.
class AgentValueFn : public dynamics::StateValueFn {
 public:
  explicit AgentValueFn(const agent::Agent& agent) : agent_(agent) {}

  Vector value(const Matrix& states) const override {
    Matrix a = agent_.policy().forward(agent_.policy_params, states, zeros(states.cols()));
    return agent_.q_value(agent_.critic1_params, states, a).cwiseMin(agent_.q_value(agent_.critic2_params, states, a));
  }

  Matrix gradient(const Matrix& states) const override {
    const auto n = states.cols();
    const int sd = static_cast<int>(states.rows());
    agent::PolicyTape pt;
    Matrix a = agent_.policy().forward(agent_.policy_params, states, zeros(n), pt);
    Matrix x = agent_.stack(states, a);
    nn::Tape t1, t2;
    Matrix q1 = agent_.critic_net().forward(agent_.critic1_params, x, t1);
    Matrix q2 = agent_.critic_net().forward(agent_.critic2_params, x, t2);
    Matrix g1 = Matrix::Zero(1, n), g2 = Matrix::Zero(1, n);
    for (Eigen::Index i = 0; i < n; ++i) (q1(0, i) <= q2(0, i) ? g1 : g2)(0, i) = 1.0;
    nn::ParamVector scratch = agent_.critic1_params.zeros_like();
    Matrix dx = agent_.critic_net().backward(agent_.critic1_params, t1, g1, scratch) +
                agent_.critic_net().backward(agent_.critic2_params, t2, g2, scratch);
    nn::ParamVector pscratch = agent_.policy_params.zeros_like();
    Matrix ds = dx.topRows(sd);
    ds += agent_.policy().backward(agent_.policy_params, pt, dx.bottomRows(dx.rows() - sd), pscratch);
    return ds;
  }

 private:
  Matrix zeros(Eigen::Index n) const { return Matrix::Zero(agent_.policy().noise_rows(), n); }
  const agent::Agent& agent_;
};

}  // namespace

agent::AgentConfig Trainer::agent_config() const {
  agent::AgentConfig a;
  a.state_dim = dataset_.state_dim;
  a.action_dim = dataset_.action_dim;
  a.hidden = config_.hidden;
  a.noise_dim = config_.noise_dim;
  a.sigma_noise = config_.sigma_noise;
  a.gamma = config_.gamma;
  a.beta = config_.beta;
  a.c_mix = config_.c_mix;
  a.lambda_prime = config_.lambda_prime;
  a.critic_lr = config_.critic_lr;
  a.actor_lr = config_.actor_lr;
  a.disc_lr = config_.disc_lr;
  a.gan_beta1 = config_.gan_beta1;
  a.huber_delta = config_.huber_delta;
  a.critic_grad_clip = config_.critic_grad_clip;
  a.terminal_value = terminal_value_;
  a.head = config_.variant == Variant::kGaussian ? agent::PolicyHead::kGaussian : agent::PolicyHead::kImplicit;
  return a;
}

Trainer::Trainer(RunConfig config, OfflineDataset dataset, std::uint64_t seed, EnvironmentHooks hooks)
    : config_(std::move(config)), dataset_(std::move(dataset)), seed_(seed), hooks_(std::move(hooks)), rng_(seed) {
  auto errors = config_.validate();
  if (!errors.empty()) throw std::invalid_argument("invalid run config: " + errors.front());
  dataset_.validate();
  if (config_.shift_invariant_terminals) {
    if (dataset_.rewards_normalized)
      throw std::invalid_argument("shift_invariant_terminals needs the raw rewards of the dataset");
    terminal_value_ = normalized_zero_reward(dataset_) / (1.0 - config_.gamma);
  }
  if (!dataset_.rewards_normalized) normalize_rewards(dataset_);
  if (config_.variant == Variant::kRewTest) config_.miw.test_function = miw::TestFunctionMode::kReward;
  Rng agent_rng(derive_seed(seed, 1));
  Rng model_rng(derive_seed(seed, 2));
  Rng miw_rng(derive_seed(seed, 3));
  agent_ = agent::Agent(agent_config(), agent_rng);
  model_ = dynamics::DynamicsEnsemble(dataset_.state_dim, dataset_.action_dim, config_.ensemble, model_rng);
  model_.termination = hooks_.termination;
  miw_ = miw::MiwEstimator(dataset_.state_dim, dataset_.action_dim, config_.miw, miw_rng);
  model_buffer_ = ReplayBuffer(config_.model_buffer_capacity());
}

void Trainer::initialize() {
  if (initialized_) return;
  model_.prepare(dataset_, rng_);
  model_.train_mle(dataset_, config_.model_init_epochs, rng_);
  warm_start();
  initialized_ = true;
}

void Trainer::warm_start() {
  const long n = static_cast<long>(config_.warm_epochs) * config_.iterations_per_epoch;
  const int b = config_.batch_size;
  for (long w = 1; w <= n; ++w) {
    Matrix s(dataset_.state_dim, b);
    for (int i = 0; i < b; ++i) s.col(i) = dataset_.transitions[uniform_index(rng_, dataset_.size())].s;
    agent::FakeBatch fake = agent_.build_fake_batch(s, model_, rng_);
    Matrix ts(dataset_.state_dim, fake.size()), ta(dataset_.action_dim, fake.size());
    for (Eigen::Index i = 0; i < fake.size(); ++i) {
      const auto& t = dataset_.transitions[uniform_index(rng_, dataset_.size())];
      ts.col(i) = t.s;
      ta.col(i) = t.a;
    }
    agent_.discriminator_update(ts, ta, fake, rng_);
    ++counts_.warm_discriminator_steps;
    if ((w - 1) % config_.k_policy_freq == 0) {
      agent_.actor_update(s, Vector(), model_, rng_, false);
      ++counts_.warm_actor_steps;
    }
    ++counts_.warm_iterations;
  }
}

void Trainer::retrain_model() {
  if (config_.variant == Variant::kNw) return;
  miw::PolicySampler policy = [this](const Matrix& s, Rng& rng) { return agent_.sample_actions(s, rng); };
  if (config_.miw.test_function == miw::TestFunctionMode::kReward) {
    const dynamics::DynamicsEnsemble& model = model_;
    miw::FixedTestFunction tf([&model](const Matrix& s, const Matrix& a) { return model.mean_reward(s, a); });
    miw_.train(dataset_, tf, policy, config_.gamma, config_.miw.n_steps, rng_);
  } else {
    miw::CriticTestFunction tf(agent_.critic_net(), agent_.critic1_params, agent_.critic1_target_params);
    miw_.train(dataset_, tf, policy, config_.gamma, config_.miw.n_steps, rng_);
  }
  ++counts_.miw_trainings;
  env_weights_ = miw_.normalized_weights(dataset_);
  if (config_.variant == Variant::kValueDisc) {
    AgentValueFn vf(agent_);
    model_.train_value_discriminated(dataset_, env_weights_, vf, config_.model_retrain_epochs, rng_);
  } else {
    model_.train_weighted_mle(dataset_, env_weights_, config_.model_retrain_epochs, rng_);
  }
  ++counts_.model_retrains;
}

void Trainer::iterate() {
  if (!initialized_) throw std::logic_error("Trainer::iterate before initialize");
  const long i = counts_.iterations + 1;
  const long retrain_every = static_cast<long>(config_.model_retrain_period) * config_.iterations_per_epoch;
  if (i > 1 && (i - 1) % retrain_every == 0 && config_.variant != Variant::kNw) retrain_model();
  if ((i - 1) % config_.rollout_freq == 0) {
    RolloutStats rs = generate_rollouts(agent_, model_, dataset_, config_.horizon, config_.rollout_samples,
                                        model_buffer_, rng_);
    penalized_ += static_cast<long>(rs.penalized);
    ++counts_.rollout_generations;
  }
  agent::TransitionBatch batch =
      mixed_sample(dataset_, model_buffer_, config_.f_real, config_.batch_size, env_weights_, rng_);

  agent::CriticStats cs = agent_.critic_update(batch, rng_);
  sum_critic_ += cs.mean();
  ++n_critic_;
  ++counts_.critic_steps;

  agent::FakeBatch fake = agent_.build_fake_batch(batch.s, model_, rng_);
  Matrix ts(dataset_.state_dim, fake.size()), ta(dataset_.action_dim, fake.size());
  for (Eigen::Index c = 0; c < fake.size(); ++c) {
    const auto& t = dataset_.transitions[uniform_index(rng_, dataset_.size())];
    ts.col(c) = t.s;
    ta.col(c) = t.a;
  }
  sum_disc_ += agent_.discriminator_update(ts, ta, fake, rng_);
  ++n_disc_;
  ++counts_.discriminator_steps;

  if ((i - 1) % config_.k_policy_freq == 0) {
    Vector weights = config_.variant == Variant::kWpr ? batch.weight : Vector();
    agent::ActorLossTerms terms = agent_.actor_update(batch.s, weights, model_, rng_);
    last_actor_loss_ = terms.total;
    sum_actor_ += terms.total;
    ++n_actor_;
    ++counts_.actor_steps;
  }
  agent_.post_step_updates(batch.s, rng_);
  ++counts_.iterations;
}

EpochMetrics Trainer::end_epoch(int epoch) {
  EpochMetrics m;
  m.epoch = epoch;
  m.seed = seed_;
  pointmass::EvalResult ev = hooks_.evaluate(agent_, config_.eval_episodes, derive_seed(seed_, 1000 + epoch));
  m.mean_return = ev.mean_return;
  m.std_return = ev.std_return;
  auto mean_or_nan = [](double sum, long n) { return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN(); };
  m.critic_loss = mean_or_nan(sum_critic_, n_critic_);
  m.disc_loss = mean_or_nan(sum_disc_, n_disc_);
  m.actor_loss = mean_or_nan(sum_actor_, n_actor_);
  m.model_holdout_nll = model_.elite_holdout_nll(dataset_);
  if (miw_.trained()) {
    std::vector<double> raw = miw_.raw_weights(dataset_);
    double mean = 0.0;
    for (double w : raw) mean += w;
    mean /= static_cast<double>(raw.size());
    double var = 0.0;
    for (double w : raw) var += (w - mean) * (w - mean);
    m.miw_mean_raw = mean;
    m.miw_std_raw = std::sqrt(var / static_cast<double>(raw.size()));
  } else {
    m.miw_mean_raw = m.miw_std_raw = std::numeric_limits<double>::quiet_NaN();
  }
  m.n_penalized_rollouts = penalized_;
  sum_critic_ = sum_disc_ = sum_actor_ = 0.0;
  n_critic_ = n_disc_ = n_actor_ = 0;
  penalized_ = 0;
  return m;
}

std::vector<EpochMetrics> Trainer::run(const std::function<void(const EpochMetrics&)>& on_epoch) {
  initialize();
  std::vector<EpochMetrics> out;
  for (int e = 1; e <= config_.epochs; ++e) {
    for (int k = 0; k < config_.iterations_per_epoch; ++k) {
      try {
        iterate();
      } catch (const std::exception& ex) {
        throw std::runtime_error("run aborted at iteration " + std::to_string(counts_.iterations + 1) + ": " +
                                 ex.what());
      }
    }
    out.push_back(end_epoch(e));
    if (on_epoch) on_epoch(out.back());
  }
  return out;
}

void Trainer::save_checkpoints(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nn::Checkpoint a = agent_.to_checkpoint();
  a.meta["iteration"] = counts_.iterations;
  a.meta["seed"] = seed_;
  a.save(dir / "agent");
  model_.to_checkpoint().save(dir / "model");
  nn::Checkpoint w = miw_.to_checkpoint();
  w.meta["trained"] = miw_.trained();
  w.save(dir / "miw");
}

RunResult run_ampl(const RunConfig& config, const OfflineDataset& dataset, std::uint64_t seed,
                   const std::filesystem::path& out_dir, const std::function<void(const EpochMetrics&)>& on_epoch) {
  RunResult result;
  result.dataset_mean_return = dataset.mean_episode_return();
  Trainer trainer(config, dataset, seed);
  result.metrics = trainer.run(on_epoch);
  result.counts = trainer.counts();
  if (!out_dir.empty()) trainer.save_checkpoints(out_dir);
  return result;
}

}  // namespace ampl
