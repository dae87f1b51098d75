#include "ampl/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace ampl::dynamics {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Vector floored(const Vector& v) { return v.cwiseMax(kStdFloor); }

double weight_at(std::span<const double> weights, std::size_t row) { return weights.empty() ? 1.0 : weights[row]; }

double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

}  // namespace

EnsembleConfig EnsembleConfig::desk_scale() {
  EnsembleConfig c;
  c.n_members = 3;
  c.n_elites = 2;
  c.hidden = {64, 64};
  c.steps_per_epoch = 200;
  return c;
}

ModelStats fit_stats(const OfflineDataset& dataset) {
  if (dataset.transitions.empty()) throw std::invalid_argument("fit_stats on an empty dataset");
  NormalizationStats ns = compute_normalization_stats(dataset.transitions);
  RewardStats rs = compute_reward_stats(dataset.transitions);
  ModelStats st;
  st.input_mean = ns.input_mean;
  st.input_std = floored(ns.input_std);
  st.target_mean = ns.target_mean;
  st.target_std = floored(ns.target_std);
  st.r_range = std::max(std::abs(rs.r_min - 10.0 * rs.sigma_r), std::abs(rs.r_max + 10.0 * rs.sigma_r));
  st.state_abs_max = Vector::Zero(dataset.state_dim);
  for (const auto& t : dataset.transitions) {
    st.state_abs_max = st.state_abs_max.cwiseMax(t.s.cwiseAbs());
    st.state_abs_max = st.state_abs_max.cwiseMax(t.s_next.cwiseAbs());
  }
  return st;
}

std::vector<double> normalize_to_unit_mean(std::span<const double> weights) {
  if (weights.empty()) throw std::invalid_argument("no weights to normalise");
  double shift = weights[0];
  double acc = 0.0;
  bool any_positive = false;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("weights must be finite and nonnegative");
    any_positive = any_positive || w > 0.0;
    acc += w - shift;
  }
  if (!any_positive) throw std::invalid_argument("all weights are zero");
  double mean = shift + acc / static_cast<double>(weights.size());
  std::vector<double> out(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) out[i] = weights[i] / mean;
  return out;
}

DynamicsEnsemble::DynamicsEnsemble(int state_dim, int action_dim, EnsembleConfig config, Rng& rng)
    : config_(std::move(config)), state_dim_(state_dim), action_dim_(action_dim) {
  if (state_dim < 1 || action_dim < 1) throw std::invalid_argument("ensemble dims must be positive");
  if (config_.n_members < 1 || config_.n_elites < 1 || config_.n_elites > config_.n_members)
    throw std::invalid_argument("need 1 <= n_elites <= n_members");
  net_ = nn::Mlp({state_dim + action_dim, config_.hidden, 2 * (1 + state_dim), nn::Activation::kLeakyRelu,
                  nn::OutputTransform::none()});
  for (int m = 0; m < config_.n_members; ++m) {
    Member mem;
    mem.params = net_.init_params(rng);
    mem.adam = nn::AdamState::for_params(mem.params, {config_.lr});
    members_.push_back(std::move(mem));
  }
  elites_.resize(static_cast<std::size_t>(config_.n_elites));
  std::iota(elites_.begin(), elites_.end(), std::size_t{0});
}

void DynamicsEnsemble::prepare(const OfflineDataset& dataset, Rng& rng) {
  if (dataset.state_dim != state_dim_ || dataset.action_dim != action_dim_)
    throw std::invalid_argument("dataset dims do not match the ensemble");
  stats_ = fit_stats(dataset);
  const std::size_t n = dataset.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_hold = static_cast<std::size_t>(config_.holdout_fraction * static_cast<double>(n));
  if (n_hold == 0 && n >= 2 && config_.holdout_fraction > 0.0) n_hold = 1;
  holdout_.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::sort(holdout_.begin(), holdout_.end());
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_hold), idx.end());
  std::sort(train.begin(), train.end());
  for (auto& mem : members_) {
    mem.bootstrap.resize(train.size());
    for (auto& b : mem.bootstrap) b = train[uniform_index(rng, train.size())];
  }
  prepared_ = true;
  prepared_size_ = n;
}

Matrix DynamicsEnsemble::normalized_inputs(const Matrix& states, const Matrix& actions) const {
  if (states.rows() != state_dim_ || actions.rows() != action_dim_ || states.cols() != actions.cols())
    throw std::invalid_argument("ensemble input has wrong shape");
  Matrix x(state_dim_ + action_dim_, states.cols());
  x.topRows(state_dim_) = states;
  x.bottomRows(action_dim_) = actions;
  x.colwise() -= stats_.input_mean;
  x.array().colwise() /= stats_.input_std.array();
  return x;
}

Matrix DynamicsEnsemble::normalized_inputs(const OfflineDataset& dataset, std::span<const std::size_t> rows) const {
  Matrix s(state_dim_, static_cast<Eigen::Index>(rows.size()));
  Matrix a(action_dim_, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& t = dataset.transitions.at(rows[i]);
    s.col(static_cast<Eigen::Index>(i)) = t.s;
    a.col(static_cast<Eigen::Index>(i)) = t.a;
  }
  return normalized_inputs(s, a);
}

Matrix DynamicsEnsemble::normalized_targets(const OfflineDataset& dataset, std::span<const std::size_t> rows) const {
  Matrix y(target_dim(), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& t = dataset.transitions.at(rows[i]);
    auto c = static_cast<Eigen::Index>(i);
    y(0, c) = t.r;
    y.col(c).tail(state_dim_) = t.s_next - t.s;
  }
  y.colwise() -= stats_.target_mean;
  y.array().colwise() /= stats_.target_std.array();
  return y;
}

double DynamicsEnsemble::effective_log_std(double raw) const {
  if (log_std_override) return *log_std_override;
  return std::clamp(raw, nn::kLogStdMin, nn::kLogStdMax);
}

bool DynamicsEnsemble::log_std_active(double raw) const {
  return !log_std_override && raw > nn::kLogStdMin && raw < nn::kLogStdMax;
}

double DynamicsEnsemble::weighted_nll_loss(const nn::ParamVector& params, const OfflineDataset& dataset,
                                           std::span<const std::size_t> rows, std::span<const double> weights,
                                           nn::ParamVector* grad) const {
  if (rows.empty()) throw std::invalid_argument("weighted_nll_loss needs rows");
  const int d = target_dim();
  Matrix x = normalized_inputs(dataset, rows);
  Matrix y = normalized_targets(dataset, rows);
  nn::Tape tape;
  Matrix out = net_.forward(params, x, tape);
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  Matrix dout = Matrix::Zero(out.rows(), out.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < out.cols(); ++i) {
    double w = weight_at(weights, rows[static_cast<std::size_t>(i)]);
    double nll = 0.0;
    for (int k = 0; k < d; ++k) {
      double raw = out(d + k, i);
      double ls = std::clamp(raw, nn::kLogStdMin, nn::kLogStdMax);
      double sigma = std::exp(ls);
      double z = (y(k, i) - out(k, i)) / sigma;
      nll += 0.5 * z * z + ls + kHalfLog2Pi;
      dout(k, i) = -w * inv_n * z / sigma;
      if (raw > nn::kLogStdMin && raw < nn::kLogStdMax) dout(d + k, i) = w * inv_n * (1.0 - z * z);
    }
    loss += w * nll;
  }
  loss *= inv_n;
  if (grad) net_.backward(params, tape, dout, *grad);
  return loss;
}

double DynamicsEnsemble::value_discriminated_loss(const nn::ParamVector& params, const OfflineDataset& dataset,
                                                  std::span<const std::size_t> rows, std::span<const double> weights,
                                                  const StateValueFn& value_fn, const Matrix& eps,
                                                  nn::ParamVector* grad) const {
  if (rows.empty()) throw std::invalid_argument("value_discriminated_loss needs rows");
  const int d = target_dim();
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (eps.rows() != d || eps.cols() != n) throw std::invalid_argument("eps has wrong shape");
  Matrix x = normalized_inputs(dataset, rows);
  Matrix y = normalized_targets(dataset, rows);
  nn::Tape tape;
  Matrix out = net_.forward(params, x, tape);

  Matrix s_true(state_dim_, n), s_model(state_dim_, n);
  Matrix sigma(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = dataset.transitions.at(rows[static_cast<std::size_t>(i)]);
    s_true.col(i) = t.s_next;
    for (int k = 0; k < d; ++k) sigma(k, i) = std::exp(std::clamp(out(d + k, i), nn::kLogStdMin, nn::kLogStdMax));
    Vector delta_n = out.col(i).segment(1, state_dim_) +
                     sigma.col(i).tail(state_dim_).cwiseProduct(eps.col(i).tail(state_dim_));
    s_model.col(i) = t.s + stats_.target_mean.tail(state_dim_) +
                     stats_.target_std.tail(state_dim_).cwiseProduct(delta_n);
  }
  Vector v_true = value_fn.value(s_true);
  Vector v_model = value_fn.value(s_model);
  Matrix dv_model = value_fn.gradient(s_model);

  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix dout = Matrix::Zero(out.rows(), out.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double w = weight_at(weights, rows[static_cast<std::size_t>(i)]);
    double gap = v_true[i] - v_model[i];
    double raw_r = out(d, i);
    double ls_r = std::clamp(raw_r, nn::kLogStdMin, nn::kLogStdMax);
    double z = (y(0, i) - out(0, i)) / sigma(0, i);
    loss += w * (std::abs(gap) + 0.5 * z * z + ls_r + kHalfLog2Pi);
    dout(0, i) = -w * inv_n * z / sigma(0, i);
    if (raw_r > nn::kLogStdMin && raw_r < nn::kLogStdMax) dout(d, i) = w * inv_n * (1.0 - z * z);
    // d|V(s') - V(s_hat')| / d s_hat' = -sign(gap) * grad V(s_hat')
    Vector ds = -w * inv_n * sign(gap) * dv_model.col(i);
    for (int k = 0; k < state_dim_; ++k) {
      double dk = ds[k] * stats_.target_std[k + 1];
      dout(k + 1, i) = dk;
      double raw = out(d + k + 1, i);
      if (raw > nn::kLogStdMin && raw < nn::kLogStdMax) dout(d + k + 1, i) = dk * sigma(k + 1, i) * eps(k + 1, i);
    }
  }
  loss *= inv_n;
  if (grad) net_.backward(params, tape, dout, *grad);
  return loss;
}

template <typename StepFn>
void DynamicsEnsemble::train_members(int epochs, Rng& rng, StepFn&& step) {
  if (!prepared_) throw std::logic_error("ensemble trained before prepare()");
  if (epochs < 0) throw std::invalid_argument("negative epoch count");
  const std::uint64_t base = rng();
  const long n_steps = static_cast<long>(epochs) * config_.steps_per_epoch;
  parallel_for(members_.size(), [&](std::size_t m) {
    Rng member_rng(derive_seed(base, m));
    Member& mem = members_[m];
    if (mem.bootstrap.empty()) throw std::logic_error("member has an empty bootstrap sample");
    std::vector<std::size_t> batch(static_cast<std::size_t>(config_.batch_size));
    for (long t = 0; t < n_steps; ++t) {
      for (auto& b : batch) b = mem.bootstrap[uniform_index(member_rng, mem.bootstrap.size())];
      nn::ParamVector grad = mem.params.zeros_like();
      double loss = step(mem.params, std::span<const std::size_t>(batch), member_rng, grad);
      if (!std::isfinite(loss) || !grad.all_finite())
        throw NonFiniteError("model member " + std::to_string(m) + " diverged at step " + std::to_string(t) +
                             " (loss " + std::to_string(loss) + ")");
      nn::adam_step(mem.adam, mem.params, grad);
    }
  });
}

void DynamicsEnsemble::train_mle(const OfflineDataset& dataset, int epochs, Rng& rng) {
  std::vector<double> ones(dataset.size(), 1.0);
  train_weighted_mle(dataset, ones, epochs, rng);
}

void DynamicsEnsemble::train_weighted_mle(const OfflineDataset& dataset, std::span<const double> weights, int epochs,
                                          Rng& rng) {
  if (weights.size() != dataset.size()) throw std::invalid_argument("one weight per transition required");
  if (dataset.size() != prepared_size_) throw std::invalid_argument("dataset differs from the prepared one");
  std::vector<double> w = normalize_to_unit_mean(weights);
  train_members(epochs, rng, [&](const nn::ParamVector& params, std::span<const std::size_t> rows, Rng&,
                                 nn::ParamVector& grad) { return weighted_nll_loss(params, dataset, rows, w, &grad); });
  select_elites(dataset);
}

void DynamicsEnsemble::train_value_discriminated(const OfflineDataset& dataset, std::span<const double> weights,
                                                 const StateValueFn& value_fn, int epochs, Rng& rng) {
  if (weights.size() != dataset.size()) throw std::invalid_argument("one weight per transition required");
  if (dataset.size() != prepared_size_) throw std::invalid_argument("dataset differs from the prepared one");
  std::vector<double> w = normalize_to_unit_mean(weights);
  train_members(epochs, rng, [&](const nn::ParamVector& params, std::span<const std::size_t> rows, Rng& mrng,
                                 nn::ParamVector& grad) {
    Matrix eps = normal_matrix(mrng, target_dim(), static_cast<Eigen::Index>(rows.size()));
    return value_discriminated_loss(params, dataset, rows, w, value_fn, eps, &grad);
  });
  select_elites(dataset);
}

std::vector<double> DynamicsEnsemble::holdout_nll(const OfflineDataset& dataset) const {
  std::vector<std::size_t> rows = holdout_;
  if (rows.empty()) {
    rows.resize(dataset.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  std::vector<double> out(members_.size());
  parallel_for(members_.size(), [&](std::size_t m) {
    out[m] = weighted_nll_loss(members_[m].params, dataset, rows, {}, nullptr);
  });
  return out;
}

const std::vector<std::size_t>& DynamicsEnsemble::select_elites(const OfflineDataset& dataset) {
  std::vector<double> nll = holdout_nll(dataset);
  for (auto& v : nll)
    if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(members_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return nll[a] < nll[b]; });
  order.resize(static_cast<std::size_t>(std::min<int>(config_.n_elites, static_cast<int>(members_.size()))));
  elites_ = std::move(order);
  return elites_;
}

void DynamicsEnsemble::set_elites(std::vector<std::size_t> elites) {
  if (elites.empty()) throw std::invalid_argument("elite set must be nonempty");
  for (auto e : elites)
    if (e >= members_.size()) throw std::out_of_range("elite index out of range");
  elites_ = std::move(elites);
}

double DynamicsEnsemble::elite_holdout_nll(const OfflineDataset& dataset) const {
  std::vector<double> nll = holdout_nll(dataset);
  double acc = 0.0;
  for (auto e : elites_) acc += nll[e];
  return acc / static_cast<double>(elites_.size());
}

PredictionNoise DynamicsEnsemble::draw_noise(std::size_t n, Rng& rng) const {
  if (elites_.empty()) throw std::logic_error("no elite members");
  PredictionNoise noise;
  noise.member.resize(n);
  for (auto& m : noise.member) m = elites_[uniform_index(rng, elites_.size())];
  noise.eps = normal_matrix(rng, target_dim(), static_cast<Eigen::Index>(n));
  return noise;
}

Matrix DynamicsEnsemble::member_forward(const Matrix& x, const std::vector<std::size_t>& member,
                                        ReparamTape* tape) const {
  if (member.size() != static_cast<std::size_t>(x.cols())) throw std::invalid_argument("one member per column");
  std::vector<std::vector<Eigen::Index>> columns(members_.size());
  for (std::size_t i = 0; i < member.size(); ++i) columns.at(member[i]).push_back(static_cast<Eigen::Index>(i));
  Matrix out(net_.output_dim(), x.cols());
  if (tape) tape->tapes.assign(members_.size(), nn::Tape{});
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const auto& cols = columns[m];
    if (cols.empty()) continue;
    Matrix xm = x(Eigen::all, cols);
    Matrix om = tape ? net_.forward(members_[m].params, xm, tape->tapes[m]) : net_.forward(members_[m].params, xm);
    out(Eigen::all, cols) = om;
  }
  if (tape) {
    tape->columns = std::move(columns);
    tape->member = member;
    tape->raw_out = out;
  }
  return out;
}

BatchPrediction DynamicsEnsemble::predict(const Matrix& states, const Matrix& actions,
                                          const PredictionNoise& noise) const {
  const int d = target_dim();
  Matrix raw = member_forward(normalized_inputs(states, actions), noise.member, nullptr);
  const auto n = states.cols();
  BatchPrediction out;
  out.s_next.resize(state_dim_, n);
  out.reward.resize(n);
  out.done.assign(static_cast<std::size_t>(n), 0);
  out.penalized.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector y(d);
    for (int k = 0; k < d; ++k)
      y[k] = stats_.target_mean[k] + stats_.target_std[k] * (raw(k, i) + std::exp(effective_log_std(raw(d + k, i))) *
                                                                             noise.eps(k, i));
    Vector s_next = states.col(i) + y.tail(state_dim_);
    double r = y[0];
    bool finite = std::isfinite(r) && s_next.allFinite();
    bool out_of_range = !finite || std::abs(r) > stats_.r_range ||
                        (s_next.cwiseAbs() - 2.0 * stats_.state_abs_max).maxCoeff() > 0.0;
    auto u = static_cast<std::size_t>(i);
    if (out_of_range) {
      out.reward[i] = -stats_.r_range;
      out.done[u] = 1;
      out.penalized[u] = 1;
      out.s_next.col(i) = finite ? s_next : Vector(states.col(i));
    } else {
      out.reward[i] = r;
      out.s_next.col(i) = s_next;
      out.done[u] = termination && termination(s_next) ? 1 : 0;
    }
  }
  return out;
}

BatchPrediction DynamicsEnsemble::predict(const Matrix& states, const Matrix& actions, Rng& rng) const {
  return predict(states, actions, draw_noise(static_cast<std::size_t>(states.cols()), rng));
}

Prediction DynamicsEnsemble::predict(const Vector& s, const Vector& a, Rng& rng) const {
  BatchPrediction b = predict(Matrix(s), Matrix(a), rng);
  return {b.s_next.col(0), b.reward[0], b.done[0] != 0, b.penalized[0] != 0};
}

Vector DynamicsEnsemble::mean_reward(const Matrix& states, const Matrix& actions) const {
  if (elites_.empty()) throw std::logic_error("no elite members");
  Matrix x = normalized_inputs(states, actions);
  Vector acc = Vector::Zero(states.cols());
  for (auto m : elites_) acc += net_.forward(members_[m].params, x).row(0).transpose();
  acc /= static_cast<double>(elites_.size());
  return (stats_.target_mean[0] + stats_.target_std[0] * acc.array()).matrix();
}

Matrix DynamicsEnsemble::next_state_forward(const Matrix& states, const Matrix& actions, const PredictionNoise& noise,
                                            ReparamTape& tape) const {
  const int d = target_dim();
  Matrix raw = member_forward(normalized_inputs(states, actions), noise.member, &tape);
  tape.eps = noise.eps;
  Matrix s_next = states;
  for (Eigen::Index i = 0; i < states.cols(); ++i)
    for (int k = 1; k < d; ++k)
      s_next(k - 1, i) += stats_.target_mean[k] + stats_.target_std[k] * (raw(k, i) + std::exp(effective_log_std(
                                                                                          raw(d + k, i))) *
                                                                                          noise.eps(k, i));
  return s_next;
}

Matrix DynamicsEnsemble::next_state_backward(const ReparamTape& tape, const Matrix& d_next_states) const {
  const int d = target_dim();
  const auto n = tape.raw_out.cols();
  Matrix d_raw = Matrix::Zero(tape.raw_out.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 1; k < d; ++k) {
      double g = d_next_states(k - 1, i) * stats_.target_std[k];
      d_raw(k, i) = g;
      double raw = tape.raw_out(d + k, i);
      if (log_std_active(raw)) d_raw(d + k, i) = g * std::exp(raw) * tape.eps(k, i);
    }
  Matrix dx(net_.input_dim(), n);
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const auto& cols = tape.columns.at(m);
    if (cols.empty()) continue;
    nn::ParamVector scratch = members_[m].params.zeros_like();
    dx(Eigen::all, cols) = net_.backward(members_[m].params, tape.tapes[m], d_raw(Eigen::all, cols), scratch);
  }
  Matrix da = dx.bottomRows(action_dim_);
  da.array().colwise() /= stats_.input_std.tail(action_dim_).array();
  return da;
}

nn::Checkpoint DynamicsEnsemble::to_checkpoint() const {
  nn::Checkpoint ck;
  for (std::size_t m = 0; m < members_.size(); ++m) ck.tensors["member_" + std::to_string(m)] = members_[m].params;
  ck.meta["kind"] = "dynamics-ensemble";
  ck.meta["state_dim"] = state_dim_;
  ck.meta["action_dim"] = action_dim_;
  ck.meta["n_members"] = config_.n_members;
  ck.meta["n_elites"] = config_.n_elites;
  ck.meta["hidden"] = config_.hidden;
  ck.meta["elites"] = elites_;
  ck.meta["stats"] = {{"input_mean", to_std(stats_.input_mean)},   {"input_std", to_std(stats_.input_std)},
                      {"target_mean", to_std(stats_.target_mean)}, {"target_std", to_std(stats_.target_std)},
                      {"r_range", stats_.r_range},                 {"state_abs_max", to_std(stats_.state_abs_max)}};
  return ck;
}

void DynamicsEnsemble::load_checkpoint(const nn::Checkpoint& ck) {
  const auto& meta = ck.meta;
  if (meta.value("kind", "") != "dynamics-ensemble") throw std::invalid_argument("not an ensemble checkpoint");
  if (meta.at("state_dim").get<int>() != state_dim_ || meta.at("action_dim").get<int>() != action_dim_ ||
      meta.at("n_members").get<int>() != config_.n_members)
    throw std::invalid_argument("ensemble checkpoint shape mismatch");
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const auto& p = ck.tensors.at("member_" + std::to_string(m));
    if (!p.same_shape(members_[m].params)) throw std::invalid_argument("ensemble member layout mismatch");
    members_[m].params = p;
  }
  const auto& st = meta.at("stats");
  stats_.input_mean = from_std(st.at("input_mean").get<std::vector<double>>());
  stats_.input_std = from_std(st.at("input_std").get<std::vector<double>>());
  stats_.target_mean = from_std(st.at("target_mean").get<std::vector<double>>());
  stats_.target_std = from_std(st.at("target_std").get<std::vector<double>>());
  stats_.r_range = st.at("r_range").get<double>();
  stats_.state_abs_max = from_std(st.at("state_abs_max").get<std::vector<double>>());
  set_elites(meta.at("elites").get<std::vector<std::size_t>>());
}

// --- categorical surrogate ---------------------------------------------------

Matrix CategoricalModel::probabilities() const {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Vector row = logits.row(r).transpose();
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    p.row(r) = (row / row.sum()).transpose();
  }
  return p;
}

CategoricalModel fit_weighted_categorical(int n_states, int n_actions, std::span<const DiscreteTransition> data,
                                          std::span<const double> weights, int max_iters) {
  if (data.size() != weights.size()) throw std::invalid_argument("one weight per transition required");
  std::vector<double> w = normalize_to_unit_mean(weights);
  Matrix counts = Matrix::Zero(n_states * n_actions, n_states);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& t = data[i];
    if (t.s < 0 || t.s >= n_states || t.a < 0 || t.a >= n_actions || t.s_next < 0 || t.s_next >= n_states)
      throw std::out_of_range("categorical transition index out of range");
    counts(t.s * n_actions + t.a, t.s_next) += w[i];
  }
  CategoricalModel model{n_states, n_actions, Matrix::Zero(n_states * n_actions, n_states)};
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    const double total = counts.row(r).sum();
    if (total <= 0.0) continue;
    // unobserved successors have MLE probability 0: logit -inf; the last
    // observed successor is the pinned reference
    std::vector<Eigen::Index> support;
    for (Eigen::Index j = 0; j < counts.cols(); ++j) {
      if (counts(r, j) > 0.0)
        support.push_back(j);
      else
        model.logits(r, j) = -std::numeric_limits<double>::infinity();
    }
    const auto k = static_cast<Eigen::Index>(support.size());
    const Eigen::Index free = k - 1;
    if (free == 0) continue;
    Vector c(k);
    for (Eigen::Index j = 0; j < k; ++j) c[j] = counts(r, support[static_cast<std::size_t>(j)]);
    auto objective = [&](const Vector& theta, Vector* p_out) {
      Vector full = Vector::Zero(k);
      full.head(free) = theta;
      double mx = full.maxCoeff();
      double lse = mx + std::log((full.array() - mx).exp().sum());
      if (p_out) *p_out = (full.array() - lse).exp();
      return -(c.array() * (full.array() - lse)).sum();
    };
    Vector theta = Vector::Zero(free);
    Vector p;
    double f = objective(theta, &p);
    for (int it = 0; it < max_iters; ++it) {
      Vector g = total * p.head(free) - c.head(free);
      if (g.lpNorm<Eigen::Infinity>() <= 1e-15 * total) break;
      Matrix h = total * (Matrix(p.head(free).asDiagonal()) - p.head(free) * p.head(free).transpose());
      Vector step = h.ldlt().solve(g);
      double t = 1.0;
      double slope = g.dot(step);
      Vector next_p;
      double next_f = objective(theta - step, &next_p);
      // near the optimum f changes below rounding; a full step that shrinks
      // the gradient is then taken without the decrease test
      const double next_g = (total * next_p.head(free) - c.head(free)).lpNorm<Eigen::Infinity>();
      if (next_g < g.lpNorm<Eigen::Infinity>() && next_f <= f + 1e-12 * std::abs(f)) {
        theta -= step;
        f = next_f;
        p = next_p;
        continue;
      }
      while (next_f > f - 1e-4 * t * slope && t > 1e-12) {
        t *= 0.5;
        next_f = objective(theta - t * step, &next_p);
      }
      if (!(next_f < f) && t <= 1e-12) break;
      theta -= t * step;
      f = next_f;
      p = next_p;
    }
    for (Eigen::Index j = 0; j < free; ++j) model.logits(r, support[static_cast<std::size_t>(j)]) = theta[j];
    model.logits(r, support.back()) = 0.0;
  }
  return model;
}

}  // namespace ampl::dynamics
