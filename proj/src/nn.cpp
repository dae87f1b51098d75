#include "ampl/nn.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ampl::nn {

ParamVector::ParamVector(std::vector<LayerShape> layout) : layout_(std::move(layout)) {
  std::size_t total = 0;
  for (auto& l : layout_) {
    l.offset = total;
    total += l.size();
  }
  data_ = Vector::Zero(static_cast<Eigen::Index>(total));
}

Eigen::Map<Matrix> ParamVector::layer(std::size_t i) {
  const auto& l = layout_.at(i);
  return {data_.data() + l.offset, l.rows, l.cols};
}

Eigen::Map<const Matrix> ParamVector::layer(std::size_t i) const {
  const auto& l = layout_.at(i);
  return {data_.data() + l.offset, l.rows, l.cols};
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  if (!same_shape(other)) throw std::invalid_argument("ParamVector shape mismatch");
  data_ += other.data_;
  return *this;
}

ParamVector& ParamVector::operator*=(double s) {
  data_ *= s;
  return *this;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double activate(Activation act, double x) {
  switch (act) {
    case Activation::kLeakyRelu: return x > 0 ? x : kLeakySlope * x;
    case Activation::kTanh: return std::tanh(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kLinear: return x;
  }
  return x;
}

double activate_derivative(Activation act, double x) {
  switch (act) {
    case Activation::kLeakyRelu: return x > 0 ? 1.0 : kLeakySlope;
    case Activation::kTanh: {
      double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::kSigmoid: {
      double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::kLinear: return 1.0;
  }
  return 1.0;
}

double apply_output_transform(const OutputTransform& t, double x) {
  using K = OutputTransform::Kind;
  switch (t.kind) {
    case K::kNone: return x;
    case K::kTanhScaled: return t.scale * std::tanh(x);
    case K::kSigmoid: return sigmoid(x);
    case K::kSoftplusPower: return std::pow(softplus(x - kSoftplusFloor) + kSoftplusFloor, t.alpha);
  }
  return x;
}

double output_transform_derivative(const OutputTransform& t, double x) {
  using K = OutputTransform::Kind;
  switch (t.kind) {
    case K::kNone: return 1.0;
    case K::kTanhScaled: {
      double th = std::tanh(x);
      return t.scale * (1.0 - th * th);
    }
    case K::kSigmoid: {
      double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case K::kSoftplusPower: {
      double u = softplus(x - kSoftplusFloor) + kSoftplusFloor;
      return t.alpha * std::pow(u, t.alpha - 1.0) * sigmoid(x - kSoftplusFloor);
    }
  }
  return 1.0;
}

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  if (spec_.input_dim <= 0 || spec_.output_dim <= 0) throw std::invalid_argument("Mlp: dimensions must be positive");
  int fan_in = spec_.input_dim;
  std::vector<int> outs = spec_.hidden_dims;
  outs.push_back(spec_.output_dim);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (outs[i] <= 0) throw std::invalid_argument("Mlp: hidden sizes must be positive");
    layout_.push_back({"w" + std::to_string(i), outs[i], fan_in, 0});
    layout_.push_back({"b" + std::to_string(i), outs[i], 1, 0});
    fan_in = outs[i];
  }
  layout_ = ParamVector(layout_).layout();
}

ParamVector Mlp::zero_params() const { return ParamVector(layout_); }

ParamVector Mlp::init_params(Rng& rng, double last_layer_range) const {
  ParamVector p(layout_);
  for (std::size_t l = 0; l < n_layers(); ++l) {
    auto w = p.layer(2 * l);
    auto b = p.layer(2 * l + 1);
    bool last = l + 1 == n_layers();
    if (last && last_layer_range > 0.0) {
      std::uniform_real_distribution<double> u(-last_layer_range, last_layer_range);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
      b.setZero();
      continue;
    }
    double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
    for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, 0) = u(rng);
  }
  return p;
}

void Mlp::check(const ParamVector& params, const Matrix& x) const {
  if (x.rows() != spec_.input_dim)
    throw std::invalid_argument("Mlp: input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(spec_.input_dim));
  if (params.layout() != layout_) throw std::invalid_argument("Mlp: parameter layout mismatch");
}

Matrix Mlp::forward(const ParamVector& params, const Matrix& x) const {
  Tape tape;
  return forward(params, x, tape);
}

Matrix Mlp::forward(const ParamVector& params, const Matrix& x, Tape& tape) const {
  check(params, x);
  tape.inputs.clear();
  tape.pre.clear();
  Matrix h = x;
  for (std::size_t l = 0; l < n_layers(); ++l) {
    auto w = params.layer(2 * l);
    auto b = params.layer(2 * l + 1);
    Matrix z = w * h;
    z.colwise() += b.col(0);
    tape.inputs.push_back(std::move(h));
    bool last = l + 1 == n_layers();
    if (last) {
      tape.out = z.unaryExpr([&](double v) { return apply_output_transform(spec_.output, v); });
    } else {
      h = z.unaryExpr([&](double v) { return activate(spec_.activation, v); });
    }
    tape.pre.push_back(std::move(z));
  }
  return tape.out;
}

Matrix Mlp::backward(const ParamVector& params, const Tape& tape, const Matrix& dout, ParamVector& grad) const {
  if (!grad.same_shape(params)) throw std::invalid_argument("Mlp::backward: gradient layout mismatch");
  if (dout.rows() != tape.out.rows() || dout.cols() != tape.out.cols())
    throw std::invalid_argument("Mlp::backward: output gradient shape mismatch");
  Matrix delta = dout.cwiseProduct(
      tape.pre.back().unaryExpr([&](double v) { return output_transform_derivative(spec_.output, v); }));
  for (std::size_t l = n_layers(); l-- > 0;) {
    auto gw = grad.layer(2 * l);
    auto gb = grad.layer(2 * l + 1);
    gw.noalias() += delta * tape.inputs[l].transpose();
    gb.col(0) += delta.rowwise().sum();
    Matrix dinput = params.layer(2 * l).transpose() * delta;
    if (l == 0) return dinput;
    delta = dinput.cwiseProduct(
        tape.pre[l - 1].unaryExpr([&](double v) { return activate_derivative(spec_.activation, v); }));
  }
  return {};
}

AdamState AdamState::for_params(const ParamVector& params, AdamConfig config) {
  AdamState s;
  s.m = Vector::Zero(static_cast<Eigen::Index>(params.size()));
  s.v = s.m;
  s.config = config;
  return s;
}

void adam_step(AdamState& state, ParamVector& params, const ParamVector& grads) {
  if (grads.size() != params.size() || static_cast<std::size_t>(state.m.size()) != params.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  const auto& c = state.config;
  ++state.step;
  const Vector& g = grads.flat();
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * g;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * g.cwiseProduct(g);
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  Vector& p = params.flat();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

double clip_grad_norm(ParamVector& grads, double max_norm) {
  if (max_norm <= 0) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double norm = grads.norm();
  if (norm > max_norm) grads *= max_norm / norm;
  return norm;
}

void soft_update(ParamVector& target, const ParamVector& source, double beta) {
  if (!target.same_shape(source)) throw std::invalid_argument("soft_update: shape mismatch");
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("soft_update: beta must lie in (0, 1]");
  if (beta == 1.0) {
    target.flat() = source.flat();
    return;
  }
  target.flat() = beta * source.flat() + (1.0 - beta) * target.flat();
}

double huber(double pred, double target, double delta) {
  double e = std::abs(pred - target);
  return e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
}

double huber_derivative(double pred, double target, double delta) {
  double e = pred - target;
  if (std::abs(e) <= delta) return e;
  return e > 0 ? delta : -delta;
}

double gaussian_nll(const Vector& mean, const Vector& log_std, const Vector& target) {
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  double total = 0.0;
  for (Eigen::Index d = 0; d < mean.size(); ++d) {
    double ls = std::clamp(log_std[d], kLogStdMin, kLogStdMax);
    double z = (target[d] - mean[d]) * std::exp(-ls);
    total += 0.5 * z * z + ls + kHalfLog2Pi;
  }
  return total;
}

// --- checkpoints ---------------------------------------------------------

void Checkpoint::save(const std::filesystem::path& stem) const {
  static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
  nlohmann::json manifest;
  manifest["format"] = "ampl-params-v1";
  manifest["dtype"] = "float64-le";
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  std::ofstream bin(stem.string() + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + stem.string() + ".bin");
  std::size_t offset = 0;
  for (const auto& [name, p] : tensors) {
    nlohmann::json t;
    t["name"] = name;
    t["offset"] = offset;
    t["size"] = p.size();
    t["layers"] = nlohmann::json::array();
    for (const auto& l : p.layout())
      t["layers"].push_back({{"name", l.name}, {"rows", l.rows}, {"cols", l.cols}});
    manifest["tensors"].push_back(t);
    bin.write(reinterpret_cast<const char*>(p.flat().data()), static_cast<std::streamsize>(p.size() * sizeof(double)));
    offset += p.size();
  }
  std::ofstream js(stem.string() + ".json", std::ios::trunc);
  if (!js) throw std::runtime_error("cannot write " + stem.string() + ".json");
  js << manifest.dump(2) << "\n";
}

Checkpoint Checkpoint::load(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  if (!js) throw std::runtime_error("cannot read " + stem.string() + ".json");
  nlohmann::json manifest = nlohmann::json::parse(js);
  if (manifest.value("format", "") != "ampl-params-v1")
    throw std::runtime_error(stem.string() + ".json: unknown checkpoint format");
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + stem.string() + ".bin");
  std::vector<char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    std::vector<LayerShape> layout;
    for (const auto& l : t.at("layers")) layout.push_back({l.at("name"), l.at("rows"), l.at("cols"), 0});
    ParamVector p(std::move(layout));
    std::size_t offset = t.at("offset");
    std::size_t size = t.at("size");
    if (size != p.size() || (offset + size) * sizeof(double) > raw.size())
      throw std::runtime_error(stem.string() + ": tensor '" + t.at("name").get<std::string>() + "' is truncated");
    std::memcpy(p.flat().data(), raw.data() + offset * sizeof(double), size * sizeof(double));
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(p));
  }
  return ck;
}

}  // namespace ampl::nn
