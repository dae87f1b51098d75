#pragma once

#include "ampl/common.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

// Small multilayer-perceptron toolkit with hand-derived backprop. Every
// network in the project is an affine/activation stack, so a full autodiff
// graph is not needed: each Mlp records a Tape on the forward pass and
// `backward` turns an output gradient into parameter and input gradients.
namespace ampl::nn {

struct LayerShape {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  bool operator==(const LayerShape&) const = default;
};

/// Flat parameter storage partitioned into named weight matrices and biases.
/// The partition is fixed at construction.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<LayerShape> layout);

  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  const std::vector<LayerShape>& layout() const { return layout_; }
  bool same_shape(const ParamVector& other) const { return layout_ == other.layout_; }

  Vector& flat() { return data_; }
  const Vector& flat() const { return data_; }
  double& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  double operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  Eigen::Map<Matrix> layer(std::size_t i);
  Eigen::Map<const Matrix> layer(std::size_t i) const;

  ParamVector zeros_like() const { return ParamVector(layout_); }
  bool all_finite() const { return data_.allFinite(); }
  double norm() const { return data_.norm(); }

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator*=(double s);

 private:
  std::vector<LayerShape> layout_;
  Vector data_;
};

enum class Activation { kLeakyRelu, kTanh, kSigmoid, kLinear };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kSoftplusFloor = 1e-8;

struct OutputTransform {
  enum class Kind { kNone, kTanhScaled, kSigmoid, kSoftplusPower };
  Kind kind = Kind::kNone;
  double scale = 1.0;  // tanh_scaled
  double alpha = 1.0;  // softplus_power

  static OutputTransform none() { return {}; }
  static OutputTransform tanh_scaled(double max) { return {Kind::kTanhScaled, max, 1.0}; }
  static OutputTransform sigmoid() { return {Kind::kSigmoid, 1.0, 1.0}; }
  static OutputTransform softplus_power(double alpha) { return {Kind::kSoftplusPower, 1.0, alpha}; }
};

struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int output_dim = 0;
  Activation activation = Activation::kLeakyRelu;
  OutputTransform output;
};

/// Everything `Mlp::backward` needs from a forward pass.
struct Tape {
  std::vector<Matrix> inputs;  // input of each affine layer
  std::vector<Matrix> pre;     // pre-activation of each affine layer
  Matrix out;
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  int input_dim() const { return spec_.input_dim; }
  int output_dim() const { return spec_.output_dim; }
  std::size_t n_layers() const { return spec_.hidden_dims.size() + 1; }

  ParamVector zero_params() const;
  /// PyTorch-style U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every layer. A
  /// positive `last_layer_range` replaces the last layer with
  /// U(-range, range) weights and zero bias.
  ParamVector init_params(Rng& rng, double last_layer_range = 0.0) const;

  Matrix forward(const ParamVector& params, const Matrix& x) const;
  Matrix forward(const ParamVector& params, const Matrix& x, Tape& tape) const;

  /// Accumulates d(loss)/d(params) into `grad` and returns d(loss)/d(x).
  Matrix backward(const ParamVector& params, const Tape& tape, const Matrix& dout, ParamVector& grad) const;

 private:
  void check(const ParamVector& params, const Matrix& x) const;
  std::vector<LayerShape> layout_;
  MlpSpec spec_;
};

double activate(Activation act, double x);
double activate_derivative(Activation act, double x);
double softplus(double x);
double apply_output_transform(const OutputTransform& t, double x);
double output_transform_derivative(const OutputTransform& t, double x);

// --- optimisation --------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
  AdamConfig config;

  static AdamState for_params(const ParamVector& params, AdamConfig config);
};

/// Bias-corrected Adam update, applied in place.
void adam_step(AdamState& state, ParamVector& params, const ParamVector& grads);

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_grad_norm(ParamVector& grads, double max_norm);

/// target <- beta * source + (1 - beta) * target
void soft_update(ParamVector& target, const ParamVector& source, double beta);

// --- losses --------------------------------------------------------------

double huber(double pred, double target, double delta);
double huber_derivative(double pred, double target, double delta);

inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 2.0;

/// Negative log density of a diagonal Gaussian, summed over coordinates.
/// `log_std` is clamped to [kLogStdMin, kLogStdMax].
double gaussian_nll(const Vector& mean, const Vector& log_std, const Vector& target);

// --- checkpoints ---------------------------------------------------------

/// Named parameter blobs plus free-form metadata. On disk: `<stem>.bin` holds
/// the concatenated little-endian float64 values, `<stem>.json` the shapes.
struct Checkpoint {
  std::map<std::string, ParamVector> tensors;
  nlohmann::json meta = nlohmann::json::object();

  void save(const std::filesystem::path& stem) const;
  static Checkpoint load(const std::filesystem::path& stem);
};

}  // namespace ampl::nn
