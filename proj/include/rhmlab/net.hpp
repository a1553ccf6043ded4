#pragma once

// Minimal 1-D convolutional network with kernel = stride.
//
// Activations of a layer with C channels and spatial length n over a batch
// of B samples are stored as a C x (B * n) matrix, column = sample * n + pos.
// Because kernel == stride, the receptive-field segments of the next layer
// are a column-major reinterpretation of that matrix as (k * C) x (B * n / k),
// so a convolution is a single matrix product and needs no im2col copy.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "rhmlab/rng.hpp"

namespace rhmlab {
class Checkpoint;
}

namespace rhmlab::net {

enum class Activation { relu, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
  /// out x (kernel * in). Column block t holds the weights of tap t.
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
  int kernel = 2;
  Activation activation = Activation::relu;
  bool has_bias = true;

  Eigen::Index in_channels() const { return weight.cols() / kernel; }
  Eigen::Index out_channels() const { return weight.rows(); }
};

struct NetworkConfig {
  int input_channels = 2;  ///< v
  int input_length = 4;    ///< 2^L
  int depth = 2;           ///< number of convolutional layers
  int width = 4;           ///< channels per hidden layer (c_h * v^2)
  bool bias = true;
  Activation activation = Activation::relu;
  /// Classes of the dense readout applied to the flattened top layer; 0 = none.
  int head_classes = 0;

  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

/// Ordered layer stack. The optional head is stored as the last layer: a
/// kernel spanning the whole remaining spatial extent, identity activation.
class Network {
 public:
  Network() = default;
  explicit Network(const NetworkConfig& config);

  const NetworkConfig& config() const { return config_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  Layer& layer(int l) { return layers_.at(static_cast<std::size_t>(l - 1)); }
  const Layer& layer(int l) const { return layers_.at(static_cast<std::size_t>(l - 1)); }

  /// Number of layers including the head.
  int num_layers() const { return static_cast<int>(layers_.size()); }
  int depth() const { return config_.depth; }
  bool has_head() const { return config_.head_classes > 0; }
  /// Spatial length of the output of layer l (l = 0 is the input).
  int length_after(int l) const;
  /// Output features per sample of layer l: channels * spatial length.
  Eigen::Index features_after(int l) const;

 private:
  NetworkConfig config_;
  std::vector<Layer> layers_;
};

struct ForwardCache {
  std::size_t batch = 0;
  /// pre[l-1] = h_l for l = 1..num_layers.
  std::vector<Eigen::MatrixXd> pre;
  /// post[l] = z_l for l = 0..num_layers, post[0] is the input.
  std::vector<Eigen::MatrixXd> post;

  const Eigen::MatrixXd& output() const { return post.back(); }
  int num_layers() const { return static_cast<int>(pre.size()); }
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  static Gradients zeros_like(const Network& net);
};

struct LossOutput {
  double loss = 0.0;
  /// dL/d(output), same shape as the output.
  Eigen::MatrixXd error;
};

/// Uniform in +-sqrt(6 / fan_in), biases zero.
void init_weights(Network& net, Rng& rng);

/// Throws ShapeError when inputs do not have v rows and a multiple of 2^L columns.
ForwardCache forward(const Network& net, const Eigen::MatrixXd& inputs);

/// Mean softmax cross-entropy over columns of `logits` (classes x batch).
/// The error is (softmax - one_hot) / batch.
LossOutput cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels);

/// Fraction of columns whose argmax equals the label.
double accuracy(const Eigen::MatrixXd& logits, std::span<const int> labels);
std::vector<int> argmax_columns(const Eigen::MatrixXd& scores);

/// rho'(h) of a layer: 0/1 masks for ReLU, ones for identity.
Eigen::MatrixXd activation_derivative(Activation a, const Eigen::MatrixXd& pre);

/// k*C x (cols/k) segment view of a C x cols activation matrix.
Eigen::Map<const Eigen::MatrixXd> segments(const Eigen::MatrixXd& z, int kernel);
/// Inverse of segments(): folds a (k*C) x n matrix back into C x (n*k).
Eigen::MatrixXd unsegment(const Eigen::MatrixXd& s, int kernel);

/// Adds dW_l = delta * segments(z_{l-1})^T and db_l = rowsum(delta).
void accumulate_layer_gradient(const Network& net, const ForwardCache& cache, int l,
                               const Eigen::MatrixXd& delta, Gradients& grads);

/// dL/dz_{l-1} given delta_l = dL/dh_l, through the true weights.
Eigen::MatrixXd backward_through(const Network& net, int l, const Eigen::MatrixXd& delta);

/// Exact backpropagation from dL/d(output) through every layer.
Gradients backprop(const Network& net, const ForwardCache& cache, const Eigen::MatrixXd& output_error);

/// Per-sample flattened activation of layer k: (C_k * n_k) x batch, with the
/// channels of position 0 first, then position 1, and so on.
Eigen::MatrixXd flatten_layer_representation(const ForwardCache& cache, int k);
/// Inverse reshape back to C_k x (batch * n_k).
Eigen::MatrixXd unflatten_layer_representation(const Eigen::MatrixXd& flat, Eigen::Index channels);

/// Pure representation pass without caching pre-activations.
Eigen::MatrixXd representation(const Network& net, const Eigen::MatrixXd& inputs, int k);

// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
};

/// One bias-corrected Adam step over a list of parameter tensors. Moments are
/// allocated on first use; t advances by exactly one per call.
void adam_step(AdamState& state, const std::vector<std::span<double>>& params,
               const std::vector<std::span<const double>>& grads);
void adam_step(AdamState& state, Network& net, const Gradients& grads);

std::vector<std::span<double>> parameter_spans(Network& net);
std::vector<std::span<const double>> gradient_spans(const Gradients& grads);

// ---------------------------------------------------------------------------

void save_network(Checkpoint& ck, const std::string& prefix, const Network& net);
Network load_network(const Checkpoint& ck, const std::string& prefix);
void save_adam(Checkpoint& ck, const std::string& prefix, const AdamState& s);
AdamState load_adam(const Checkpoint& ck, const std::string& prefix);

}  // namespace rhmlab::net
