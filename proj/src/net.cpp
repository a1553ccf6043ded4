#include "rhmlab/net.hpp"

#include <cmath>

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/errors.hpp"

namespace rhmlab::net {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"input_length", c.input_length},
                     {"depth", c.depth},
                     {"width", c.width},
                     {"bias", c.bias},
                     {"activation", to_string(c.activation)},
                     {"head_classes", c.head_classes}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  j.at("input_channels").get_to(c.input_channels);
  j.at("input_length").get_to(c.input_length);
  j.at("depth").get_to(c.depth);
  j.at("width").get_to(c.width);
  c.bias = j.value("bias", true);
  c.activation = activation_from_string(j.value("activation", std::string("relu")));
  c.head_classes = j.value("head_classes", 0);
}

Network::Network(const NetworkConfig& config) : config_(config) {
  if (config.depth < 1) throw ParameterError("network: depth must be >= 1");
  if (config.width < 1 || config.input_channels < 1) throw ParameterError("network: empty layer");
  if (config.input_length < 2 || config.input_length % (1 << config.depth) != 0) {
    throw ParameterError("network: input length must be divisible by 2^depth");
  }
  int in = config.input_channels;
  for (int l = 1; l <= config.depth; ++l) {
    Layer layer;
    layer.kernel = 2;
    layer.activation = config.activation;
    layer.has_bias = config.bias;
    layer.weight = Eigen::MatrixXd::Zero(config.width, 2 * in);
    layer.bias = Eigen::VectorXd::Zero(config.width);
    layers_.push_back(std::move(layer));
    in = config.width;
  }
  if (config.head_classes > 0) {
    Layer head;
    head.kernel = length_after(config.depth);
    head.activation = Activation::identity;
    head.has_bias = config.bias;
    head.weight = Eigen::MatrixXd::Zero(config.head_classes, head.kernel * in);
    head.bias = Eigen::VectorXd::Zero(config.head_classes);
    layers_.push_back(std::move(head));
  }
}

int Network::length_after(int l) const {
  // The head, if any, collapses the remaining extent to one position.
  return l <= config_.depth ? config_.input_length >> l : 1;
}

Eigen::Index Network::features_after(int l) const {
  const Eigen::Index channels = l == 0 ? config_.input_channels : layer(l).out_channels();
  return channels * length_after(l);
}

Gradients Gradients::zeros_like(const Network& net) {
  Gradients g;
  for (const auto& layer : net.layers()) {
    g.weight.push_back(Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()));
    g.bias.push_back(Eigen::VectorXd::Zero(layer.bias.size()));
  }
  return g;
}

void init_weights(Network& net, Rng& rng) {
  for (auto& layer : net.layers()) {
    const double fan_in = static_cast<double>(layer.weight.cols());
    const double bound = std::sqrt(6.0 / fan_in);
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
        layer.weight(i, j) = rng.uniform(-bound, bound);
      }
    }
    layer.bias.setZero();
  }
}

Eigen::Map<const Eigen::MatrixXd> segments(const Eigen::MatrixXd& z, int kernel) {
  if (z.cols() % kernel != 0) throw ShapeError("segments: column count not divisible by kernel");
  return {z.data(), z.rows() * kernel, z.cols() / kernel};
}

Eigen::MatrixXd unsegment(const Eigen::MatrixXd& s, int kernel) {
  if (s.rows() % kernel != 0) throw ShapeError("unsegment: row count not divisible by kernel");
  return Eigen::Map<const Eigen::MatrixXd>(s.data(), s.rows() / kernel, s.cols() * kernel);
}

Eigen::MatrixXd activation_derivative(Activation a, const Eigen::MatrixXd& pre) {
  if (a == Activation::identity) return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
  return (pre.array() > 0.0).cast<double>().matrix();
}

namespace {

void apply_layer(const Layer& layer, const Eigen::MatrixXd& in, Eigen::MatrixXd& pre,
                 Eigen::MatrixXd& post) {
  const auto seg = segments(in, layer.kernel);
  if (seg.rows() != layer.weight.cols()) throw ShapeError("forward: channel mismatch");
  pre.noalias() = layer.weight * seg;
  if (layer.has_bias) pre.colwise() += layer.bias;
  if (layer.activation == Activation::relu) {
    post = pre.cwiseMax(0.0);
  } else {
    post = pre;
  }
}

void check_inputs(const Network& net, const Eigen::MatrixXd& inputs) {
  const auto& c = net.config();
  if (inputs.rows() != c.input_channels || inputs.cols() % c.input_length != 0) {
    throw ShapeError("forward: expected " + std::to_string(c.input_channels) + " x (batch * " +
                     std::to_string(c.input_length) + ") inputs, got " +
                     std::to_string(inputs.rows()) + " x " + std::to_string(inputs.cols()));
  }
}

}  // namespace

ForwardCache forward(const Network& net, const Eigen::MatrixXd& inputs) {
  check_inputs(net, inputs);
  ForwardCache cache;
  cache.batch = static_cast<std::size_t>(inputs.cols() / net.config().input_length);
  const int n = net.num_layers();
  cache.pre.resize(static_cast<std::size_t>(n));
  cache.post.resize(static_cast<std::size_t>(n) + 1);
  cache.post[0] = inputs;
  for (int l = 1; l <= n; ++l) {
    apply_layer(net.layer(l), cache.post[l - 1], cache.pre[l - 1], cache.post[l]);
  }
  return cache;
}

Eigen::MatrixXd representation(const Network& net, const Eigen::MatrixXd& inputs, int k) {
  check_inputs(net, inputs);
  if (k < 0 || k > net.num_layers()) throw ShapeError("representation: layer out of range");
  const auto batch = inputs.cols() / net.config().input_length;
  if (batch == 0) return Eigen::MatrixXd(net.features_after(k), 0);
  Eigen::MatrixXd z = inputs;
  Eigen::MatrixXd pre;
  Eigen::MatrixXd post;
  for (int l = 1; l <= k; ++l) {
    apply_layer(net.layer(l), z, pre, post);
    z.swap(post);
  }
  return Eigen::Map<const Eigen::MatrixXd>(z.data(), z.size() / batch, batch);
}

LossOutput cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  const Eigen::Index classes = logits.rows();
  const Eigen::Index batch = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != batch) throw ShapeError("cross_entropy: label count");
  LossOutput out;
  out.error.resize(classes, batch);
  double total = 0.0;
  for (Eigen::Index j = 0; j < batch; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= classes) throw ParameterError("cross_entropy: label out of range");
    const double mx = logits.col(j).maxCoeff();
    const Eigen::VectorXd e = (logits.col(j).array() - mx).exp().matrix();
    const double s = e.sum();
    total += std::log(s) + mx - logits(y, j);
    out.error.col(j) = e / s;
    out.error(y, j) -= 1.0;
  }
  out.loss = total / static_cast<double>(batch);
  out.error /= static_cast<double>(batch);
  return out;
}

std::vector<int> argmax_columns(const Eigen::MatrixXd& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    Eigen::Index idx = 0;
    scores.col(j).maxCoeff(&idx);
    out[static_cast<std::size_t>(j)] = static_cast<int>(idx);
  }
  return out;
}

double accuracy(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const auto pred = argmax_columns(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void accumulate_layer_gradient(const Network& net, const ForwardCache& cache, int l,
                               const Eigen::MatrixXd& delta, Gradients& grads) {
  const Layer& layer = net.layer(l);
  const auto seg = segments(cache.post[l - 1], layer.kernel);
  if (delta.rows() != layer.weight.rows() || delta.cols() != seg.cols()) {
    throw ShapeError("layer gradient: delta shape mismatch at layer " + std::to_string(l));
  }
  grads.weight[l - 1].noalias() += delta * seg.transpose();
  if (layer.has_bias) grads.bias[l - 1] += delta.rowwise().sum();
}

Eigen::MatrixXd backward_through(const Network& net, int l, const Eigen::MatrixXd& delta) {
  const Layer& layer = net.layer(l);
  Eigen::MatrixXd s = layer.weight.transpose() * delta;
  return unsegment(s, layer.kernel);
}

Gradients backprop(const Network& net, const ForwardCache& cache, const Eigen::MatrixXd& output_error) {
  const int n = net.num_layers();
  if (cache.num_layers() != n) throw ShapeError("backprop: cache does not match network");
  if (output_error.rows() != cache.output().rows() || output_error.cols() != cache.output().cols()) {
    throw ShapeError("backprop: output error shape mismatch");
  }
  Gradients grads = Gradients::zeros_like(net);
  Eigen::MatrixXd delta = activation_derivative(net.layer(n).activation, cache.pre[n - 1])
                              .cwiseProduct(output_error);
  for (int l = n; l >= 1; --l) {
    accumulate_layer_gradient(net, cache, l, delta, grads);
    if (l > 1) {
      delta = activation_derivative(net.layer(l - 1).activation, cache.pre[l - 2])
                  .cwiseProduct(backward_through(net, l, delta));
    }
  }
  return grads;
}

Eigen::MatrixXd flatten_layer_representation(const ForwardCache& cache, int k) {
  if (k < 0 || k >= static_cast<int>(cache.post.size())) {
    throw ShapeError("flatten_layer_representation: layer index out of range");
  }
  const auto& z = cache.post[static_cast<std::size_t>(k)];
  const auto batch = static_cast<Eigen::Index>(cache.batch);
  return Eigen::Map<const Eigen::MatrixXd>(z.data(), z.size() / batch, batch);
}

Eigen::MatrixXd unflatten_layer_representation(const Eigen::MatrixXd& flat, Eigen::Index channels) {
  if (flat.rows() % channels != 0) throw ShapeError("unflatten: rows not divisible by channels");
  return Eigen::Map<const Eigen::MatrixXd>(flat.data(), channels, flat.size() / channels);
}

void adam_step(AdamState& s, const std::vector<std::span<double>>& params,
               const std::vector<std::span<const double>>& grads) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
      s.v.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
    }
  }
  if (s.m.size() != params.size()) throw ShapeError("adam: state does not match parameters");
  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() ||
        static_cast<Eigen::Index>(params[i].size()) != s.m[i].size()) {
      throw ShapeError("adam: tensor shape mismatch");
    }
    Eigen::Map<Eigen::ArrayXd> p(params[i].data(), static_cast<Eigen::Index>(params[i].size()));
    Eigen::Map<const Eigen::ArrayXd> g(grads[i].data(), static_cast<Eigen::Index>(grads[i].size()));
    auto m = s.m[i].array();
    auto v = s.v[i].array();
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.square();
    p -= s.lr * (m / c1) / ((v / c2).sqrt() + s.eps);
  }
}

std::vector<std::span<double>> parameter_spans(Network& net) {
  std::vector<std::span<double>> out;
  for (auto& layer : net.layers()) {
    out.emplace_back(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    out.emplace_back(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  return out;
}

std::vector<std::span<const double>> gradient_spans(const Gradients& grads) {
  std::vector<std::span<const double>> out;
  for (std::size_t i = 0; i < grads.weight.size(); ++i) {
    out.emplace_back(grads.weight[i].data(), static_cast<std::size_t>(grads.weight[i].size()));
    out.emplace_back(grads.bias[i].data(), static_cast<std::size_t>(grads.bias[i].size()));
  }
  return out;
}

void adam_step(AdamState& state, Network& net, const Gradients& grads) {
  adam_step(state, parameter_spans(net), gradient_spans(grads));
}

void save_network(Checkpoint& ck, const std::string& prefix, const Network& net) {
  ck.put_text(prefix + "/config", nlohmann::json(net.config()).dump());
  for (int l = 1; l <= net.num_layers(); ++l) {
    ck.put(prefix + "/W" + std::to_string(l), net.layer(l).weight);
    ck.put(prefix + "/b" + std::to_string(l), net.layer(l).bias);
  }
}

Network load_network(const Checkpoint& ck, const std::string& prefix) {
  const auto config = nlohmann::json::parse(ck.text(prefix + "/config")).get<NetworkConfig>();
  Network net(config);
  for (int l = 1; l <= net.num_layers(); ++l) {
    const auto& w = ck.matrix(prefix + "/W" + std::to_string(l));
    if (w.rows() != net.layer(l).weight.rows() || w.cols() != net.layer(l).weight.cols()) {
      throw ShapeError("load_network: weight shape mismatch at layer " + std::to_string(l));
    }
    net.layer(l).weight = w;
    net.layer(l).bias = ck.vector(prefix + "/b" + std::to_string(l));
  }
  return net;
}

void save_adam(Checkpoint& ck, const std::string& prefix, const AdamState& s) {
  ck.put_real(prefix + "/lr", s.lr);
  ck.put_real(prefix + "/beta1", s.beta1);
  ck.put_real(prefix + "/beta2", s.beta2);
  ck.put_real(prefix + "/eps", s.eps);
  ck.put_int(prefix + "/t", s.t);
  ck.put_int(prefix + "/tensors", static_cast<std::int64_t>(s.m.size()));
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    ck.put(prefix + "/m" + std::to_string(i), s.m[i]);
    ck.put(prefix + "/v" + std::to_string(i), s.v[i]);
  }
}

AdamState load_adam(const Checkpoint& ck, const std::string& prefix) {
  AdamState s;
  s.lr = ck.real(prefix + "/lr");
  s.beta1 = ck.real(prefix + "/beta1");
  s.beta2 = ck.real(prefix + "/beta2");
  s.eps = ck.real(prefix + "/eps");
  s.t = ck.integer(prefix + "/t");
  const auto n = ck.integer(prefix + "/tensors");
  for (std::int64_t i = 0; i < n; ++i) {
    s.m.push_back(ck.vector(prefix + "/m" + std::to_string(i)));
    s.v.push_back(ck.vector(prefix + "/v" + std::to_string(i)));
  }
  return s;
}

}  // namespace rhmlab::net
