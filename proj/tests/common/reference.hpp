#pragma once

// Loop-based reference implementations used as independent oracles. Nothing
// here reuses the segment views, flattening helpers or dense direct
// products of the library.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "rhmlab/net.hpp"
#include "rhmlab/rng.hpp"

namespace ref {

/// Per-sample activations: act[c][p].
using Act = std::vector<std::vector<double>>;

struct Trace {
  std::vector<Act> pre;   // index l-1
  std::vector<Act> post;  // index l, post[0] = input
};

inline double relu(double x) { return x > 0 ? x : 0.0; }

inline Act input_of(const Eigen::MatrixXd& x, int sample, int len) {
  Act a(static_cast<std::size_t>(x.rows()), std::vector<double>(static_cast<std::size_t>(len)));
  for (Eigen::Index c = 0; c < x.rows(); ++c)
    for (int p = 0; p < len; ++p) a[c][p] = x(c, sample * len + p);
  return a;
}

inline Trace forward(const rhmlab::net::Network& net, const Act& input) {
  Trace t;
  t.post.push_back(input);
  for (const auto& layer : net.layers()) {
    const Act& z = t.post.back();
    const int k = layer.kernel;
    const int in = static_cast<int>(z.size());
    const int out_len = static_cast<int>(z[0].size()) / k;
    Act h(static_cast<std::size_t>(layer.weight.rows()), std::vector<double>(static_cast<std::size_t>(out_len)));
    Act a = h;
    for (int c = 0; c < layer.weight.rows(); ++c) {
      for (int p = 0; p < out_len; ++p) {
        double s = layer.has_bias ? layer.bias(c) : 0.0;
        for (int tap = 0; tap < k; ++tap)
          for (int i = 0; i < in; ++i) s += layer.weight(c, tap * in + i) * z[i][k * p + tap];
        h[c][p] = s;
        a[c][p] = layer.activation == rhmlab::net::Activation::relu ? relu(s) : s;
      }
    }
    t.pre.push_back(h);
    t.post.push_back(a);
  }
  return t;
}

inline Act mask(const rhmlab::net::Network& net, const Trace& t, int l) {
  Act m = t.pre[static_cast<std::size_t>(l - 1)];
  const bool relu_layer = net.layer(l).activation == rhmlab::net::Activation::relu;
  for (auto& row : m)
    for (auto& x : row) x = relu_layer ? (x > 0 ? 1.0 : 0.0) : 1.0;
  return m;
}

inline Act hadamard(const Act& a, const Act& b) {
  Act o = a;
  for (std::size_t c = 0; c < a.size(); ++c)
    for (std::size_t p = 0; p < a[c].size(); ++p) o[c][p] = a[c][p] * b[c][p];
  return o;
}

/// Sends a layer-l signal down to layer l-1 through a (k * in) x out matrix.
inline Act send_down(const Eigen::MatrixXd& B, int k, const Act& delta) {
  const int out = static_cast<int>(delta.size());
  const int len = static_cast<int>(delta[0].size());
  const int in = static_cast<int>(B.rows()) / k;
  Act down(static_cast<std::size_t>(in), std::vector<double>(static_cast<std::size_t>(len * k), 0.0));
  for (int p = 0; p < len; ++p)
    for (int tap = 0; tap < k; ++tap)
      for (int i = 0; i < in; ++i) {
        double s = 0.0;
        for (int c = 0; c < out; ++c) s += B(tap * in + i, c) * delta[c][p];
        down[i][k * p + tap] = s;
      }
  return down;
}

struct Grads {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;
};

inline Grads zero_grads(const rhmlab::net::Network& net) {
  Grads g;
  for (const auto& layer : net.layers()) {
    g.w.push_back(Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()));
    g.b.push_back(Eigen::VectorXd::Zero(layer.weight.rows()));
  }
  return g;
}

inline void accumulate(const rhmlab::net::Network& net, int l, const Act& delta, const Act& z_prev, Grads& g) {
  const auto& layer = net.layer(l);
  const int k = layer.kernel;
  const int in = static_cast<int>(z_prev.size());
  for (std::size_t c = 0; c < delta.size(); ++c)
    for (std::size_t p = 0; p < delta[c].size(); ++p) {
      g.b[l - 1](static_cast<Eigen::Index>(c)) += delta[c][p];
      for (int tap = 0; tap < k; ++tap)
        for (int i = 0; i < in; ++i)
          g.w[l - 1](static_cast<Eigen::Index>(c), tap * in + i) += delta[c][p] * z_prev[i][k * p + tap];
    }
}

enum class Rule { bp, fa, dfa, batch_mean };

/// e is classes x batch (the head output error); B[l-1] stands in for W_l^T.
inline Grads rule_grads(const rhmlab::net::Network& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& e,
                        Rule rule, const std::vector<Eigen::MatrixXd>& B) {
  const int len = net.config().input_length;
  const int batch = static_cast<int>(x.cols()) / len;
  const int n = net.num_layers();
  auto feedback = [&](int l) -> Eigen::MatrixXd {
    return rule == Rule::bp ? Eigen::MatrixXd(net.layer(l).weight.transpose()) : B[static_cast<std::size_t>(l - 1)];
  };
  std::vector<Trace> traces;
  for (int s = 0; s < batch; ++s) traces.push_back(forward(net, input_of(x, s, len)));

  // Batch-mean masks per layer.
  std::vector<Act> mean_mask(static_cast<std::size_t>(n));
  for (int l = 1; l <= n; ++l) {
    Act acc = mask(net, traces[0], l);
    for (auto& row : acc) for (auto& v : row) v = 0.0;
    for (int s = 0; s < batch; ++s) {
      const Act m = mask(net, traces[static_cast<std::size_t>(s)], l);
      for (std::size_t c = 0; c < m.size(); ++c)
        for (std::size_t p = 0; p < m[c].size(); ++p) acc[c][p] += m[c][p] / batch;
    }
    mean_mask[static_cast<std::size_t>(l - 1)] = acc;
  }

  Grads g = zero_grads(net);
  for (int s = 0; s < batch; ++s) {
    const Trace& t = traces[static_cast<std::size_t>(s)];
    Act err(static_cast<std::size_t>(e.rows()), std::vector<double>(1));
    for (Eigen::Index c = 0; c < e.rows(); ++c) err[c][0] = e(c, s);
    Act delta = hadamard(mask(net, t, n), err);
    accumulate(net, n, delta, t.post[static_cast<std::size_t>(n - 1)], g);
    Act carried = rule == Rule::dfa ? err : (rule == Rule::batch_mean ? hadamard(mean_mask[n - 1], err) : delta);
    for (int l = n - 1; l >= 1; --l) {
      const Act back = send_down(feedback(l + 1), net.layer(l + 1).kernel, carried);
      delta = hadamard(mask(net, t, l), back);
      accumulate(net, l, delta, t.post[static_cast<std::size_t>(l - 1)], g);
      switch (rule) {
        case Rule::bp:
        case Rule::fa: carried = delta; break;
        case Rule::dfa: carried = back; break;
        case Rule::batch_mean: carried = hadamard(mean_mask[static_cast<std::size_t>(l - 1)], back); break;
      }
    }
  }
  return g;
}

}  // namespace ref
