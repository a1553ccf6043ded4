#include "rhmlab/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/errors.hpp"

namespace rhmlab::ssl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(SslKind k) {
  switch (k) {
    case SslKind::simclr: return "simclr";
    case SslKind::clapp: return "clapp";
    case SslKind::lpl: return "lpl";
  }
  return "clapp";
}

std::string to_string(SslScope s) { return s == SslScope::layerwise ? "layerwise" : "end_to_end"; }

SslKind ssl_kind_from_string(const std::string& s) {
  if (s == "simclr") return SslKind::simclr;
  if (s == "clapp") return SslKind::clapp;
  if (s == "lpl") return SslKind::lpl;
  throw ConfigError("unknown self-supervised loss '" + s + "'");
}

SslScope ssl_scope_from_string(const std::string& s) {
  if (s == "layerwise") return SslScope::layerwise;
  if (s == "end_to_end") return SslScope::end_to_end;
  throw ConfigError("unknown training scope '" + s + "'");
}

SslConfig SslConfig::defaults(SslKind kind) {
  SslConfig c;
  c.kind = kind;
  switch (kind) {
    case SslKind::clapp: c.lr = 2e-4; c.batch_size = 128; break;
    case SslKind::lpl: c.lr = 5e-4; c.batch_size = 512; break;
    case SslKind::simclr: c.lr = 3e-4; c.batch_size = 128; break;
  }
  return c;
}

void to_json(nlohmann::json& j, const SslConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"scope", to_string(c.scope)},
                     {"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"k_max", c.k_max},
                     {"negative_policy", rhm::to_string(c.negative_policy)},
                     {"c1", c.c1},
                     {"c2", c.c2},
                     {"eps", c.eps},
                     {"max_epochs", c.max_epochs},
                     {"early_stop", c.early_stop},
                     {"stop_loss", c.stop_loss},
                     {"window", c.window}};
}

void from_json(const nlohmann::json& j, SslConfig& c) {
  const SslKind kind = ssl_kind_from_string(j.value("kind", std::string("clapp")));
  c = SslConfig::defaults(kind);
  c.scope = ssl_scope_from_string(j.value("scope", to_string(c.scope)));
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.k_max = j.value("k_max", c.k_max);
  c.negative_policy = rhm::negative_policy_from_string(
      j.value("negative_policy", rhm::to_string(c.negative_policy)));
  c.c1 = j.value("c1", c.c1);
  c.c2 = j.value("c2", c.c2);
  c.eps = j.value("eps", c.eps);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop = j.value("early_stop", c.early_stop);
  c.stop_loss = j.value("stop_loss", c.stop_loss);
  c.window = j.value("window", c.window);
  if (c.batch_size < 2) throw ConfigError("ssl: batch_size must be at least 2");
  if (c.k_max < 1) throw ConfigError("ssl: k_max must be positive");
  if (c.lr <= 0) throw ConfigError("ssl: lr must be positive");
}

// ---------------------------------------------------------------------------

LossOutput simclr_loss(const MatrixXd& z, std::span<const int> object_ids) {
  const Eigen::Index B = z.cols();
  if (static_cast<Eigen::Index>(object_ids.size()) != B) throw ShapeError("simclr: object id count");

  std::vector<int> n_pos(static_cast<std::size_t>(B), 0);
  double n_pairs = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index k = 0; k < B; ++k) {
      if (k != i && object_ids[i] == object_ids[k]) ++n_pos[i];
    }
    n_pairs += n_pos[i];
  }
  if (n_pairs == 0) throw ParameterError("simclr: batch has no positive pair");

  const MatrixXd sim = z.transpose() * z;
  // G(i, k) = dL/dsim(i, k).
  MatrixXd G = MatrixXd::Zero(B, B);
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    if (n_pos[i] == 0) continue;
    double mx = -1e300;
    for (Eigen::Index k = 0; k < B; ++k) {
      if (k != i) mx = std::max(mx, sim(i, k));
    }
    double denom = 0.0;
    for (Eigen::Index k = 0; k < B; ++k) {
      if (k != i) denom += std::exp(sim(i, k) - mx);
    }
    const double lse = mx + std::log(denom);
    for (Eigen::Index k = 0; k < B; ++k) {
      if (k == i) continue;
      const double p = std::exp(sim(i, k) - lse);
      G(i, k) = n_pos[i] * p;
      if (object_ids[k] == object_ids[i]) {
        total += lse - sim(i, k);
        G(i, k) -= 1.0;
      }
    }
  }
  G /= n_pairs;
  LossOutput out;
  out.loss = total / n_pairs;
  out.grad = z * (G + G.transpose());
  out.parts = {out.loss};
  return out;
}

ClappGates draw_clapp_gates(const std::vector<rhm::ObjectGroup>& groups, int k_max, Rng& rng) {
  ClappGates gates(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    gates[g].resize(static_cast<std::size_t>(k_max));
    for (auto& row : gates[g]) {
      row.resize(groups[g].size());
      for (auto& a : row) a = rng.coin() ? 1 : 0;
    }
  }
  return gates;
}

LossOutput clapp_loss(const MatrixXd& z, const std::vector<rhm::ObjectGroup>& groups,
                      const MatrixXd& w_pred, const ClappGates& gates, int k_max) {
  const Eigen::Index D = z.rows();
  if (w_pred.rows() != D || w_pred.cols() != D) throw ShapeError("clapp: W^pred must be D x D");
  if (gates.size() != groups.size()) throw ShapeError("clapp: gate draws do not match groups");

  // Every active hinge term is c * z_i^T W z_j; collecting the coefficients
  // in C turns the gradients into W Z C^T + W^T Z C and Z C Z^T.
  const MatrixXd wz = w_pred * z;
  MatrixXd coef = MatrixXd::Zero(z.cols(), z.cols());
  double pos_total = 0.0;
  double neg_total = 0.0;

  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    const std::size_t n = std::min(grp.size(), grp.negatives.size());
    for (int k = 1; k <= k_max; ++k) {
      if (n <= static_cast<std::size_t>(k)) continue;
      const auto& alpha = gates[g].at(static_cast<std::size_t>(k - 1));
      double n_pos = 0.0;
      double n_neg = 0.0;
      for (std::size_t i = static_cast<std::size_t>(k); i < n; ++i) (alpha[i] ? n_pos : n_neg) += 1.0;
      n_pos = std::max(1.0, n_pos);
      n_neg = std::max(1.0, n_neg);

      for (std::size_t i = static_cast<std::size_t>(k); i < n; ++i) {
        const auto zi = static_cast<Eigen::Index>(grp.begin + i);
        if (alpha[i]) {
          const auto zj = static_cast<Eigen::Index>(grp.begin + i - static_cast<std::size_t>(k));
          const double s = z.col(zi).dot(wz.col(zj));
          if (1.0 - s > 0.0) {
            pos_total += (1.0 - s) / n_pos;
            coef(zi, zj) -= 1.0 / n_pos;
          }
        } else {
          const auto cj = static_cast<Eigen::Index>(grp.negatives[i - static_cast<std::size_t>(k)]);
          const double s = z.col(zi).dot(wz.col(cj));
          if (1.0 + s > 0.0) {
            neg_total += (1.0 + s) / n_neg;
            coef(zi, cj) += 1.0 / n_neg;
          }
        }
      }
    }
  }

  LossOutput out;
  const MatrixXd zc = z * coef;
  out.grad.noalias() = wz * coef.transpose();
  out.grad.noalias() += w_pred.transpose() * zc;
  out.grad_pred.noalias() = zc * z.transpose();
  out.loss = pos_total + neg_total;
  out.parts = {pos_total, neg_total};
  return out;
}

LossOutput lpl_loss(const MatrixXd& z, std::span<const std::size_t> partners, double c1, double c2,
                    double eps) {
  const Eigen::Index M = z.rows();
  const Eigen::Index B = z.cols();
  if (B < 2) throw ParameterError("lpl: batch size must be at least 2");
  if (static_cast<Eigen::Index>(partners.size()) != B) throw ShapeError("lpl: partner count");
  const double b = static_cast<double>(B);
  const double m = static_cast<double>(M);

  LossOutput out;
  out.grad = MatrixXd::Zero(M, B);

  double pred = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto j = static_cast<Eigen::Index>(partners[static_cast<std::size_t>(i)]);
    const VectorXd d = z.col(i) - z.col(j);
    pred += d.squaredNorm();
    out.grad.col(i) += 2.0 * d / b;
    out.grad.col(j) -= 2.0 * d / b;
  }
  pred /= b;

  const VectorXd mean = z.rowwise().mean();
  const MatrixXd zc = z.colwise() - mean;
  const MatrixXd cov = zc * zc.transpose() / (b - 1.0);
  const VectorXd var = cov.diagonal();

  double var_term = 0.0;
  for (Eigen::Index f = 0; f < M; ++f) var_term -= std::log(var(f) + eps);
  var_term /= m;
  const VectorXd scale = (var.array() + eps).inverse().matrix() * (-2.0 / (m * (b - 1.0)));
  out.grad += c1 * (scale.asDiagonal() * zc);

  double decorr = 0.0;
  if (M > 1) {
    MatrixXd off = cov;
    off.diagonal().setZero();
    decorr = off.squaredNorm() / (m * (m - 1.0));
    out.grad += c2 * (4.0 / (m * (m - 1.0) * (b - 1.0))) * (off * zc);
  }

  out.loss = pred + c1 * var_term + c2 * decorr;
  out.parts = {pred, var_term, decorr};
  return out;
}

std::vector<std::size_t> positive_partners(const rhm::PairBatch& batch) {
  std::vector<std::size_t> partners(batch.size());
  for (const auto& grp : batch.groups) {
    for (std::size_t t = 0; t < grp.size(); ++t) partners[grp.begin + t] = grp.positives[t];
  }
  return partners;
}

namespace {

using Strided = Eigen::Map<const MatrixXd, 0, Eigen::OuterStride<>>;

LossOutput flat_loss(const SslConfig& config, const MatrixXd& z, const rhm::PairBatch& batch,
                     const MatrixXd& w_pred, const ClappGates& gates,
                     const std::vector<std::size_t>& partners) {
  switch (config.kind) {
    case SslKind::simclr: return simclr_loss(z, batch.object_ids);
    case SslKind::clapp: return clapp_loss(z, batch.groups, w_pred, gates, config.k_max);
    case SslKind::lpl: return lpl_loss(z, partners, config.c1, config.c2, config.eps);
  }
  throw std::logic_error("ssl: unhandled loss");
}

}  // namespace

LossOutput layer_loss(const SslConfig& config, const MatrixXd& layer_output, const rhm::PairBatch& batch,
                      const MatrixXd& w_pred, const ClappGates& gates) {
  const Eigen::Index C = layer_output.rows();
  const auto B = static_cast<Eigen::Index>(batch.size());
  if (B == 0 || layer_output.cols() % B != 0) throw ShapeError("ssl: layer output does not match batch");
  const Eigen::Index len = layer_output.cols() / B;
  const std::vector<std::size_t> partners =
      config.kind == SslKind::lpl ? positive_partners(batch) : std::vector<std::size_t>{};

  if (len == 1) return flat_loss(config, layer_output, batch, w_pred, gates, partners);

  LossOutput out;
  out.grad = MatrixXd::Zero(C, layer_output.cols());
  if (config.kind == SslKind::clapp) out.grad_pred = MatrixXd::Zero(C, C);
  for (Eigen::Index p = 0; p < len; ++p) {
    // Columns p, p + len, p + 2 len, ...: location p of every sample.
    const MatrixXd zp = Strided(layer_output.data() + p * C, C, B, Eigen::OuterStride<>(len * C));
    LossOutput lp = flat_loss(config, zp, batch, w_pred, gates, partners);
    out.loss += lp.loss;
    if (out.parts.empty()) out.parts.assign(lp.parts.size(), 0.0);
    for (std::size_t i = 0; i < lp.parts.size(); ++i) out.parts[i] += lp.parts[i];
    for (Eigen::Index s = 0; s < B; ++s) out.grad.col(s * len + p) = lp.grad.col(s);
    if (lp.grad_pred.size()) out.grad_pred += lp.grad_pred;
  }
  const double inv = 1.0 / static_cast<double>(len);
  out.loss *= inv;
  for (auto& x : out.parts) x *= inv;
  out.grad *= inv;
  if (out.grad_pred.size()) out.grad_pred *= inv;
  return out;
}

PredWeights PredWeights::identity_init(const net::Network& net) {
  PredWeights p;
  for (const auto& layer : net.layers()) {
    const Eigen::Index d = layer.out_channels();
    p.w.push_back(MatrixXd::Identity(d, d) / std::sqrt(static_cast<double>(d)));
  }
  return p;
}

void update_pred_weights(MatrixXd& w_pred, const MatrixXd& grad, double lr) {
  if (grad.size() == 0) return;
  w_pred -= lr * grad;
}

net::Gradients layerwise_gradients(const net::Network& net, const net::ForwardCache& cache,
                                   const rhm::PairBatch& batch, const SslConfig& config,
                                   const PredWeights& pred, const ClappGates& gates,
                                   std::vector<MatrixXd>* pred_grads, StepResult* result) {
  const int n = net.num_layers();
  net::Gradients g = net::Gradients::zeros_like(net);
  if (pred_grads) pred_grads->assign(static_cast<std::size_t>(n), MatrixXd());
  if (result) *result = StepResult{};
  static const MatrixXd kNoPred;
  for (int l = 1; l <= n; ++l) {
    const MatrixXd& w = config.kind == SslKind::clapp ? pred.w.at(static_cast<std::size_t>(l - 1)) : kNoPred;
    LossOutput lo = layer_loss(config, cache.post[static_cast<std::size_t>(l)], batch, w, gates);
    const MatrixXd delta =
        net::activation_derivative(net.layer(l).activation, cache.pre[static_cast<std::size_t>(l - 1)])
            .cwiseProduct(lo.grad);
    net::accumulate_layer_gradient(net, cache, l, delta, g);
    if (pred_grads) (*pred_grads)[static_cast<std::size_t>(l - 1)] = std::move(lo.grad_pred);
    if (result) {
      result->loss.push_back(lo.loss);
      result->parts.push_back(std::move(lo.parts));
    }
  }
  return g;
}

net::Gradients end_to_end_gradients(const net::Network& net, const net::ForwardCache& cache,
                                    const rhm::PairBatch& batch, const SslConfig& config,
                                    const PredWeights& pred, const ClappGates& gates,
                                    std::vector<MatrixXd>* pred_grads, StepResult* result) {
  const int n = net.num_layers();
  static const MatrixXd kNoPred;
  const MatrixXd& w = config.kind == SslKind::clapp ? pred.w.at(static_cast<std::size_t>(n - 1)) : kNoPred;
  LossOutput lo = layer_loss(config, cache.output(), batch, w, gates);
  net::Gradients g = net::backprop(net, cache, lo.grad);
  if (pred_grads) {
    pred_grads->assign(static_cast<std::size_t>(n), MatrixXd());
    (*pred_grads)[static_cast<std::size_t>(n - 1)] = std::move(lo.grad_pred);
  }
  if (result) {
    *result = StepResult{};
    result->loss.push_back(lo.loss);
    result->parts.push_back(std::move(lo.parts));
  }
  return g;
}

namespace {

StepResult train_step(bool layerwise, net::Network& net, net::AdamState& adam, PredWeights& pred,
                      const rhm::PairBatch& batch, const SslConfig& config, Rng& rng) {
  const net::ForwardCache cache = net::forward(net, batch.inputs);
  ClappGates gates;
  if (config.kind == SslKind::clapp) gates = draw_clapp_gates(batch.groups, config.k_max, rng);
  std::vector<MatrixXd> pred_grads;
  StepResult result;
  const net::Gradients g =
      layerwise ? layerwise_gradients(net, cache, batch, config, pred, gates, &pred_grads, &result)
                : end_to_end_gradients(net, cache, batch, config, pred, gates, &pred_grads, &result);
  // One Adam call covers every layer; moments are per parameter, so this is
  // the same as an independent optimizer per layer.
  net::adam_step(adam, net, g);
  if (config.kind == SslKind::clapp) {
    for (std::size_t l = 0; l < pred_grads.size(); ++l) update_pred_weights(pred.w[l], pred_grads[l], config.lr);
  }
  return result;
}

}  // namespace

StepResult layerwise_train_step(net::Network& net, net::AdamState& adam, PredWeights& pred,
                                const rhm::PairBatch& batch, const SslConfig& config, Rng& rng) {
  return train_step(true, net, adam, pred, batch, config, rng);
}

StepResult end_to_end_train_step(net::Network& net, net::AdamState& adam, PredWeights& pred,
                                 const rhm::PairBatch& batch, const SslConfig& config, Rng& rng) {
  return train_step(false, net, adam, pred, batch, config, rng);
}

std::string loss_log_csv(SslKind kind, const std::vector<LossLogRow>& rows) {
  std::string out;
  switch (kind) {
    case SslKind::lpl: out = "epoch,layer,loss_pred,loss_var,loss_decorr\n"; break;
    case SslKind::clapp: out = "epoch,layer,loss_pos,loss_neg\n"; break;
    case SslKind::simclr: out = "epoch,layer,loss\n"; break;
  }
  char buf[64];
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.layer);
    for (double x : r.parts) {
      std::snprintf(buf, sizeof(buf), ",%.10g", x);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

SslTrainer::SslTrainer(net::Network net, const SslConfig& config, std::uint64_t seed)
    : net_(std::move(net)), config_(config), rng_(seed) {
  if (net_.has_head()) throw ParameterError("self-supervised training expects a network without head");
  adam_.lr = config.lr;
  pred_ = PredWeights::identity_init(net_);
}

double SslTrainer::window_loss() const {
  if (window_.empty()) return 0.0;
  return std::accumulate(window_.begin(), window_.end(), 0.0) / static_cast<double>(window_.size());
}

bool SslTrainer::run_epoch(const rhm::Dataset& data) {
  const auto by_object = rhm::index_by_object(data);
  const std::size_t steps = (data.size() + config_.batch_size - 1) / config_.batch_size;
  const bool layerwise = config_.scope == SslScope::layerwise;
  const int top = net_.num_layers();
  const int first = layerwise ? 1 : top;

  std::vector<std::vector<double>> sums;
  bool crossed = false;
  std::size_t done = 0;
  for (std::size_t s = 0; s < steps && !crossed; ++s) {
    const rhm::PairBatch batch =
        rhm::make_pair_batch(data, by_object, config_.batch_size, config_.negative_policy, rng_);
    const StepResult r = train_step(layerwise, net_, adam_, pred_, batch, config_, rng_);
    if (sums.empty()) {
      for (const auto& p : r.parts) sums.emplace_back(p.size(), 0.0);
    }
    for (std::size_t l = 0; l < r.parts.size(); ++l) {
      for (std::size_t i = 0; i < r.parts[l].size(); ++i) sums[l][i] += r.parts[l][i];
    }
    ++done;
    window_.push_back(r.loss.back());
    while (window_.size() > config_.window) window_.pop_front();
    // LPL can go negative through its log-variance term, so a small-loss
    // threshold has no meaning for it.
    if (config_.early_stop && config_.kind != SslKind::lpl && window_.size() == config_.window &&
        window_loss() < config_.stop_loss) {
      crossed = true;
    }
  }
  ++epoch_;
  for (std::size_t l = 0; l < sums.size(); ++l) {
    for (auto& x : sums[l]) x /= static_cast<double>(done);
    log_.push_back({epoch_, first + static_cast<int>(l), sums[l]});
  }
  if (crossed) stopped_ = true;
  return crossed;
}

TrainSummary SslTrainer::train(const rhm::Dataset& data, int epochs) {
  while (epoch_ < epochs && !stopped_) run_epoch(data);
  return {epoch_, stopped_, window_loss()};
}

void SslTrainer::save(Checkpoint& ck) const {
  net::save_network(ck, "net", net_);
  net::save_adam(ck, "adam", adam_);
  nlohmann::json cfg = config_;
  ck.put_text("ssl/config", cfg.dump());
  ck.put_text("rng", rng_.state());
  ck.put_int("ssl/epoch", epoch_);
  ck.put_int("ssl/stopped", stopped_ ? 1 : 0);
  ck.put_int("ssl/n_pred", static_cast<std::int64_t>(pred_.w.size()));
  for (std::size_t l = 0; l < pred_.w.size(); ++l) ck.put("ssl/pred" + std::to_string(l + 1), pred_.w[l]);
  VectorXd win(static_cast<Eigen::Index>(window_.size()));
  for (std::size_t i = 0; i < window_.size(); ++i) win(static_cast<Eigen::Index>(i)) = window_[i];
  ck.put("ssl/window", win);
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : log_) log.push_back({r.epoch, r.layer, r.parts});
  ck.put_text("ssl/log", log.dump());
}

SslTrainer SslTrainer::load(const Checkpoint& ck) {
  const SslConfig config = nlohmann::json::parse(ck.text("ssl/config")).get<SslConfig>();
  SslTrainer t(net::load_network(ck, "net"), config, 0);
  t.adam_ = net::load_adam(ck, "adam");
  t.rng_.set_state(ck.text("rng"));
  t.epoch_ = static_cast<int>(ck.integer("ssl/epoch"));
  t.stopped_ = ck.integer("ssl/stopped") != 0;
  t.pred_.w.clear();
  for (std::int64_t l = 0; l < ck.integer("ssl/n_pred"); ++l) {
    t.pred_.w.push_back(ck.matrix("ssl/pred" + std::to_string(l + 1)));
  }
  const VectorXd win = ck.vector("ssl/window");
  for (Eigen::Index i = 0; i < win.size(); ++i) t.window_.push_back(win(i));
  for (const auto& r : nlohmann::json::parse(ck.text("ssl/log"))) {
    t.log_.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<std::vector<double>>()});
  }
  return t;
}

}  // namespace rhmlab::ssl
