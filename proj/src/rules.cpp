#include "rhmlab/rules.hpp"

#include <cstdio>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/errors.hpp"

namespace rhmlab::rules {

using Eigen::MatrixXd;
using net::ForwardCache;
using net::Gradients;
using net::Network;

std::string to_string(RuleKind k) {
  switch (k) {
    case RuleKind::bp: return "bp";
    case RuleKind::fa: return "input_specific";
    case RuleKind::dfa: return "no_mask";
    case RuleKind::batch_mean: return "batch_mean";
    case RuleKind::lga: return "lga";
  }
  return "bp";
}

RuleKind rule_from_string(const std::string& s) {
  if (s == "bp") return RuleKind::bp;
  if (s == "input_specific" || s == "fa") return RuleKind::fa;
  if (s == "no_mask" || s == "dfa") return RuleKind::dfa;
  if (s == "batch_mean") return RuleKind::batch_mean;
  if (s == "lga") return RuleKind::lga;
  throw ConfigError("unknown update rule '" + s + "'");
}

std::vector<RuleKind> all_rules() {
  return {RuleKind::bp, RuleKind::fa, RuleKind::dfa, RuleKind::batch_mean, RuleKind::lga};
}

namespace {

Eigen::Map<const MatrixXd> flat(const MatrixXd& x, std::size_t batch) {
  const auto b = static_cast<Eigen::Index>(batch);
  return {x.data(), x.size() / b, b};
}

MatrixXd mask_of(const Network& net, const ForwardCache& cache, int l) {
  return net::activation_derivative(net.layer(l).activation, cache.pre[l - 1]);
}

// Mean over samples of a C x (batch * len) mask, broadcast back to all samples.
MatrixXd batch_mean_mask(const MatrixXd& mask, std::size_t batch) {
  const Eigen::Index len = mask.cols() / static_cast<Eigen::Index>(batch);
  MatrixXd mean = MatrixXd::Zero(mask.rows(), len);
  for (std::size_t s = 0; s < batch; ++s) mean += mask.middleCols(static_cast<Eigen::Index>(s) * len, len);
  mean /= static_cast<double>(batch);
  MatrixXd out(mask.rows(), mask.cols());
  for (std::size_t s = 0; s < batch; ++s) out.middleCols(static_cast<Eigen::Index>(s) * len, len) = mean;
  return out;
}

void check_error(const ForwardCache& cache, const MatrixXd& e) {
  if (e.rows() != cache.output().rows() || e.cols() != cache.output().cols()) {
    throw ShapeError("output error shape does not match network output");
  }
}

const MatrixXd& feedback_at(const Network& net, const FeedbackConfig& fb, int l) {
  if (static_cast<int>(fb.feedback.size()) < l || fb.feedback[l - 1].size() == 0) {
    throw ShapeError("feedback matrix missing for layer " + std::to_string(l));
  }
  const auto& b = fb.feedback[l - 1];
  const auto& w = net.layer(l).weight;
  if (b.rows() != w.cols() || b.cols() != w.rows()) {
    throw ShapeError("feedback matrix for layer " + std::to_string(l) + " does not match W^T");
  }
  return b;
}

const MatrixXd& direct_at(const Network& net, const FeedbackConfig& fb, int l) {
  if (static_cast<int>(fb.direct.size()) < l || fb.direct[l - 1].size() == 0) {
    throw ShapeError("direct feedback missing for layer " + std::to_string(l));
  }
  const auto& d = fb.direct[l - 1];
  if (d.rows() != net.features_after(l) || d.cols() != net.features_after(net.num_layers())) {
    throw ShapeError("direct feedback for layer " + std::to_string(l) + " has wrong shape");
  }
  return d;
}

// Gradients for direct-projection rules: delta_l = rho'(h_l) * (D_l e).
Gradients direct_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e,
                       const FeedbackConfig& fb) {
  check_error(cache, e);
  const int n = net.num_layers();
  Gradients g = Gradients::zeros_like(net);
  net::accumulate_layer_gradient(net, cache, n, mask_of(net, cache, n).cwiseProduct(e), g);
  const auto e_flat = flat(e, cache.batch);
  for (int l = n - 1; l >= 1; --l) {
    const MatrixXd projected = direct_at(net, fb, l) * e_flat;
    const MatrixXd delta = mask_of(net, cache, l).cwiseProduct(
        net::unflatten_layer_representation(projected, net.layer(l).out_channels()));
    net::accumulate_layer_gradient(net, cache, l, delta, g);
  }
  return g;
}

}  // namespace

FeedbackConfig freeze_transpose(const Network& net, RuleKind kind) {
  FeedbackConfig fb;
  fb.kind = kind;
  if (kind == RuleKind::bp) return fb;
  fb.feedback.resize(static_cast<std::size_t>(net.num_layers()));
  for (int l = 2; l <= net.num_layers(); ++l) fb.feedback[l - 1] = net.layer(l).weight.transpose();
  if (kind == RuleKind::dfa || kind == RuleKind::lga) fb.direct = direct_products(net, fb.feedback);
  return fb;
}

std::vector<MatrixXd> direct_products(const Network& net, const std::vector<MatrixXd>& feedback) {
  const int n = net.num_layers();
  const Eigen::Index out_dim = net.features_after(n);
  std::vector<MatrixXd> direct(static_cast<std::size_t>(n) - 1);
  // Push the out_dim unit errors through the feedback chain as a batch.
  MatrixXd x = net::unflatten_layer_representation(MatrixXd::Identity(out_dim, out_dim),
                                                   net.layer(n).out_channels());
  FeedbackConfig probe;
  probe.feedback = feedback;
  for (int j = n; j >= 2; --j) {
    x = net::unsegment(feedback_at(net, probe, j) * x, net.layer(j).kernel);
    direct[j - 2] = Eigen::Map<const MatrixXd>(x.data(), x.size() / out_dim, out_dim);
  }
  return direct;
}

std::vector<MatrixXd> bp_deltas(const Network& net, const ForwardCache& cache, const MatrixXd& e) {
  check_error(cache, e);
  const int n = net.num_layers();
  std::vector<MatrixXd> deltas(static_cast<std::size_t>(n));
  deltas[n - 1] = mask_of(net, cache, n).cwiseProduct(e);
  for (int l = n - 1; l >= 1; --l) {
    deltas[l - 1] = mask_of(net, cache, l).cwiseProduct(net::backward_through(net, l + 1, deltas[l]));
  }
  return deltas;
}

Gradients bp_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e) {
  check_error(cache, e);
  return net::backprop(net, cache, e);
}

Gradients fa_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e,
                   const FeedbackConfig& fb) {
  check_error(cache, e);
  const int n = net.num_layers();
  Gradients g = Gradients::zeros_like(net);
  MatrixXd delta = mask_of(net, cache, n).cwiseProduct(e);
  for (int l = n; l >= 1; --l) {
    net::accumulate_layer_gradient(net, cache, l, delta, g);
    if (l > 1) {
      delta = mask_of(net, cache, l - 1)
                  .cwiseProduct(net::unsegment(feedback_at(net, fb, l) * delta, net.layer(l).kernel));
    }
  }
  return g;
}

Gradients dfa_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e,
                    const FeedbackConfig& fb) {
  return direct_grads(net, cache, e, fb);
}

Gradients batchmean_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e,
                          const FeedbackConfig& fb) {
  check_error(cache, e);
  const int n = net.num_layers();
  Gradients g = Gradients::zeros_like(net);
  MatrixXd local = mask_of(net, cache, n);
  net::accumulate_layer_gradient(net, cache, n, local.cwiseProduct(e), g);
  // Upstream signal carries batch-averaged masks; only the target layer's
  // own mask stays per-sample.
  MatrixXd carried = batch_mean_mask(local, cache.batch).cwiseProduct(e);
  for (int l = n - 1; l >= 1; --l) {
    const MatrixXd back = net::unsegment(feedback_at(net, fb, l + 1) * carried, net.layer(l + 1).kernel);
    local = mask_of(net, cache, l);
    net::accumulate_layer_gradient(net, cache, l, local.cwiseProduct(back), g);
    if (l > 1) carried = batch_mean_mask(local, cache.batch).cwiseProduct(back);
  }
  return g;
}

Gradients lga_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e,
                    const FeedbackConfig& fb) {
  return direct_grads(net, cache, e, fb);
}

Gradients rule_grads(const Network& net, const ForwardCache& cache, const MatrixXd& e,
                     const FeedbackConfig& fb) {
  switch (fb.kind) {
    case RuleKind::bp: return bp_grads(net, cache, e);
    case RuleKind::fa: return fa_grads(net, cache, e, fb);
    case RuleKind::dfa: return dfa_grads(net, cache, e, fb);
    case RuleKind::batch_mean: return batchmean_grads(net, cache, e, fb);
    case RuleKind::lga: return lga_grads(net, cache, e, fb);
  }
  throw std::logic_error("rule_grads: unhandled rule");
}

LgaFit fit_lga(const Network& net, const ForwardCache& cache, const MatrixXd& e, int l, double ridge) {
  if (l < 1 || l >= net.num_layers()) throw ParameterError("fit_lga: layer must be hidden");
  const auto deltas = bp_deltas(net, cache, e);
  const auto G = flat(deltas[l - 1], cache.batch);
  const auto E = flat(e, cache.batch);

  MatrixXd normal = E * E.transpose();
  if (ridge > 0.0) {
    normal.diagonal().array() += ridge;
  } else {
    Eigen::FullPivLU<MatrixXd> lu(normal);
    lu.setThreshold(1e-10);
    if (!lu.isInvertible()) {
      throw ParameterError("fit_lga: sum of e e^T is singular; a positive ridge is required");
    }
  }
  const MatrixXd cross = E * G.transpose();  // dim(e) x dim(h)
  LgaFit fit;
  fit.map = normal.ldlt().solve(cross).transpose();
  fit.residual = (fit.map * E - G).squaredNorm();
  return fit;
}

std::uint64_t feedback_checksum(const FeedbackConfig& fb) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const MatrixXd& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& m : fb.feedback) mix(m);
  for (const auto& m : fb.direct) mix(m);
  return h;
}

// ---------------------------------------------------------------------------

MatrixXd gather_samples(const MatrixXd& inputs, int length, std::span<const std::size_t> indices) {
  MatrixXd out(inputs.rows(), static_cast<Eigen::Index>(indices.size()) * length);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.middleCols(static_cast<Eigen::Index>(i) * length, length) =
        inputs.middleCols(static_cast<Eigen::Index>(indices[i]) * length, length);
  }
  return out;
}

double evaluate_accuracy(const Network& net, const MatrixXd& inputs, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  const int d = net.config().input_length;
  constexpr std::size_t kChunk = 4096;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < labels.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, labels.size() - start);
    const MatrixXd x = inputs.middleCols(static_cast<Eigen::Index>(start) * d,
                                         static_cast<Eigen::Index>(count) * d);
    const MatrixXd out = net::representation(net, x, net.num_layers());
    const auto pred = net::argmax_columns(out);
    for (std::size_t i = 0; i < count; ++i) hits += pred[i] == labels[start + i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

SupervisedTrainer::SupervisedTrainer(Network net, const SupervisedConfig& config, std::uint64_t seed)
    : net_(std::move(net)), config_(config), rng_(seed) {
  if (!net_.has_head()) throw ParameterError("supervised training needs a readout head");
  adam_.lr = config.lr;
}

double SupervisedTrainer::window_accuracy() const {
  if (window_.empty()) return 0.0;
  return std::accumulate(window_.begin(), window_.end(), 0.0) / static_cast<double>(window_.size());
}

std::pair<double, double> SupervisedTrainer::step(const MatrixXd& inputs, std::span<const int> labels) {
  const ForwardCache cache = net::forward(net_, inputs);
  const auto ce = net::cross_entropy(cache.output(), labels);
  const double acc = net::accuracy(cache.output(), labels);
  const Gradients g = rule_grads(net_, cache, ce.error, feedback_);
  net::adam_step(adam_, net_, g);
  window_.push_back(acc);
  while (window_.size() > config_.window) window_.pop_front();
  return {ce.loss, acc};
}

EpochStats SupervisedTrainer::run_epoch(const MatrixXd& inputs, const std::vector<int>& labels,
                                        std::optional<double> stop_threshold) {
  const int d = net_.config().input_length;
  const auto order = rng_.permutation(labels.size());
  EpochStats stats;
  double loss_sum = 0.0;
  std::vector<int> batch_labels;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t count = std::min(config_.batch_size, order.size() - start);
    const std::span<const std::size_t> idx(order.data() + start, count);
    batch_labels.clear();
    for (auto i : idx) batch_labels.push_back(labels[i]);
    loss_sum += step(gather_samples(inputs, d, idx), batch_labels).first;
    stats.steps += 1;
    if (stop_threshold && window_.size() == config_.window && window_accuracy() >= *stop_threshold) {
      stats.crossed = true;
      break;
    }
  }
  stats.mean_loss = stats.steps ? loss_sum / static_cast<double>(stats.steps) : 0.0;
  stats.window_accuracy = window_accuracy();
  return stats;
}

void SupervisedTrainer::save(Checkpoint& ck) const {
  net::save_network(ck, "net", net_);
  net::save_adam(ck, "adam", adam_);
  ck.put_text("rng", rng_.state());
  ck.put_real("sup/lr", config_.lr);
  ck.put_int("sup/batch_size", static_cast<std::int64_t>(config_.batch_size));
  ck.put_int("sup/window", static_cast<std::int64_t>(config_.window));
  Eigen::VectorXd win(static_cast<Eigen::Index>(window_.size()));
  for (std::size_t i = 0; i < window_.size(); ++i) win(static_cast<Eigen::Index>(i)) = window_[i];
  ck.put("sup/window_values", win);
  ck.put_text("fb/kind", to_string(feedback_.kind));
  ck.put_real("fb/ridge", feedback_.ridge);
  ck.put_int("fb/n_feedback", static_cast<std::int64_t>(feedback_.feedback.size()));
  ck.put_int("fb/n_direct", static_cast<std::int64_t>(feedback_.direct.size()));
  for (std::size_t i = 0; i < feedback_.feedback.size(); ++i) ck.put("fb/B" + std::to_string(i), feedback_.feedback[i]);
  for (std::size_t i = 0; i < feedback_.direct.size(); ++i) ck.put("fb/D" + std::to_string(i), feedback_.direct[i]);
}

SupervisedTrainer SupervisedTrainer::load(const Checkpoint& ck) {
  SupervisedConfig config;
  config.lr = ck.real("sup/lr");
  config.batch_size = static_cast<std::size_t>(ck.integer("sup/batch_size"));
  config.window = static_cast<std::size_t>(ck.integer("sup/window"));
  SupervisedTrainer t(net::load_network(ck, "net"), config, 0);
  t.adam_ = net::load_adam(ck, "adam");
  t.rng_.set_state(ck.text("rng"));
  const auto win = ck.vector("sup/window_values");
  for (Eigen::Index i = 0; i < win.size(); ++i) t.window_.push_back(win(i));
  t.feedback_.kind = rule_from_string(ck.text("fb/kind"));
  t.feedback_.ridge = ck.real("fb/ridge");
  for (std::int64_t i = 0; i < ck.integer("fb/n_feedback"); ++i) {
    t.feedback_.feedback.push_back(ck.matrix("fb/B" + std::to_string(i)));
  }
  for (std::int64_t i = 0; i < ck.integer("fb/n_direct"); ++i) {
    t.feedback_.direct.push_back(ck.matrix("fb/D" + std::to_string(i)));
  }
  return t;
}

PretrainResult pretrain(const rhm::Dataset& data, const net::NetworkConfig& net_config,
                        const MaskingConfig& config, std::uint64_t seed) {
  net::NetworkConfig nc = net_config;
  nc.head_classes = data.rulebook->params.n_c;
  Network net(nc);
  Rng init_rng = Rng::stream(seed, kInitStream);
  net::init_weights(net, init_rng);

  PretrainResult result{SupervisedTrainer(std::move(net), config.optimizer, derive_seed(seed, kTrainerStream)),
                        {}, 0, 0};
  const int v = data.rulebook->params.v;
  const MatrixXd train_x = rhm::encode_inputs(data.samples, v);
  const MatrixXd test_x = rhm::encode_inputs(data.holdout, v);
  const auto train_y = data.labels();
  const auto test_y = data.holdout_labels();

  for (int epoch = 1; epoch <= config.max_pretrain_epochs; ++epoch) {
    const EpochStats stats = result.trainer.run_epoch(train_x, train_y, config.threshold);
    result.log.push_back({epoch, "pretrain", "bp", stats.mean_loss, stats.window_accuracy,
                          evaluate_accuracy(result.trainer.network(), test_x, test_y)});
    result.epochs = epoch;
    if (stats.crossed) {
      result.t_stop = result.trainer.steps();
      return result;
    }
  }
  std::ostringstream msg;
  msg << "masking protocol: BP pretraining did not reach window accuracy " << config.threshold
      << " within " << config.max_pretrain_epochs << " epochs (last window accuracy "
      << result.trainer.window_accuracy() << ")";
  throw std::runtime_error(msg.str());
}

MaskingResult continue_training(PretrainResult start, const rhm::Dataset& data,
                                const MaskingConfig& config, RuleKind rule) {
  SupervisedTrainer& trainer = start.trainer;
  const int v = data.rulebook->params.v;
  const MatrixXd train_x = rhm::encode_inputs(data.samples, v);
  const MatrixXd test_x = rhm::encode_inputs(data.holdout, v);
  const auto train_y = data.labels();
  const auto test_y = data.holdout_labels();

  FeedbackConfig fb = freeze_transpose(trainer.network(), rule);
  fb.ridge = config.ridge;
  if (rule == RuleKind::lga) {
    const Network& net = trainer.network();
    const ForwardCache full = net::forward(net, train_x);
    const auto ce = net::cross_entropy(full.output(), train_y);
    for (int l = 1; l < net.num_layers(); ++l) {
      fb.direct[l - 1] = fit_lga(net, full, ce.error, l, config.ridge).map;
    }
  }
  trainer.set_feedback(std::move(fb));

  MaskingResult result;
  result.t_stop = start.t_stop;
  result.log = std::move(start.log);
  for (auto& row : result.log) row.rule = to_string(rule);
  result.checksum_at_freeze = feedback_checksum(trainer.feedback());
  for (int i = 1; i <= config.continue_epochs; ++i) {
    const EpochStats stats = trainer.run_epoch(train_x, train_y);
    result.log.push_back({start.epochs + i, "continue", to_string(rule), stats.mean_loss,
                          stats.window_accuracy, evaluate_accuracy(trainer.network(), test_x, test_y)});
  }
  result.checksum_final = feedback_checksum(trainer.feedback());
  result.final_test_acc = result.log.back().test_acc;
  result.network = trainer.network();
  return result;
}

MaskingResult run_masking_protocol(const rhm::Dataset& data, const net::NetworkConfig& net_config,
                                   const MaskingConfig& config, RuleKind rule, std::uint64_t seed) {
  return continue_training(pretrain(data, net_config, config, seed), data, config, rule);
}

std::string training_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = "epoch,phase,rule,train_loss,train_acc_window,test_acc\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%s,%.10g,%.10g,%.10g\n", r.epoch, r.phase.c_str(),
                  r.rule.c_str(), r.train_loss, r.train_acc_window, r.test_acc);
    out += buf;
  }
  return out;
}

}  // namespace rhmlab::rules
