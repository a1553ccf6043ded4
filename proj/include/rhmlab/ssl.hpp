#pragma once

// Self-supervised losses on a batch of representations z (D x B, one column
// per sample) and the layerwise / end-to-end trainers built on them.
//
// On a convolutional layer with spatial extent n > 1 each location is treated
// as its own D-dimensional representation; the loss is evaluated per location
// and averaged over locations.

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "rhmlab/net.hpp"
#include "rhmlab/rhm.hpp"

namespace rhmlab::ssl {

enum class SslKind { simclr, clapp, lpl };
enum class SslScope { layerwise, end_to_end };

std::string to_string(SslKind k);
std::string to_string(SslScope s);
SslKind ssl_kind_from_string(const std::string& s);
SslScope ssl_scope_from_string(const std::string& s);

struct SslConfig {
  SslKind kind = SslKind::clapp;
  SslScope scope = SslScope::layerwise;
  double lr = 2e-4;
  std::size_t batch_size = 128;
  // CLAPP
  int k_max = 5;
  rhm::NegativePolicy negative_policy = rhm::NegativePolicy::cross_object;
  // LPL
  double c1 = 1.0;
  double c2 = 10.0;
  double eps = 1e-4;
  // Training loop
  int max_epochs = 20000;
  bool early_stop = true;
  double stop_loss = 1e-3;
  std::size_t window = 20;

  /// Learning rate and batch size of the given loss, everything else default.
  static SslConfig defaults(SslKind kind);
  bool operator==(const SslConfig&) const = default;
};

void to_json(nlohmann::json& j, const SslConfig& c);
void from_json(const nlohmann::json& j, SslConfig& c);

struct LossOutput {
  double loss = 0.0;
  /// dL/dz, same shape as z.
  Eigen::MatrixXd grad;
  /// SimCLR {loss}; CLAPP {positive, negative}; LPL {pred, var, decorr}.
  std::vector<double> parts;
  /// dL/dW^pred (CLAPP only).
  Eigen::MatrixXd grad_pred;
};

/// Dot-product InfoNCE over all ordered same-object pairs. Throws
/// ParameterError when no object appears twice.
LossOutput simclr_loss(const Eigen::MatrixXd& z, std::span<const int> object_ids);

/// alpha[g][k-1][i] gates comparison i at offset k of group g (1 = positive).
using ClappGates = std::vector<std::vector<std::vector<char>>>;

ClappGates draw_clapp_gates(const std::vector<rhm::ObjectGroup>& groups, int k_max, Rng& rng);

/// Hinge loss over offsets k = 1..k_max inside each object group. Group
/// members are z columns [begin, end); negatives are the batch columns listed
/// in group.negatives. Both are truncated to the shorter length.
LossOutput clapp_loss(const Eigen::MatrixXd& z, const std::vector<rhm::ObjectGroup>& groups,
                      const Eigen::MatrixXd& w_pred, const ClappGates& gates, int k_max);

/// Predictive term against partners[i] plus variance and decorrelation
/// penalties; the batch mean is treated as a constant.
LossOutput lpl_loss(const Eigen::MatrixXd& z, std::span<const std::size_t> partners, double c1,
                    double c2, double eps);

/// Partner column of every batch position (the groups' positive shuffles).
std::vector<std::size_t> positive_partners(const rhm::PairBatch& batch);

/// Applies the configured loss at every location of a C x (B * n) layer
/// output and averages. `gates` is only read for CLAPP.
LossOutput layer_loss(const SslConfig& config, const Eigen::MatrixXd& layer_output,
                      const rhm::PairBatch& batch, const Eigen::MatrixXd& w_pred,
                      const ClappGates& gates);

/// Per-layer square predictor matrices for CLAPP, index l-1.
struct PredWeights {
  std::vector<Eigen::MatrixXd> w;

  /// Identity scaled by 1/sqrt(D_l) for every convolutional layer.
  static PredWeights identity_init(const net::Network& net);
};

/// Plain gradient step W <- W - lr * grad.
void update_pred_weights(Eigen::MatrixXd& w_pred, const Eigen::MatrixXd& grad, double lr);

struct StepResult {
  /// parts[l-1] for each layer that carried a loss (all layers when
  /// layerwise, only the top one end to end).
  std::vector<std::vector<double>> parts;
  std::vector<double> loss;
};

/// Gradients of every layer's own loss w.r.t. that layer's parameters only,
/// plus the CLAPP predictor gradients. No update is applied.
net::Gradients layerwise_gradients(const net::Network& net, const net::ForwardCache& cache,
                                   const rhm::PairBatch& batch, const SslConfig& config,
                                   const PredWeights& pred, const ClappGates& gates,
                                   std::vector<Eigen::MatrixXd>* pred_grads, StepResult* result);

/// Loss on the top layer, backpropagated through the whole network.
net::Gradients end_to_end_gradients(const net::Network& net, const net::ForwardCache& cache,
                                    const rhm::PairBatch& batch, const SslConfig& config,
                                    const PredWeights& pred, const ClappGates& gates,
                                    std::vector<Eigen::MatrixXd>* pred_grads, StepResult* result);

StepResult layerwise_train_step(net::Network& net, net::AdamState& adam, PredWeights& pred,
                                const rhm::PairBatch& batch, const SslConfig& config, Rng& rng);
StepResult end_to_end_train_step(net::Network& net, net::AdamState& adam, PredWeights& pred,
                                 const rhm::PairBatch& batch, const SslConfig& config, Rng& rng);

struct LossLogRow {
  int epoch = 0;
  int layer = 0;
  std::vector<double> parts;
};

/// Header depends on the loss: loss_pred,loss_var,loss_decorr (LPL),
/// loss_pos,loss_neg (CLAPP), loss (SimCLR).
std::string loss_log_csv(SslKind kind, const std::vector<LossLogRow>& rows);

struct TrainSummary {
  int epochs = 0;
  bool stopped_early = false;
  double final_window_loss = 0.0;
};

class SslTrainer {
 public:
  SslTrainer(net::Network net, const SslConfig& config, std::uint64_t seed);

  /// One epoch = ceil(P / batch_size) pair batches. Appends one log row per
  /// loss-carrying layer. Returns true if the early-stop condition was met.
  bool run_epoch(const rhm::Dataset& data);

  /// Runs until `epochs` total epochs or early stop.
  TrainSummary train(const rhm::Dataset& data, int epochs);

  const net::Network& network() const { return net_; }
  const PredWeights& pred() const { return pred_; }
  const SslConfig& config() const { return config_; }
  const std::vector<LossLogRow>& log() const { return log_; }
  int epoch() const { return epoch_; }
  bool stopped() const { return stopped_; }
  double window_loss() const;

  void save(Checkpoint& ck) const;
  static SslTrainer load(const Checkpoint& ck);

 private:
  net::Network net_;
  SslConfig config_;
  net::AdamState adam_;
  PredWeights pred_;
  Rng rng_;
  int epoch_ = 0;
  bool stopped_ = false;
  std::deque<double> window_;
  std::vector<LossLogRow> log_;
};

}  // namespace rhmlab::ssl
