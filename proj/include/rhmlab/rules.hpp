#pragma once

// Supervised update rules that differ only in how the output error reaches
// hidden layers: exact backprop, feedback alignment (per-sample masks kept),
// direct feedback (intermediate masks dropped), batch-averaged masks, and a
// least-squares linear map from output error to the true layer gradient.
//
// Layers are numbered 1..n where n includes the readout head. The output
// error is e = dL/dz_n; hidden deltas are dL/dh_l in the C_l x (batch * len_l)
// layout of net::ForwardCache. Feedback matrices act on the segment
// (block-local) view of each convolution, exactly as W_l^T does.

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rhmlab/net.hpp"
#include "rhmlab/rhm.hpp"

namespace rhmlab::rules {

enum class RuleKind { bp, fa, dfa, batch_mean, lga };

/// Names used in logs and configs: bp, input_specific, no_mask, batch_mean, lga.
std::string to_string(RuleKind k);
/// Also accepts the aliases fa and dfa.
RuleKind rule_from_string(const std::string& s);
std::vector<RuleKind> all_rules();

struct FeedbackConfig {
  RuleKind kind = RuleKind::bp;
  /// feedback[l-1] stands in for W_l^T, shape (kernel * C_{l-1}) x C_l, for
  /// l = 2..n. feedback[0] is unused.
  std::vector<Eigen::MatrixXd> feedback;
  /// direct[l-1] maps a flattened per-sample output error to layer l's
  /// flattened pre-activation space, for l = 1..n-1 (DFA and LGA).
  std::vector<Eigen::MatrixXd> direct;
  double ridge = 1e-8;
};

/// B_l = W_l^T for every layer; for DFA the explicit products B_{l+1}...B_n
/// are also stored in `direct`.
FeedbackConfig freeze_transpose(const net::Network& net, RuleKind kind);

/// Dense products B_{l+1} ... B_n (no masks) for l = 1..n-1.
std::vector<Eigen::MatrixXd> direct_products(const net::Network& net,
                                             const std::vector<Eigen::MatrixXd>& feedback);

/// Exact dL/dh_l for every layer, index l-1.
std::vector<Eigen::MatrixXd> bp_deltas(const net::Network& net, const net::ForwardCache& cache,
                                       const Eigen::MatrixXd& output_error);

net::Gradients bp_grads(const net::Network& net, const net::ForwardCache& cache,
                        const Eigen::MatrixXd& output_error);
net::Gradients fa_grads(const net::Network& net, const net::ForwardCache& cache,
                        const Eigen::MatrixXd& output_error, const FeedbackConfig& fb);
net::Gradients dfa_grads(const net::Network& net, const net::ForwardCache& cache,
                         const Eigen::MatrixXd& output_error, const FeedbackConfig& fb);
net::Gradients batchmean_grads(const net::Network& net, const net::ForwardCache& cache,
                               const Eigen::MatrixXd& output_error, const FeedbackConfig& fb);
net::Gradients lga_grads(const net::Network& net, const net::ForwardCache& cache,
                         const Eigen::MatrixXd& output_error, const FeedbackConfig& fb);

/// Dispatches on fb.kind.
net::Gradients rule_grads(const net::Network& net, const net::ForwardCache& cache,
                          const Eigen::MatrixXd& output_error, const FeedbackConfig& fb);

struct LgaFit {
  Eigen::MatrixXd map;  ///< dim(h_l) x dim(e)
  double residual = 0.0;
};

/// Closed-form ridge solution of min_B sum_mu |B e_mu - dL/dh_{mu,l}|^2 over
/// the samples in `cache`. ridge <= 0 is accepted only if sum e e^T is
/// non-singular; otherwise ParameterError asks for a positive ridge.
LgaFit fit_lga(const net::Network& net, const net::ForwardCache& cache,
               const Eigen::MatrixXd& output_error, int l, double ridge);

/// FNV-1a over the raw bytes of every feedback and direct matrix.
std::uint64_t feedback_checksum(const FeedbackConfig& fb);

// ---------------------------------------------------------------------------
// Supervised training with a head and the pretrain / freeze / continue protocol.

struct SupervisedConfig {
  double lr = 3e-4;
  std::size_t batch_size = 32;
  std::size_t window = 20;
};

struct EpochStats {
  double mean_loss = 0.0;
  double window_accuracy = 0.0;
  std::size_t steps = 0;
  bool crossed = false;  ///< window accuracy reached the stop threshold mid-epoch
};

class SupervisedTrainer {
 public:
  SupervisedTrainer(net::Network net, const SupervisedConfig& config, std::uint64_t seed);

  /// One pass over a fresh shuffle of the training set. When stop_threshold
  /// is set, returns right after the first step at which the sliding-window
  /// accuracy (full window) reaches it.
  EpochStats run_epoch(const Eigen::MatrixXd& inputs, const std::vector<int>& labels,
                       std::optional<double> stop_threshold = std::nullopt);

  /// One optimization step on the given batch; returns (loss, batch accuracy).
  std::pair<double, double> step(const Eigen::MatrixXd& inputs, std::span<const int> labels);

  void set_feedback(FeedbackConfig fb) { feedback_ = std::move(fb); }
  const FeedbackConfig& feedback() const { return feedback_; }
  const net::Network& network() const { return net_; }
  net::Network& network() { return net_; }
  const net::AdamState& adam() const { return adam_; }
  std::int64_t steps() const { return adam_.t; }
  double window_accuracy() const;

  void save(Checkpoint& ck) const;
  static SupervisedTrainer load(const Checkpoint& ck);

 private:
  net::Network net_;
  SupervisedConfig config_;
  net::AdamState adam_;
  Rng rng_;
  FeedbackConfig feedback_;
  std::deque<double> window_;
};

/// Gathers the one-hot columns of the selected samples (d columns each).
Eigen::MatrixXd gather_samples(const Eigen::MatrixXd& inputs, int length,
                               std::span<const std::size_t> indices);

double evaluate_accuracy(const net::Network& net, const Eigen::MatrixXd& inputs,
                         const std::vector<int>& labels);

struct MaskingConfig {
  double threshold = 0.80;
  SupervisedConfig optimizer;
  int max_pretrain_epochs = 2000;
  int continue_epochs = 100;
  double ridge = 1e-8;
};

struct TrainLogRow {
  int epoch = 0;
  std::string phase;
  std::string rule;
  double train_loss = 0.0;
  double train_acc_window = 0.0;
  double test_acc = 0.0;
};

struct MaskingResult {
  std::vector<TrainLogRow> log;
  std::int64_t t_stop = 0;
  double final_test_acc = 0.0;
  std::uint64_t checksum_at_freeze = 0;
  std::uint64_t checksum_final = 0;
  net::Network network;
};

/// State at t_STOP, shared by every continuation rule.
struct PretrainResult {
  SupervisedTrainer trainer;
  std::vector<TrainLogRow> log;
  std::int64_t t_stop = 0;
  int epochs = 0;
};

/// Seed streams of `seed` used for weight init and batch order.
inline constexpr std::uint64_t kInitStream = 3;
inline constexpr std::uint64_t kTrainerStream = 4;

/// Phase 1: BP until the sliding-window training accuracy first reaches the
/// threshold. Throws std::runtime_error if that does not happen in
/// max_pretrain_epochs.
PretrainResult pretrain(const rhm::Dataset& data, const net::NetworkConfig& net_config,
                        const MaskingConfig& config, std::uint64_t seed);

/// Phase 2 from a t_STOP snapshot: freeze feedback (W^T, or the LGA fit on
/// the full training set) and continue with `rule`.
MaskingResult continue_training(PretrainResult start, const rhm::Dataset& data,
                                const MaskingConfig& config, RuleKind rule);

MaskingResult run_masking_protocol(const rhm::Dataset& data, const net::NetworkConfig& net_config,
                                   const MaskingConfig& config, RuleKind rule, std::uint64_t seed);

/// CSV with header epoch,phase,rule,train_loss,train_acc_window,test_acc.
std::string training_log_csv(const std::vector<TrainLogRow>& rows);

}  // namespace rhmlab::rules
