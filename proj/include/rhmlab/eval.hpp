#pragma once

// Linear probing of frozen representations, P* sweeps and synonymic
// sensitivity.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "rhmlab/net.hpp"
#include "rhmlab/rhm.hpp"

namespace rhmlab::eval {

struct ProbeConfig {
  double lr = 2e-4;
  double stop_loss = 1e-3;
  int max_epochs = 5000;
  std::size_t batch_size = 128;
  std::size_t window = 20;
  bool operator==(const ProbeConfig&) const = default;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct LinearProbe {
  Eigen::MatrixXd weight;  ///< classes x features
  Eigen::VectorXd bias;

  Eigen::MatrixXd logits(const Eigen::MatrixXd& reps) const;
};

struct ProbeResult {
  LinearProbe probe;
  int epochs = 0;
  /// false when max_epochs ran out before the windowed loss fell below stop_loss.
  bool converged = false;
  double window_loss = 0.0;
  std::vector<double> epoch_loss;
};

/// Softmax regression on features x P representations. Throws
/// ParameterError when all labels are equal.
ProbeResult train_linear_probe(const Eigen::MatrixXd& reps, std::span<const int> labels, int classes,
                               const ProbeConfig& config, std::uint64_t seed);

/// Fraction of argmax mispredictions. Throws ParameterError on an empty set.
double test_error(const LinearProbe& probe, const Eigen::MatrixXd& reps, std::span<const int> labels);

// ---------------------------------------------------------------------------

inline const std::vector<double> kDefaultMultipliers = {2, 4, 8, 10, 20};

/// P = multiplier * D*, clipped to floor(max_fraction * P_max) so that a
/// holdout always remains.
std::vector<std::size_t> sweep_grid(const rhm::RhmParams& params, const std::vector<double>& multipliers,
                                    double max_fraction = 0.8);

struct SweepJobResult {
  double test_error = 1.0;
  bool probe_converged = false;
};

/// Trains representations on P samples for the given seed and returns the
/// probe's test error.
using SweepJob = std::function<SweepJobResult(std::size_t P, std::uint64_t seed)>;

struct SweepRow {
  double multiplier = 0.0;
  std::size_t P = 0;
  std::uint64_t seed = 0;
  double test_error = 1.0;
  bool probe_converged = false;
};

struct SweepResult {
  rhm::RhmParams params;
  std::uint64_t d_star = 0;
  std::uint64_t p_max = 0;
  double random_error = 0.0;
  double threshold = 0.0;  ///< 0.1 * random_error
  std::vector<double> multipliers;
  std::vector<std::size_t> p_values;  ///< per multiplier, after clipping
  std::vector<SweepRow> rows;         ///< multiplier-major, then seed
  std::vector<double> mean_error;     ///< per multiplier
  std::optional<std::size_t> p_star;
};

/// Runs job(P, seed) for every grid point and seed; duplicate P values after
/// clipping are evaluated once. Jobs run on `threads` workers and results are
/// placed by index, so the output does not depend on scheduling.
SweepResult pstar_sweep(const rhm::RhmParams& params, const std::vector<double>& multipliers,
                        const std::vector<std::uint64_t>& seeds, const SweepJob& job, int threads = 1,
                        double max_fraction = 0.8);

std::string sweep_csv(const SweepResult& r);
nlohmann::json sweep_summary(const SweepResult& r);

// ---------------------------------------------------------------------------

/// Maps a v x (batch * 2^L) input batch to a list of per-sample
/// representations (features x batch), one per analysed layer.
using RepresentationFn = std::function<std::vector<Eigen::MatrixXd>(const Eigen::MatrixXd&)>;

/// Flattened outputs of layers 1..depth, then the probe logits if a probe is given.
RepresentationFn network_representations(const net::Network& net, const LinearProbe* probe);

/// Pair count per estimate; doubling it moves S by well under 0.05.
inline constexpr std::size_t kDefaultSensitivityPairs = 5000;

struct SensitivityReport {
  int levels = 0;
  std::vector<std::string> row_names;      ///< "1".."depth", "probe"
  std::vector<std::vector<double>> S;      ///< S[row][level-1]; NaN when degenerate
  std::vector<std::vector<char>> degenerate;
  std::size_t n_pairs = 0;
};

/// S for one synonym level: mean squared distance over pairs that share
/// levels level+1..L+1, divided by the same mean over independent uniform
/// codeword pairs. Returns one value per representation; NaN marks a zero
/// denominator.
std::vector<double> sensitivity(const RepresentationFn& fn, const rhm::RuleBook& rb, int level,
                                std::size_t n_pairs, Rng& rng);

SensitivityReport sensitivity_report(const RepresentationFn& fn, const rhm::RuleBook& rb,
                                     std::vector<std::string> row_names, std::size_t n_pairs, Rng& rng);

std::string sensitivity_csv(const SensitivityReport& r);
nlohmann::json sensitivity_summary(const SensitivityReport& r);

}  // namespace rhmlab::eval
