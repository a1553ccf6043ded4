#pragma once

// Config-driven pipeline shared by the rhmctl subcommands and the acceptance
// runner: dataset generation, training under any rule, probing, sweeps,
// sensitivity and the masking ablation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/eval.hpp"
#include "rhmlab/ica.hpp"
#include "rhmlab/net.hpp"
#include "rhmlab/rhm.hpp"
#include "rhmlab/rules.hpp"
#include "rhmlab/ssl.hpp"

namespace rhmlab::exp {

inline constexpr const char* kVersion = "0.1.0";

/// Seed streams derived from the master seed.
enum SeedStream : std::uint64_t {
  kRulebookStream = 1,
  kDataStream = 2,
  kInitStream = 3,
  kTrainerStream = 4,
  kProbeStream = 5,
  kSensitivityStream = 6,
};

enum class AlgorithmFamily { supervised, masking, ssl, ica };

struct ExperimentConfig {
  std::string name = "run";
  std::uint64_t seed = 1;
  std::string output_dir = "runs/run";

  rhm::RhmParams rhm;  ///< rhm.seed is ignored; the rulebook seed derives from `seed`
  std::size_t P = 0;   ///< 0 = 4 * D*
  std::size_t holdout = 100000;

  int depth = 0;  ///< 0 = L
  int c_h = 1;
  bool bias = true;

  /// bp, input_specific, no_mask, batch_mean, lga, clapp, lpl, simclr or ica.
  std::string rule = "bp";
  ssl::SslConfig ssl;
  rules::MaskingConfig masking;
  rules::SupervisedConfig supervised;
  /// Epoch budget for bp and self-supervised training; 0 = 50 for bp and
  /// ssl.max_epochs for self-supervised rules.
  int epochs = 0;
  int checkpoint_every = 0;

  std::string ica_widths = "constant";  ///< or "increasing"
  int ica_w0 = 0;                       ///< 0 = c_h * v^2

  eval::ProbeConfig probe;
  std::vector<double> multipliers = eval::kDefaultMultipliers;
  std::vector<std::uint64_t> sweep_seeds = {1, 2, 3};
  double max_fraction = 0.8;
  int threads = 1;
  std::size_t n_pairs = eval::kDefaultSensitivityPairs;

  AlgorithmFamily family() const;
  std::size_t train_size() const;
  int network_depth() const { return depth > 0 ? depth : rhm.L; }
  int width() const { return c_h * rhm.v * rhm.v; }
  net::NetworkConfig network_config() const;
  std::vector<int> ica_layer_widths() const;
  int epoch_budget() const;
  /// Throws ConfigError (or ParameterError) on inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical serialization; config_hash is FNV-1a 64 over it.
std::string canonical_config(const ExperimentConfig& c);
std::string config_hash(const ExperimentConfig& c);

/// Rulebook seeded from the master seed, then P training codewords and a
/// disjoint holdout.
rhm::Dataset make_dataset(const ExperimentConfig& c, std::size_t P, std::uint64_t master);

/// A trained model: a convolutional network (with or without head) or an ICA stack.
struct Model {
  AlgorithmFamily family = AlgorithmFamily::supervised;
  std::optional<net::Network> network;
  std::optional<ica::IcaNet> ica;
  std::vector<rules::TrainLogRow> train_log;
  std::vector<ssl::LossLogRow> loss_log;
  std::vector<std::string> warnings;
  int epochs = 0;

  /// Per-sample flattened representation of layer k (1..depth).
  Eigen::MatrixXd representation(const Eigen::MatrixXd& inputs, int k) const;
  int depth() const;
};

struct TrainHooks {
  /// Continue from this checkpoint (bp and self-supervised rules only).
  const Checkpoint* resume = nullptr;
  /// Called every `every` epochs (if > 0) and once at the end with a full
  /// checkpoint of the run.
  std::function<void(const Checkpoint&)> on_checkpoint;
  int every = 0;
};

/// Trains with the configured rule, from scratch or from hooks.resume.
Model train_model(const ExperimentConfig& c, const rhm::Dataset& data, std::uint64_t master,
                  const TrainHooks& hooks = {});

/// Rebuilds a trained model from a checkpoint written through TrainHooks.
Model load_model(const Checkpoint& ck);

struct ProbeOutcome {
  double test_error = 1.0;
  double train_error = 1.0;
  bool converged = false;
  int epochs = 0;
  eval::LinearProbe probe;
  std::vector<double> curve;
};

/// Linear probe on the top-layer representation of the training set, scored
/// on the holdout.
ProbeOutcome probe_model(const ExperimentConfig& c, const Model& model, const rhm::Dataset& data,
                         std::uint64_t master);

/// Train + probe for one (P, seed) sweep point.
eval::SweepJobResult run_sweep_job(const ExperimentConfig& c, std::size_t P, std::uint64_t seed);

eval::SensitivityReport model_sensitivity(const ExperimentConfig& c, const Model& model,
                                          const eval::LinearProbe* probe, const rhm::RuleBook& rb,
                                          std::uint64_t master);

struct AblationResult {
  std::uint64_t seed = 0;
  std::map<std::string, rules::MaskingResult> by_rule;
};

/// Shared BP pretraining per seed, then every rule in `rules`.
std::vector<AblationResult> mask_ablation(const ExperimentConfig& c,
                                          const std::vector<rules::RuleKind>& rule_kinds);

// ---------------------------------------------------------------------------
// Run manifest and commands.

class RunManifest {
 public:
  RunManifest(const ExperimentConfig& c, std::string command);
  void phase(const std::string& name, double seconds) { phases_[name] = seconds; }
  void file(const std::filesystem::path& p);
  void warn(const std::string& w) { warnings_.push_back(w); }
  void set_status(std::string s) { status_ = std::move(s); }
  const std::string& status() const { return status_; }
  nlohmann::json to_json() const;
  /// Written through a temporary file and renamed.
  void write(const std::filesystem::path& dir) const;

 private:
  std::string hash_;
  std::string command_;
  std::map<std::string, double> phases_;
  std::vector<std::pair<std::string, std::uintmax_t>> files_;
  std::vector<std::string> warnings_;
  std::string status_ = "running";
  nlohmann::json config_;
};

struct CommandOptions {
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> resume;      ///< train: checkpoint to continue from
  std::optional<std::string> checkpoint;  ///< eval / sensitivity: model to analyse
  bool full_enumeration = false;          ///< gen
  bool pipeline = false;                  ///< eval / sensitivity: train first if no checkpoint
  bool quiet = false;
};

/// Resolves the output directory: CLI override, else config, relative paths
/// under $RHMLAB_OUTPUT_ROOT when set.
std::filesystem::path resolve_output_dir(const ExperimentConfig& c, const CommandOptions& o);

/// Each returns the process exit code: 0 ok, 2 config error, 3 runtime failure.
int cmd_gen(ExperimentConfig c, const CommandOptions& o);
int cmd_train(ExperimentConfig c, const CommandOptions& o);
int cmd_eval(ExperimentConfig c, const CommandOptions& o);
int cmd_sweep(ExperimentConfig c, const CommandOptions& o);
int cmd_sensitivity(ExperimentConfig c, const CommandOptions& o);
int cmd_mask_ablation(ExperimentConfig c, const CommandOptions& o);

/// Writes `content` to `path` atomically (temporary file + rename).
void write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace rhmlab::exp
