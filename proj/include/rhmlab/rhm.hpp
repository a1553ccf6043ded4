#pragma once

// Random Hierarchy Model: synthetic hierarchical codes.
//
// Level numbering follows the generative direction: level L+1 holds the
// object (a string of length 1), level 1 holds the visible codeword of
// length 2^L. Every feature at level l+1 expands into one of m synonym pairs
// of level-l features; each pair decodes back to exactly one feature.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "rhmlab/rng.hpp"

namespace rhmlab::rhm {

struct RhmParams {
  int L = 2;
  int v = 2;
  int m = 2;
  int n_c = 2;
  std::uint64_t seed = 0;

  bool maximal() const { return m == v && v == n_c; }
  int length() const { return 1 << L; }

  /// Throws ParameterError unless 1 <= n_c <= v, 1 <= m <= v, L >= 1.
  void validate() const;

  /// n_c * m^(2^L - 1), saturating at UINT64_MAX.
  std::uint64_t p_max() const;
  /// n_c * v^L, saturating.
  std::uint64_t d_star() const;

  bool operator==(const RhmParams&) const = default;
};

/// A pair (a, b) of lower-level features packed as a * v + b.
inline int pack_pair(int a, int b, int v) { return a * v + b; }

struct RuleBook {
  RhmParams params;
  /// expansions[l-1][f] lists the m packed pairs that level-(l+1) feature f
  /// may expand into, for l = 1..L.
  std::vector<std::vector<std::vector<int>>> expansions;
  /// inverse[l-1][pair] is the level-(l+1) feature that produced the pair, or
  /// -1 when the pair is unused.
  std::vector<std::vector<int>> inverse;

  int features_at(int level) const { return level == params.L + 1 ? params.n_c : params.v; }
  bool operator==(const RuleBook&) const = default;
};

struct Derivation {
  /// levels[l-1] is the level-l string for l = 1..L+1.
  std::vector<std::vector<int>> levels;

  int object() const { return levels.back().front(); }
  const std::vector<int>& codeword() const { return levels.front(); }
  bool operator==(const Derivation&) const = default;
};

struct Dataset {
  std::shared_ptr<const RuleBook> rulebook;
  std::vector<Derivation> samples;
  std::vector<Derivation> holdout;

  std::size_t size() const { return samples.size(); }
  std::vector<int> labels() const;
  std::vector<int> holdout_labels() const;
};

RuleBook build_rulebook(const RhmParams& params, Rng& rng);
/// Seeds the construction from params.seed.
RuleBook build_rulebook(const RhmParams& params);

Derivation encode(const RuleBook& rb, int object, Rng& rng);

/// Bottom-up decoding to the object label. Throws NotACodeword when a pair
/// has no inverse entry.
int decode(const RuleBook& rb, std::span<const int> codeword);
/// Decodes a codeword up to the given level (1 returns the codeword itself).
std::vector<int> decode_to_level(const RuleBook& rb, std::span<const int> codeword, int level);
/// Rebuilds the full derivation of a codeword by decoding every level.
Derivation derivation_of(const RuleBook& rb, std::span<const int> codeword);

/// Every codeword of the instance. Throws CapExceeded if P_max > cap.
Dataset enumerate_dataset(std::shared_ptr<const RuleBook> rb, std::uint64_t cap);

/// P distinct training codewords drawn uniformly without replacement plus a
/// disjoint holdout of min(holdout_cap, P_max - P) codewords.
Dataset sample_training_set(std::shared_ptr<const RuleBook> rb, std::size_t P, Rng& rng,
                            std::size_t holdout_cap = 100000);

/// Two derivations sharing levels L+1..level+1 and independently expanded below.
std::pair<Derivation, Derivation> sample_synonym_pair(const RuleBook& rb, int level, Rng& rng);

/// One-hot tensor, v rows (channels) by 2^L columns (positions).
Eigen::MatrixXd one_hot(std::span<const int> codeword, int v);

/// Batch of one-hot inputs laid out as v x (batch * 2^L), column index
/// sample * 2^L + position.
Eigen::MatrixXd encode_inputs(const std::vector<Derivation>& samples, int v);
Eigen::MatrixXd encode_inputs(const std::vector<Derivation>& samples,
                              std::span<const std::size_t> indices, int v);

// ---------------------------------------------------------------------------
// Pair batches for the self-supervised losses.

enum class NegativePolicy { cross_object, shuffled_all };

std::string to_string(NegativePolicy p);
NegativePolicy negative_policy_from_string(const std::string& s);

struct ObjectGroup {
  std::size_t begin = 0;
  std::size_t end = 0;
  int object = 0;
  /// Batch positions of the positive partners: a permutation of [begin, end).
  std::vector<std::size_t> positives;
  /// Batch positions of the negative partners, at most size() of them.
  std::vector<std::size_t> negatives;

  std::size_t size() const { return end - begin; }
};

struct PairBatch {
  Eigen::MatrixXd inputs;
  std::vector<int> object_ids;
  std::vector<std::size_t> sample_ids;
  std::vector<ObjectGroup> groups;
  NegativePolicy policy = NegativePolicy::cross_object;

  std::size_t size() const { return object_ids.size(); }
};

/// Training sample indices grouped by object label.
std::vector<std::vector<std::size_t>> index_by_object(const Dataset& ds);

inline constexpr std::size_t kGroupSize = 8;

PairBatch make_pair_batch(const Dataset& ds, const std::vector<std::vector<std::size_t>>& by_object,
                          std::size_t batch_size, NegativePolicy policy, Rng& rng);
PairBatch make_pair_batch(const Dataset& ds, std::size_t batch_size, NegativePolicy policy,
                          Rng& rng);

// ---------------------------------------------------------------------------
// Serialization.

void to_json(nlohmann::json& j, const RhmParams& p);
void from_json(const nlohmann::json& j, RhmParams& p);
nlohmann::json rulebook_to_json(const RuleBook& rb);
RuleBook rulebook_from_json(const nlohmann::json& j);

/// Header `L v m n_c seed`, then one `label<TAB>codeword` line per sample.
/// Codeword symbols are written as base-36 digits, so v <= 36.
void write_samples(std::ostream& os, const RhmParams& params, const std::vector<Derivation>& samples);
/// Reads samples written by write_samples, rebuilding each derivation against
/// the rulebook. Throws on header mismatch or a label that does not decode.
std::vector<Derivation> read_samples(std::istream& is, const RuleBook& rb);

}  // namespace rhmlab::rhm
