#pragma once

// Greedy layerwise FastICA on length-2 segments, the non-predictive baseline.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rhmlab/rng.hpp"

namespace rhmlab {
class Checkpoint;
}

namespace rhmlab::ica {

struct FastIcaOptions {
  double tol = 1e-4;
  int max_iter = 200;
  /// Whitening drops eigenvalues below cutoff * lambda_max.
  double eigen_cutoff = 1e-10;
};

/// Centering, whitening and unmixing fitted on one sample matrix. The
/// sources of x are unmixing * whitening * (x - mean).
struct IcaBlock {
  Eigen::VectorXd mean;
  Eigen::MatrixXd whitening;  ///< k x d
  Eigen::MatrixXd unmixing;   ///< k x k, orthonormal rows
  int iterations = 0;
  bool converged = false;
  /// Set when the data had fewer usable dimensions than requested components.
  bool reduced = false;

  Eigen::Index components() const { return unmixing.rows(); }
  /// Sources for the columns of x (d x n).
  Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const;
};

/// Center, whiten (covariance eigendecomposition, divided by n) and run
/// parallel FastICA with g = tanh and symmetric decorrelation. Convergence:
/// max_i | |<w_i(new), w_i(old)>| - 1 | < tol. Throws ParameterError when
/// n_components exceeds the dimension or there are too few samples.
IcaBlock fastica_fit(const Eigen::MatrixXd& x, int n_components, Rng& rng,
                     const FastIcaOptions& options = {});

/// W <- (W W^T)^(-1/2) W.
Eigen::MatrixXd symmetric_decorrelation(const Eigen::MatrixXd& w);

/// Number of dimensions the whitening step keeps for x.
int effective_rank(const Eigen::MatrixXd& x, double eigen_cutoff = 1e-10);

/// Bootstrap blocks needed to reach `width` outputs at `per_block` each.
int block_count(int width, int per_block);

struct IcaLayer {
  std::vector<IcaBlock> blocks;
  int out_dim = 0;

  /// Segments (2 C x n) to rectified features (out_dim x n).
  Eigen::MatrixXd apply(const Eigen::MatrixXd& segments) const;
  bool converged() const;
};

/// Fits one layer on the previous layer's outputs for P words, laid out C x
/// (P * len). When width fits in one FastICA of the segment dimension, the
/// fit uses one random segment position per word; otherwise every block is
/// fitted on P (word, position) pairs drawn with replacement.
IcaLayer greedy_layer_fit(const Eigen::MatrixXd& previous, std::size_t words, int width, Rng& rng,
                          const FastIcaOptions& options = {});

struct IcaNet {
  std::vector<IcaLayer> layers;
  int input_channels = 0;
  int input_length = 0;

  int depth() const { return static_cast<int>(layers.size()); }
};

/// Constant widths, or width_l = w0 * 2^(l-1).
std::vector<int> constant_widths(int depth, int width);
std::vector<int> increasing_widths(int depth, int w0);

/// Fits every layer greedily on the one-hot training inputs (v x P * 2^L).
IcaNet fit_ica_net(const Eigen::MatrixXd& inputs, int input_length, const std::vector<int>& widths,
                   std::uint64_t seed, const FastIcaOptions& options = {});

/// Per-sample flattened output of layer k (default: the last layer),
/// (width_k * len_k) x batch. Throws ShapeError for an unfitted net.
Eigen::MatrixXd ica_forward(const IcaNet& net, const Eigen::MatrixXd& inputs, int k = -1);

void save_ica(Checkpoint& ck, const std::string& prefix, const IcaNet& net);
IcaNet load_ica(const Checkpoint& ck, const std::string& prefix);

}  // namespace rhmlab::ica
