#include "rhmlab/ica.hpp"

#include <algorithm>
#include <cmath>

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/errors.hpp"
#include "rhmlab/net.hpp"

namespace rhmlab::ica {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Whitening {
  VectorXd mean;
  MatrixXd k;  // rows: eigenvectors scaled by 1/sqrt(lambda), largest first
  int rank = 0;
};

Whitening whiten(const MatrixXd& x, int max_components, double cutoff) {
  Whitening w;
  w.mean = x.rowwise().mean();
  const MatrixXd xc = x.colwise() - w.mean;
  const MatrixXd cov = xc * xc.transpose() / static_cast<double>(x.cols());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
  const VectorXd& lam = es.eigenvalues();  // ascending
  const double lmax = lam.maxCoeff();
  const Eigen::Index d = lam.size();
  for (Eigen::Index i = 0; i < d; ++i) {
    if (lmax > 0 && lam(i) > cutoff * lmax) ++w.rank;
  }
  const int k = std::min(w.rank, max_components);
  w.k.resize(k, d);
  for (int r = 0; r < k; ++r) {
    const Eigen::Index idx = d - 1 - r;
    w.k.row(r) = es.eigenvectors().col(idx).transpose() / std::sqrt(lam(idx));
  }
  return w;
}

}  // namespace

MatrixXd IcaBlock::transform(const MatrixXd& x) const {
  return unmixing * (whitening * (x.colwise() - mean));
}

MatrixXd symmetric_decorrelation(const MatrixXd& w) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(w * w.transpose());
  const VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

int effective_rank(const MatrixXd& x, double eigen_cutoff) {
  return whiten(x, static_cast<int>(x.rows()), eigen_cutoff).rank;
}

int block_count(int width, int per_block) {
  if (width <= 0 || per_block <= 0) throw ParameterError("ica: widths must be positive");
  return (width + per_block - 1) / per_block;
}

IcaBlock fastica_fit(const MatrixXd& x, int n_components, Rng& rng, const FastIcaOptions& options) {
  if (n_components < 1 || n_components > x.rows()) {
    throw ParameterError("fastica: n_components must be in 1..dimension");
  }
  if (x.cols() < n_components + 1) throw ParameterError("fastica: not enough samples");

  const Whitening wh = whiten(x, n_components, options.eigen_cutoff);
  if (wh.k.rows() == 0) throw ParameterError("fastica: data has no variance");
  IcaBlock block;
  block.mean = wh.mean;
  block.whitening = wh.k;
  block.reduced = wh.k.rows() < n_components;
  const Eigen::Index k = wh.k.rows();
  const MatrixXd z = wh.k * (x.colwise() - wh.mean);
  const double n = static_cast<double>(x.cols());

  MatrixXd w(k, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index i = 0; i < k; ++i) w(i, j) = rng.normal();
  }
  w = symmetric_decorrelation(w);

  for (int it = 1; it <= options.max_iter; ++it) {
    const MatrixXd g = (w * z).array().tanh().matrix();
    const VectorXd g_prime_mean = (1.0 - g.array().square()).rowwise().mean().matrix();
    MatrixXd w_new = g * z.transpose() / n - g_prime_mean.asDiagonal() * w;
    w_new = symmetric_decorrelation(w_new);
    const double lim = ((w_new * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = std::move(w_new);
    block.iterations = it;
    if (lim < options.tol) {
      block.converged = true;
      break;
    }
  }
  block.unmixing = std::move(w);
  return block;
}

// ---------------------------------------------------------------------------

MatrixXd IcaLayer::apply(const MatrixXd& segments) const {
  if (blocks.empty()) throw ShapeError("ica: layer is not fitted");
  MatrixXd out(out_dim, segments.cols());
  Eigen::Index row = 0;
  for (const auto& b : blocks) {
    if (row >= out_dim) break;
    const MatrixXd s = b.transform(segments);
    const Eigen::Index take = std::min<Eigen::Index>(s.rows(), out_dim - row);
    out.middleRows(row, take) = s.topRows(take);
    row += take;
  }
  if (row != out_dim) throw ShapeError("ica: blocks do not cover the layer width");
  return out.cwiseMax(0.0);
}

bool IcaLayer::converged() const {
  return std::all_of(blocks.begin(), blocks.end(), [](const IcaBlock& b) { return b.converged; });
}

IcaLayer greedy_layer_fit(const MatrixXd& previous, std::size_t words, int width, Rng& rng,
                          const FastIcaOptions& options) {
  if (words == 0 || previous.cols() % static_cast<Eigen::Index>(words) != 0) {
    throw ShapeError("ica: previous outputs do not match the word count");
  }
  const Eigen::Index len = previous.cols() / static_cast<Eigen::Index>(words);
  if (len < 2 || len % 2 != 0) throw ShapeError("ica: previous layer has no length-2 segments left");
  const auto seg = net::segments(previous, 2);  // 2C x (words * len / 2)
  const Eigen::Index per_word = len / 2;
  const auto n_words = static_cast<Eigen::Index>(words);

  auto pick = [&](bool bootstrap) {
    MatrixXd s(seg.rows(), n_words);
    for (Eigen::Index i = 0; i < n_words; ++i) {
      const Eigen::Index word = bootstrap ? static_cast<Eigen::Index>(rng.below(words)) : i;
      const auto pos = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(per_word)));
      s.col(i) = seg.col(word * per_word + pos);
    }
    return s;
  };

  IcaLayer layer;
  layer.out_dim = width;
  const MatrixXd first = pick(false);
  const int dim = static_cast<int>(seg.rows());
  // One-hot inputs are rank deficient, so a block yields at most the rank.
  const int per_block = std::min(dim, effective_rank(first, options.eigen_cutoff));
  if (width <= per_block) {
    Rng block_rng(rng.next());
    layer.blocks.push_back(fastica_fit(first, width, block_rng, options));
    return layer;
  }
  const int n_blocks = block_count(width, per_block);
  for (int b = 0; b < n_blocks; ++b) {
    const MatrixXd sample = pick(true);
    Rng block_rng(rng.next());
    const int comps = std::min(per_block, effective_rank(sample, options.eigen_cutoff));
    layer.blocks.push_back(fastica_fit(sample, comps, block_rng, options));
  }
  int covered = 0;
  for (const auto& b : layer.blocks) covered += static_cast<int>(b.components());
  // A resample can lose a dimension; top up until the width is reached.
  while (covered < width) {
    const MatrixXd sample = pick(true);
    Rng block_rng(rng.next());
    const int comps = std::min(per_block, effective_rank(sample, options.eigen_cutoff));
    layer.blocks.push_back(fastica_fit(sample, comps, block_rng, options));
    covered += comps;
  }
  return layer;
}

std::vector<int> constant_widths(int depth, int width) { return std::vector<int>(static_cast<std::size_t>(depth), width); }

std::vector<int> increasing_widths(int depth, int w0) {
  std::vector<int> out;
  for (int l = 0; l < depth; ++l) out.push_back(w0 << l);
  return out;
}

IcaNet fit_ica_net(const MatrixXd& inputs, int input_length, const std::vector<int>& widths,
                   std::uint64_t seed, const FastIcaOptions& options) {
  if (input_length < 2 || inputs.cols() % input_length != 0) throw ShapeError("ica: bad input layout");
  if ((input_length >> widths.size()) < 1) throw ParameterError("ica: more layers than levels");
  IcaNet net;
  net.input_channels = static_cast<int>(inputs.rows());
  net.input_length = input_length;
  const auto words = static_cast<std::size_t>(inputs.cols() / input_length);
  MatrixXd z = inputs;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    Rng rng = Rng::stream(seed, l + 1);
    net.layers.push_back(greedy_layer_fit(z, words, widths[l], rng, options));
    z = net.layers.back().apply(net::segments(z, 2));
  }
  return net;
}

MatrixXd ica_forward(const IcaNet& net, const MatrixXd& inputs, int k) {
  if (net.layers.empty()) throw ShapeError("ica: network is not fitted");
  if (k < 0) k = net.depth();
  if (k < 1 || k > net.depth()) throw ShapeError("ica: layer out of range");
  if (inputs.rows() != net.input_channels || inputs.cols() % net.input_length != 0) {
    throw ShapeError("ica: input shape does not match the fitted network");
  }
  const Eigen::Index batch = inputs.cols() / net.input_length;
  MatrixXd z = inputs;
  for (int l = 0; l < k; ++l) z = net.layers[static_cast<std::size_t>(l)].apply(net::segments(z, 2));
  return Eigen::Map<const MatrixXd>(z.data(), z.size() / batch, batch);
}

void save_ica(Checkpoint& ck, const std::string& prefix, const IcaNet& net) {
  ck.put_int(prefix + "/input_channels", net.input_channels);
  ck.put_int(prefix + "/input_length", net.input_length);
  ck.put_int(prefix + "/depth", net.depth());
  for (int l = 0; l < net.depth(); ++l) {
    const auto& layer = net.layers[static_cast<std::size_t>(l)];
    const std::string lp = prefix + "/L" + std::to_string(l + 1);
    ck.put_int(lp + "/out_dim", layer.out_dim);
    ck.put_int(lp + "/blocks", static_cast<std::int64_t>(layer.blocks.size()));
    for (std::size_t b = 0; b < layer.blocks.size(); ++b) {
      const auto& blk = layer.blocks[b];
      const std::string bp = lp + "/B" + std::to_string(b);
      ck.put(bp + "/mean", blk.mean);
      ck.put(bp + "/whitening", blk.whitening);
      ck.put(bp + "/unmixing", blk.unmixing);
      ck.put_int(bp + "/iterations", blk.iterations);
      ck.put_int(bp + "/converged", blk.converged ? 1 : 0);
      ck.put_int(bp + "/reduced", blk.reduced ? 1 : 0);
    }
  }
}

IcaNet load_ica(const Checkpoint& ck, const std::string& prefix) {
  IcaNet net;
  net.input_channels = static_cast<int>(ck.integer(prefix + "/input_channels"));
  net.input_length = static_cast<int>(ck.integer(prefix + "/input_length"));
  const auto depth = ck.integer(prefix + "/depth");
  for (std::int64_t l = 0; l < depth; ++l) {
    const std::string lp = prefix + "/L" + std::to_string(l + 1);
    IcaLayer layer;
    layer.out_dim = static_cast<int>(ck.integer(lp + "/out_dim"));
    for (std::int64_t b = 0; b < ck.integer(lp + "/blocks"); ++b) {
      const std::string bp = lp + "/B" + std::to_string(b);
      IcaBlock blk;
      blk.mean = ck.vector(bp + "/mean");
      blk.whitening = ck.matrix(bp + "/whitening");
      blk.unmixing = ck.matrix(bp + "/unmixing");
      blk.iterations = static_cast<int>(ck.integer(bp + "/iterations"));
      blk.converged = ck.integer(bp + "/converged") != 0;
      blk.reduced = ck.integer(bp + "/reduced") != 0;
      layer.blocks.push_back(std::move(blk));
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

}  // namespace rhmlab::ica
