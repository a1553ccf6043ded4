#pragma once

#include <cmath>
#include <functional>

#include <Eigen/Dense>

#include "rhmlab/net.hpp"
#include "rhmlab/rng.hpp"

namespace testutil {

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, rhmlab::Rng& rng, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

/// Relative error |a - b| / max(|a|, |b|, floor), taken over the whole tensor.
inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-8) {
  const double denom = std::max({a.norm(), b.norm(), floor});
  return (a - b).norm() / denom;
}

/// Central finite differences of f with respect to every entry of x.
inline Eigen::MatrixXd numeric_grad(const std::function<double()>& f, Eigen::MatrixXd& x, double h = 1e-6) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double orig = x(i, j);
      x(i, j) = orig + h;
      const double fp = f();
      x(i, j) = orig - h;
      const double fm = f();
      x(i, j) = orig;
      g(i, j) = (fp - fm) / (2 * h);
    }
  }
  return g;
}

/// One-hot batch of random codewords over v symbols, length len.
inline Eigen::MatrixXd random_one_hot(int v, int len, int batch, rhmlab::Rng& rng) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(v, static_cast<Eigen::Index>(batch) * len);
  for (Eigen::Index c = 0; c < x.cols(); ++c) x(static_cast<Eigen::Index>(rng.below(v)), c) = 1.0;
  return x;
}

}  // namespace testutil
