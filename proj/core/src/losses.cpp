#include "hembed/losses.hpp"

#include <algorithm>
#include <cmath>

#include "hembed/errors.hpp"

namespace hembed::losses {

double mse_loss(double cos_sim, double target) {
  const double d = cos_sim - target;
  return d * d;
}

double mse_loss_grad(double cos_sim, double target) { return 2.0 * (cos_sim - target); }

double contrastive_loss(const Mat& a, const Mat& b, double tau, Mat* grad_a, Mat* grad_b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DataError("contrastive_loss: batch shape mismatch");
  if (a.rows() < 2) throw DataError("contrastive_loss: batch needs at least 2 pairs (no negatives)");
  if (!(tau > 0.0)) throw ConfigError("contrastive_loss: temperature must be positive");
  const Eigen::Index n = a.rows();
  const Mat s = (a * b.transpose()) / tau;

  // row softmax (a -> b) and column softmax (b -> a)
  Mat p_row(n, n);
  Mat p_col(n, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi = s.row(i).maxCoeff();
    const double lse = hi + std::log((s.row(i).array() - hi).exp().sum());
    loss += lse - s(i, i);
    p_row.row(i) = (s.row(i).array() - lse).exp().matrix();
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const double hi = s.col(j).maxCoeff();
    const double lse = hi + std::log((s.col(j).array() - hi).exp().sum());
    loss += lse - s(j, j);
    p_col.col(j) = (s.col(j).array() - lse).exp().matrix();
  }
  const double scale = 0.5 / static_cast<double>(n);
  if (grad_a || grad_b) {
    Mat ds = (p_row + p_col) * scale;
    ds.diagonal().array() -= 2.0 * scale;
    ds /= tau;
    if (grad_a) *grad_a = ds * b;
    if (grad_b) *grad_b = ds.transpose() * a;
  }
  return loss * scale;
}

double triplet_loss(const RowVec& anchor, const RowVec& positive, const RowVec& negative, double margin) {
  return std::max(0.0, anchor.dot(negative) - anchor.dot(positive) + margin);
}

double mixed_loss(const LossComponents& parts, const LossWeights& w) {
  return w.alpha * parts.mse + w.beta * parts.contrastive + w.gamma * parts.triplet;
}

}  // namespace hembed::losses
