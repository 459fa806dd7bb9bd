#pragma once

#include <span>

#include "hembed/tensor.hpp"

namespace hembed::losses {

struct LossWeights {
  double alpha = 0.5;  // MSE
  double beta = 0.3;   // contrastive
  double gamma = 0.2;  // triplet
};

struct LossComponents {
  double mse = 0.0;
  double contrastive = 0.0;
  double triplet = 0.0;
};

// (cos_sim - target)^2
double mse_loss(double cos_sim, double target);
double mse_loss_grad(double cos_sim, double target);

// Symmetric in-batch InfoNCE over unit-norm rows: the mean over both
// directions of -log softmax_j(a_i . b_j / tau)[i]. Needs at least two rows.
double contrastive_loss(const Mat& a, const Mat& b, double tau, Mat* grad_a = nullptr, Mat* grad_b = nullptr);

// max(0, cos(a, n) - cos(a, p) + margin) on unit-norm rows.
double triplet_loss(const RowVec& anchor, const RowVec& positive, const RowVec& negative, double margin);

double mixed_loss(const LossComponents& parts, const LossWeights& weights = {});

}  // namespace hembed::losses
