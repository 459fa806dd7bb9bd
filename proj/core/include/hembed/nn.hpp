#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hembed/tensor.hpp"

// Forward kernels shared by the encoder and the autograd tape.
namespace hembed::nn {

// Rotates each consecutive pair (x[2i], x[2i+1]) of every head slice of row r
// by positions[r] * base^(-2i/head_dim). x has n_heads * head_dim columns.
// Pass inverse = true for the transpose (used by backprop).
Mat rope_apply(const Mat& x, std::span<const std::size_t> positions, double base, int n_heads = 1,
               bool inverse = false);

struct AttentionOutput {
  Mat out;                 // n x (n_heads * head_dim), heads concatenated, not projected
  std::vector<Mat> probs;  // per head, n x n; masked keys carry exactly 0
};

// softmax(q k^T / sqrt(head_dim) + mask_bias) v per head. mask[j] == 0 removes key j.
// A query with no unmasked keys gets a zero row.
AttentionOutput attention(const Mat& q, const Mat& k, const Mat& v, int n_heads,
                          std::span<const std::uint8_t> mask);

double silu(double t);
double sigmoid(double t);

// down(silu(x gate) * (x up)); rows of x are independent.
Mat swiglu_ffn(const Mat& x, const Mat& gate_w, const Mat& up_w, const Mat& down_w);

Mat layer_norm(const Mat& x, const Mat& scale, const Mat& shift, double eps = 1e-5);

enum class Pooling { cls, mean, max, attention, weighted };

struct PoolingHead {
  Mat weight;  // 1 x dim, the scalar-per-token Linear of weighted pooling
  Mat bias;    // 1 x 1
  Mat query;   // 1 x dim, attention pooling
};

inline constexpr double kPoolEps = 1e-9;

// Sentence vector (L2-normalized) from token rows. Masked rows are never read.
// Throws DataError when every position is masked (or position 0 is masked for cls).
RowVec pool(const Mat& e, std::span<const std::uint8_t> mask, Pooling strategy, const PoolingHead& head);

// Unnormalized weighted pooling plus the normalized token weights it used.
RowVec weighted_sum_pool(const Mat& e, std::span<const std::uint8_t> mask, const PoolingHead& head,
                         std::vector<double>* weights = nullptr);

RowVec l2_normalize(const RowVec& x);

}  // namespace hembed::nn
