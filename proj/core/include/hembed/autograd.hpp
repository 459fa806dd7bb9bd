#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "hembed/nn.hpp"
#include "hembed/tensor.hpp"

// Reverse-mode differentiation over whole-matrix operations. Every node keeps
// its forward value; backward() replays the recorded closures in reverse.
namespace hembed::ad {

// A learned tensor seen by the tape. grad == nullptr means "do not train".
struct ParamRef {
  const Mat* value = nullptr;
  Mat* grad = nullptr;
};

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  Var constant(Mat value);
  const Mat& value(Var v) const { return nodes_[v.id].value; }
  // Valid after backward(); zero-sized for nodes that received no gradient.
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var gather_rows(ParamRef table, std::span<const int> ids);
  Var matmul(Var x, ParamRef w);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var silu(Var a);
  Var layer_norm(Var x, ParamRef scale, ParamRef shift, double eps = 1e-5);
  // positions are the row indices
  Var rope(Var x, int n_heads, double base);
  Var attention(Var q, Var k, Var v, int n_heads, std::span<const std::uint8_t> mask);

  // Unnormalized sentence vectors (1 x dim); follow with l2_normalize.
  Var pool_mean(Var e, std::span<const std::uint8_t> mask);
  Var pool_max(Var e, std::span<const std::uint8_t> mask);
  Var pool_first(Var e);
  Var pool_weighted(Var e, std::span<const std::uint8_t> mask, ParamRef weight, ParamRef bias);
  Var pool_attention(Var e, std::span<const std::uint8_t> mask, ParamRef query);
  Var l2_normalize(Var x);

  Var stack_rows(std::span<const Var> rows);
  // Scalar-valued (1 x 1) losses over row-aligned batches.
  Var pair_mse(Var a, Var b, std::span<const double> targets);
  Var info_nce(Var a, Var b, double tau);
  Var triplet(Var anchor, Var positive, Var negative, double margin);
  Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights);

  // Seeds d(out)/d(out) = 1 for a 1 x 1 node and accumulates into every ParamRef::grad.
  void backward(Var out);

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> back;
  };

  Var push(Mat value);
  void on_backward(Var v, std::function<void()> fn);
  Mat& g(Var v) { return nodes_[v.id].grad; }
  const Mat& val(Var v) const { return nodes_[v.id].value; }

  std::vector<Node> nodes_;
  bool record_;
};

}  // namespace hembed::ad
