#include "hembed/nn.hpp"

#include <cmath>
#include <limits>

#include "hembed/errors.hpp"

namespace hembed::nn {

Mat rope_apply(const Mat& x, std::span<const std::size_t> positions, double base, int n_heads, bool inverse) {
  if (n_heads <= 0 || x.cols() % n_heads != 0) throw ConfigError("rope: columns not divisible by heads");
  const Eigen::Index hd = x.cols() / n_heads;
  if (hd % 2 != 0) throw ConfigError("rope: head_dim must be even");
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) throw ConfigError("rope: positions/rows mismatch");
  Mat y(x.rows(), x.cols());
  const double sign = inverse ? -1.0 : 1.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(r)]);
    for (Eigen::Index i = 0; i < hd / 2; ++i) {
      const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double c = std::cos(theta);
      const double s = sign * std::sin(theta);
      for (int h = 0; h < n_heads; ++h) {
        const Eigen::Index col = h * hd + 2 * i;
        const double x0 = x(r, col);
        const double x1 = x(r, col + 1);
        y(r, col) = x0 * c - x1 * s;
        y(r, col + 1) = x0 * s + x1 * c;
      }
    }
  }
  return y;
}

AttentionOutput attention(const Mat& q, const Mat& k, const Mat& v, int n_heads,
                          std::span<const std::uint8_t> mask) {
  const Eigen::Index n = q.rows();
  if (k.rows() != n || v.rows() != n || q.cols() != k.cols() || q.cols() != v.cols()) {
    throw ConfigError("attention: inconsistent shapes");
  }
  if (static_cast<Eigen::Index>(mask.size()) != n) throw ConfigError("attention: mask length mismatch");
  if (n_heads <= 0 || q.cols() % n_heads != 0) throw ConfigError("attention: columns not divisible by heads");
  const Eigen::Index hd = q.cols() / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  AttentionOutput res;
  res.out = Mat::Zero(n, q.cols());
  res.probs.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.middleCols(h * hd, hd);
    const auto kh = k.middleCols(h * hd, hd);
    Mat scores = (qh * kh.transpose()) * scale;
    Mat p = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double hi = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (mask[static_cast<std::size_t>(j)]) hi = std::max(hi, scores(i, j));
      }
      if (!std::isfinite(hi)) continue;
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        p(i, j) = std::exp(scores(i, j) - hi);
        sum += p(i, j);
      }
      p.row(i) /= sum;
    }
    res.out.middleCols(h * hd, hd) = p * v.middleCols(h * hd, hd);
    res.probs.push_back(std::move(p));
  }
  return res;
}

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double silu(double t) { return t * sigmoid(t); }

Mat swiglu_ffn(const Mat& x, const Mat& gate_w, const Mat& up_w, const Mat& down_w) {
  if (x.cols() != gate_w.rows() || x.cols() != up_w.rows() || gate_w.cols() != up_w.cols() ||
      down_w.rows() != gate_w.cols()) {
    throw ConfigError("swiglu_ffn: inconsistent shapes");
  }
  Mat g = x * gate_w;
  const Mat u = x * up_w;
  g = g.unaryExpr([](double t) { return silu(t); });
  return g.cwiseProduct(u) * down_w;
}

Mat layer_norm(const Mat& x, const Mat& scale, const Mat& shift, double eps) {
  Mat y(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mu).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + eps);
    y.row(r) = ((x.row(r).array() - mu) * inv * scale.row(0).array() + shift.row(0).array()).matrix();
  }
  return y;
}

RowVec l2_normalize(const RowVec& x) {
  const double n = x.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw DataError("cannot L2-normalize a zero or non-finite vector");
  return x / n;
}

namespace {

std::size_t count_unmasked(std::span<const std::uint8_t> mask) {
  std::size_t m = 0;
  for (auto b : mask) m += b ? 1 : 0;
  return m;
}

}  // namespace

RowVec weighted_sum_pool(const Mat& e, std::span<const std::uint8_t> mask, const PoolingHead& head,
                         std::vector<double>* weights) {
  const Eigen::Index n = e.rows();
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const double z = e.row(i).dot(head.weight.row(0)) + head.bias(0, 0);
    w[static_cast<std::size_t>(i)] = sigmoid(z);
    total += w[static_cast<std::size_t>(i)];
  }
  const double denom = total + kPoolEps;
  RowVec s = RowVec::Zero(e.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    w[static_cast<std::size_t>(i)] /= denom;
    s += w[static_cast<std::size_t>(i)] * e.row(i);
  }
  if (weights) *weights = std::move(w);
  return s;
}

RowVec pool(const Mat& e, std::span<const std::uint8_t> mask, Pooling strategy, const PoolingHead& head) {
  const Eigen::Index n = e.rows();
  if (static_cast<Eigen::Index>(mask.size()) != n) throw ConfigError("pool: mask length mismatch");
  const std::size_t m = count_unmasked(mask);
  if (m == 0) throw DataError("empty sequence");
  RowVec s = RowVec::Zero(e.cols());
  switch (strategy) {
    case Pooling::cls:
      if (!mask[0]) throw DataError("cls pooling: position 0 is masked");
      s = e.row(0);
      break;
    case Pooling::mean:
      for (Eigen::Index i = 0; i < n; ++i) {
        if (mask[static_cast<std::size_t>(i)]) s += e.row(i);
      }
      s /= static_cast<double>(m);
      break;
    case Pooling::max: {
      bool first = true;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        if (first) {
          s = e.row(i);
          first = false;
        } else {
          s = s.cwiseMax(e.row(i));
        }
      }
      break;
    }
    case Pooling::attention: {
      const double scale = 1.0 / std::sqrt(static_cast<double>(e.cols()));
      std::vector<double> a(static_cast<std::size_t>(n), 0.0);
      double hi = -std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        a[static_cast<std::size_t>(i)] = e.row(i).dot(head.query.row(0)) * scale;
        hi = std::max(hi, a[static_cast<std::size_t>(i)]);
      }
      double sum = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        a[static_cast<std::size_t>(i)] = std::exp(a[static_cast<std::size_t>(i)] - hi);
        sum += a[static_cast<std::size_t>(i)];
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        if (mask[static_cast<std::size_t>(i)]) s += (a[static_cast<std::size_t>(i)] / sum) * e.row(i);
      }
      break;
    }
    case Pooling::weighted:
      s = weighted_sum_pool(e, mask, head);
      break;
  }
  return l2_normalize(s);
}

}  // namespace hembed::nn
