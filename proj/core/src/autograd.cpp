#include "hembed/autograd.hpp"

#include <cmath>

#include "hembed/errors.hpp"
#include "hembed/losses.hpp"

namespace hembed::ad {

namespace {

std::vector<std::size_t> iota_positions(Eigen::Index n) {
  std::vector<std::size_t> p(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = i;
  return p;
}

}  // namespace

Var Tape::push(Mat value) {
  nodes_.push_back({std::move(value), Mat(), {}});
  return Var{nodes_.size() - 1};
}

void Tape::on_backward(Var v, std::function<void()> fn) {
  if (record_) nodes_[v.id].back = std::move(fn);
}

Var Tape::constant(Mat value) { return push(std::move(value)); }

Var Tape::gather_rows(ParamRef table, std::span<const int> ids) {
  const Mat& t = *table.value;
  Mat out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw DataError("token id out of range: " + std::to_string(ids[i]));
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  Var r = push(std::move(out));
  if (table.grad) {
    on_backward(r, [this, r, table, rows = std::vector<int>(ids.begin(), ids.end())] {
      const Mat& gr = g(r);
      for (std::size_t i = 0; i < rows.size(); ++i) table.grad->row(rows[i]) += gr.row(static_cast<Eigen::Index>(i));
    });
  }
  return r;
}

Var Tape::matmul(Var x, ParamRef w) {
  if (val(x).cols() != w.value->rows()) throw ConfigError("matmul: inner dimensions differ");
  Var r = push(val(x) * *w.value);
  on_backward(r, [this, r, x, w] {
    const Mat& gr = g(r);
    g(x).noalias() += gr * w.value->transpose();
    if (w.grad) w.grad->noalias() += val(x).transpose() * gr;
  });
  return r;
}

Var Tape::add(Var a, Var b) {
  Var r = push(val(a) + val(b));
  on_backward(r, [this, r, a, b] {
    g(a) += g(r);
    g(b) += g(r);
  });
  return r;
}

Var Tape::mul(Var a, Var b) {
  Var r = push(val(a).cwiseProduct(val(b)));
  on_backward(r, [this, r, a, b] {
    g(a) += g(r).cwiseProduct(val(b));
    g(b) += g(r).cwiseProduct(val(a));
  });
  return r;
}

Var Tape::silu(Var a) {
  Var r = push(val(a).unaryExpr([](double t) { return nn::silu(t); }));
  on_backward(r, [this, r, a] {
    const Mat d = val(a).unaryExpr([](double t) {
      const double s = nn::sigmoid(t);
      return s * (1.0 + t * (1.0 - s));
    });
    g(a) += g(r).cwiseProduct(d);
  });
  return r;
}

Var Tape::layer_norm(Var x, ParamRef scale, ParamRef shift, double eps) {
  const Mat& xv = val(x);
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  Mat xhat(n, d);
  std::vector<double> inv(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).sum() / static_cast<double>(d);
    const double var = (xv.row(r).array() - mu).square().sum() / static_cast<double>(d);
    inv[static_cast<std::size_t>(r)] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv[static_cast<std::size_t>(r)];
  }
  Mat y = (xhat.array().rowwise() * scale.value->row(0).array()).rowwise() + shift.value->row(0).array();
  Var r = push(std::move(y));
  on_backward(r, [this, r, x, scale, shift, xhat = std::move(xhat), inv = std::move(inv)] {
    const Mat& gr = g(r);
    const Eigen::Index d = gr.cols();
    if (scale.grad) scale.grad->row(0) += gr.cwiseProduct(xhat).colwise().sum();
    if (shift.grad) shift.grad->row(0) += gr.colwise().sum();
    Mat& gx = g(x);
    for (Eigen::Index i = 0; i < gr.rows(); ++i) {
      const RowVec dxhat = gr.row(i).cwiseProduct(scale.value->row(0));
      const double m1 = dxhat.sum() / static_cast<double>(d);
      const double m2 = dxhat.dot(xhat.row(i)) / static_cast<double>(d);
      gx.row(i) += ((dxhat.array() - m1 - xhat.row(i).array() * m2) * inv[static_cast<std::size_t>(i)]).matrix();
    }
  });
  return r;
}

Var Tape::rope(Var x, int n_heads, double base) {
  const auto pos = iota_positions(val(x).rows());
  Var r = push(nn::rope_apply(val(x), pos, base, n_heads));
  on_backward(r, [this, r, x, n_heads, base, pos] { g(x) += nn::rope_apply(g(r), pos, base, n_heads, true); });
  return r;
}

Var Tape::attention(Var q, Var k, Var v, int n_heads, std::span<const std::uint8_t> mask) {
  auto res = nn::attention(val(q), val(k), val(v), n_heads, mask);
  Var r = push(std::move(res.out));
  on_backward(r, [this, r, q, k, v, n_heads, probs = std::move(res.probs)] {
    const Mat& gr = g(r);
    const Eigen::Index hd = gr.cols() / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < n_heads; ++h) {
      const Mat& p = probs[static_cast<std::size_t>(h)];
      const auto go = gr.middleCols(h * hd, hd);
      g(v).middleCols(h * hd, hd) += p.transpose() * go;
      const Mat dp = go * val(v).middleCols(h * hd, hd).transpose();
      Mat ds = p.cwiseProduct(dp);
      const Eigen::VectorXd rowdot = ds.rowwise().sum();
      ds -= (p.array().colwise() * rowdot.array()).matrix();
      ds *= scale;
      g(q).middleCols(h * hd, hd) += ds * val(k).middleCols(h * hd, hd);
      g(k).middleCols(h * hd, hd) += ds.transpose() * val(q).middleCols(h * hd, hd);
    }
  });
  return r;
}

namespace {

std::vector<std::uint8_t> checked_mask(std::span<const std::uint8_t> mask, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(mask.size()) != rows) throw ConfigError("pool: mask length mismatch");
  std::size_t m = 0;
  for (auto b : mask) m += b ? 1 : 0;
  if (m == 0) throw DataError("empty sequence");
  return {mask.begin(), mask.end()};
}

}  // namespace

Var Tape::pool_mean(Var e, std::span<const std::uint8_t> mask_in) {
  auto mask = checked_mask(mask_in, val(e).rows());
  const Mat& ev = val(e);
  RowVec s = RowVec::Zero(ev.cols());
  double m = 0.0;
  for (Eigen::Index i = 0; i < ev.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    s += ev.row(i);
    m += 1.0;
  }
  s /= m;
  Var r = push(Mat(s));
  on_backward(r, [this, r, e, m, mask = std::move(mask)] {
    for (Eigen::Index i = 0; i < g(e).rows(); ++i) {
      if (mask[static_cast<std::size_t>(i)]) g(e).row(i) += g(r).row(0) / m;
    }
  });
  return r;
}

Var Tape::pool_max(Var e, std::span<const std::uint8_t> mask_in) {
  auto mask = checked_mask(mask_in, val(e).rows());
  const Mat& ev = val(e);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(ev.cols()), -1);
  RowVec s(ev.cols());
  for (Eigen::Index i = 0; i < ev.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index c = 0; c < ev.cols(); ++c) {
      auto& a = arg[static_cast<std::size_t>(c)];
      if (a < 0 || ev(i, c) > s(c)) {
        a = i;
        s(c) = ev(i, c);
      }
    }
  }
  Var r = push(Mat(s));
  on_backward(r, [this, r, e, arg = std::move(arg)] {
    for (std::size_t c = 0; c < arg.size(); ++c) {
      g(e)(arg[c], static_cast<Eigen::Index>(c)) += g(r)(0, static_cast<Eigen::Index>(c));
    }
  });
  return r;
}

Var Tape::pool_first(Var e) {
  Var r = push(Mat(val(e).row(0)));
  on_backward(r, [this, r, e] { g(e).row(0) += g(r).row(0); });
  return r;
}

Var Tape::pool_weighted(Var e, std::span<const std::uint8_t> mask_in, ParamRef weight, ParamRef bias) {
  auto mask = checked_mask(mask_in, val(e).rows());
  nn::PoolingHead head{*weight.value, *bias.value, Mat()};
  std::vector<double> w;
  RowVec s = nn::weighted_sum_pool(val(e), mask, head, &w);
  Var r = push(Mat(s));
  on_backward(r, [this, r, e, weight, bias, mask = std::move(mask), w = std::move(w)] {
    const Mat& ev = val(e);
    const RowVec gs = g(r).row(0);
    const Eigen::Index n = ev.rows();
    // raw sigmoid outputs and the normalizer they were divided by
    double total = 0.0;
    std::vector<double> sig(static_cast<std::size_t>(n), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      sig[static_cast<std::size_t>(i)] = nn::sigmoid(ev.row(i).dot(weight.value->row(0)) + (*bias.value)(0, 0));
      total += sig[static_cast<std::size_t>(i)];
    }
    const double denom = total + nn::kPoolEps;
    double dot_sum = 0.0;  // sum_j dW_j * w_j
    std::vector<double> dW(static_cast<std::size_t>(n), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      dW[static_cast<std::size_t>(i)] = gs.dot(ev.row(i));
      dot_sum += dW[static_cast<std::size_t>(i)] * sig[static_cast<std::size_t>(i)];
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (!mask[k]) continue;
      g(e).row(i) += w[k] * gs;
      const double dsig = dW[k] / denom - dot_sum / (denom * denom);
      const double dz = dsig * sig[k] * (1.0 - sig[k]);
      g(e).row(i) += dz * weight.value->row(0);
      if (weight.grad) weight.grad->row(0) += dz * ev.row(i);
      if (bias.grad) (*bias.grad)(0, 0) += dz;
    }
  });
  return r;
}

Var Tape::pool_attention(Var e, std::span<const std::uint8_t> mask_in, ParamRef query) {
  auto mask = checked_mask(mask_in, val(e).rows());
  const Mat& ev = val(e);
  const Eigen::Index n = ev.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(ev.cols()));
  std::vector<double> a(static_cast<std::size_t>(n), 0.0);
  double hi = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    a[static_cast<std::size_t>(i)] = ev.row(i).dot(query.value->row(0)) * scale;
    hi = std::max(hi, a[static_cast<std::size_t>(i)]);
  }
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    a[static_cast<std::size_t>(i)] = std::exp(a[static_cast<std::size_t>(i)] - hi);
    sum += a[static_cast<std::size_t>(i)];
  }
  RowVec s = RowVec::Zero(ev.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    a[static_cast<std::size_t>(i)] /= sum;
    s += a[static_cast<std::size_t>(i)] * ev.row(i);
  }
  Var r = push(Mat(s));
  on_backward(r, [this, r, e, query, scale, mask = std::move(mask), a = std::move(a)] {
    const Mat& ev = val(e);
    const RowVec gs = g(r).row(0);
    double mean_da = 0.0;
    std::vector<double> da(a.size(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!mask[i]) continue;
      da[i] = gs.dot(ev.row(static_cast<Eigen::Index>(i)));
      mean_da += a[i] * da[i];
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!mask[i]) continue;
      const auto row = static_cast<Eigen::Index>(i);
      const double dscore = a[i] * (da[i] - mean_da) * scale;
      g(e).row(row) += a[i] * gs + dscore * query.value->row(0);
      if (query.grad) query.grad->row(0) += dscore * ev.row(row);
    }
  });
  return r;
}

Var Tape::l2_normalize(Var x) {
  Mat y(val(x).rows(), val(x).cols());
  std::vector<double> norms(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double n = val(x).row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw DataError("cannot L2-normalize a zero or non-finite vector");
    norms[static_cast<std::size_t>(i)] = n;
    y.row(i) = val(x).row(i) / n;
  }
  Var r = push(std::move(y));
  on_backward(r, [this, r, x, norms = std::move(norms)] {
    const Mat& yv = val(r);
    for (Eigen::Index i = 0; i < yv.rows(); ++i) {
      const RowVec gi = g(r).row(i);
      g(x).row(i) += (gi - yv.row(i) * yv.row(i).dot(gi)) / norms[static_cast<std::size_t>(i)];
    }
  });
  return r;
}

Var Tape::stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ConfigError("stack_rows: no rows");
  Mat out(static_cast<Eigen::Index>(rows.size()), val(rows[0]).cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = val(rows[i]).row(0);
  Var r = push(std::move(out));
  on_backward(r, [this, r, rs = std::vector<Var>(rows.begin(), rows.end())] {
    for (std::size_t i = 0; i < rs.size(); ++i) g(rs[i]).row(0) += g(r).row(static_cast<Eigen::Index>(i));
  });
  return r;
}

Var Tape::pair_mse(Var a, Var b, std::span<const double> targets) {
  const Eigen::Index n = val(a).rows();
  if (val(b).rows() != n || static_cast<Eigen::Index>(targets.size()) != n || n == 0) {
    throw ConfigError("pair_mse: batch shape mismatch");
  }
  double loss = 0.0;
  std::vector<double> cos(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    cos[static_cast<std::size_t>(i)] = val(a).row(i).dot(val(b).row(i));
    loss += losses::mse_loss(cos[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(i)]);
  }
  Var r = push(Mat::Constant(1, 1, loss / static_cast<double>(n)));
  on_backward(r, [this, r, a, b, cos = std::move(cos), t = std::vector<double>(targets.begin(), targets.end())] {
    const double go = g(r)(0, 0) / static_cast<double>(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const double d = go * losses::mse_loss_grad(cos[i], t[i]);
      g(a).row(row) += d * val(b).row(row);
      g(b).row(row) += d * val(a).row(row);
    }
  });
  return r;
}

Var Tape::info_nce(Var a, Var b, double tau) {
  Mat ga;
  Mat gb;
  const double loss = losses::contrastive_loss(val(a), val(b), tau, record_ ? &ga : nullptr, record_ ? &gb : nullptr);
  Var r = push(Mat::Constant(1, 1, loss));
  on_backward(r, [this, r, a, b, ga = std::move(ga), gb = std::move(gb)] {
    const double go = g(r)(0, 0);
    g(a) += go * ga;
    g(b) += go * gb;
  });
  return r;
}

Var Tape::triplet(Var anchor, Var positive, Var negative, double margin) {
  const Eigen::Index n = val(anchor).rows();
  if (n == 0 || val(positive).rows() != n || val(negative).rows() != n) throw ConfigError("triplet: batch shape mismatch");
  double loss = 0.0;
  std::vector<std::uint8_t> active(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double l = losses::triplet_loss(val(anchor).row(i), val(positive).row(i), val(negative).row(i), margin);
    active[static_cast<std::size_t>(i)] = l > 0.0;
    loss += l;
  }
  Var r = push(Mat::Constant(1, 1, loss / static_cast<double>(n)));
  on_backward(r, [this, r, anchor, positive, negative, active = std::move(active)] {
    const double go = g(r)(0, 0) / static_cast<double>(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (!active[i]) continue;
      const auto row = static_cast<Eigen::Index>(i);
      g(anchor).row(row) += go * (val(negative).row(row) - val(positive).row(row));
      g(positive).row(row) -= go * val(anchor).row(row);
      g(negative).row(row) += go * val(anchor).row(row);
    }
  });
  return r;
}

Var Tape::weighted_sum(std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size()) throw ConfigError("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) total += weights[i] * val(scalars[i])(0, 0);
  Var r = push(Mat::Constant(1, 1, total));
  on_backward(r, [this, r, s = std::vector<Var>(scalars.begin(), scalars.end()),
                  w = std::vector<double>(weights.begin(), weights.end())] {
    for (std::size_t i = 0; i < s.size(); ++i) g(s[i])(0, 0) += w[i] * g(r)(0, 0);
  });
  return r;
}

void Tape::backward(Var out) {
  if (!record_) throw ConfigError("backward on a tape that does not record");
  if (val(out).rows() != 1 || val(out).cols() != 1) throw ConfigError("backward needs a scalar output");
  for (auto& n : nodes_) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  nodes_[out.id].grad(0, 0) = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    if (nodes_[i].back) nodes_[i].back();
  }
}

}  // namespace hembed::ad
