#include <cmath>
#include <random>

#include "doctest.h"
#include "hembed/encoder.hpp"
#include "hembed/errors.hpp"
#include "hembed/nn.hpp"
#include "oracles.hpp"

using namespace hembed;
using namespace hembed::nn;

namespace {

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

oracle::Rows rows_of(const Mat& m) {
  oracle::Rows out(static_cast<std::size_t>(m.rows()), oracle::Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

oracle::Vec vec_of(const Mat& m) { return rows_of(m)[0]; }

oracle::Rows add(const oracle::Rows& a, const oracle::Rows& b) {
  oracle::Rows out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

// Straight-line encoder: embedding, pre-LN blocks, final LN.
oracle::Rows reference_forward(const encoder::EncoderConfig& c, const encoder::EncoderWeights& w,
                               const std::vector<int>& ids, const std::vector<std::uint8_t>& mask) {
  oracle::Rows x;
  for (int id : ids) x.push_back(rows_of(w.token_embedding.row(id))[0]);
  for (const auto& L : w.layers) {
    auto h = oracle::layer_norm(x, vec_of(L.ln1_scale), vec_of(L.ln1_shift));
    auto q = oracle::matmul(h, rows_of(L.wq));
    auto k = oracle::matmul(h, rows_of(L.wk));
    auto v = oracle::matmul(h, rows_of(L.wv));
    for (std::size_t p = 0; p < q.size(); ++p) {
      q[p] = oracle::rotate(q[p], p, c.n_heads, c.rope_base);
      k[p] = oracle::rotate(k[p], p, c.n_heads, c.rope_base);
    }
    x = add(x, oracle::matmul(oracle::attention(q, k, v, c.n_heads, mask), rows_of(L.wo)));
    auto h2 = oracle::layer_norm(x, vec_of(L.ln2_scale), vec_of(L.ln2_shift));
    auto gate = oracle::matmul(h2, rows_of(L.w_gate));
    const auto up = oracle::matmul(h2, rows_of(L.w_up));
    for (std::size_t i = 0; i < gate.size(); ++i)
      for (std::size_t j = 0; j < gate[i].size(); ++j) gate[i][j] = oracle::silu(gate[i][j]) * up[i][j];
    x = add(x, oracle::matmul(gate, rows_of(L.w_down)));
  }
  return oracle::layer_norm(x, vec_of(w.final_scale), vec_of(w.final_shift));
}

encoder::EncoderConfig tiny(std::size_t layers = 1) {
  encoder::EncoderConfig c;
  c.vocab_size = 20;
  c.dim = 8;
  c.n_layers = layers;
  c.n_heads = 2;
  c.max_seq_len = 16;
  return c;
}

}  // namespace

TEST_CASE("config validation and ffn sizing") {
  auto c = tiny();
  CHECK_NOTHROW(c.validate());
  CHECK(c.ffn_hidden() % 8 == 0);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.dim = 6;
  c.n_heads = 2;  // head_dim 3 is odd
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const auto big = encoder::large_config(50008);
  CHECK(big.dim == 768);
  CHECK(big.n_layers == 12);
  CHECK(big.n_heads == 12);
  CHECK(encoder::parse_pooling("weighted") == Pooling::weighted);
  CHECK_THROWS_AS(encoder::parse_pooling("sum"), ConfigError);
}

TEST_CASE("rope: position zero is identity, rotations are isometries") {
  std::mt19937_64 rng(1);
  const Mat x = random_mat(rng, 1, 16);
  const std::vector<std::size_t> zero{0};
  CHECK((rope_apply(x, zero, 10000.0, 2) - x).cwiseAbs().maxCoeff() == 0.0);
  for (int t = 0; t < 100; ++t) {
    const Mat y = random_mat(rng, 1, 16);
    const std::vector<std::size_t> p{static_cast<std::size_t>(rng() % 512)};
    CHECK(std::fabs(rope_apply(y, p, 10000.0, 2).norm() - y.norm()) <= 1e-6 * std::max(1.0, y.norm()));
    // inverse undoes forward
    CHECK((rope_apply(rope_apply(y, p, 10000.0, 2), p, 10000.0, 2, true) - y).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rope matches the reference rotation") {
  std::mt19937_64 rng(2);
  const Mat x = random_mat(rng, 5, 12);
  std::vector<std::size_t> pos{0, 1, 2, 7, 40};
  const Mat y = rope_apply(x, pos, 500.0, 3);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto ref = oracle::rotate(rows_of(x.row(static_cast<Eigen::Index>(r)))[0], pos[r], 3, 500.0);
    for (std::size_t j = 0; j < 12; ++j) CHECK(y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) == doctest::Approx(ref[j]).epsilon(1e-12));
  }
}

TEST_CASE("attention examples") {
  const std::vector<std::uint8_t> only_first{1, 0, 0};
  std::mt19937_64 rng(3);
  const Mat q = random_mat(rng, 3, 4), k = random_mat(rng, 3, 4), v = random_mat(rng, 3, 4);
  const auto single = attention(q, k, v, 1, only_first);
  for (Eigen::Index i = 0; i < 3; ++i) CHECK((single.out.row(i) - v.row(0)).cwiseAbs().maxCoeff() < 1e-12);

  Mat same_k(3, 4);
  same_k.rowwise() = k.row(0);
  const std::vector<std::uint8_t> all{1, 1, 1};
  const auto uni = attention(q, same_k, v, 2, all);
  for (const auto& p : uni.probs)
    for (Eigen::Index i = 0; i < 3; ++i)
      for (Eigen::Index j = 0; j < 3; ++j) CHECK(p(i, j) == doctest::Approx(1.0 / 3.0));

  // hand-computed 2x2 case: scores 1/sqrt(2) on the diagonal, 0 off it
  Mat q2(2, 2), k2(2, 2), v2(2, 2);
  q2 << 1, 0, 0, 1;
  k2 << 1, 0, 0, 1;
  v2 << 1, 2, 3, 4;
  const std::vector<std::uint8_t> both{1, 1};
  const auto hand = attention(q2, k2, v2, 1, both);
  CHECK(std::fabs(hand.out(0, 0) - 1.660477) < 1e-6);
  CHECK(std::fabs(hand.out(0, 1) - 2.660477) < 1e-6);
  CHECK(std::fabs(hand.out(1, 0) - 2.339523) < 1e-6);
  CHECK(std::fabs(hand.out(1, 1) - 3.339523) < 1e-6);
}

TEST_CASE("attention rows sum to one over unmasked keys") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 8);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
    for (auto& m : mask) m = rng() % 3 != 0;
    mask[rng() % mask.size()] = 1;
    const auto out = attention(random_mat(rng, n, 8), random_mat(rng, n, 8), random_mat(rng, n, 8), 2, mask);
    for (const auto& p : out.probs) {
      for (Eigen::Index i = 0; i < n; ++i) {
        CHECK(std::fabs(p.row(i).sum() - 1.0) <= 1e-6);
        for (Eigen::Index j = 0; j < n; ++j)
          if (!mask[static_cast<std::size_t>(j)]) CHECK(p(i, j) == 0.0);
      }
    }
  }
}

TEST_CASE("swiglu examples") {
  Mat x = Mat::Zero(1, 1), one = Mat::Ones(1, 1), down(1, 1);
  down << 2.5;
  CHECK(swiglu_ffn(x, one, one, down)(0, 0) == 0.0);
  x << 1.0;
  CHECK(swiglu_ffn(x, one, one, down)(0, 0) == doctest::Approx(0.7310585786 * 2.5).epsilon(1e-9));
  CHECK(silu(0.0) == 0.0);
}

TEST_CASE("pooling: single unmasked token gives that row normalized") {
  std::mt19937_64 rng(5);
  const Mat e = random_mat(rng, 4, 6);
  PoolingHead head{random_mat(rng, 1, 6), random_mat(rng, 1, 1), random_mat(rng, 1, 6)};
  const std::vector<std::uint8_t> mask{1, 0, 0, 0};
  const RowVec expect = e.row(0) / e.row(0).norm();
  for (Pooling p : {Pooling::cls, Pooling::mean, Pooling::max, Pooling::attention, Pooling::weighted}) {
    CHECK((pool(e, mask, p, head) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(pool(e, std::vector<std::uint8_t>(4, 0), Pooling::mean, head), DataError);
}

TEST_CASE("weighted pooling with zero head equals mean pooling") {
  std::mt19937_64 rng(6);
  PoolingHead zero{Mat::Zero(1, 8), Mat::Zero(1, 1), Mat::Zero(1, 8)};
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 10);
    const Mat e = random_mat(rng, n, 8);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
    for (auto& m : mask) m = rng() % 2;
    mask[0] = 1;
    const RowVec w = pool(e, mask, Pooling::weighted, zero);
    const auto ref = oracle::normalize(oracle::masked_mean(rows_of(e), mask));
    for (std::size_t j = 0; j < ref.size(); ++j) CHECK(std::fabs(w(static_cast<Eigen::Index>(j)) - ref[j]) <= 1e-9);
  }
}

TEST_CASE("encoder forward matches the straight-line reference") {
  for (std::size_t layers : {0u, 1u, 2u}) {
    const auto c = tiny(layers);
    const auto w = encoder::EncoderWeights::init(c, 99);
    const std::vector<int> ids{2, 7, 3, 19, 11, 5};
    const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1};
    const Mat out = encoder::forward(c, w, ids, mask);
    REQUIRE(out.rows() == 6);
    REQUIRE(out.cols() == 8);
    const auto ref = reference_forward(c, w, ids, mask);
    for (std::size_t i = 0; i < 6; ++i) {
      if (!mask[i]) continue;
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(std::fabs(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - ref[i][j]) < 1e-9);
      }
    }
  }
}

TEST_CASE("forward: masked ids do not affect unmasked rows; runs are deterministic") {
  const auto c = tiny(2);
  const auto w = encoder::EncoderWeights::init(c, 7);
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 2 + rng() % 10;
    std::vector<int> ids(n);
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = static_cast<int>(rng() % c.vocab_size);
      mask[i] = rng() % 3 != 0;
    }
    mask[0] = 1;
    auto other = ids;
    for (std::size_t i = 0; i < n; ++i)
      if (!mask[i]) other[i] = static_cast<int>(rng() % c.vocab_size);
    const Mat a = encoder::forward(c, w, ids, mask);
    const Mat b = encoder::forward(c, w, other, mask);
    const Mat again = encoder::forward(c, w, ids, mask);
    CHECK((a - again).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i]) CHECK((a.row(static_cast<Eigen::Index>(i)) - b.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff() <= 1e-6);
    }
    for (Pooling p : {Pooling::mean, Pooling::max, Pooling::attention, Pooling::weighted}) {
      const RowVec pa = pool(a, mask, p, w.pooling);
      CHECK(std::fabs(pa.norm() - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("forward input validation") {
  const auto c = tiny();
  const auto w = encoder::EncoderWeights::init(c, 1);
  CHECK_THROWS_AS(encoder::forward(c, w, std::vector<int>{}, std::vector<std::uint8_t>{}), DataError);
  CHECK_THROWS_AS(encoder::forward(c, w, std::vector<int>{1, 2}, std::vector<std::uint8_t>{0, 0}), DataError);
  CHECK_THROWS_AS(encoder::forward(c, w, std::vector<int>{1, 99}, std::vector<std::uint8_t>{1, 1}), DataError);
  CHECK_THROWS_AS(encoder::forward(c, w, std::vector<int>(17, 1), std::vector<std::uint8_t>(17, 1)), DataError);
}

TEST_CASE("init and weights serialization") {
  const auto c = tiny(2);
  const auto w = encoder::EncoderWeights::init(c, 3);
  CHECK(w.pooling.weight.cwiseAbs().maxCoeff() == 0.0);
  CHECK(w.layers[0].ln1_scale.minCoeff() == 1.0);
  bool finite = true;
  w.for_each([&](const std::string&, const Mat& m) { finite = finite && m.allFinite(); });
  CHECK(finite);

  const std::string bytes = encoder::serialize_weights(c, w);
  encoder::EncoderConfig c2;
  encoder::EncoderWeights w2;
  encoder::deserialize_weights(bytes, c2, w2);
  CHECK(c2.dim == c.dim);
  CHECK(c2.n_layers == c.n_layers);
  CHECK(encoder::serialize_weights(c2, w2) == bytes);
  CHECK((w2.token_embedding - w.token_embedding).cwiseAbs().maxCoeff() < 1e-6);
  CHECK_THROWS_AS(encoder::deserialize_weights(bytes.substr(0, bytes.size() / 2), c2, w2), ModelError);
  CHECK_THROWS_AS(encoder::deserialize_weights("garbage", c2, w2), ModelError);
}
