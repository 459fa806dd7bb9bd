#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "grad_check.hpp"
#include "hembed/errors.hpp"
#include "hembed/losses.hpp"
#include "hembed/training.hpp"

using namespace hembed;
using namespace hembed::training;

namespace {

Mat unit_rows(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
  std::normal_distribution<double> g;
  Mat m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g(rng);
    m.row(i).normalize();
  }
  return m;
}

}  // namespace

TEST_CASE("mse loss examples") {
  CHECK(losses::mse_loss(0.7, 0.7) == 0.0);
  CHECK(losses::mse_loss(0.0, 1.0) == 1.0);
  CHECK(losses::mse_loss(-1.0, 1.0) == 4.0);
  CHECK(losses::mse_loss_grad(0.5, 1.0) == doctest::Approx(-1.0));
}

TEST_CASE("contrastive loss examples") {
  Mat a(2, 2);
  a << 1, 0, 0, 1;
  // -log(e / (e + 1)) in each direction
  CHECK(losses::contrastive_loss(a, a, 1.0) == doctest::Approx(0.3132616875).epsilon(1e-9));
  CHECK(losses::contrastive_loss(a, a, 0.01) < 1e-10);
  CHECK_THROWS(losses::contrastive_loss(a.topRows(1), a.topRows(1), 1.0));
}

TEST_CASE("contrastive loss is permutation invariant and non-negative") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 8);
    const Mat a = unit_rows(rng, n, 6), b = unit_rows(rng, n, 6);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat pa(n, 6), pb(n, 6);
    for (Eigen::Index i = 0; i < n; ++i) {
      pa.row(i) = a.row(perm[static_cast<std::size_t>(i)]);
      pb.row(i) = b.row(perm[static_cast<std::size_t>(i)]);
    }
    const double l = losses::contrastive_loss(a, b, 0.1);
    CHECK(l >= 0.0);
    CHECK(losses::contrastive_loss(pa, pb, 0.1) == doctest::Approx(l).epsilon(1e-12));
  }
}

TEST_CASE("triplet loss examples and bounds") {
  RowVec a(2), p(2), n(2);
  a << 1, 0;
  p << 1, 0;
  n << 0, 1;
  CHECK(losses::triplet_loss(a, p, n, 0.2) == 0.0);
  CHECK(losses::triplet_loss(a, n, n, 0.2) == doctest::Approx(0.2));
  // cos(a,p) = 0.3, cos(a,n) = 0.5
  RowVec p3(2), n5(2);
  p3 << 0.3, std::sqrt(1 - 0.09);
  n5 << 0.5, std::sqrt(1 - 0.25);
  CHECK(losses::triplet_loss(a, p3, n5, 0.2) == doctest::Approx(0.4));

  std::mt19937_64 rng(12);
  for (int t = 0; t < 200; ++t) {
    const Mat r = unit_rows(rng, 3, 5);
    const double l = losses::triplet_loss(r.row(0), r.row(1), r.row(2), 0.2);
    CHECK(l >= 0.0);
    CHECK(l <= 2.2 + 1e-12);
    const double m = losses::mse_loss(r.row(0).dot(r.row(1)), static_cast<double>(rng() % 1000) / 999.0);
    CHECK(m >= 0.0);
    CHECK(m <= 4.0);
  }
}

TEST_CASE("mixed loss") {
  CHECK(losses::mixed_loss({0, 0, 0}) == 0.0);
  CHECK(losses::mixed_loss({1, 2, 3}) == doctest::Approx(1.7));
}

TEST_CASE("adamw examples") {
  AdamWParams hp;
  hp.lr = 0.1;
  hp.weight_decay = 0.01;
  Mat p = Mat::Ones(1, 1), g = Mat::Zero(1, 1), m = Mat::Zero(1, 1), v = Mat::Zero(1, 1);
  adamw_update(p, g, m, v, 1, hp);
  CHECK(p(0, 0) == doctest::Approx(0.999).epsilon(1e-12));

  hp.weight_decay = 0.0;
  Mat q(1, 3), gq(1, 3), mq = Mat::Zero(1, 3), vq = Mat::Zero(1, 3);
  q << 0.5, -0.5, 2.0;
  gq << 3.0, -0.2, 1e-3;
  const Mat before = q;
  adamw_update(q, gq, mq, vq, 1, hp);
  for (Eigen::Index j = 0; j < 3; ++j) {
    const double expect = -0.1 * (gq(0, j) > 0 ? 1.0 : -1.0);
    CHECK(q(0, j) - before(0, j) == doctest::Approx(expect).epsilon(1e-4));
  }

  Mat r = Mat::Constant(2, 2, 0.7), zero = Mat::Zero(2, 2), mr = zero, vr = zero;
  adamw_update(r, zero, mr, vr, 1, hp);
  CHECK(r == Mat::Constant(2, 2, 0.7));
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 10, 100, 1e-3) == 0.0);
  CHECK(lr_schedule(10, 10, 100, 1e-3) == doctest::Approx(1e-3));
  CHECK(lr_schedule(100, 10, 100, 1e-3, 1e-5) == doctest::Approx(1e-5));
  CHECK(lr_schedule(55, 10, 100, 1e-3) == doctest::Approx(5e-4));
  // continuity at the warmup boundary
  const double below = lr_schedule(999, 1000, 100000, 1.0);
  const double at = lr_schedule(1000, 1000, 100000, 1.0);
  CHECK(std::fabs(at - below) <= 1e-3 + 1e-9);
  for (std::size_t s = 0; s < 120; ++s) {
    const double lr = lr_schedule(s, 10, 100, 1e-3, 1e-4);
    CHECK(lr >= 0.0);
    CHECK(lr <= 1e-3 + 1e-15);
  }
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = c.beta = c.gamma = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.total_steps = 10;
  c.warmup_steps = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("non-finite gradients are reported by name") {
  auto c = testing::tiny_config();
  auto g = encoder::EncoderWeights::zeros(c);
  CHECK_NOTHROW(check_finite_gradients(g));
  g.layers[0].wk(0, 1) = std::nan("");
  try {
    check_finite_gradients(g);
    FAIL("expected ModelError");
  } catch (const ModelError& e) {
    CHECK(std::string(e.what()).find("layers.0.wk") != std::string::npos);
  }
}

TEST_CASE("analytic gradients match central differences") {
  const auto r = testing::gradient_check(testing::tiny_config(), 5);
  CHECK(r.checked > 500);
  CHECK(r.worst_rel <= 1e-3);
  MESSAGE("worst relative error " << r.worst_rel << " at " << r.worst_name);
}

TEST_CASE("hinge inactive gives exactly zero triplet gradient") {
  auto c = testing::tiny_config();
  const auto w = testing::random_weights(c, 21);
  TrainConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  cfg.gamma = 1.0;
  cfg.margin = -10.0;  // far below any cosine gap
  Batch b;
  b.triplets.push_back({"abc", "abd", "xyz"});
  auto g = encoder::EncoderWeights::zeros(c);
  const auto parts = batch_loss(c, w, cfg, b, testing::char_tokenize, &g);
  CHECK(parts.triplet == 0.0);
  double peak = 0.0;
  g.for_each([&](const std::string&, const Mat& m) { peak = std::max(peak, m.cwiseAbs().maxCoeff()); });
  CHECK(peak == 0.0);
}

TEST_CASE("gradient accumulation equals one large batch (MSE only)") {
  auto c = testing::tiny_config();
  const auto w = testing::random_weights(c, 4);
  TrainConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = cfg.gamma = 0.0;
  Batch all, first, second;
  const std::vector<std::string> texts = {"ab", "bca", "cab", "abc", "ccb", "bac", "aab", "cba"};
  for (std::size_t i = 0; i < 8; ++i) {
    SimilarityPair p{texts[i], texts[(i + 3) % 8], static_cast<double>(i) / 8.0};
    all.pairs.push_back(p);
    (i < 4 ? first : second).pairs.push_back(p);
  }
  auto big = encoder::EncoderWeights::zeros(c), acc = encoder::EncoderWeights::zeros(c);
  batch_loss(c, w, cfg, all, testing::char_tokenize, &big, 1.0);
  batch_loss(c, w, cfg, first, testing::char_tokenize, &acc, 0.5);
  batch_loss(c, w, cfg, second, testing::char_tokenize, &acc, 0.5);
  std::vector<const Mat*> lhs, rhs;
  big.for_each([&](const std::string&, const Mat& m) { lhs.push_back(&m); });
  acc.for_each([&](const std::string&, const Mat& m) { rhs.push_back(&m); });
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    const double scale = std::max(1e-12, lhs[i]->cwiseAbs().maxCoeff());
    CHECK((*lhs[i] - *rhs[i]).cwiseAbs().maxCoeff() / scale <= 1e-9);
  }
}

TEST_CASE("pair construction") {
  CHECK(edit_target(0) == 1.0);
  CHECK(edit_target(1, 0.05) == doctest::Approx(0.95));
  CHECK(edit_target(100, 0.05, 0.6) == 0.6);

  AugmentConfig cfg;
  cfg.synonyms = {{"बड़ा", "विशाल"}};
  std::uint64_t rng = 1;
  const auto same = augment("कोई बदलाव नहीं", cfg, rng);
  CHECK(same.edits <= 1);
  cfg.substitution_prob = 1.0;
  cfg.swap_prob = 0.0;
  const auto sub = augment("घर बड़ा है", cfg, rng);
  CHECK(sub.text == "घर विशाल है");
  CHECK(sub.edits == 1);

  CHECK_THROWS_AS(build_pairs({"एक"}, AugmentConfig{}, 1), DataError);
  const std::vector<std::string> corpus = {"राम घर बड़ा है", "सीता पानी पीती है", "हम स्कूल जाते हैं", "वह किताब पढ़ता है"};
  const auto data = build_pairs(corpus, cfg, 1);
  for (const auto& p : data.pairs) {
    CHECK(p.target >= 0.0);
    CHECK(p.target <= 1.0);
    if (p.target == 0.0) CHECK(p.text_a != p.text_b);
  }
  for (const auto& t : data.triplets) CHECK(t.positive != t.negative);

  std::stringstream io;
  write_pairs(io, data);
  io << "{broken\n{\"text_a\":\"x\",\"text_b\":\"y\",\"target\":3}\n";
  std::size_t bad = 0;
  const auto back = read_pairs(io, &bad);
  CHECK(bad == 2);
  CHECK(back.pairs.size() == data.pairs.size());
  CHECK(back.triplets.size() == data.triplets.size());
}

TEST_CASE("zero epochs leaves weights unchanged; training is deterministic") {
  auto c = testing::tiny_config();
  const auto init = testing::random_weights(c, 2);
  PairDataset data;
  const std::vector<std::string> texts = {"abc", "bca", "cab", "acb", "bac", "cba"};
  for (std::size_t i = 0; i < texts.size(); ++i) {
    data.pairs.push_back({texts[i], texts[i] + "a", 1.0});
    data.pairs.push_back({texts[i], texts[(i + 2) % 6], 0.0});
    data.triplets.push_back({texts[i], texts[i] + "a", texts[(i + 1) % 6]});
  }
  TrainConfig cfg;
  cfg.epochs = 0;
  auto r0 = train(cfg, c, init, data, testing::char_tokenize);
  CHECK(encoder::serialize_weights(c, r0.weights) == encoder::serialize_weights(c, init));
  CHECK(r0.steps.empty());

  cfg.epochs = 3;
  cfg.batch_size = 3;
  cfg.grad_accum_steps = 1;
  cfg.lr_peak = 1e-2;
  auto r1 = train(cfg, c, init, data, testing::char_tokenize);
  auto r2 = train(cfg, c, init, data, testing::char_tokenize);
  std::stringstream l1, l2;
  write_step_log(l1, r1.steps);
  write_step_log(l2, r2.steps);
  CHECK(l1.str() == l2.str());
  CHECK(l1.str().rfind("step,lr,loss,loss_mse,loss_contrastive,loss_triplet", 0) == 0);
  CHECK(r1.steps.size() == 6);
  CHECK(encoder::serialize_weights(c, r1.weights) == encoder::serialize_weights(c, r2.weights));
  for (std::size_t i = 1; i < r1.steps.size(); ++i) CHECK(r1.steps[i].step > r1.steps[i - 1].step);
  CHECK(r1.optimizer.step == 6);
}

TEST_CASE("optimizer state roundtrip") {
  auto c = testing::tiny_config();
  OptimizerState s = OptimizerState::zeros_like(c);
  s.m = testing::random_weights(c, 5);
  s.v = testing::random_weights(c, 6);
  s.step = 17;
  const auto path = std::filesystem::temp_directory_path() / "hembed_opt_test.bin";
  save_optimizer(path, s);
  const auto back = load_optimizer(path, c);
  CHECK(back.step == 17);
  CHECK(encoder::serialize_weights(c, back.m) == encoder::serialize_weights(c, s.m));
  std::filesystem::remove(path);
}
