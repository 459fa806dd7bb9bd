#include "hembed/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_map>

#include "hembed/errors.hpp"
#include "hembed/metrics.hpp"
#include "hembed/retrieval.hpp"

namespace hembed::training {

using encoder::EncoderConfig;
using encoder::EncoderWeights;

void TrainConfig::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0 || !(alpha + beta + gamma > 0)) {
    throw ConfigError("train: loss weights must be non-negative with a positive sum");
  }
  if (!(lr_peak > 0) || lr_min < 0 || lr_min > lr_peak) throw ConfigError("train: need 0 <= lr_min <= lr_peak, lr_peak > 0");
  if (batch_size == 0 || grad_accum_steps == 0) throw ConfigError("train: batch_size and grad_accum_steps must be positive");
  if (total_steps && warmup_steps >= total_steps) throw ConfigError("train: warmup_steps must be below total_steps");
  if (weight_decay < 0 || !(margin >= 0) || !(temperature > 0)) {
    throw ConfigError("train: weight_decay and margin must be >= 0, temperature > 0");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0)) throw ConfigError("train: bad AdamW betas/eps");
}

OptimizerState OptimizerState::zeros_like(const EncoderConfig& c) {
  return {EncoderWeights::zeros(c), EncoderWeights::zeros(c), 0};
}

void adamw_update(Mat& p, const Mat& g, Mat& m, Mat& v, std::uint64_t t, const AdamWParams& hp) {
  if (p.rows() != g.rows() || p.cols() != g.cols()) throw ConfigError("adamw: shape mismatch");
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  m = hp.beta1 * m + (1.0 - hp.beta1) * g;
  v = hp.beta2 * v + (1.0 - hp.beta2) * g.cwiseProduct(g);
  const auto m_hat = m.array() / c1;
  const auto v_hat = v.array() / c2;
  p.array() -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * p.array());
}

void adamw_step(EncoderWeights& params, const EncoderWeights& grads, OptimizerState& state, const AdamWParams& hp) {
  ++state.step;
  std::vector<Mat*> ps, ms, vs;
  std::vector<const Mat*> gs;
  params.for_each([&](const std::string&, Mat& x) { ps.push_back(&x); });
  state.m.for_each([&](const std::string&, Mat& x) { ms.push_back(&x); });
  state.v.for_each([&](const std::string&, Mat& x) { vs.push_back(&x); });
  grads.for_each([&](const std::string&, const Mat& x) { gs.push_back(&x); });
  if (ps.size() != gs.size() || ps.size() != ms.size() || ps.size() != vs.size()) throw ConfigError("adamw: layout mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) adamw_update(*ps[i], *gs[i], *ms[i], *vs[i], state.step, hp);
}

double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total, double peak, double lr_min) {
  if (step >= total) return lr_min;
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lr_min + (peak - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void check_finite_gradients(const EncoderWeights& grads) {
  grads.for_each([](const std::string& name, const Mat& g) {
    if (!g.allFinite()) throw ModelError("non-finite gradient in " + name);
  });
}

losses::LossComponents batch_loss(const EncoderConfig& ecfg, const EncoderWeights& w, const TrainConfig& cfg,
                                  const Batch& batch, const Tokenize& tokenize, EncoderWeights* grads,
                                  double grad_scale) {
  ad::Tape tape(grads != nullptr);
  std::map<std::string, ad::Var> rows;
  auto embed = [&](const std::string& t) {
    auto it = rows.find(t);
    if (it != rows.end()) return it->second;
    const std::vector<int> ids = tokenize(t);
    const std::vector<std::uint8_t> mask(ids.size(), 1);
    ad::Var v = encoder::embed_on_tape(tape, ecfg, w, grads, ids, mask);
    rows.emplace(t, v);
    return v;
  };

  std::vector<ad::Var> terms;
  std::vector<double> weights;
  losses::LossComponents parts;

  if (!batch.pairs.empty() && cfg.alpha > 0) {
    std::vector<ad::Var> a, b;
    std::vector<double> targets;
    for (const auto& p : batch.pairs) {
      a.push_back(embed(p.text_a));
      b.push_back(embed(p.text_b));
      targets.push_back(p.target);
    }
    ad::Var mse = tape.pair_mse(tape.stack_rows(a), tape.stack_rows(b), targets);
    parts.mse = tape.value(mse)(0, 0);
    terms.push_back(mse);
    weights.push_back(cfg.alpha * grad_scale);
  }
  std::vector<ad::Var> pa, pb;
  for (const auto& p : batch.pairs) {
    if (p.target > 0.0) {
      pa.push_back(embed(p.text_a));
      pb.push_back(embed(p.text_b));
    }
  }
  if (pa.size() >= 2 && cfg.beta > 0) {
    ad::Var nce = tape.info_nce(tape.stack_rows(pa), tape.stack_rows(pb), cfg.temperature);
    parts.contrastive = tape.value(nce)(0, 0);
    terms.push_back(nce);
    weights.push_back(cfg.beta * grad_scale);
  }
  if (!batch.triplets.empty() && cfg.gamma > 0) {
    std::vector<ad::Var> ta, tp, tn;
    for (const auto& t : batch.triplets) {
      ta.push_back(embed(t.anchor));
      tp.push_back(embed(t.positive));
      tn.push_back(embed(t.negative));
    }
    ad::Var trip = tape.triplet(tape.stack_rows(ta), tape.stack_rows(tp), tape.stack_rows(tn), cfg.margin);
    parts.triplet = tape.value(trip)(0, 0);
    terms.push_back(trip);
    weights.push_back(cfg.gamma * grad_scale);
  }
  if (grads && !terms.empty()) tape.backward(tape.weighted_sum(terms, weights));
  return parts;
}

Mat embed_texts(const EncoderConfig& ecfg, const EncoderWeights& w, const std::vector<std::string>& texts,
                const Tokenize& tokenize) {
  Mat out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(ecfg.dim));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = encoder::embed_ids(ecfg, w, tokenize(texts[i]));
  }
  return out;
}

namespace {

struct Split {
  std::vector<SimilarityPair> positives;
  std::vector<SimilarityPair> negatives;
};

Split split_pairs(const PairDataset& data) {
  Split s;
  for (const auto& p : data.pairs) (p.target > 0.0 ? s.positives : s.negatives).push_back(p);
  return s;
}

std::vector<std::string> hard_negatives_for(const std::vector<SimilarityPair>& positives,
                                            const std::vector<Triplet>& triplets) {
  std::map<std::pair<std::string, std::string>, std::string> first;
  for (const auto& t : triplets) first.emplace(std::make_pair(t.anchor, t.positive), t.negative);
  std::vector<std::string> out(positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) {
    auto it = first.find({positives[i].text_a, positives[i].text_b});
    if (it != first.end()) out[i] = it->second;
  }
  return out;
}

// Micro-batch over positives[order[begin, end)], with a proportional share of
// negatives taken from neg_order starting at *neg_cursor.
Batch make_batch(const Split& s, const std::vector<std::string>& hard, const std::vector<std::size_t>& order,
                 std::size_t begin, std::size_t end, const std::vector<std::size_t>& neg_order, std::size_t& neg_cursor) {
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& p = s.positives[order[i]];
    b.pairs.push_back(p);
    if (!hard[order[i]].empty()) b.triplets.push_back({p.text_a, p.text_b, hard[order[i]]});
  }
  if (!s.negatives.empty()) {
    const double ratio = static_cast<double>(s.negatives.size()) / static_cast<double>(s.positives.size());
    const auto take = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(end - begin)));
    for (std::size_t k = 0; k < take; ++k) {
      b.pairs.push_back(s.negatives[neg_order[neg_cursor % neg_order.size()]]);
      ++neg_cursor;
    }
  }
  return b;
}

Tokenize memoize(const Tokenize& tokenize) {
  auto memo = std::make_shared<std::unordered_map<std::string, std::vector<int>>>();
  return [memo, tokenize](const std::string& t) {
    auto it = memo->find(t);
    if (it == memo->end()) it = memo->emplace(t, tokenize(t)).first;
    return it->second;
  };
}

std::pair<double, double> validate_retrieval(const EncoderConfig& ecfg, const EncoderWeights& w,
                                             const ValidationSet& val, const Tokenize& tokenize) {
  std::vector<std::string> doc_texts, query_texts;
  for (const auto& d : val.docs) doc_texts.push_back(d.second);
  for (const auto& q : val.queries) query_texts.push_back(q.second);
  const Mat docs = embed_texts(ecfg, w, doc_texts, tokenize);
  const Mat queries = embed_texts(ecfg, w, query_texts, tokenize);
  retrieval::VectorIndex index(ecfg.dim);
  for (std::size_t i = 0; i < val.docs.size(); ++i) {
    const RowVec r = docs.row(static_cast<Eigen::Index>(i));
    index.add(val.docs[i].first, std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
  }
  std::vector<retrieval::RetrievalResult> results;
  for (std::size_t i = 0; i < val.queries.size(); ++i) {
    const RowVec r = queries.row(static_cast<Eigen::Index>(i));
    results.push_back(index.search(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())), 10, false,
                                   val.queries[i].first));
  }
  const auto report = metrics::evaluate(results, metrics::make_judgments(val.judgments));
  return {report.mrr, report.p_at_1};
}

std::vector<std::string> text_pool(const PairDataset& data) {
  std::vector<std::string> pool;
  std::unordered_map<std::string, bool> seen;
  for (const auto& p : data.pairs) {
    for (const auto* t : {&p.text_a, &p.text_b}) {
      if (seen.emplace(*t, true).second) pool.push_back(*t);
    }
  }
  return pool;
}

}  // namespace

double dataset_loss(const EncoderConfig& ecfg, const EncoderWeights& w, const TrainConfig& cfg, const PairDataset& data,
                    const Tokenize& tokenize) {
  const Split s = split_pairs(data);
  if (s.positives.empty()) throw DataError("dataset_loss: no positive pairs");
  const auto hard = hard_negatives_for(s.positives, data.triplets);
  std::vector<std::size_t> order(s.positives.size()), neg_order(s.negatives.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::iota(neg_order.begin(), neg_order.end(), std::size_t{0});
  std::size_t cursor = 0;
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
    const Batch b = make_batch(s, hard, order, begin, end, neg_order, cursor);
    total += losses::mixed_loss(batch_loss(ecfg, w, cfg, b, tokenize), cfg.loss_weights());
    ++batches;
  }
  return total / static_cast<double>(batches);
}

TrainResult train(const TrainConfig& cfg, const EncoderConfig& ecfg, EncoderWeights init, const PairDataset& data,
                  const Tokenize& raw_tokenize, const ValidationSet& validation, const TrainCallbacks& callbacks) {
  cfg.validate();
  ecfg.validate();
  const Tokenize tokenize = memoize(raw_tokenize);
  const Split s = split_pairs(data);
  if (s.positives.empty()) throw DataError("train: dataset has no positive pairs");
  std::vector<std::string> hard = hard_negatives_for(s.positives, data.triplets);
  const std::vector<std::string> pool = text_pool(data);

  const std::size_t per_step = cfg.batch_size * cfg.grad_accum_steps;
  const std::size_t steps_per_epoch = (s.positives.size() + per_step - 1) / per_step;
  const std::size_t total = cfg.total_steps ? cfg.total_steps : cfg.epochs * steps_per_epoch;
  std::size_t warmup = cfg.warmup_steps;
  if (!cfg.warmup_steps && total > 1) warmup = std::max<std::size_t>(1, total / 10);

  TrainResult result;
  result.weights = std::move(init);
  result.optimizer = OptimizerState::zeros_like(ecfg);
  result.initial_loss = dataset_loss(ecfg, result.weights, cfg, data, tokenize);
  if (!std::isfinite(result.initial_loss)) throw ModelError("train: initial loss is not finite");

  EncoderWeights grads = EncoderWeights::zeros(ecfg);
  EncoderWeights best;
  double best_mrr = -1.0;
  std::size_t bad_epochs = 0;
  std::mt19937_64 rng(cfg.seed);
  const AdamWParams hp_base{cfg.lr_peak, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  const BatchEmbedder model_embedder = [&](const std::vector<std::string>& texts) {
    return embed_texts(ecfg, result.weights, texts, tokenize);
  };

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
    if (epoch > 1 && cfg.remine_hard_negatives && cfg.gamma > 0 && !data.triplets.empty()) {
      hard = hard_negatives_for(s.positives, mine_hard_negatives(s.positives, pool, 1, model_embedder));
    }
    std::vector<std::size_t> order(s.positives.size()), neg_order(s.negatives.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::iota(neg_order.begin(), neg_order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::shuffle(neg_order.begin(), neg_order.end(), rng);
    std::size_t neg_cursor = 0;

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && step < total; start += per_step) {
      const std::size_t stop = std::min(order.size(), start + per_step);
      const std::size_t n_micro = (stop - start + cfg.batch_size - 1) / cfg.batch_size;
      grads.set_zero();
      StepRecord rec;
      for (std::size_t mb = start; mb < stop; mb += cfg.batch_size) {
        const Batch b = make_batch(s, hard, order, mb, std::min(stop, mb + cfg.batch_size), neg_order, neg_cursor);
        const auto parts = batch_loss(ecfg, result.weights, cfg, b, tokenize, &grads, 1.0 / static_cast<double>(n_micro));
        rec.parts.mse += parts.mse / static_cast<double>(n_micro);
        rec.parts.contrastive += parts.contrastive / static_cast<double>(n_micro);
        rec.parts.triplet += parts.triplet / static_cast<double>(n_micro);
      }
      rec.loss = losses::mixed_loss(rec.parts, cfg.loss_weights());
      if (!std::isfinite(rec.loss)) {
        throw ModelError("train: loss diverged at step " + std::to_string(step + 1) + " (epoch " + std::to_string(epoch) + ")");
      }
      check_finite_gradients(grads);
      rec.lr = lr_schedule(step, warmup, total, cfg.lr_peak, cfg.lr_min);
      ++step;
      rec.step = step;
      AdamWParams hp = hp_base;
      hp.lr = rec.lr;
      adamw_step(result.weights, grads, result.optimizer, hp);
      result.steps.push_back(rec);
      if (callbacks.on_step) callbacks.on_step(rec);
      epoch_loss += rec.loss;
      ++epoch_steps;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.step = step;
    er.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
    if (!validation.empty()) std::tie(er.val_mrr, er.val_p_at_1) = validate_retrieval(ecfg, result.weights, validation, tokenize);
    result.epochs.push_back(er);
    if (callbacks.on_epoch) callbacks.on_epoch(er);

    if (validation.empty()) {
      result.best_epoch = epoch;
      continue;
    }
    if (er.val_mrr > best_mrr) {
      best_mrr = er.val_mrr;
      best = result.weights;
      result.best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  if (!validation.empty() && result.best_epoch) result.weights = std::move(best);
  result.final_loss = dataset_loss(ecfg, result.weights, cfg, data, tokenize);
  return result;
}

namespace {
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace

void write_step_log(std::ostream& out, const std::vector<StepRecord>& steps) {
  out << "step,lr,loss,loss_mse,loss_contrastive,loss_triplet\n";
  for (const auto& r : steps) {
    out << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss) << ',' << fmt(r.parts.mse) << ','
        << fmt(r.parts.contrastive) << ',' << fmt(r.parts.triplet) << '\n';
  }
}

void write_epoch_log(std::ostream& out, const std::vector<EpochRecord>& epochs) {
  out << "epoch,step,train_loss,val_mrr,val_p_at_1\n";
  for (const auto& r : epochs) {
    out << r.epoch << ',' << r.step << ',' << fmt(r.train_loss) << ',' << fmt(r.val_mrr) << ',' << fmt(r.val_p_at_1)
        << '\n';
  }
}

namespace {
constexpr char kOptMagic[8] = {'H', 'E', 'M', 'B', 'O', 'P', 'T', '\0'};

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "optimizer files are little-endian");
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ModelError("optimizer state truncated");
  return v;
}
}  // namespace

void save_optimizer(const std::filesystem::path& path, const OptimizerState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kOptMagic, sizeof kOptMagic);
  put<std::uint32_t>(out, kOptimizerFileVersion);
  put<std::uint64_t>(out, state.step);
  for (const EncoderWeights* w : {&state.m, &state.v}) {
    w->for_each([&](const std::string&, const Mat& m) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    });
  }
}

OptimizerState load_optimizer(const std::filesystem::path& path, const EncoderConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot read " + path.string());
  char magic[sizeof kOptMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kOptMagic)) {
    throw ModelError("not an optimizer state file");
  }
  if (get<std::uint32_t>(in) != kOptimizerFileVersion) throw ModelError("unsupported optimizer state version");
  OptimizerState s = OptimizerState::zeros_like(config);
  s.step = get<std::uint64_t>(in);
  for (EncoderWeights* w : {&s.m, &s.v}) {
    w->for_each([&](const std::string& name, Mat& m) {
      if (get<std::uint32_t>(in) != m.rows() || get<std::uint32_t>(in) != m.cols()) {
        throw ModelError("optimizer state: shape mismatch for " + name);
      }
      if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
        throw ModelError("optimizer state truncated");
      }
    });
  }
  return s;
}

}  // namespace hembed::training
