#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hembed/encoder.hpp"
#include "hembed/losses.hpp"
#include "hembed/tensor.hpp"

namespace hembed::training {

struct SimilarityPair {
  std::string text_a;
  std::string text_b;
  double target = 0.0;  // in [0, 1]
};

struct Triplet {
  std::string anchor;
  std::string positive;
  std::string negative;
};

struct PairDataset {
  std::vector<SimilarityPair> pairs;
  std::vector<Triplet> triplets;
};

// ---- pair construction -----------------------------------------------------

struct AugmentConfig {
  // Interchangeable surface words; each inner list is one group.
  std::vector<std::vector<std::string>> synonyms;
  double substitution_prob = 0.5;  // per word with a synonym
  double swap_prob = 0.3;          // one adjacent swap inside a clause
  double placeholder_drop_prob = 0.5;
  double edit_penalty = 0.05;
  double target_floor = 0.6;
  std::size_t positives_per_text = 1;
  double negatives_per_text = 0.25;  // random pairs, target 0
  std::uint64_t seed = 13;
};

struct Augmented {
  std::string text;
  std::size_t edits = 0;
};

double edit_target(std::size_t edits, double edit_penalty = 0.05, double floor = 0.6);

// Applies synonym substitution, an adjacent word swap inside one clause and
// placeholder removal; every change counts as one edit.
Augmented augment(std::string_view text, const AugmentConfig& config, std::uint64_t& rng_state);

// Maps texts to unit-norm rows.
using BatchEmbedder = std::function<Mat(const std::vector<std::string>&)>;

// Hashed character-trigram bag, L2-normalized. Used for mining before a model exists.
Mat lexical_embed(const std::vector<std::string>& texts, std::size_t dim = 256);

// Adds random negatives (target 0) and mined triplets to given positives.
// corpus is the negative pool. Throws DataError for fewer than two texts.
PairDataset complete_pairs(std::vector<SimilarityPair> positives, const std::vector<std::string>& corpus,
                           const AugmentConfig& config, std::size_t n_hard_negatives,
                           const BatchEmbedder& embedder = {});

// Positives by augmenting every corpus text, then complete_pairs().
// Throws DataError for fewer than two texts.
PairDataset build_pairs(const std::vector<std::string>& corpus, const AugmentConfig& config,
                        std::size_t n_hard_negatives, const BatchEmbedder& embedder = {});

// For every (anchor, positive) the n nearest texts of the pool that are not
// paired with the anchor.
std::vector<Triplet> mine_hard_negatives(const std::vector<SimilarityPair>& positives,
                                         const std::vector<std::string>& pool, std::size_t n,
                                         const BatchEmbedder& embedder);

// One JSON object per line: {text_a, text_b, target} or {anchor, positive, negative}.
void write_pairs(std::ostream& out, const PairDataset& data);
// Malformed lines are skipped and counted.
PairDataset read_pairs(std::istream& in, std::size_t* malformed = nullptr);

// ---- optimization ----------------------------------------------------------

struct TrainConfig {
  double alpha = 0.5;
  double beta = 0.3;
  double gamma = 0.2;
  double lr_peak = 2e-5;
  double lr_min = 0.0;
  std::size_t warmup_steps = 0;  // 0: a tenth of total_steps
  std::size_t total_steps = 0;   // 0: epochs * steps per epoch
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::size_t grad_accum_steps = 4;
  std::size_t patience = 2;
  double weight_decay = 0.01;
  double margin = 0.2;
  double temperature = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool remine_hard_negatives = true;
  std::uint64_t seed = 42;

  losses::LossWeights loss_weights() const { return {alpha, beta, gamma}; }
  // Throws ConfigError on non-positive sizes, negative weights or a zero weight sum.
  void validate() const;
};

struct OptimizerState {
  encoder::EncoderWeights m;
  encoder::EncoderWeights v;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const encoder::EncoderConfig& config);
};

struct AdamWParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// One tensor, t = step after increment (1-based).
void adamw_update(Mat& param, const Mat& grad, Mat& m, Mat& v, std::uint64_t t, const AdamWParams& p);
void adamw_step(encoder::EncoderWeights& params, const encoder::EncoderWeights& grads, OptimizerState& state,
                const AdamWParams& p);

double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double lr_peak,
                   double lr_min = 0.0);

// Throws ModelError naming the first tensor with a NaN or infinite entry.
void check_finite_gradients(const encoder::EncoderWeights& grads);

// ---- loop --------------------------------------------------------------------

using Tokenize = std::function<std::vector<int>(const std::string&)>;

struct ValidationSet {
  std::vector<std::pair<std::string, std::string>> docs;     // (doc_id, text)
  std::vector<std::pair<std::string, std::string>> queries;  // (query_id, text)
  std::vector<std::pair<std::string, std::string>> judgments;
  bool empty() const { return queries.empty(); }
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  losses::LossComponents parts;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_mrr = 0.0;
  double val_p_at_1 = 0.0;
};

struct TrainResult {
  encoder::EncoderWeights weights;
  OptimizerState optimizer;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double initial_loss = 0.0;  // full pass over the dataset before the first update
  double final_loss = 0.0;    // same pass with the returned weights
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

// Mixed loss of one micro-batch. Positive pairs (target > 0) form the
// InfoNCE batch; triplets are aligned with positives by index and may be
// shorter. Gradients are added to *grads scaled by grad_scale.
struct Batch {
  std::vector<SimilarityPair> pairs;
  std::vector<Triplet> triplets;
};

losses::LossComponents batch_loss(const encoder::EncoderConfig& ecfg, const encoder::EncoderWeights& weights,
                                  const TrainConfig& cfg, const Batch& batch, const Tokenize& tokenize,
                                  encoder::EncoderWeights* grads = nullptr, double grad_scale = 1.0);

// Loss averaged over consecutive batches of batch_size pairs, no updates.
double dataset_loss(const encoder::EncoderConfig& ecfg, const encoder::EncoderWeights& weights,
                    const TrainConfig& cfg, const PairDataset& data, const Tokenize& tokenize);

struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

TrainResult train(const TrainConfig& cfg, const encoder::EncoderConfig& ecfg, encoder::EncoderWeights init,
                  const PairDataset& data, const Tokenize& tokenize, const ValidationSet& validation = {},
                  const TrainCallbacks& callbacks = {});

// Unit-norm sentence embeddings for a list of texts.
Mat embed_texts(const encoder::EncoderConfig& ecfg, const encoder::EncoderWeights& weights,
                const std::vector<std::string>& texts, const Tokenize& tokenize);

void write_step_log(std::ostream& out, const std::vector<StepRecord>& steps);
void write_epoch_log(std::ostream& out, const std::vector<EpochRecord>& epochs);

inline constexpr std::uint32_t kOptimizerFileVersion = 1;
void save_optimizer(const std::filesystem::path& path, const OptimizerState& state);
OptimizerState load_optimizer(const std::filesystem::path& path, const encoder::EncoderConfig& config);

}  // namespace hembed::training
