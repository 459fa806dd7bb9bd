// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fail.
// Usage: hembed_acceptance [--cli PATH] [--work DIR] [criterion numbers...]
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "grad_check.hpp"
#include "hembed/corpus.hpp"
#include "hembed/encoder.hpp"
#include "hembed/metrics.hpp"
#include "hembed/nn.hpp"
#include "hembed/pipeline.hpp"
#include "hembed/retrieval.hpp"
#include "hembed/service.hpp"
#include "hembed/synthetic.hpp"
#include "hembed/text.hpp"
#include "hembed/tokenizer.hpp"
#include "hembed/training.hpp"
#include "httplib.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace hembed;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> g;
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

// ---- 1 ----------------------------------------------------------------------
Outcome viterbi_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  const std::u32string alphabet = U"abcde";
  double worst = 0.0;
  std::size_t strings = 0;
  for (int model = 0; model < 500; ++model) {
    std::set<std::u32string> surfaces;
    for (char32_t c : alphabet) surfaces.insert(std::u32string(1, c));
    const std::size_t target = 5 + rng() % 26;
    while (surfaces.size() < target) {
      std::u32string s;
      for (std::size_t i = 0, n = 2 + rng() % 4; i < n; ++i) s += alphabet[rng() % 5];
      surfaces.insert(s);
    }
    std::uniform_real_distribution<double> lp(-9.0, -0.1);
    std::vector<tokenizer::Piece> pieces;
    std::map<std::u32string, double> table;
    for (const auto& s : surfaces) {
      const double v = model % 2 ? lp(rng) : std::round(lp(rng) * 2.0) / 2.0;
      pieces.push_back({text::to_utf8(s), v});
      table[s] = v;
    }
    const tokenizer::TokenizerModel m(pieces, 1.0, {});
    for (int t = 0; t < 10; ++t) {
      std::u32string s;
      for (std::size_t i = 0, n = rng() % 11; i < n; ++i) s += alphabet[rng() % 5];
      const double got = tokenizer::viterbi_segment(m, text::to_utf8(s)).log_prob;
      worst = std::max(worst, std::fabs(got - oracle::best_segmentation(s, table)));
      ++strings;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs <= 60.0,
          fmt("500 models, %zu strings, max |diff| %.3g (<= 1e-9), %.1f s (<= 60 s)", strings, worst, secs)};
}

// ---- 2 ----------------------------------------------------------------------
Outcome em_monotonicity() {
  synthetic::ToyConfig tc;
  tc.train_docs = 1000;
  const auto toy = synthetic::make_toy_corpus(tc);
  std::vector<std::string> corpus;
  for (const auto& r : toy.train) corpus.push_back(corpus::clean_text(r.text));
  tokenizer::TrainerConfig cfg;
  tokenizer::TrainingTrace trace;
  tokenizer::train_unigram(corpus, cfg, &trace);
  std::size_t checks = 0, violations = 0;
  double worst = 0.0;
  for (const auto& stage : trace.stage_log_likelihood) {
    for (std::size_t i = 1; i < stage.size(); ++i) {
      ++checks;
      const double drop = (stage[i - 1] - stage[i]) / std::fabs(stage[i - 1]);
      worst = std::max(worst, drop);
      if (drop > 1e-6) ++violations;
    }
  }
  return {checks > 0 && violations == 0,
          fmt("%zu sentences, %zu stages, %zu EM steps, worst relative drop %.3g (<= 1e-6)", corpus.size(),
              trace.stage_log_likelihood.size(), checks, std::max(0.0, worst))};
}

// ---- 3 ----------------------------------------------------------------------
Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = testing::gradient_check(testing::tiny_config(), 5, 1e-4);
  const double secs = seconds_since(t0);
  return {r.worst_rel <= 1e-3 && secs <= 300.0,
          fmt("%zu parameters, worst relative error %.3g at %s (<= 1e-3), %.1f s", r.checked, r.worst_rel,
              r.worst_name.c_str(), secs)};
}

// ---- 4 ----------------------------------------------------------------------
Outcome pooling_invariants() {
  std::mt19937_64 rng(404);
  double worst_norm = 0.0, worst_mean = 0.0;
  std::size_t mask_breaks = 0;
  const nn::Pooling strategies[] = {nn::Pooling::cls, nn::Pooling::mean, nn::Pooling::max, nn::Pooling::attention,
                                    nn::Pooling::weighted};
  for (int t = 0; t < 1000; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 24);
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 40);
    const Mat e = random_mat(rng, n, d);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
    for (auto& m : mask) m = rng() % 3 != 0;
    mask[0] = 1;
    const nn::PoolingHead head{random_mat(rng, 1, d), random_mat(rng, 1, 1), random_mat(rng, 1, d)};
    Mat perturbed = e;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!mask[static_cast<std::size_t>(i)]) perturbed.row(i) = 1e3 * random_mat(rng, 1, d);
    for (nn::Pooling p : strategies) {
      const RowVec s = nn::pool(e, mask, p, head);
      worst_norm = std::max(worst_norm, std::fabs(s.norm() - 1.0));
      if (s != nn::pool(perturbed, mask, p, head)) ++mask_breaks;
    }
    const nn::PoolingHead zero{Mat::Zero(1, d), Mat::Zero(1, 1), Mat::Zero(1, d)};
    const RowVec w = nn::pool(e, mask, nn::Pooling::weighted, zero);
    const RowVec m = nn::pool(e, mask, nn::Pooling::mean, zero);
    worst_mean = std::max(worst_mean, (w - m).cwiseAbs().maxCoeff());
  }
  return {worst_norm <= 1e-6 && mask_breaks == 0 && worst_mean <= 1e-9,
          fmt("1000 instances x 5 strategies: max |norm-1| %.3g (<= 1e-6), mask-invariance breaks %zu (0), "
              "zero-head weighted vs mean %.3g (<= 1e-9)",
              worst_norm, mask_breaks, worst_mean)};
}

// ---- 5 ----------------------------------------------------------------------
Outcome rope_properties() {
  std::mt19937_64 rng(505);
  double worst_norm = 0.0, worst_rel = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Eigen::Index hd = 2 * (1 + static_cast<Eigen::Index>(rng() % 32));
    const Mat q = random_mat(rng, 1, hd), k = random_mat(rng, 1, hd);
    const std::size_t p = rng() % 512, delta = rng() % 512;
    const double base = 10000.0;
    const std::vector<std::size_t> pp{p}, pd{p + delta}, zero{0}, dd{delta};
    const Mat rq = nn::rope_apply(q, pp, base);
    worst_norm = std::max(worst_norm, std::fabs(rq.norm() - q.norm()));
    // <R_p q, R_{p+d} k> depends only on d
    const double lhs = rq.row(0).dot(nn::rope_apply(k, pd, base).row(0));
    const double rhs = nn::rope_apply(q, zero, base).row(0).dot(nn::rope_apply(k, dd, base).row(0));
    worst_rel = std::max(worst_rel, std::fabs(lhs - rhs));
  }
  return {worst_norm <= 1e-6 && worst_rel <= 1e-5,
          fmt("1000 (q, k, p, delta): max norm change %.3g (<= 1e-6), max relative-position identity error %.3g "
              "(<= 1e-5)",
              worst_norm, worst_rel)};
}

// ---- 6 ----------------------------------------------------------------------
struct ToyRun {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double p_at_1 = 0.0;
  double mrr = 0.0;
  std::size_t epochs = 0;
  double seconds = 0.0;
};

ToyRun toy_run(nn::Pooling pooling) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto toy = synthetic::make_toy_corpus({});
  corpus::CleanReport report;
  std::vector<std::string> texts;
  for (const auto& r : corpus::run_pipeline(toy.train, {}, report))
    if (r.status == corpus::RecordStatus::cleaned) texts.push_back(r.text);
  tokenizer::TrainerConfig tcfg;
  tcfg.vocab_size = 2000;
  const auto tok = tokenizer::train_unigram(texts, tcfg);

  std::vector<training::SimilarityPair> positives;
  for (std::size_t i = 0; i < toy.train.size(); ++i) {
    positives.push_back({corpus::clean_text(toy.train[i].text), corpus::clean_text(toy.train_paraphrases[i]), 1.0});
  }
  const auto data = training::complete_pairs(positives, texts, {}, 1);

  encoder::EncoderConfig ec;
  ec.vocab_size = tok.num_ids();
  ec.pooling = pooling;
  training::TrainConfig cfg;
  cfg.lr_peak = 1e-3;
  cfg.grad_accum_steps = 1;
  cfg.epochs = 10;
  const training::Tokenize tokenize = [&](const std::string& s) { return pipeline::token_ids(tok, ec.max_seq_len, s); };
  const training::ValidationSet val{toy.val_docs, toy.val_queries, toy.val_judgments};
  const auto res = training::train(cfg, ec, encoder::EncoderWeights::init(ec, 1), data, tokenize, val);

  retrieval::VectorIndex index(ec.dim);
  for (const auto& [id, text] : toy.index_docs) {
    const RowVec v = encoder::embed_ids(ec, res.weights, tokenize(text));
    index.add(id, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  }
  std::vector<retrieval::RetrievalResult> results;
  for (const auto& [id, text] : toy.queries) {
    const RowVec v = encoder::embed_ids(ec, res.weights, tokenize(text));
    results.push_back(index.search(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())), 10, true, id));
  }
  const auto eval = metrics::evaluate(results, metrics::make_judgments(toy.judgments));
  return {res.initial_loss, res.final_loss, eval.p_at_1, eval.mrr, res.epochs.size(), seconds_since(t0)};
}

Outcome toy_training() {
  const ToyRun w = toy_run(nn::Pooling::weighted);
  const ToyRun m = toy_run(nn::Pooling::mean);
  const double ratio = w.final_loss / w.initial_loss;
  const bool a = ratio <= 0.5, b = w.p_at_1 >= 0.8, c = w.p_at_1 >= m.p_at_1;
  return {a && b && c && w.seconds + m.seconds <= 1800.0,
          fmt("(a) loss %.4f -> %.4f, ratio %.3f (<= 0.5); (b) weighted P@1 %.3f, MRR %.3f on 200 queries / 1000 docs "
              "(>= 0.8); (c) mean-pooling P@1 %.3f (weighted >= mean); %zu+%zu epochs, %.0f s",
              w.initial_loss, w.final_loss, ratio, w.p_at_1, w.mrr, m.p_at_1, w.epochs, m.epochs, w.seconds + m.seconds)};
}

// ---- 7 ----------------------------------------------------------------------
Outcome retrieval_exactness() {
  std::mt19937_64 rng(707);
  double worst = 0.0;
  std::size_t order_breaks = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t dim = 2 + rng() % 64, n = 1 + rng() % 300;
    retrieval::VectorIndex idx(dim);
    oracle::Rows stored;
    for (std::size_t i = 0; i < n; ++i) {
      auto v = oracle::random_unit(rng, dim);
      if (i > 0 && rng() % 6 == 0) v = stored[rng() % stored.size()];
      idx.add("d" + std::to_string(i), v);
      const std::vector<float> f(v.begin(), v.end());
      stored.emplace_back(f.begin(), f.end());
    }
    const auto q = oracle::random_unit(rng, dim);
    const std::size_t k = 1 + rng() % (n + 5);
    const auto got = idx.search(q, k).hits;
    const auto want = oracle::full_scan(stored, q, k);
    if (got.size() != want.size()) {
      ++order_breaks;
      continue;
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (got[i].position != want[i].position) ++order_breaks;
      worst = std::max(worst, std::fabs(got[i].score - want[i].score));
    }
  }
  return {worst <= 1e-9 && order_breaks == 0,
          fmt("200 instances: max score diff %.3g (<= 1e-9), ordering mismatches %zu (0)", worst, order_breaks)};
}

// ---- 8 ----------------------------------------------------------------------
Outcome quantization() {
  std::mt19937_64 rng(808);
  double worst_cos = 1.0;
  for (std::size_t dim : {64u, 768u}) {
    for (int t = 0; t < 1000; ++t) {
      const auto v = oracle::random_unit(rng, dim);
      const std::vector<float> f(v.begin(), v.end());
      const auto back = retrieval::dequantize(retrieval::quantize_int8(f));
      double dot = 0.0, nb = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        dot += v[i] * back[i];
        nb += static_cast<double>(back[i]) * back[i];
      }
      worst_cos = std::min(worst_cos, dot / std::sqrt(nb));
    }
  }
  const std::vector<float> probe(768, 0.036f);
  const auto q = retrieval::quantize_int8(probe);
  const std::size_t float_bytes = 768 * sizeof(float);
  const double reduction = 1.0 - static_cast<double>(q.payload_bytes()) / static_cast<double>(float_bytes);
  const bool size_ok = q.codes.size() * 4 == float_bytes && reduction >= 0.748;
  return {size_ok && worst_cos >= 0.99,
          fmt("dim 768: codes %zu B vs float %zu B (4x), with scale %zu B = %.2f%% reduction; min roundtrip cosine "
              "%.5f over 2000 vectors (>= 0.99)",
              q.codes.size(), float_bytes, q.payload_bytes(), 100.0 * reduction, worst_cos)};
}

// ---- 9 ----------------------------------------------------------------------
Outcome metric_oracles() {
  std::mt19937_64 rng(909);
  std::size_t mismatches = 0;
  double worst_rho = 0.0;
  auto ranked = [](const std::string& qid, const std::vector<std::string>& docs) {
    retrieval::RetrievalResult r{qid, {}};
    for (std::size_t i = 0; i < docs.size(); ++i) r.hits.push_back({docs[i], -static_cast<double>(i), i});
    return r;
  };
  for (int t = 0; t < 200; ++t) {
    std::vector<std::string> docs;
    for (int i = 0, n = 1 + static_cast<int>(rng() % 30); i < n; ++i) docs.push_back("d" + std::to_string(i));
    std::shuffle(docs.begin(), docs.end(), rng);
    std::set<std::string> rel;
    for (int i = 0, n = static_cast<int>(rng() % 6); i < n; ++i) rel.insert("d" + std::to_string(rng() % 40));
    const std::size_t k = 1 + rng() % 10;
    const auto r = ranked("q", docs);
    if (metrics::precision_at_k(r, rel, k) != oracle::precision_at_k(docs, rel, k)) ++mismatches;
    const std::vector<retrieval::RetrievalResult> rs{r};
    if (metrics::mrr(rs, metrics::Judgments{{"q", rel}}) != oracle::reciprocal_rank(docs, rel)) ++mismatches;

    const std::size_t n = 3 + rng() % 40;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng() % 12);
      y[i] = static_cast<double>(rng() % 12) + 0.5 * x[i];
    }
    x[0] = -1.0;
    y[0] = -1.0;
    worst_rho = std::max(worst_rho, std::fabs(metrics::spearman(x, y) - oracle::spearman(x, y)));
  }
  const metrics::Judgments j{{"a", {"r"}}, {"b", {"r"}}, {"c", {"r"}}};
  const std::vector<retrieval::RetrievalResult> worked{ranked("a", {"r"}), ranked("b", {"x", "r"}),
                                                       ranked("c", {"x", "y", "z", "r"})};
  const double m = metrics::mrr(worked, j);
  const bool worked_ok = std::fabs(m - 7.0 / 12.0) <= 1e-15;
  return {mismatches == 0 && worst_rho <= 1e-9 && worked_ok,
          fmt("200 instances: P@K/MRR mismatches %zu (0), max Spearman diff %.3g (<= 1e-9); worked MRR %.17g vs 7/12",
              mismatches, worst_rho, m)};
}

// ---- 10 ---------------------------------------------------------------------
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool run(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str()) == 0;
}

bool toy_pipeline(const std::string& cli, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto p = [&](const char* f) { return (dir / f).string(); };
  const fs::path log = dir / "log.txt";
  const std::string model = " --tokenizer " + p("tok.json") + " --weights " + p("weights.bin");
  return run(cli, "make-toy --output-dir " + p("toy") + " --train-docs 300 --index-docs 200 --queries 50 --val-docs 80 --val-queries 40", log) &&
         run(cli, "clean --input " + p("toy/train.jsonl") + " --output " + p("clean.jsonl") + " --report " + p("clean.json"), log) &&
         run(cli, "train-tokenizer --input " + p("clean.jsonl") + " --output " + p("tok.json"), log) &&
         run(cli, "build-pairs --input " + p("clean.jsonl") + " --paraphrases " + p("toy/paraphrases.jsonl") + " --output " + p("pairs.jsonl"), log) &&
         run(cli, "train --pairs " + p("pairs.jsonl") + " --tokenizer " + p("tok.json") + " --weights " + p("weights.bin") +
                      " --lr 1e-3 --grad-accum 1 --epochs 2 --dim 32 --val-docs " + p("toy/val_docs.jsonl") +
                      " --val-queries " + p("toy/val_queries.jsonl") + " --val-judgments " + p("toy/val_judgments.tsv") +
                      " --metrics-log " + p("steps.csv") + " --optimizer-state " + p("optimizer.bin") +
                      " --config-snapshot " + p("config.json"), log) &&
         run(cli, "embed" + model + " --input " + p("toy/docs.jsonl") + " --output " + p("embeddings.jsonl"), log) &&
         run(cli, "index --embeddings " + p("embeddings.jsonl") + " --output " + p("index.bin") + " --mode int8", log) &&
         run(cli, "eval" + model + " --index " + p("index.bin") + " --queries " + p("toy/queries.jsonl") + " --judgments " +
                      p("toy/judgments.tsv") + " --report " + p("report.json"), log);
}

Outcome end_to_end(const std::string& cli, const fs::path& work) {
  if (cli.empty()) return {false, "CLI path not given (--cli)"};
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path a = work / "run_a", b = work / "run_b";
  if (!toy_pipeline(cli, a) || !toy_pipeline(cli, b)) return {false, "pipeline command failed; see " + work.string()};
  std::vector<std::string> differing;
  for (const char* f : {"clean.jsonl", "tok.json", "pairs.jsonl", "weights.bin", "optimizer.bin", "steps.csv",
                        "embeddings.jsonl", "index.bin", "report.json"}) {
    if (slurp(a / f) != slurp(b / f) || slurp(a / f).empty()) differing.push_back(f);
  }

  // service parity against cli embed output
  auto embedder = pipeline::Embedder::load(a / "tok.json", a / "weights.bin");
  embedder->attach_cache(std::make_shared<cache::EmbeddingCache>(1024, "", embedder->model_version()));
  pipeline::ServiceConfig sc;
  sc.port = 0;
  service::Server server(*embedder, nullptr, sc);
  const int port = server.start_background();
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(120, 0);
  std::vector<std::string> texts;
  std::vector<std::vector<double>> expected;
  {
    std::ifstream docs(a / "toy/docs.jsonl"), emb(a / "embeddings.jsonl");
    std::string dl, el;
    while (std::getline(docs, dl) && std::getline(emb, el)) {
      texts.push_back(json::parse(dl)["text"].get<std::string>());
      expected.push_back(json::parse(el)["vector"].get<std::vector<double>>());
    }
  }
  std::size_t mismatched = texts.size();
  if (auto res = client.Post("/embed", json{{"texts", texts}}.dump(), "application/json"); res && res->status == 200) {
    const auto vectors = json::parse(res->body)["vectors"];
    mismatched = 0;
    for (std::size_t i = 0; i < texts.size(); ++i)
      if (vectors.at(i).get<std::vector<double>>() != expected[i]) ++mismatched;
  }
  server.stop();

  std::string diff;
  for (const auto& f : differing) diff += (diff.empty() ? "" : ",") + f;
  return {differing.empty() && mismatched == 0 && !texts.empty(),
          fmt("two CLI runs: differing artifacts [%s]; /embed vs cli embed: %zu of %zu vectors differ; %.0f s",
              diff.c_str(), mismatched, texts.size(), seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
#ifdef HEMBED_CLI_PATH
  std::string cli = HEMBED_CLI_PATH;
#else
  std::string cli;
#endif
  fs::path work = fs::temp_directory_path() / "hembed_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      only.insert(std::atoi(arg.c_str()));
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"tokenizer oracle", viterbi_oracle},
      {"EM monotonicity", em_monotonicity},
      {"gradient check", gradient_check},
      {"pooling invariants", pooling_invariants},
      {"RoPE properties", rope_properties},
      {"toy training run", toy_training},
      {"retrieval exactness", retrieval_exactness},
      {"quantization", quantization},
      {"metric oracles", metric_oracles},
      {"end-to-end determinism", [&] { return end_to_end(cli, work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
