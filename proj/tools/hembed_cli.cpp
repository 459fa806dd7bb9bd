// hembed: command-line front end for the embedding engine.
#include <algorithm>
#include <cctype>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "hembed/corpus.hpp"
#include "hembed/errors.hpp"
#include "hembed/metrics.hpp"
#include "hembed/pipeline.hpp"
#include "hembed/retrieval.hpp"
#include "hembed/service.hpp"
#include "hembed/synthetic.hpp"
#include "hembed/tokenizer.hpp"
#include "hembed/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace hembed;
using nlohmann::ordered_json;

namespace {

std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  return in;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

void warn_malformed(std::size_t n, const fs::path& p) {
  if (n) std::cerr << "warning: skipped " << n << " malformed line(s) in " << p.string() << '\n';
}

std::vector<corpus::TextRecord> load_records(const fs::path& p) {
  auto in = open_in(p);
  std::size_t bad = 0;
  auto records = pipeline::read_records(in, &bad);
  warn_malformed(bad, p);
  return records;
}

void write_records(const fs::path& p, const std::vector<corpus::TextRecord>& records) {
  auto out = open_out(p);
  for (const auto& r : records) out << corpus::to_jsonl(r) << '\n';
}

void write_labeled(const fs::path& p, const std::vector<synthetic::Labeled>& rows) {
  auto out = open_out(p);
  for (const auto& [id, text] : rows) out << ordered_json{{"id", id}, {"text", text}}.dump() << '\n';
}

void write_tsv(const fs::path& p, const std::vector<synthetic::Labeled>& rows) {
  auto out = open_out(p);
  for (const auto& [a, b] : rows) out << a << '\t' << b << '\n';
}

std::vector<std::string> texts_of(const std::vector<corpus::TextRecord>& records) {
  std::vector<std::string> t;
  for (const auto& r : records) t.push_back(r.text);
  return t;
}

metrics::Judgments load_judgments(const fs::path& p) {
  auto in = open_in(p);
  return metrics::read_judgments(in);
}

// DEEPRAG_<LONG_NAME> for every long option of every subcommand.
void attach_env_names(CLI::App& app) {
  for (CLI::App* sub : app.get_subcommands({})) {
    for (CLI::Option* opt : sub->get_options()) {
      const std::string name = opt->get_single_name();
      if (opt->get_lnames().empty() || name == "help" || name == "config") continue;
      std::string env = "DEEPRAG_";
      for (char c : name) env += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      opt->envname(env);
    }
  }
}

// ---- option groups ---------------------------------------------------------

struct EncoderOpts {
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_seq_len = 128;
  double rope_base = 10000.0;
  std::string pooling = "weighted";

  void add(CLI::App* s) {
    s->add_option("--dim", dim, "embedding width")->capture_default_str();
    s->add_option("--layers", layers, "transformer layers")->capture_default_str();
    s->add_option("--heads", heads, "attention heads")->capture_default_str();
    s->add_option("--max-seq-len", max_seq_len, "tokens per text, [bos] included")->capture_default_str();
    s->add_option("--rope-base", rope_base, "rotary frequency base")->capture_default_str();
    s->add_option("--pooling", pooling, "cls|mean|max|attention|weighted")->capture_default_str();
  }
  encoder::EncoderConfig config(std::size_t vocab) const {
    encoder::EncoderConfig c;
    c.vocab_size = vocab;
    c.dim = dim;
    c.n_layers = layers;
    c.n_heads = heads;
    c.max_seq_len = max_seq_len;
    c.rope_base = rope_base;
    c.pooling = encoder::parse_pooling(pooling);
    c.validate();
    return c;
  }
};

void add_train_opts(CLI::App* s, training::TrainConfig& c, bool& no_remine) {
  s->add_option("--alpha", c.alpha, "MSE weight")->capture_default_str();
  s->add_option("--beta", c.beta, "contrastive weight")->capture_default_str();
  s->add_option("--gamma", c.gamma, "triplet weight")->capture_default_str();
  s->add_option("--lr", c.lr_peak, "peak learning rate")->capture_default_str();
  s->add_option("--lr-min", c.lr_min, "final learning rate")->capture_default_str();
  s->add_option("--warmup-steps", c.warmup_steps, "0 = a tenth of all steps")->capture_default_str();
  s->add_option("--total-steps", c.total_steps, "0 = epochs x steps per epoch")->capture_default_str();
  s->add_option("--epochs", c.epochs)->capture_default_str();
  s->add_option("--batch-size", c.batch_size, "pairs per micro-batch")->capture_default_str();
  s->add_option("--grad-accum", c.grad_accum_steps, "micro-batches per optimizer step")->capture_default_str();
  s->add_option("--patience", c.patience, "epochs without validation gain before stopping")->capture_default_str();
  s->add_option("--weight-decay", c.weight_decay)->capture_default_str();
  s->add_option("--margin", c.margin, "triplet margin")->capture_default_str();
  s->add_option("--temperature", c.temperature, "InfoNCE temperature")->capture_default_str();
  s->add_option("--seed", c.seed)->capture_default_str();
  s->add_flag("--no-remine", no_remine, "keep the initial hard negatives for every epoch");
}

ordered_json config_snapshot(const encoder::EncoderConfig& e, const training::TrainConfig& t) {
  ordered_json j;
  j["encoder"] = {{"vocab_size", e.vocab_size}, {"dim", e.dim},           {"n_layers", e.n_layers},
                  {"n_heads", e.n_heads},       {"ffn_hidden", e.ffn_hidden()}, {"max_seq_len", e.max_seq_len},
                  {"rope_base", e.rope_base},   {"pooling", encoder::pooling_name(e.pooling)}};
  j["train"] = {{"alpha", t.alpha},
                {"beta", t.beta},
                {"gamma", t.gamma},
                {"lr_peak", t.lr_peak},
                {"lr_min", t.lr_min},
                {"warmup_steps", t.warmup_steps},
                {"total_steps", t.total_steps},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"grad_accum_steps", t.grad_accum_steps},
                {"patience", t.patience},
                {"weight_decay", t.weight_decay},
                {"margin", t.margin},
                {"temperature", t.temperature},
                {"betas", {t.beta1, t.beta2}},
                {"eps", t.eps},
                {"remine_hard_negatives", t.remine_hard_negatives},
                {"seed", t.seed}};
  return j;
}

std::vector<pipeline::Embedding> embed_records(const pipeline::Embedder& embedder,
                                               const std::vector<corpus::TextRecord>& records) {
  std::vector<pipeline::Embedding> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.id, embedder.embed(r.text)});
  return out;
}

std::shared_ptr<cache::EmbeddingCache> make_cache(const fs::path& dir, std::size_t capacity,
                                                  const std::string& version) {
  if (dir.empty()) return nullptr;
  return std::make_shared<cache::EmbeddingCache>(capacity, dir, version);
}

service::Server* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hembed: text cleaning, subword tokenization, sentence embeddings and vector search"};
  app.set_config("--config", "", "key = value configuration file; [subcommand] sections hold per-command keys");
  app.require_subcommand(1);

  // clean
  fs::path clean_in, clean_out, clean_report, clean_rejects, blocklist_file;
  corpus::PipelineOptions clean_opts;
  auto* clean = app.add_subcommand("clean", "clean, script-filter, length-filter and deduplicate a JSONL corpus");
  clean->add_option("--input", clean_in, "JSONL records {id, text[, source]}")->required();
  clean->add_option("--output", clean_out, "kept records")->required();
  clean->add_option("--report", clean_report, "JSON summary (stdout when omitted)");
  clean->add_option("--rejects", clean_rejects, "rejected records with their reason");
  clean->add_option("--blocklist", blocklist_file, "file with one regex per line");
  clean->add_option("--min-chars", clean_opts.min_chars)->capture_default_str();
  clean->add_option("--max-chars", clean_opts.max_chars)->capture_default_str();
  clean->add_option("--near-dup", clean_opts.near_dup_threshold, "shingle Jaccard threshold")->capture_default_str();
  clean->add_option("--script-min", clean_opts.script_min_fraction, "minimum allowed-script fraction")
      ->capture_default_str();

  // stats
  fs::path stats_in, stats_out;
  std::size_t bucket_width = 100;
  auto* stats = app.add_subcommand("stats", "corpus statistics");
  stats->add_option("--input", stats_in)->required();
  stats->add_option("--output", stats_out, "JSON (stdout when omitted)");
  stats->add_option("--bucket-width", bucket_width)->capture_default_str();

  // chunk
  fs::path chunk_in, chunk_out;
  std::size_t chunk_max = 512;
  auto* chunk = app.add_subcommand("chunk", "split documents at sentence and paragraph boundaries");
  chunk->add_option("--input", chunk_in)->required();
  chunk->add_option("--output", chunk_out)->required();
  chunk->add_option("--max-chars", chunk_max, "code points per chunk")->capture_default_str();

  // train-tokenizer
  fs::path tok_in, tok_model, tok_test, tok_report;
  tokenizer::TrainerConfig tok_cfg;
  auto* train_tok = app.add_subcommand("train-tokenizer", "train a Unigram tokenizer");
  train_tok->add_option("--input", tok_in, "cleaned JSONL corpus")->required();
  train_tok->add_option("--output,--model", tok_model, "output model file")->required();
  train_tok->add_option("--vocab-size", tok_cfg.vocab_size, "pieces, special tokens excluded")->capture_default_str();
  train_tok->add_option("--char-coverage,--coverage", tok_cfg.char_coverage, "character coverage")->capture_default_str();
  train_tok->add_option("--max-piece-len", tok_cfg.max_piece_len)->capture_default_str();
  train_tok->add_option("--test", tok_test, "held-out JSONL for the tokenizer report");
  train_tok->add_option("--report", tok_report, "JSON tokenizer report");

  // encode / decode
  fs::path codec_model;
  std::string encode_text, decode_ids;
  auto* encode = app.add_subcommand("encode", "text to token ids (reads stdin lines without --text)");
  encode->add_option("--tokenizer", codec_model)->required();
  encode->add_option("--text", encode_text);
  auto* decode = app.add_subcommand("decode", "token ids to text (reads stdin lines without --ids)");
  decode->add_option("--tokenizer", codec_model)->required();
  decode->add_option("--ids", decode_ids, "space-separated ids");

  // build-pairs
  fs::path bp_in, bp_out, bp_synonyms, bp_paraphrases;
  training::AugmentConfig aug;
  std::size_t n_hard = 1;
  auto* build = app.add_subcommand("build-pairs", "similarity pairs and mined triplets from a cleaned corpus");
  build->add_option("--input", bp_in, "cleaned JSONL corpus")->required();
  build->add_option("--output", bp_out, "pairs JSONL")->required();
  build->add_option("--synonyms", bp_synonyms, "one synonym group per line, tab-separated");
  build->add_option("--paraphrases", bp_paraphrases, "JSONL {id, text}: positives keyed by corpus id");
  build->add_option("--hard-negatives", n_hard, "mined negatives per anchor")->capture_default_str();
  build->add_option("--negatives-per-text", aug.negatives_per_text)->capture_default_str();
  build->add_option("--substitution-prob", aug.substitution_prob)->capture_default_str();
  build->add_option("--swap-prob", aug.swap_prob)->capture_default_str();
  build->add_option("--edit-penalty", aug.edit_penalty)->capture_default_str();
  build->add_option("--seed", aug.seed)->capture_default_str();

  // train
  fs::path tr_pairs, tr_tok, tr_weights, tr_opt, tr_snapshot, tr_steps, tr_epochs, tr_val_docs, tr_val_queries,
      tr_val_judgments;
  EncoderOpts enc_opts;
  training::TrainConfig train_cfg;
  bool no_remine = false;
  std::uint64_t init_seed = 1;
  auto* train = app.add_subcommand("train", "train the encoder on a pairs file");
  train->add_option("--pairs", tr_pairs)->required();
  train->add_option("--tokenizer", tr_tok)->required();
  train->add_option("--weights", tr_weights, "output weights file")->required();
  train->add_option("--optimizer-state", tr_opt, "output optimizer state");
  train->add_option("--config-snapshot", tr_snapshot, "output JSON of the effective configuration");
  train->add_option("--metrics-log", tr_steps, "per-step CSV");
  train->add_option("--epoch-log", tr_epochs, "per-epoch CSV");
  train->add_option("--val-docs", tr_val_docs, "JSONL {id, text}");
  train->add_option("--val-queries", tr_val_queries, "JSONL {id, text}");
  train->add_option("--val-judgments", tr_val_judgments, "TSV query_id, doc_id");
  train->add_option("--init-seed", init_seed, "weight initialization seed")->capture_default_str();
  enc_opts.add(train);
  add_train_opts(train, train_cfg, no_remine);

  // embed
  fs::path em_tok, em_weights, em_in, em_out, em_cache;
  std::size_t cache_capacity = 4096;
  auto* embed = app.add_subcommand("embed", "embed JSONL records");
  embed->add_option("--tokenizer", em_tok)->required();
  embed->add_option("--weights", em_weights)->required();
  embed->add_option("--input", em_in, "JSONL {id, text}")->required();
  embed->add_option("--output", em_out, "JSONL {id, vector}")->required();
  embed->add_option("--cache-dir", em_cache, "on-disk embedding cache");
  embed->add_option("--cache-capacity", cache_capacity)->capture_default_str();

  // index
  fs::path ix_in, ix_out;
  std::string ix_mode = "float";
  auto* index = app.add_subcommand("index", "build a vector index from embeddings");
  index->add_option("--embeddings", ix_in)->required();
  index->add_option("--output", ix_out)->required();
  index->add_option("--mode", ix_mode, "float|int8")->capture_default_str();

  // search / eval
  fs::path se_tok, se_weights, se_index, ev_queries, ev_judgments, ev_report;
  std::string se_query;
  std::size_t k = 10;
  bool no_rerank = false;
  auto* search = app.add_subcommand("search", "top-k documents for a query");
  search->add_option("--tokenizer", se_tok)->required();
  search->add_option("--weights", se_weights)->required();
  search->add_option("--index", se_index)->required();
  search->add_option("--query", se_query)->required();
  search->add_option("--k", k)->capture_default_str();
  search->add_flag("--no-rerank", no_rerank, "int8 indexes: skip full-precision rescoring");
  auto* eval = app.add_subcommand("eval", "P@1, P@5 and MRR of queries against an index");
  eval->add_option("--tokenizer", se_tok)->required();
  eval->add_option("--weights", se_weights)->required();
  eval->add_option("--index", se_index)->required();
  eval->add_option("--queries", ev_queries, "JSONL {id, text}")->required();
  eval->add_option("--judgments", ev_judgments, "TSV query_id, doc_id")->required();
  eval->add_option("--report", ev_report, "JSON report (stdout when omitted)");
  eval->add_option("--k", k)->capture_default_str();
  eval->add_flag("--no-rerank", no_rerank);

  // serve
  pipeline::ServiceConfig svc;
  fs::path sv_tok, sv_weights, sv_index, sv_cache;
  auto* serve = app.add_subcommand("serve", "HTTP service: POST /embed, POST /search, GET /health");
  serve->add_option("--tokenizer", sv_tok)->required();
  serve->add_option("--weights", sv_weights)->required();
  serve->add_option("--index", sv_index);
  serve->add_option("--cache-dir", sv_cache);
  serve->add_option("--cache-capacity", cache_capacity)->capture_default_str();
  serve->add_option("--host", svc.host)->capture_default_str();
  serve->add_option("--port", svc.port)->capture_default_str();
  serve->add_option("--batch-window-ms", svc.batch_window_ms)->capture_default_str();
  serve->add_option("--max-batch", svc.max_batch)->capture_default_str();
  serve->add_option("--k", k, "default k for /search")->capture_default_str();

  // make-toy
  fs::path toy_dir;
  synthetic::ToyConfig toy_cfg;
  auto* toy = app.add_subcommand("make-toy", "write the synthetic paraphrase corpus and retrieval split");
  toy->add_option("--output-dir", toy_dir)->required();
  toy->add_option("--seed", toy_cfg.seed)->capture_default_str();
  toy->add_option("--train-docs", toy_cfg.train_docs)->capture_default_str();
  toy->add_option("--index-docs", toy_cfg.index_docs)->capture_default_str();
  toy->add_option("--queries", toy_cfg.queries)->capture_default_str();
  toy->add_option("--val-docs", toy_cfg.val_docs)->capture_default_str();
  toy->add_option("--val-queries", toy_cfg.val_queries)->capture_default_str();

  attach_env_names(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*clean) {
      auto in = open_in(clean_in);
      std::size_t bad = 0;
      auto records = pipeline::read_records(in, &bad);
      warn_malformed(bad, clean_in);
      if (!blocklist_file.empty()) {
        auto bl = open_in(blocklist_file);
        std::string line;
        while (std::getline(bl, line)) {
          if (!line.empty() && line[0] != '#') clean_opts.blocklist.push_back(line);
        }
      }
      corpus::CleanReport report;
      auto out_records = corpus::run_pipeline(std::move(records), clean_opts, report);
      report.malformed_lines = bad;
      std::vector<corpus::TextRecord> kept, rejected;
      for (auto& r : out_records) (r.status == corpus::RecordStatus::cleaned ? kept : rejected).push_back(std::move(r));
      write_records(clean_out, kept);
      if (!clean_rejects.empty()) write_records(clean_rejects, rejected);
      ordered_json j{{"input", report.input}, {"kept", report.kept}, {"malformed_lines", report.malformed_lines}};
      j["rejected"] = ordered_json::object();
      for (const auto& [reason, n] : report.rejected) j["rejected"][reason] = n;
      if (clean_report.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        open_out(clean_report) << j.dump(2) << '\n';
      }
    } else if (*stats) {
      const auto records = load_records(stats_in);
      const auto s = corpus::corpus_stats(records, bucket_width);
      ordered_json j{{"records", s.records},       {"total_chars", s.total_chars}, {"unique_chars", s.unique_chars},
                     {"total_words", s.total_words}, {"unique_words", s.unique_words}, {"char_ratio", s.char_ratio},
                     {"word_ratio", s.word_ratio},   {"bucket_width", s.bucket_width}};
      j["length_histogram"] = ordered_json::object();
      for (const auto& [lo, n] : s.length_histogram) j["length_histogram"][std::to_string(lo)] = n;
      if (stats_out.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        open_out(stats_out) << j.dump(2) << '\n';
      }
    } else if (*chunk) {
      const auto records = load_records(chunk_in);
      auto out = open_out(chunk_out);
      for (const auto& r : records) {
        for (const auto& c : corpus::chunk_document(r.id, r.text, chunk_max)) {
          out << ordered_json{{"id", c.doc_id + "#" + std::to_string(c.ordinal)},
                              {"doc_id", c.doc_id},
                              {"ordinal", c.ordinal},
                              {"text", c.text},
                              {"begin", c.begin},
                              {"end", c.end},
                              {"hard_split", c.hard_split}}
                     .dump()
              << '\n';
        }
      }
    } else if (*train_tok) {
      const auto texts = texts_of(load_records(tok_in));
      if (texts.empty()) throw DataError("train-tokenizer: empty corpus");
      const auto model = tokenizer::train_unigram(texts, tok_cfg);
      model.save(tok_model);
      if (!tok_test.empty()) {
        const auto r = tokenizer::evaluate_tokenizer(model, texts_of(load_records(tok_test)));
        ordered_json j{{"sentences", r.sentences},       {"tokens", r.tokens},
                       {"unk_tokens", r.unk_tokens},     {"tokens_per_sentence", r.tokens_per_sentence},
                       {"oov_rate", r.oov_rate},         {"roundtrip_rate", r.roundtrip_rate},
                       {"pieces", model.pieces().size()}};
        if (tok_report.empty()) {
          std::cout << j.dump(2) << '\n';
        } else {
          open_out(tok_report) << j.dump(2) << '\n';
        }
      }
    } else if (*encode) {
      const auto model = tokenizer::TokenizerModel::load(codec_model);
      auto emit = [&](const std::string& t) {
        const auto ids = tokenizer::encode(model, t);
        for (std::size_t i = 0; i < ids.size(); ++i) std::cout << (i ? " " : "") << ids[i];
        std::cout << '\n';
      };
      if (encode->count("--text")) {
        emit(encode_text);
      } else {
        std::string line;
        while (std::getline(std::cin, line)) emit(line);
      }
    } else if (*decode) {
      const auto model = tokenizer::TokenizerModel::load(codec_model);
      auto emit = [&](const std::string& line) {
        std::istringstream ss(line);
        std::vector<int> ids;
        std::string tok;
        while (ss >> tok) {
          try {
            ids.push_back(std::stoi(tok));
          } catch (const std::exception&) {
            throw DataError("decode: not an integer id: " + tok);
          }
        }
        std::cout << tokenizer::decode(model, ids) << '\n';
      };
      if (decode->count("--ids")) {
        emit(decode_ids);
      } else {
        std::string line;
        while (std::getline(std::cin, line)) emit(line);
      }
    } else if (*build) {
      const auto records = load_records(bp_in);
      const auto corpus_texts = texts_of(records);
      if (!bp_synonyms.empty()) {
        auto in = open_in(bp_synonyms);
        std::string line;
        while (std::getline(in, line)) {
          std::vector<std::string> group;
          std::istringstream ls(line);
          std::string w;
          while (std::getline(ls, w, '\t')) {
            if (!w.empty()) group.push_back(w);
          }
          if (group.size() >= 2) aug.synonyms.push_back(std::move(group));
        }
      }
      training::PairDataset data;
      if (!bp_paraphrases.empty()) {
        std::map<std::string, std::string> para;
        for (const auto& r : load_records(bp_paraphrases)) para[r.id] = corpus::clean_text(r.text);
        std::vector<training::SimilarityPair> positives;
        for (const auto& r : records) {
          auto it = para.find(r.id);
          if (it != para.end() && !it->second.empty()) positives.push_back({r.text, it->second, 1.0});
        }
        data = training::complete_pairs(std::move(positives), corpus_texts, aug, n_hard);
      } else {
        data = training::build_pairs(corpus_texts, aug, n_hard);
      }
      auto out = open_out(bp_out);
      training::write_pairs(out, data);
      std::cerr << "pairs: " << data.pairs.size() << ", triplets: " << data.triplets.size() << '\n';
    } else if (*train) {
      pipeline::require_files({tr_pairs, tr_tok});
      train_cfg.remine_hard_negatives = !no_remine;
      const auto tok = tokenizer::TokenizerModel::load(tr_tok);
      const auto ecfg = enc_opts.config(tok.num_ids());
      auto in = open_in(tr_pairs);
      std::size_t bad = 0;
      const auto data = training::read_pairs(in, &bad);
      warn_malformed(bad, tr_pairs);
      training::ValidationSet val;
      if (!tr_val_queries.empty()) {
        pipeline::require_files({tr_val_docs, tr_val_queries, tr_val_judgments});
        val.docs = pipeline::as_pairs(load_records(tr_val_docs));
        val.queries = pipeline::as_pairs(load_records(tr_val_queries));
        auto jin = open_in(tr_val_judgments);
        for (const auto& [q, docs] : metrics::read_judgments(jin)) {
          for (const auto& d : docs) val.judgments.emplace_back(q, d);
        }
      }
      const training::Tokenize tokenize = [&](const std::string& t) {
        return pipeline::token_ids(tok, ecfg.max_seq_len, t);
      };
      training::TrainCallbacks cb;
      cb.on_epoch = [](const training::EpochRecord& e) {
        std::cerr << "epoch " << e.epoch << " step " << e.step << " loss " << e.train_loss << " val_mrr " << e.val_mrr
                  << '\n';
      };
      const auto result =
          training::train(train_cfg, ecfg, encoder::EncoderWeights::init(ecfg, init_seed), data, tokenize, val, cb);
      encoder::save_weights(tr_weights, ecfg, result.weights);
      if (!tr_opt.empty()) training::save_optimizer(tr_opt, result.optimizer);
      if (!tr_snapshot.empty()) open_out(tr_snapshot) << config_snapshot(ecfg, train_cfg).dump(2) << '\n';
      if (!tr_steps.empty()) {
        auto out = open_out(tr_steps);
        training::write_step_log(out, result.steps);
      }
      if (!tr_epochs.empty()) {
        auto out = open_out(tr_epochs);
        training::write_epoch_log(out, result.epochs);
      }
      std::cerr << "initial loss " << result.initial_loss << ", final loss " << result.final_loss << ", best epoch "
                << result.best_epoch << '\n';
    } else if (*embed) {
      auto embedder = pipeline::Embedder::load(em_tok, em_weights);
      embedder->attach_cache(make_cache(em_cache, cache_capacity, embedder->model_version()));
      const auto records = load_records(em_in);
      auto out = open_out(em_out);
      for (const auto& e : embed_records(*embedder, records)) out << pipeline::embedding_json(e) << '\n';
    } else if (*index) {
      auto in = open_in(ix_in);
      std::size_t bad = 0;
      const auto embeddings = pipeline::read_embeddings(in, &bad);
      warn_malformed(bad, ix_in);
      pipeline::build_index(embeddings, retrieval::parse_mode(ix_mode))->save(ix_out);
    } else if (*search) {
      auto embedder = pipeline::Embedder::load(se_tok, se_weights);
      const auto idx = retrieval::VectorIndex::load(se_index);
      const auto result = idx->search(embedder->embed(se_query), k, !no_rerank, "query");
      ordered_json hits = ordered_json::array();
      for (const auto& h : result.hits) hits.push_back({{"doc_id", h.doc_id}, {"score", h.score}});
      std::cout << ordered_json{{"query_id", result.query_id}, {"results", hits}}.dump(2) << '\n';
    } else if (*eval) {
      auto embedder = pipeline::Embedder::load(se_tok, se_weights);
      const auto idx = retrieval::VectorIndex::load(se_index);
      if (idx->dim() != embedder->dim()) throw ModelError("index dimension does not match the encoder");
      const auto queries = load_records(ev_queries);
      const auto judgments = load_judgments(ev_judgments);
      std::vector<retrieval::RetrievalResult> results;
      for (const auto& q : queries) results.push_back(idx->search(embedder->embed(q.text), k, !no_rerank, q.id));
      const std::string report = metrics::report_json(metrics::evaluate(results, judgments));
      if (ev_report.empty()) {
        std::cout << report;
      } else {
        open_out(ev_report) << report;
      }
    } else if (*serve) {
      pipeline::PipelineConfig pc;
      pc.service = svc;
      pc.retrieval.k = k;
      pc.retrieval.cache_capacity = cache_capacity;
      pc.validate();
      auto embedder = pipeline::Embedder::load(sv_tok, sv_weights);
      embedder->attach_cache(
          std::make_shared<cache::EmbeddingCache>(cache_capacity, sv_cache, embedder->model_version()));
      std::unique_ptr<retrieval::VectorIndex> idx;
      if (!sv_index.empty()) idx = retrieval::VectorIndex::load(sv_index);
      service::Server server(*embedder, idx.get(), svc, pc.retrieval);
      const int port = server.bind();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on " << svc.host << ':' << port << " (model " << embedder->model_version() << ")\n";
      server.run();
      g_server = nullptr;
    } else if (*toy) {
      const auto t = synthetic::make_toy_corpus(toy_cfg);
      fs::create_directories(toy_dir);
      write_records(toy_dir / "train.jsonl", t.train);
      std::vector<synthetic::Labeled> para;
      for (std::size_t i = 0; i < t.train.size(); ++i) para.emplace_back(t.train[i].id, t.train_paraphrases[i]);
      write_labeled(toy_dir / "paraphrases.jsonl", para);
      {
        auto out = open_out(toy_dir / "synonyms.tsv");
        for (const auto& g : t.synonyms) {
          for (std::size_t i = 0; i < g.size(); ++i) out << (i ? "\t" : "") << g[i];
          out << '\n';
        }
      }
      write_labeled(toy_dir / "docs.jsonl", t.index_docs);
      write_labeled(toy_dir / "queries.jsonl", t.queries);
      write_tsv(toy_dir / "judgments.tsv", t.judgments);
      write_labeled(toy_dir / "val_docs.jsonl", t.val_docs);
      write_labeled(toy_dir / "val_queries.jsonl", t.val_queries);
      write_tsv(toy_dir / "val_judgments.tsv", t.val_judgments);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
