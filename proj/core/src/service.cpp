#include "hembed/service.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <future>
#include <mutex>

#include "hembed/errors.hpp"
#include "httplib.h"
#include "json.hpp"

namespace hembed::service {

using nlohmann::json;

namespace {

class Batcher {
 public:
  using Vectors = std::vector<std::vector<double>>;

  Batcher(const pipeline::Embedder& embedder, std::chrono::milliseconds window, std::size_t max_batch)
      : embedder_(embedder), window_(window), max_batch_(max_batch), worker_([this] { loop(); }) {}

  ~Batcher() {
    {
      std::lock_guard lock(mu_);
      done_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  std::future<Vectors> submit(std::vector<std::string> texts) {
    Job job{std::move(texts), {}};
    auto fut = job.result.get_future();
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(job));
    }
    cv_.notify_all();
    return fut;
  }

  std::size_t flushed() const { return flushed_.load(); }

 private:
  struct Job {
    std::vector<std::string> texts;
    std::promise<Vectors> result;
  };

  void loop() {
    std::unique_lock lock(mu_);
    for (;;) {
      cv_.wait(lock, [&] { return done_ || !queue_.empty(); });
      if (queue_.empty() && done_) return;
      const auto deadline = std::chrono::steady_clock::now() + window_;
      cv_.wait_until(lock, deadline, [&] { return done_ || queue_.size() >= max_batch_; });
      std::vector<Job> batch;
      while (!queue_.empty() && batch.size() < max_batch_) {
        batch.push_back(std::move(queue_.front()));
        queue_.pop_front();
      }
      lock.unlock();
      for (auto& job : batch) {
        try {
          job.result.set_value(embedder_.embed_batch(job.texts));
        } catch (...) {
          job.result.set_exception(std::current_exception());
        }
      }
      ++flushed_;
      lock.lock();
    }
  }

  const pipeline::Embedder& embedder_;
  std::chrono::milliseconds window_;
  std::size_t max_batch_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Job> queue_;
  bool done_ = false;
  std::atomic<std::size_t> flushed_{0};
  std::thread worker_;
};

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, json{{"error", message}});
}

}  // namespace

struct Server::Impl {
  const pipeline::Embedder& embedder;
  const retrieval::VectorIndex* index;
  pipeline::ServiceConfig config;
  pipeline::RetrievalConfig retrieval;
  Batcher batcher;
  httplib::Server http;
  std::thread thread;
  bool bound = false;

  Impl(const pipeline::Embedder& e, const retrieval::VectorIndex* i, pipeline::ServiceConfig c,
       pipeline::RetrievalConfig r)
      : embedder(e),
        index(i),
        config(std::move(c)),
        retrieval(r),
        batcher(e, std::chrono::milliseconds(config.batch_window_ms), config.max_batch) {
    http.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, json{{"status", "ok"}, {"model_version", embedder.model_version()}});
    });
    http.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) { on_embed(req, res); });
    http.Post("/search", [this](const httplib::Request& req, httplib::Response& res) { on_search(req, res); });
  }

  void on_embed(const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("texts") || !body["texts"].is_array()) {
      return reply_error(res, 400, "expected {\"texts\": [string, ...]}");
    }
    std::vector<std::string> texts;
    for (const auto& t : body["texts"]) {
      if (!t.is_string()) return reply_error(res, 400, "texts must all be strings");
      texts.push_back(t.get<std::string>());
    }
    try {
      auto vectors = batcher.submit(std::move(texts)).get();
      reply(res, 200, json{{"vectors", vectors}, {"model_version", embedder.model_version()}});
    } catch (const std::exception& e) {
      reply_error(res, 500, e.what());
    }
  }

  void on_search(const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("query") || !body["query"].is_string()) {
      return reply_error(res, 400, "expected {\"query\": string, \"k\": integer}");
    }
    std::size_t k = retrieval.k;
    if (body.contains("k")) {
      if (!body["k"].is_number_integer() || body["k"].get<long long>() < 1) return reply_error(res, 400, "k must be a positive integer");
      k = body["k"].get<std::size_t>();
    }
    bool rerank = retrieval.rerank;
    if (body.contains("rerank")) {
      if (!body["rerank"].is_boolean()) return reply_error(res, 400, "rerank must be a boolean");
      rerank = body["rerank"].get<bool>();
    }
    const std::string query_id =
        body.contains("query_id") && body["query_id"].is_string() ? body["query_id"].get<std::string>() : "query";
    if (!index) return reply_error(res, 503, "no index loaded");
    try {
      auto vectors = batcher.submit({body["query"].get<std::string>()}).get();
      const auto result = index->search(vectors.front(), k, rerank, query_id);
      json hits = json::array();
      for (const auto& h : result.hits) hits.push_back(json{{"doc_id", h.doc_id}, {"score", h.score}});
      reply(res, 200, json{{"query_id", result.query_id}, {"results", hits}});
    } catch (const std::exception& e) {
      reply_error(res, 500, e.what());
    }
  }
};

Server::Server(const pipeline::Embedder& embedder, const retrieval::VectorIndex* index, pipeline::ServiceConfig config,
               pipeline::RetrievalConfig retrieval)
    : impl_(std::make_unique<Impl>(embedder, index, std::move(config), retrieval)) {
  if (impl_->config.max_batch == 0) throw ConfigError("service: max_batch must be positive");
  if (index && index->dim() != embedder.dim()) throw ModelError("service: index dimension does not match the encoder");
}

Server::~Server() { stop(); }

int Server::bind() {
  int port = impl_->config.port;
  if (port == 0) {
    port = impl_->http.bind_to_any_port(impl_->config.host);
  } else if (!impl_->http.bind_to_port(impl_->config.host, port)) {
    port = -1;
  }
  if (port <= 0) throw DataError("cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  impl_->bound = true;
  return port;
}

void Server::run() {
  if (!impl_->bound) throw ConfigError("service: bind() before run()");
  impl_->http.listen_after_bind();
}

int Server::start_background() {
  const int port = bind();
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return port;
}

void Server::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::size_t Server::batches_flushed() const { return impl_->batcher.flushed(); }

}  // namespace hembed::service
