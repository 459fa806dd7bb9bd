#pragma once

#include <memory>
#include <string>
#include <thread>

#include "hembed/pipeline.hpp"
#include "hembed/retrieval.hpp"

namespace hembed::service {

// HTTP/1.1 JSON endpoints:
//   POST /embed   {"texts": [...]}           -> {"vectors": [[...], ...], "model_version": "..."}
//   POST /search  {"query": "...", "k": n}   -> {"query_id": "...", "results": [{"doc_id", "score"}, ...]}
//   GET  /health                             -> {"status": "ok", "model_version": "..."}
// Concurrent /embed requests are grouped by a micro-batcher that flushes
// after batch_window_ms or max_batch requests, whichever comes first.
class Server {
 public:
  Server(const pipeline::Embedder& embedder, const retrieval::VectorIndex* index, pipeline::ServiceConfig config,
         pipeline::RetrievalConfig retrieval = {});
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds (port 0 picks a free port) and returns the bound port; throws DataError on failure.
  int bind();
  // Serves until stop(). bind() must have succeeded.
  void run();
  // bind() + run() on a background thread.
  int start_background();
  void stop();

  std::size_t batches_flushed() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace hembed::service
