#pragma once

#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hembed/retrieval.hpp"

namespace hembed::metrics {

using Judgments = std::map<std::string, std::set<std::string>>;  // query_id -> relevant doc ids

// |top-k ∩ relevant| / k. Throws ConfigError for k == 0.
double precision_at_k(const retrieval::RetrievalResult& result, const std::set<std::string>& relevant, std::size_t k);

// 1-based rank of the first relevant hit, 0 when none was retrieved.
std::size_t first_relevant_rank(const retrieval::RetrievalResult& result, const std::set<std::string>& relevant);

// Mean reciprocal rank; queries without a retrieved relevant doc contribute 0.
// Throws DataError on an empty query set.
double mrr(std::span<const retrieval::RetrievalResult> results, const Judgments& judgments);

// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(std::span<const double> x);
// Pearson correlation of average ranks. Throws DataError for mismatched or
// short inputs and "zero rank variance" when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// TSV lines "query_id<TAB>doc_id"; blank lines and lines starting with '#' are ignored.
Judgments read_judgments(std::istream& in);
Judgments make_judgments(std::span<const std::pair<std::string, std::string>> rows);

struct QueryReport {
  std::string query_id;
  double p_at_1 = 0.0;
  double p_at_5 = 0.0;
  double reciprocal_rank = 0.0;
  std::size_t first_relevant = 0;
};

struct EvalReport {
  double p_at_1 = 0.0;
  double p_at_5 = 0.0;
  double mrr = 0.0;
  std::vector<QueryReport> per_query;
};

EvalReport evaluate(std::span<const retrieval::RetrievalResult> results, const Judgments& judgments);
// {"p_at_1", "p_at_5", "mrr", "per_query": [...]}
std::string report_json(const EvalReport& report);

}  // namespace hembed::metrics
