#include "hembed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>

#include "hembed/errors.hpp"
#include "json.hpp"

namespace hembed::metrics {

double precision_at_k(const retrieval::RetrievalResult& result, const std::set<std::string>& relevant, std::size_t k) {
  if (k == 0) throw ConfigError("precision_at_k: k must be at least 1");
  std::size_t hit = 0;
  const std::size_t n = std::min(k, result.hits.size());
  for (std::size_t i = 0; i < n; ++i) hit += relevant.contains(result.hits[i].doc_id);
  return static_cast<double>(hit) / static_cast<double>(k);
}

std::size_t first_relevant_rank(const retrieval::RetrievalResult& result, const std::set<std::string>& relevant) {
  for (std::size_t i = 0; i < result.hits.size(); ++i) {
    if (relevant.contains(result.hits[i].doc_id)) return i + 1;
  }
  return 0;
}

namespace {
const std::set<std::string>& relevant_for(const Judgments& j, const std::string& query_id) {
  static const std::set<std::string> none;
  auto it = j.find(query_id);
  return it == j.end() ? none : it->second;
}
}  // namespace

double mrr(std::span<const retrieval::RetrievalResult> results, const Judgments& judgments) {
  if (results.empty()) throw DataError("mrr: empty query set");
  double total = 0.0;
  for (const auto& r : results) {
    const std::size_t rank = first_relevant_rank(r, relevant_for(judgments, r.query_id));
    if (rank) total += 1.0 / static_cast<double>(rank);
  }
  return total / static_cast<double>(results.size());
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("spearman: inputs differ in length");
  if (x.size() < 2) throw DataError("spearman: need at least two observations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DataError("zero rank variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

Judgments read_judgments(std::istream& in) {
  Judgments j;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size() || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError("judgments line " + std::to_string(lineno) + ": expected query_id<TAB>doc_id");
    }
    j[line.substr(0, tab)].insert(line.substr(tab + 1));
  }
  return j;
}

Judgments make_judgments(std::span<const std::pair<std::string, std::string>> rows) {
  Judgments j;
  for (const auto& [q, d] : rows) j[q].insert(d);
  return j;
}

EvalReport evaluate(std::span<const retrieval::RetrievalResult> results, const Judgments& judgments) {
  if (results.empty()) throw DataError("evaluate: empty query set");
  EvalReport report;
  for (const auto& r : results) {
    const auto& rel = relevant_for(judgments, r.query_id);
    QueryReport q;
    q.query_id = r.query_id;
    q.p_at_1 = precision_at_k(r, rel, 1);
    q.p_at_5 = precision_at_k(r, rel, 5);
    q.first_relevant = first_relevant_rank(r, rel);
    q.reciprocal_rank = q.first_relevant ? 1.0 / static_cast<double>(q.first_relevant) : 0.0;
    report.p_at_1 += q.p_at_1;
    report.p_at_5 += q.p_at_5;
    report.per_query.push_back(std::move(q));
  }
  const double n = static_cast<double>(results.size());
  report.p_at_1 /= n;
  report.p_at_5 /= n;
  report.mrr = mrr(results, judgments);
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["p_at_1"] = report.p_at_1;
  j["p_at_5"] = report.p_at_5;
  j["mrr"] = report.mrr;
  j["per_query"] = nlohmann::ordered_json::array();
  for (const auto& q : report.per_query) {
    nlohmann::ordered_json e;
    e["query_id"] = q.query_id;
    e["p_at_1"] = q.p_at_1;
    e["p_at_5"] = q.p_at_5;
    e["reciprocal_rank"] = q.reciprocal_rank;
    e["first_relevant_rank"] = q.first_relevant;
    j["per_query"].push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

}  // namespace hembed::metrics
