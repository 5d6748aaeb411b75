#include "seqret/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace seqret {

double average_precision(const std::vector<bool>& ranked, std::size_t total_relevant) {
  if (total_relevant == 0) throw std::invalid_argument("average_precision: no relevant items");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (!ranked[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  if (hits > total_relevant) throw std::invalid_argument("average_precision: more hits than relevant items");
  return sum / static_cast<double>(total_relevant);
}

double reciprocal_rank(const std::vector<bool>& ranked) {
  const auto it = std::find(ranked.begin(), ranked.end(), true);
  if (it == ranked.end()) return 0.0;
  return 1.0 / static_cast<double>(it - ranked.begin() + 1);
}

double dcg_at(const std::vector<bool>& ranked, std::size_t k) {
  double d = 0.0;
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked[i]) d += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  return d;
}

double ndcg_at(const std::vector<bool>& ranked, std::size_t k, std::size_t total_relevant) {
  if (total_relevant == 0) throw std::invalid_argument("ndcg_at: no relevant items");
  const std::vector<bool> ideal(std::min(k, total_relevant), true);
  return dcg_at(ranked, k) / dcg_at(ideal, k);
}

}  // namespace seqret
