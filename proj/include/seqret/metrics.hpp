#pragma once

// Binary-relevance ranking metrics. A ranking is given as the relevance flags
// of its items in rank order; `total_relevant` counts every relevant item in
// the judged universe, retrieved or not.

#include <cstddef>
#include <vector>

namespace seqret {

/// Mean of precision@k over the ranks k of relevant items, divided by the
/// total number of relevant items. Throws when total_relevant is 0.
double average_precision(const std::vector<bool>& ranked, std::size_t total_relevant);

/// 1 / rank of the first relevant item, 0 if none is retrieved.
double reciprocal_rank(const std::vector<bool>& ranked);

/// sum_{i < k} rel_i / log2(i + 2).
double dcg_at(const std::vector<bool>& ranked, std::size_t k);

/// DCG@k over the ideal DCG@k of min(k, total_relevant) relevant items.
/// Throws when total_relevant is 0.
double ndcg_at(const std::vector<bool>& ranked, std::size_t k, std::size_t total_relevant);

}  // namespace seqret
