#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace seqret {

/// Raised for malformed input files and violated data invariants.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Event {
  double time = 0.0;
  int mark = 0;
};

/// Ordered events observed on (0, horizon].
struct EventSequence {
  std::string id;
  std::vector<Event> events;
  double horizon = 0.0;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
  Eigen::VectorXd times() const;
  std::vector<int> marks() const;
};

/// Throws DataError unless times are nonnegative, strictly increasing, no
/// later than the horizon, and every mark lies in [0, mark_count).
void validate(const EventSequence& seq, int mark_count);

/// Gaps t_i - t_{i-1} with t_0 = 0.
std::vector<double> inter_arrival_times(const EventSequence& seq);

/// Immutable keyed collection of sequences in file order.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<EventSequence> sequences, int mark_count);

  std::size_t size() const { return sequences_.size(); }
  bool empty() const { return sequences_.empty(); }
  int mark_count() const { return mark_count_; }
  const EventSequence& operator[](std::size_t i) const { return sequences_[i]; }
  const std::vector<EventSequence>& sequences() const { return sequences_; }
  auto begin() const { return sequences_.begin(); }
  auto end() const { return sequences_.end(); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  /// Position of `id`; throws DataError for unknown ids.
  std::size_t index_of(const std::string& id) const;
  const EventSequence& at(const std::string& id) const { return sequences_[index_of(id)]; }
  double max_horizon() const;

 private:
  std::vector<EventSequence> sequences_;
  std::unordered_map<std::string, std::size_t> index_;
  int mark_count_ = 0;
};

struct LoadOptions {
  /// Divide every time and horizon by the largest horizon in the file.
  bool normalize_time = false;
};

/// Reads one JSON record per line: {"id", "horizon", "events": [[t, m], ...]}.
Corpus load_corpus(const std::filesystem::path& path, int mark_count, const LoadOptions& options = {});
Corpus parse_corpus(const std::string& text, int mark_count, const LoadOptions& options = {});
/// Writes records with keys in the order id, horizon, events.
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
std::string format_corpus(const Corpus& corpus);

/// Binary labels y(q, c) in {+1, -1}.
class RelevanceJudgments {
 public:
  void set(const std::string& query, const std::string& corpus_id, int label);
  /// +1, -1, or 0 when the pair is unjudged.
  int label(const std::string& query, const std::string& corpus_id) const;
  bool is_relevant(const std::string& query, const std::string& corpus_id) const {
    return label(query, corpus_id) > 0;
  }
  const std::vector<std::string>& positives(const std::string& query) const;
  const std::vector<std::string>& negatives(const std::string& query) const;
  std::vector<std::string> query_ids() const;
  std::size_t size() const { return labels_.size(); }

  /// Every referenced id must exist in the given collections.
  void validate(const Corpus& queries, const Corpus& corpus) const;

 private:
  std::map<std::pair<std::string, std::string>, int> labels_;
  std::map<std::string, std::vector<std::string>> positives_;
  std::map<std::string, std::vector<std::string>> negatives_;
};

/// Lines of `<query_id>\t<corpus_id>\t<+1|-1>`.
RelevanceJudgments load_judgments(const std::filesystem::path& path);
RelevanceJudgments parse_judgments(const std::string& text);
void save_judgments(const std::filesystem::path& path, const RelevanceJudgments& judgments,
                    const Corpus& queries, const Corpus& corpus);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> valid;
  std::vector<std::string> test;
};

/// Seeded shuffle then floor-sized train/valid partitions; the remainder is test.
DatasetSplit split_queries(const std::vector<std::string>& query_ids,
                           const std::array<double, 3>& fractions, std::uint64_t seed);

}  // namespace seqret
