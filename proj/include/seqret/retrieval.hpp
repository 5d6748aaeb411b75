#pragma once

// Hash, look up, rescore: corpus sequences are bucketed by codes of their
// self-model Fisher vectors; a query is hashed the same way (after its own
// unwarping) and only the sequences sharing one of its buckets are scored by
// the rescoring model, usually the cross-attention one.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "seqret/core.hpp"
#include "seqret/hashing.hpp"
#include "seqret/relevance.hpp"

namespace seqret {

enum class HashMethod { trained, random_hyperplane };
std::string to_string(HashMethod m);
HashMethod parse_hash_method(const std::string& name);

struct HashConfig {
  HashMethod method = HashMethod::trained;
  /// Code length R; 0 means the self model's hidden dimension.
  int bits = 0;
  int tables = 10;      // M
  int table_bits = 12;  // L
  HashNetConfig net;
  std::uint64_t seed = 0;
};

enum class RetrievalMode { hashed, fallback, exhaustive };
/// "hashed", "exhaustive-fallback", "exhaustive".
std::string to_string(RetrievalMode m);

struct Pipeline {
  Checkpoint self;
  HashMethod method = HashMethod::trained;
  HashNetParams net;       // trained method
  Eigen::MatrixXd planes;  // random-hyperplane method
  HashIndex index;
  /// Corpus ids left out because their gradient vanished.
  std::vector<std::string> excluded;

  HashCode code(const Eigen::VectorXd& fisher) const;
  /// Code of an unwarped query under the self model.
  HashCode query_code(const EventSequence& query) const;
};

struct PipelineBuild {
  Pipeline pipeline;
  std::vector<std::string> ids;  // indexed corpus ids in corpus order
  Eigen::MatrixXd vectors;       // their Fisher vectors as columns
  std::vector<HashCode> codes;
};

/// Fisher vectors of every corpus sequence under the self model, codes, and
/// the bucket index. Sequences with a vanishing gradient are excluded and
/// reported through `warn`.
PipelineBuild build_pipeline(const Corpus& corpus, const Checkpoint& self, const HashConfig& config,
                             const std::function<void(const std::string&)>& warn = {});

/// Rebuilds only the index from precomputed codes (used by sweeps over M, L).
HashIndex index_codes(const PipelineBuild& build, int tables, int table_bits, std::uint64_t seed);

struct RankedResult {
  std::string query_id;
  std::vector<std::pair<std::string, double>> items;  // score non-increasing, ties by ascending id
  std::size_t examined = 0;
  RetrievalMode mode = RetrievalMode::exhaustive;
};

/// Sorts by score descending then id ascending and keeps the first k.
void rank_items(std::vector<std::pair<std::string, double>>& items, std::size_t k);

/// `universe`, when given, restricts both the candidates and the fallback
/// scan to those ids. An empty candidate set falls back to scanning the
/// whole universe (or corpus) and is flagged.
RankedResult query_topk(const EventSequence& query, std::size_t k, const Pipeline& pipeline, const Scorer& rescorer,
                        const Corpus& corpus, const std::vector<std::string>* universe = nullptr);
RankedResult exhaustive_topk(const EventSequence& query, std::size_t k, const Corpus& corpus, const Scorer& scorer,
                             const std::vector<std::string>* universe = nullptr);

struct EvalConfig {
  /// Negatives sampled into each query's pool next to all its positives;
  /// 0 or less ranks against the whole corpus.
  int negatives = 100;
  std::uint64_t seed = 0;
};

struct EvalReport {
  double map = 0.0;
  double ndcg10 = 0.0;
  double ndcg20 = 0.0;
  double mrr = 0.0;
  double reduction = 0.0;
  std::size_t comparisons = 0;
  std::size_t universe = 0;
  std::size_t queries = 0;
  std::size_t fallbacks = 0;
  /// Queries left out of the averages because they have no positive.
  std::vector<std::string> skipped;
  std::vector<std::pair<std::string, double>> per_query_ap;
};

/// The ids ranked for `query`: all judged positives in the corpus plus
/// `negatives` sampled judged negatives (seeded by the query id).
std::vector<std::string> evaluation_pool(const std::string& query_id, const Corpus& corpus,
                                         const RelevanceJudgments& judgments, const EvalConfig& config);

struct Evaluation {
  EvalReport report;
  std::vector<RankedResult> results;
};

/// Ranks each query's pool, through the hash index when `pipeline` is given
/// and exhaustively otherwise. Unjudged ids count as non-relevant.
Evaluation evaluate_protocol(const std::vector<std::string>& query_ids, const Corpus& queries, const Corpus& corpus,
                             const RelevanceJudgments& judgments, const Pipeline* pipeline, const Scorer& rescorer,
                             const EvalConfig& config);

/// Averages over queries from ready rankings; the reduction factor is
/// 1 - sum(examined) / sum(universe sizes).
EvalReport summarize(const std::vector<RankedResult>& results, const std::vector<std::size_t>& universe_sizes,
                     const RelevanceJudgments& judgments, const Corpus& corpus);

/// `<query_id>\t<rank>\t<corpus_id>\t<score>\t<mode>` per line, rank from 1.
void write_results(const std::filesystem::path& path, const std::vector<RankedResult>& results);
std::string format_results(const std::vector<RankedResult>& results);
/// key=value lines, then `ap.<query_id>=...` per query.
void write_report(const std::filesystem::path& path, const EvalReport& report);
std::string format_report(const EvalReport& report);

/// Pipeline artifacts next to each other: index and hash parameters.
void save_pipeline(const std::filesystem::path& dir, const Pipeline& pipeline);
/// `self` must be the checkpoint the pipeline was built with.
Pipeline load_pipeline(const std::filesystem::path& dir, const Checkpoint& self);

}  // namespace seqret
