#pragma once

// Pairwise margin ranking loss over (query, positive, negative) triples,
//   L = sum_q sum_{c+, c-} [s(q, c-) - s(q, c+) + delta]_+
//       + lambda_u * unbiasedness(phi) + lambda_2 * (|theta|^2 + |phi|^2),
// trained jointly over the model theta and the unwarp phi with Adam.
//
// kappa is a cosine of log-likelihood gradients, so its gradient involves
// Hessian-vector products. They are computed by running the reverse tape on
// dual numbers with the tangent seeded along the needed direction.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "seqret/core.hpp"
#include "seqret/mtpp.hpp"
#include "seqret/params.hpp"
#include "seqret/unwarp.hpp"

namespace seqret {

struct TrainConfig {
  double margin = 0.5;
  double gamma = 0.1;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 16;
  int negatives = 100;
  /// Cap on (c+, c-) pairs per query; pairs beyond it are subsampled.
  int max_pairs = 1000;
  double unbiased_weight = 1e-3;
  double l2 = 1e-3;
  int epochs = 10;
  /// Divide each query's hinge sum by its pair count.
  bool average_pairs = true;
  bool train_unwarp = true;
  /// Draw the unwarp offset eta during training.
  bool unwarp_noise = true;
  double divergence_limit = 1e6;
  /// Negatives sampled per validation query for the per-epoch MAP.
  int valid_negatives = 100;
  std::uint64_t seed = 0;
};

/// [s_neg - s_pos + delta]_+ ; at exact equality the zero side is taken.
double hinge_term(double s_pos, double s_neg, double delta);

/// One query with its candidate corpus sequences and the (positive index,
/// negative index) pairs into `candidates`.
struct QueryPairs {
  const EventSequence* query = nullptr;
  std::vector<const EventSequence*> candidates;
  std::vector<std::pair<int, int>> pairs;
  /// Additive unwarp offset eta for this pass.
  double eta = 0.0;
};

struct LossResult {
  double value = 0.0;
  double ranking = 0.0;
  double unbiased = 0.0;
  double l2 = 0.0;
  Eigen::VectorXd grad_theta;
  Eigen::VectorXd grad_phi;
  std::size_t pairs = 0;
  std::size_t active_pairs = 0;
  bool separated = false;
};

/// Loss and gradient over a set of queries. With `query_weight` w the loss is
/// w * sum_q (ranking_q + lambda_u * penalty_q) + lambda_2 * (|theta|^2 + |phi|^2).
LossResult pairwise_loss(const std::vector<QueryPairs>& batch, const Checkpoint& params, const TrainConfig& config,
                         double query_weight = 1.0);

/// Builds pairs for `query_ids` (negatives sampled with `rng`) and evaluates
/// the loss. Queries without positives or negatives are skipped and counted.
struct EpochLoss {
  LossResult loss;
  std::size_t skipped = 0;
};
EpochLoss epoch_loss(const std::vector<std::string>& query_ids, const Corpus& queries, const Corpus& corpus,
                     const RelevanceJudgments& judgments, const Checkpoint& params, const TrainConfig& config,
                     Rng& rng);

/// Samples the negatives and the pair subset for one query.
QueryPairs make_query_pairs(const EventSequence& query, const Corpus& corpus, const RelevanceJudgments& judgments,
                            const TrainConfig& config, Rng& rng);

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
};

/// Bias-corrected Adam update of the blocks from a flat gradient in block
/// order. Throws NonFiniteGradient naming the offending block without
/// touching any parameter.
void adam_step(const std::vector<ParamBlock>& params, const Eigen::VectorXd& grad, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

struct CurveRow {
  int epoch = 0;
  double loss = 0.0;
  double valid_map = 0.0;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<CurveRow> curve;
  int best_epoch = 0;
  std::size_t skipped_queries = 0;
};

/// Row 0 is the initial model; row e the mean batch loss of epoch e and the
/// validation MAP after it. The checkpoint with the best validation MAP is kept
/// (the last one when there are no validation queries).
TrainResult train(const Corpus& queries, const Corpus& corpus, const RelevanceJudgments& judgments,
                  const std::vector<std::string>& train_ids, const std::vector<std::string>& valid_ids,
                  Checkpoint init, const TrainConfig& config,
                  const std::function<void(const CurveRow&)>& on_epoch = {});

/// Mean AP over `query_ids`, each ranked over its positives plus up to
/// `negatives` sampled negatives.
double pooled_map(const std::vector<std::string>& query_ids, const Corpus& queries, const Corpus& corpus,
                  const RelevanceJudgments& judgments, const Checkpoint& params, double gamma, int negatives,
                  std::uint64_t seed);

void write_loss_curve(const std::filesystem::path& path, const std::vector<CurveRow>& curve);

}  // namespace seqret
