#pragma once

// Relevance between a query and a corpus sequence:
//   s(q, c) = kappa(q, c) + gamma * Sim_U(q, c)
// where kappa is the cosine of (optionally preconditioned) log-likelihood
// gradients and Sim_U = -(time distance + mark distance) on the unwarped query.

#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "seqret/autodiff.hpp"
#include "seqret/core.hpp"
#include "seqret/mtpp.hpp"
#include "seqret/unwarp.hpp"

namespace seqret {

/// Positional mark mismatches over the common prefix plus the length difference.
double mark_distance(const EventSequence& q, const EventSequence& c);

/// sum_{i <= min} |t^q_i - t^c_i| + sum over unmatched events of (T - t_i).
/// Throws DataError if an event lies beyond T.
double time_distance(const EventSequence& q_unwarped, const EventSequence& c, double horizon);
/// Uses T = max of the two horizons.
double time_distance(const EventSequence& q_unwarped, const EventSequence& c);

/// -(time distance + mark distance) after unwarping q, T = max(U(T_q), T_c).
double sim_score(const EventSequence& q, const EventSequence& c, const UnwarpParams& unwarp);
/// Same, with q already unwarped.
double sim_score_unwarped(const EventSequence& q_unwarped, const EventSequence& c);

/// Time distance with the query times and horizon on a tape.
template <class S>
ad::Value<S> time_distance_on_tape(ad::Tape<S>& tape, ad::Value<S> q_times, ad::Value<S> q_horizon,
                                   const EventSequence& c) {
  using namespace ad;
  const Eigen::Index nq = q_times.cols();
  const auto nc = static_cast<Eigen::Index>(c.size());
  const Eigen::Index m = std::min(nq, nc);
  Mat<S> tc(1, nc);
  for (Eigen::Index i = 0; i < nc; ++i) tc(0, i) = c.events[static_cast<std::size_t>(i)].time;

  const bool query_horizon = primal(q_horizon.scalar()) >= c.horizon;
  auto horizon = query_horizon ? q_horizon : tape.constant(Mat<S>::Constant(1, 1, S(c.horizon)));
  auto total = tape.constant(Mat<S>::Zero(1, 1));
  if (m > 0) total = sum(abs(sub(cols(q_times, 0, m), tape.constant(tc.leftCols(m)))));
  if (nq > m) {
    total = add(total, sub(scale(horizon, S(static_cast<double>(nq - m))), sum(cols(q_times, m, nq - m))));
  } else if (nc > m) {
    S rest(0.0);
    for (Eigen::Index i = m; i < nc; ++i) rest += tc(0, i);
    total = add(total, shift(scale(horizon, S(static_cast<double>(nc - m))), S(-rest)));
  }
  return total;
}

enum class FisherMode { identity, diagonal };

struct FisherConfig {
  FisherMode mode = FisherMode::identity;
  /// Estimated diagonal of the information matrix (diagonal mode only).
  Eigen::VectorXd diagonal;
  double damping = 1e-6;
};

class VanishingGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unit-norm retrieval embedding.
struct FisherVector {
  Eigen::VectorXd v;
  std::string id;
  Variant variant = Variant::self_attention;
};

/// I^{-1/2} g under the configured information matrix.
Eigen::VectorXd precondition(const Eigen::VectorXd& grad, const FisherConfig& config);

/// Normalizes a raw gradient; throws VanishingGradient below norm 1e-12.
FisherVector fisher_vector(const Eigen::VectorXd& grad, const FisherConfig& config, std::string id = {},
                           Variant variant = Variant::self_attention);
/// Gradient of log p(seq | conditioning) then normalized. Unwarping is the caller's job.
FisherVector fisher_vector(const EventSequence& seq, const EventSequence* conditioning, const ModelParams& model,
                           const FisherConfig& config);

/// Mean squared gradient over `seqs` (self-conditioned for the cross variant).
Eigen::VectorXd estimate_fisher_diagonal(const std::vector<EventSequence>& seqs, const ModelParams& model);

/// Query-side and corpus-side vectors for one pair. Self variant: both are
/// self-model gradients. Cross variant: the query scored conditioned on itself
/// and the corpus sequence conditioned on the query. q is unwarped inside.
double fisher_kernel(const EventSequence& q, const EventSequence& c, const UnwarpParams& unwarp,
                     const ModelParams& model, const FisherConfig& config);

double relevance_score(const EventSequence& q, const EventSequence& c, const UnwarpParams& unwarp,
                       const ModelParams& model, const FisherConfig& config, double gamma);

struct ScorerOptions {
  double gamma = 0.1;
  bool use_kernel = true;
  bool use_sim = true;
  FisherConfig fisher;
};

struct ScoreParts {
  double kappa = 0.0;
  double sim = 0.0;
  double score = 0.0;
};

/// Scores many corpus sequences against one query, unwarping the query and
/// computing its Fisher vector once.
class Scorer {
 public:
  struct Query {
    EventSequence original;
    EventSequence unwarped;
    Eigen::VectorXd vector;  // empty when the kernel is disabled
  };

  Scorer(Checkpoint checkpoint, ScorerOptions options);

  Query prepare(const EventSequence& q) const;
  /// Corpus-side Fisher vector; query-independent for the self variant.
  Eigen::VectorXd corpus_vector(const Query& q, const EventSequence& c) const;
  /// `cached` may hold a precomputed corpus_vector.
  ScoreParts score(const Query& q, const EventSequence& c, const Eigen::VectorXd* cached = nullptr) const;

  const Checkpoint& checkpoint() const { return ckpt_; }
  const ScorerOptions& options() const { return options_; }

 private:
  Checkpoint ckpt_;
  ScorerOptions options_;
};

}  // namespace seqret
