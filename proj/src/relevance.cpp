#include "seqret/relevance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace seqret {

double mark_distance(const EventSequence& q, const EventSequence& c) {
  const std::size_t m = std::min(q.size(), c.size());
  double d = 0.0;
  for (std::size_t i = 0; i < m; ++i) d += q.events[i].mark != c.events[i].mark ? 1.0 : 0.0;
  return d + static_cast<double>(std::max(q.size(), c.size()) - m);
}

double time_distance(const EventSequence& q_unwarped, const EventSequence& c, double horizon) {
  for (const auto* s : {&q_unwarped, &c}) {
    if (!s->empty() && s->events.back().time > horizon) {
      throw DataError("time_distance: event of '" + s->id + "' lies beyond T");
    }
  }
  const std::size_t m = std::min(q_unwarped.size(), c.size());
  double d = 0.0;
  for (std::size_t i = 0; i < m; ++i) d += std::abs(q_unwarped.events[i].time - c.events[i].time);
  const EventSequence& longer = q_unwarped.size() > m ? q_unwarped : c;
  for (std::size_t i = m; i < longer.size(); ++i) d += horizon - longer.events[i].time;
  return d;
}

double time_distance(const EventSequence& q_unwarped, const EventSequence& c) {
  return time_distance(q_unwarped, c, std::max(q_unwarped.horizon, c.horizon));
}

double sim_score_unwarped(const EventSequence& q_unwarped, const EventSequence& c) {
  return -(time_distance(q_unwarped, c) + mark_distance(q_unwarped, c));
}

double sim_score(const EventSequence& q, const EventSequence& c, const UnwarpParams& unwarp) {
  return sim_score_unwarped(unwarp_sequence(q, unwarp).sequence, c);
}

Eigen::VectorXd precondition(const Eigen::VectorXd& grad, const FisherConfig& config) {
  if (config.mode == FisherMode::identity) return grad;
  if (config.diagonal.size() != grad.size()) {
    throw std::invalid_argument("fisher diagonal has " + std::to_string(config.diagonal.size()) +
                                " entries, gradient has " + std::to_string(grad.size()));
  }
  const Eigen::ArrayXd denom = config.diagonal.array() + config.damping;
  if ((denom <= 0.0).any()) throw std::invalid_argument("fisher diagonal plus damping must be positive");
  return (grad.array() / denom.sqrt()).matrix();
}

FisherVector fisher_vector(const Eigen::VectorXd& grad, const FisherConfig& config, std::string id,
                           Variant variant) {
  Eigen::VectorXd v = precondition(grad, config);
  const double norm = v.norm();
  if (!(norm > 1e-12)) {
    throw VanishingGradient("vanishing log-likelihood gradient" + (id.empty() ? std::string() : " for '" + id + "'"));
  }
  return {v / norm, std::move(id), variant};
}

FisherVector fisher_vector(const EventSequence& seq, const EventSequence* conditioning, const ModelParams& model,
                           const FisherConfig& config) {
  return fisher_vector(grad_log_likelihood(seq, conditioning, model), config, seq.id, model.config.variant);
}

Eigen::VectorXd estimate_fisher_diagonal(const std::vector<EventSequence>& seqs, const ModelParams& model) {
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.parameter_count()));
  if (seqs.empty()) return diag;
  const bool cross = model.config.variant == Variant::cross_attention;
  for (const auto& s : seqs) diag += grad_log_likelihood(s, cross ? &s : nullptr, model).array().square().matrix();
  return diag / static_cast<double>(seqs.size());
}

double fisher_kernel(const EventSequence& q, const EventSequence& c, const UnwarpParams& unwarp,
                     const ModelParams& model, const FisherConfig& config) {
  Scorer scorer({model, unwarp}, {0.0, true, false, config});
  return scorer.score(scorer.prepare(q), c).kappa;
}

double relevance_score(const EventSequence& q, const EventSequence& c, const UnwarpParams& unwarp,
                       const ModelParams& model, const FisherConfig& config, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("relevance_score: gamma must be nonnegative");
  Scorer scorer({model, unwarp}, {gamma, true, true, config});
  return scorer.score(scorer.prepare(q), c).score;
}

Scorer::Scorer(Checkpoint checkpoint, ScorerOptions options)
    : ckpt_(std::move(checkpoint)), options_(std::move(options)) {
  if (options_.gamma < 0.0) throw std::invalid_argument("Scorer: gamma must be nonnegative");
}

Scorer::Query Scorer::prepare(const EventSequence& q) const {
  if (q.empty()) throw std::invalid_argument("Scorer: empty query '" + q.id + "'");
  Query out{q, unwarp_sequence(q, ckpt_.unwarp).sequence, {}};
  if (options_.use_kernel) {
    const bool cross = ckpt_.model.config.variant == Variant::cross_attention;
    out.vector = fisher_vector(out.unwarped, cross ? &out.unwarped : nullptr, ckpt_.model, options_.fisher).v;
  }
  return out;
}

Eigen::VectorXd Scorer::corpus_vector(const Query& q, const EventSequence& c) const {
  const bool cross = ckpt_.model.config.variant == Variant::cross_attention;
  return fisher_vector(c, cross ? &q.unwarped : nullptr, ckpt_.model, options_.fisher).v;
}

ScoreParts Scorer::score(const Query& q, const EventSequence& c, const Eigen::VectorXd* cached) const {
  ScoreParts p;
  if (options_.use_kernel) {
    p.kappa = cached != nullptr ? q.vector.dot(*cached) : q.vector.dot(corpus_vector(q, c));
  }
  if (options_.use_sim) p.sim = sim_score_unwarped(q.unwarped, c);
  p.score = p.kappa + options_.gamma * p.sim;
  return p;
}

}  // namespace seqret
