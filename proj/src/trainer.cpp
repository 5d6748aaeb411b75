#include "seqret/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "seqret/autodiff.hpp"
#include "seqret/dual.hpp"
#include "seqret/metrics.hpp"
#include "seqret/parallel.hpp"
#include "seqret/relevance.hpp"

namespace seqret {

double hinge_term(double s_pos, double s_neg, double delta) {
  const double h = s_neg - s_pos + delta;
  return h > 0.0 ? h : 0.0;
}

namespace {

struct Grads {
  Eigen::VectorXd theta;
  Eigen::RowVectorXd tau;
};

template <class S>
double part(const S& x) {
  if constexpr (std::is_same_v<S, Dual>) {
    return x.d;
  } else {
    return x;
  }
}

/// Gradient of log p(target | U(q)) (cross) or log p(target) (self) with the
/// unwarped query times tau as a leaf. target == nullptr scores U(q) itself;
/// q == nullptr scores target alone with no time leaf. On doubles the primal
/// gradient is returned; on duals with the parameter tangents set to
/// `direction`, the tangent (a Hessian-vector product).
template <class S>
Grads model_pass(const ModelParams& model, const EventSequence* target, const EventSequence* q,
                 const Eigen::RowVectorXd& tau, double eta, const Eigen::VectorXd* direction) {
  ad::Tape<S> tape;
  const auto leaves = make_model_leaves(tape, model, true, direction);
  const bool cross = model.config.variant == Variant::cross_attention;
  ad::Value<S> tau_leaf;
  ad::Value<S> ll;
  if (q == nullptr) {
    ll = log_likelihood_on_tape(leaves, model.config, constant_input(tape, *target), nullptr);
  } else {
    ad::Mat<S> tau_value = tau.cast<S>();
    tau_leaf = tape.leaf(std::move(tau_value));
    const SequenceInput<S> query{ad::shift(tau_leaf, S(eta)), ad::diff_cols(tau_leaf), q->marks()};
    const auto in = target != nullptr ? constant_input(tape, *target) : query;
    ll = log_likelihood_on_tape(leaves, model.config, in, cross ? &query : nullptr);
  }
  tape.backward(ll);

  Grads g;
  g.theta.resize(static_cast<Eigen::Index>(model.parameter_count()));
  Eigen::Index k = 0;
  for (const auto& leaf : leaves.ordered()) {
    const ad::Mat<S> m = tape.grad(leaf);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) g.theta(k++) = part(m(r, c));
    }
  }
  if (q != nullptr) {
    const ad::Mat<S> gt = tape.grad(tau_leaf);
    g.tau.resize(gt.cols());
    for (Eigen::Index i = 0; i < gt.cols(); ++i) g.tau(i) = part(gt(0, i));
  }
  return g;
}

struct QueryTimes {
  Eigen::RowVectorXd tau;
  double horizon = 0.0;
  bool separated = false;
};

/// U(t_i) - U(0) and U(T) - U(0) for the query.
QueryTimes query_times(const EventSequence& q, const UnwarpParams& unwarp) {
  if (!unwarp.enabled) return {q.times().transpose(), q.horizon, false};
  ad::Tape<double> tape;
  const auto leaves = make_unwarp_leaves(tape, unwarp, false);
  const auto u = unwarp_on_tape(tape, leaves, q, unwarp.config.grid_nodes, 0.0);
  return {u.times.value(), u.horizon.scalar(), u.separated};
}

struct SimGrad {
  double sim = 0.0;
  Eigen::RowVectorXd dtau;
  double dhorizon = 0.0;
};

SimGrad sim_pass(const EventSequence& q, const EventSequence& c, const QueryTimes& qt, double eta) {
  ad::Tape<double> tape;
  auto t = tape.leaf(Eigen::MatrixXd(qt.tau));
  auto h = tape.leaf(Eigen::MatrixXd::Constant(1, 1, qt.horizon));
  auto d = time_distance_on_tape(tape, ad::shift(t, eta), ad::shift(h, eta), c);
  tape.backward(d);
  return {-(d.scalar() + mark_distance(q, c)), -Eigen::RowVectorXd(tape.grad(t)), -tape.grad(h)(0, 0)};
}

double norm_or_throw(const Eigen::VectorXd& g, const std::string& id) {
  const double n = g.norm();
  if (!(n > 1e-12)) throw VanishingGradient("vanishing log-likelihood gradient for '" + id + "'");
  return n;
}

struct QueryOutcome {
  double ranking = 0.0;
  double penalty = 0.0;
  std::size_t pairs = 0;
  std::size_t active = 0;
  bool separated = false;
  Eigen::VectorXd grad_theta;
  Eigen::VectorXd grad_phi;
  /// Self variant: (distinct candidate slot, weighted direction) for deferred HVPs.
  std::vector<std::pair<std::size_t, Eigen::VectorXd>> deferred;
};

struct SelfCache {
  std::map<const EventSequence*, std::size_t> slot;
  std::vector<const EventSequence*> seqs;
  std::vector<Eigen::VectorXd> grads;
};

QueryOutcome process_query(const QueryPairs& qp, const Checkpoint& ck, const TrainConfig& config, double weight,
                           const SelfCache* cache) {
  const ModelParams& model = ck.model;
  const EventSequence& q = *qp.query;
  const bool cross = model.config.variant == Variant::cross_attention;
  const bool train_phi = config.train_unwarp && ck.unwarp.enabled;
  const auto n_theta = static_cast<Eigen::Index>(model.parameter_count());

  QueryOutcome out;
  out.grad_theta = Eigen::VectorXd::Zero(n_theta);
  const QueryTimes qt = query_times(q, ck.unwarp);
  out.separated = qt.separated;

  // Phase 1: gradients, kernel values, similarity and hinge weights.
  const Grads gq = model_pass<double>(model, nullptr, &q, qt.tau, qp.eta, nullptr);
  const double nq = norm_or_throw(gq.theta, q.id);
  const Eigen::VectorXd vq = gq.theta / nq;

  const std::size_t n = qp.candidates.size();
  std::vector<Eigen::VectorXd> vc(n);
  std::vector<double> nc(n), kappa(n), score(n);
  std::vector<SimGrad> sims(n);
  for (std::size_t i = 0; i < n; ++i) {
    const EventSequence& c = *qp.candidates[i];
    const Eigen::VectorXd g = cross ? model_pass<double>(model, &c, &q, qt.tau, qp.eta, nullptr).theta
                                    : cache->grads[cache->slot.at(&c)];
    nc[i] = norm_or_throw(g, c.id);
    vc[i] = g / nc[i];
    kappa[i] = vq.dot(vc[i]);
    sims[i] = sim_pass(q, c, qt, qp.eta);
    score[i] = kappa[i] + config.gamma * sims[i].sim;
  }

  std::vector<double> w(n, 0.0);
  out.pairs = qp.pairs.size();
  const double per_pair =
      config.average_pairs && !qp.pairs.empty() ? 1.0 / static_cast<double>(qp.pairs.size()) : 1.0;
  const double pw = weight * per_pair;
  for (const auto& [p, m] : qp.pairs) {
    const double h = hinge_term(score[static_cast<std::size_t>(p)], score[static_cast<std::size_t>(m)],
                                config.margin);
    if (h > 0.0) {
      out.ranking += per_pair * h;
      ++out.active;
      w[static_cast<std::size_t>(m)] += pw;
      w[static_cast<std::size_t>(p)] -= pw;
    }
  }

  // Phase 2: d kappa / d theta through Hessian-vector products, plus the
  // adjoints of the unwarped query times.
  Eigen::RowVectorXd adj_tau = Eigen::RowVectorXd::Zero(qt.tau.size());
  double adj_horizon = 0.0;
  Eigen::VectorXd query_dir = Eigen::VectorXd::Zero(n_theta);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    any = true;
    query_dir += w[i] * (vc[i] - kappa[i] * vq) / nq;
    const Eigen::VectorXd dir = w[i] * (vq - kappa[i] * vc[i]) / nc[i];
    if (cross) {
      const Grads h = model_pass<Dual>(model, qp.candidates[i], &q, qt.tau, qp.eta, &dir);
      out.grad_theta += h.theta;
      adj_tau += h.tau;
    } else {
      out.deferred.emplace_back(cache->slot.at(qp.candidates[i]), dir);
    }
    adj_tau += w[i] * config.gamma * sims[i].dtau;
    adj_horizon += w[i] * config.gamma * sims[i].dhorizon;
  }
  if (any) {
    const Grads h = model_pass<Dual>(model, nullptr, &q, qt.tau, qp.eta, &query_dir);
    out.grad_theta += h.theta;
    adj_tau += h.tau;
  }

  // Phase 3: push the time adjoints and the unbiasedness term through U.
  if (ck.unwarp.enabled) {
    if (train_phi) {
      ad::Tape<double> tape;
      const auto leaves = make_unwarp_leaves(tape, ck.unwarp, true);
      const auto u = unwarp_on_tape(tape, leaves, q, ck.unwarp.config.grid_nodes, 0.0);
      auto pen = unbiasedness_penalty_on_tape(tape, leaves, ck.unwarp.config.grid_nodes, ck.unwarp.config.reg_sigma,
                                              q.horizon);
      out.penalty = pen.scalar();
      auto obj = ad::add(ad::dot(u.times, tape.constant(Eigen::MatrixXd(adj_tau))),
                         ad::scale(u.horizon, adj_horizon));
      obj = ad::add(obj, ad::scale(pen, weight * config.unbiased_weight));
      tape.backward(obj);
      const std::vector<ad::Value<double>> ls{leaves.w1, leaves.b1, leaves.w2, leaves.b2, leaves.w3, leaves.b3};
      out.grad_phi.resize(static_cast<Eigen::Index>(ck.unwarp.parameter_count()));
      Eigen::Index k = 0;
      for (const auto& l : ls) {
        const Eigen::MatrixXd g = tape.grad(l);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          for (Eigen::Index c = 0; c < g.cols(); ++c) out.grad_phi(k++) = g(r, c);
        }
      }
    } else {
      out.penalty = unbiasedness_penalty(ck.unwarp, q.horizon);
    }
  }
  return out;
}

}  // namespace

LossResult pairwise_loss(const std::vector<QueryPairs>& batch, const Checkpoint& params, const TrainConfig& config,
                         double query_weight) {
  const ModelParams& model = params.model;
  const bool cross = model.config.variant == Variant::cross_attention;
  const bool train_phi = config.train_unwarp && params.unwarp.enabled;

  SelfCache cache;
  if (!cross) {
    for (const auto& qp : batch) {
      for (const auto* c : qp.candidates) {
        if (cache.slot.emplace(c, cache.seqs.size()).second) cache.seqs.push_back(c);
      }
    }
    cache.grads.resize(cache.seqs.size());
    parallel_for(cache.seqs.size(), [&](std::size_t i) { cache.grads[i] = grad_log_likelihood(*cache.seqs[i], nullptr, model); });
  }

  std::vector<QueryOutcome> outcomes(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    outcomes[i] = process_query(batch[i], params, config, query_weight, cross ? nullptr : &cache);
  });

  LossResult r;
  r.grad_theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.parameter_count()));
  r.grad_phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(train_phi ? params.unwarp.parameter_count() : 0));
  std::vector<Eigen::VectorXd> self_dirs(cache.seqs.size());
  for (const auto& o : outcomes) {
    r.ranking += query_weight * o.ranking;
    r.unbiased += query_weight * config.unbiased_weight * o.penalty;
    r.pairs += o.pairs;
    r.active_pairs += o.active;
    r.separated = r.separated || o.separated;
    r.grad_theta += o.grad_theta;
    if (train_phi) r.grad_phi += o.grad_phi;
    for (const auto& [slot, dir] : o.deferred) {
      if (self_dirs[slot].size() == 0) {
        self_dirs[slot] = dir;
      } else {
        self_dirs[slot] += dir;
      }
    }
  }
  if (!cross) {
    std::vector<Eigen::VectorXd> hvps(cache.seqs.size());
    parallel_for(cache.seqs.size(), [&](std::size_t i) {
      if (self_dirs[i].size() == 0) return;
      hvps[i] = model_pass<Dual>(model, cache.seqs[i], nullptr, Eigen::RowVectorXd(), 0.0, &self_dirs[i])
                    .theta;
    });
    for (const auto& h : hvps) {
      if (h.size() != 0) r.grad_theta += h;
    }
  }

  const Eigen::VectorXd theta = model.flatten();
  r.l2 = config.l2 * theta.squaredNorm();
  r.grad_theta += 2.0 * config.l2 * theta;
  if (train_phi) {
    const Eigen::VectorXd phi = flatten(params.unwarp.blocks());
    r.l2 += config.l2 * phi.squaredNorm();
    r.grad_phi += 2.0 * config.l2 * phi;
  }
  r.value = r.ranking + r.unbiased + r.l2;
  return r;
}

QueryPairs make_query_pairs(const EventSequence& query, const Corpus& corpus, const RelevanceJudgments& judgments,
                            const TrainConfig& config, Rng& rng) {
  std::vector<const EventSequence*> pos;
  std::vector<const EventSequence*> neg;
  for (const auto& id : judgments.positives(query.id)) {
    if (corpus.contains(id)) pos.push_back(&corpus.at(id));
  }
  for (const auto& id : judgments.negatives(query.id)) {
    if (corpus.contains(id)) neg.push_back(&corpus.at(id));
  }
  // Uniform sample without replacement (partial Fisher-Yates).
  const std::size_t k = std::min<std::size_t>(neg.size(), static_cast<std::size_t>(std::max(config.negatives, 0)));
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, neg.size() - 1);
    std::swap(neg[i], neg[pick(rng)]);
  }
  neg.resize(k);

  std::vector<std::size_t> flat(pos.size() * neg.size());
  std::iota(flat.begin(), flat.end(), std::size_t{0});
  const std::size_t cap = static_cast<std::size_t>(std::max(config.max_pairs, 0));
  if (flat.size() > cap) {
    for (std::size_t i = 0; i < cap; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, flat.size() - 1);
      std::swap(flat[i], flat[pick(rng)]);
    }
    flat.resize(cap);
    std::sort(flat.begin(), flat.end());
  }

  QueryPairs qp;
  qp.query = &query;
  std::vector<int> slot_pos(pos.size(), -1), slot_neg(neg.size(), -1);
  auto slot = [&](std::vector<int>& slots, const std::vector<const EventSequence*>& src, std::size_t i) {
    if (slots[i] < 0) {
      slots[i] = static_cast<int>(qp.candidates.size());
      qp.candidates.push_back(src[i]);
    }
    return slots[i];
  };
  for (std::size_t f : flat) {
    const std::size_t p = f / neg.size();
    const std::size_t m = f % neg.size();
    const int a = slot(slot_pos, pos, p);
    const int b = slot(slot_neg, neg, m);
    qp.pairs.emplace_back(a, b);
  }
  return qp;
}

EpochLoss epoch_loss(const std::vector<std::string>& query_ids, const Corpus& queries, const Corpus& corpus,
                     const RelevanceJudgments& judgments, const Checkpoint& params, const TrainConfig& config,
                     Rng& rng) {
  EpochLoss out;
  std::vector<QueryPairs> batch;
  for (const auto& id : query_ids) {
    auto qp = make_query_pairs(queries.at(id), corpus, judgments, config, rng);
    if (qp.pairs.empty()) {
      ++out.skipped;
      continue;
    }
    batch.push_back(std::move(qp));
  }
  out.loss = pairwise_loss(batch, params, config, 1.0);
  return out;
}

void adam_step(const std::vector<ParamBlock>& params, const Eigen::VectorXd& grad, AdamState& state, double lr,
               double beta1, double beta2, double epsilon) {
  std::size_t total = 0;
  for (const auto& b : params) {
    const auto n = static_cast<Eigen::Index>(b.value->size());
    if (!grad.segment(static_cast<Eigen::Index>(total), n).allFinite()) {
      throw NonFiniteGradient("non-finite gradient in parameter block '" + b.name + "'");
    }
    total += static_cast<std::size_t>(n);
  }
  if (static_cast<std::size_t>(grad.size()) != total) {
    throw std::invalid_argument("adam_step: gradient size does not match the parameter blocks");
  }
  if (state.m.size() != grad.size()) {
    state.m = Eigen::VectorXd::Zero(grad.size());
    state.v = Eigen::VectorXd::Zero(grad.size());
    state.step = 0;
  }
  ++state.step;
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = beta2 * state.v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  const Eigen::VectorXd update =
      lr * ((state.m / c1).array() / ((state.v / c2).array().sqrt() + epsilon)).matrix();

  Eigen::VectorXd flat = flatten(as_const(params));
  flat -= update;
  unflatten(std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())), params);
}

double pooled_map(const std::vector<std::string>& query_ids, const Corpus& queries, const Corpus& corpus,
                  const RelevanceJudgments& judgments, const Checkpoint& params, double gamma, int negatives,
                  std::uint64_t seed) {
  const Scorer scorer(params, {gamma, true, true, {}});
  std::vector<double> ap(query_ids.size(), -1.0);
  parallel_for(query_ids.size(), [&](std::size_t qi) {
    const auto& q = queries.at(query_ids[qi]);
    Rng rng(derive_seed(seed, q.id));
    TrainConfig pool_cfg;
    pool_cfg.negatives = negatives;
    pool_cfg.max_pairs = std::numeric_limits<int>::max();
    const auto qp = make_query_pairs(q, corpus, judgments, pool_cfg, rng);
    if (qp.pairs.empty()) return;
    const auto prepared = scorer.prepare(q);
    std::vector<std::pair<double, const EventSequence*>> scored;
    for (const auto* c : qp.candidates) scored.emplace_back(scorer.score(prepared, *c).score, c);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second->id < b.second->id;
    });
    std::vector<bool> rel;
    std::size_t total = 0;
    for (const auto& [s, c] : scored) {
      rel.push_back(judgments.is_relevant(q.id, c->id));
      total += rel.back() ? 1 : 0;
    }
    ap[qi] = average_precision(rel, total);
  });
  double sum = 0.0;
  std::size_t n = 0;
  for (double a : ap) {
    if (a >= 0.0) {
      sum += a;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

TrainResult train(const Corpus& queries, const Corpus& corpus, const RelevanceJudgments& judgments,
                  const std::vector<std::string>& train_ids, const std::vector<std::string>& valid_ids,
                  Checkpoint init, const TrainConfig& config, const std::function<void(const CurveRow&)>& on_epoch) {
  if (config.margin < 0.0 || config.learning_rate <= 0.0 || config.batch_size < 1) {
    throw std::invalid_argument("train: margin must be >= 0, learning rate > 0 and batch size >= 1");
  }
  TrainResult result;
  Checkpoint current = std::move(init);
  const bool train_phi = config.train_unwarp && current.unwarp.enabled;
  const std::uint64_t valid_seed = derive_seed(config.seed, "valid");
  auto validate = [&](const Checkpoint& ck) {
    return valid_ids.empty() ? 0.0
                             : pooled_map(valid_ids, queries, corpus, judgments, ck, config.gamma,
                                          config.valid_negatives, valid_seed);
  };

  std::vector<std::string> usable;
  for (const auto& id : train_ids) {
    if (judgments.positives(id).empty() || judgments.negatives(id).empty()) {
      ++result.skipped_queries;
    } else {
      usable.push_back(id);
    }
  }

  Rng order_rng(derive_seed(config.seed, "order"));
  Rng negative_rng(derive_seed(config.seed, "negatives"));
  Rng noise_rng(derive_seed(config.seed, "eta"));
  AdamState theta_state, phi_state;

  auto make_batch = [&](const std::vector<std::string>& ids, Rng& rng, bool noise) {
    std::vector<QueryPairs> batch;
    for (const auto& id : ids) {
      auto qp = make_query_pairs(queries.at(id), corpus, judgments, config, rng);
      if (noise && config.unwarp_noise && current.unwarp.enabled && current.unwarp.config.noise_scale > 0.0) {
        qp.eta = std::normal_distribution<double>(0.0, current.unwarp.config.noise_scale)(noise_rng);
      }
      batch.push_back(std::move(qp));
    }
    return batch;
  };

  {
    Rng initial_rng(derive_seed(config.seed, "initial-loss"));
    const auto batch = make_batch(usable, initial_rng, false);
    const double w = usable.empty() ? 0.0 : 1.0 / static_cast<double>(usable.size());
    const double loss = usable.empty() ? 0.0 : pairwise_loss(batch, current, config, w).value;
    result.curve.push_back({0, loss, validate(current)});
  }
  result.best = current;
  double best_map = result.curve[0].valid_map;
  if (on_epoch) on_epoch(result.curve[0]);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::string> order = usable;
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::vector<std::string> ids(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + config.batch_size)));
      const auto batch = make_batch(ids, negative_rng, true);
      const LossResult r = pairwise_loss(batch, current, config, 1.0 / static_cast<double>(ids.size()));
      if (!std::isfinite(r.value) || r.value > config.divergence_limit) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ", batch " << batches << ": loss " << r.value
            << " (ranking " << r.ranking << ", unbiased " << r.unbiased << ", l2 " << r.l2 << ")";
        throw TrainingDiverged(msg.str());
      }
      adam_step(current.model.blocks(), r.grad_theta, theta_state, config.learning_rate, config.beta1, config.beta2,
                config.epsilon);
      if (train_phi) {
        adam_step(current.unwarp.blocks(), r.grad_phi, phi_state, config.learning_rate, config.beta1, config.beta2,
                  config.epsilon);
      }
      loss_sum += r.value;
      ++batches;
    }
    CurveRow row{epoch, batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches), validate(current)};
    result.curve.push_back(row);
    // Without validation queries the latest model is the best one.
    if (row.valid_map > best_map || valid_ids.empty()) {
      best_map = row.valid_map;
      result.best = current;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(row);
  }
  result.last = current;
  return result;
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<CurveRow>& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch\tloss\tvalid_map\n";
  char buf[128];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%d\t%.17g\t%.17g\n", r.epoch, r.loss, r.valid_map);
    out << buf;
  }
}

}  // namespace seqret
