#include "doctest.h"
#include "seqret/relevance.hpp"
#include "test_util.hpp"

using namespace seqret;
using seqret::testing::random_sequence;

namespace {

EventSequence seq(std::vector<Event> events, double horizon, std::string id = "s") {
  return {std::move(id), std::move(events), horizon};
}

ModelParams trained_like(Variant v, std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig cfg;
  cfg.variant = v;
  cfg.dim = 8;
  cfg.marks = 4;
  cfg.max_len = 64;
  return ModelParams::init(cfg, rng, 0.3);
}

}  // namespace

TEST_CASE("mark distance") {
  const auto a = seq({{1, 0}, {2, 1}}, 3);
  const auto b = seq({{1, 0}, {2, 2}, {3, 1}}, 4);
  CHECK(mark_distance(a, a) == 0.0);
  CHECK(mark_distance(a, b) == 2.0);
  CHECK(mark_distance(b, a) == 2.0);
  const auto c = seq({{1, 2}, {2, 3}, {3, 2}}, 4);
  const auto d = seq({{1, 0}, {2, 1}, {3, 0}}, 4);
  CHECK(mark_distance(c, d) == 3.0);
}

TEST_CASE("time distance") {
  const auto q = seq({{1, 0}, {2, 0}}, 2.5);
  const auto c = seq({{1, 0}, {3, 0}, {4, 0}}, 5);
  CHECK(time_distance(q, q) == 0.0);
  CHECK(time_distance(q, c, 5.0) == 2.0);
  CHECK(time_distance(q, c) == 2.0);
  CHECK(time_distance(seq({{1, 0}}, 1), seq({{1, 0}}, 10), 10.0) == 0.0);
  CHECK_THROWS_AS(time_distance(q, c, 3.5), DataError);
}

TEST_CASE("sim score") {
  const auto q = seq({{1, 0}, {2, 1}}, 2.5);
  const auto c = seq({{1, 0}, {3, 2}, {4, 1}}, 5);
  CHECK(sim_score(q, q, UnwarpParams::identity()) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(sim_score(q, c, UnwarpParams::identity()) == doctest::Approx(-4.0).epsilon(1e-12));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    CHECK(sim_score(random_sequence(rng, 1 + i % 7, 3), random_sequence(rng, 1 + i % 5, 3),
                    UnwarpParams::identity()) <= 0.0);
  }
}

TEST_CASE("sim worsens as a corpus event moves away from its match") {
  const auto q = seq({{1, 0}, {2, 1}, {3, 0}}, 10);
  double prev = 1.0;
  for (double t : {2.0, 2.3, 2.6, 2.9}) {
    const auto c = seq({{1, 0}, {t, 1}, {3.5, 0}}, 10);
    const double s = sim_score(q, c, UnwarpParams::identity());
    CHECK(s < prev);
    prev = s;
  }
}

TEST_CASE("time distance on tape matches and differentiates") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_sequence(rng, 1 + trial % 6, 3);
    const auto c = random_sequence(rng, 1 + (trial * 7) % 5, 3);
    ad::Tape<double> tape;
    auto t = tape.leaf(Eigen::MatrixXd(q.times().transpose()));
    auto h = tape.leaf(Eigen::MatrixXd::Constant(1, 1, q.horizon));
    auto d = time_distance_on_tape(tape, t, h, c);
    CHECK(d.scalar() == doctest::Approx(time_distance(q, c)).epsilon(1e-12));
    tape.backward(d);
    Eigen::VectorXd x(q.size() + 1);
    x << q.times(), q.horizon;
    const auto fd = seqret::testing::central_difference(
        [&](const Eigen::VectorXd& y) {
          EventSequence p = q;
          for (std::size_t i = 0; i < q.size(); ++i) p.events[i].time = y(i);
          p.horizon = y(q.size());
          return time_distance(p, c);
        },
        x, 1e-7);
    Eigen::VectorXd g(q.size() + 1);
    g << tape.grad(t).transpose(), tape.grad(h)(0, 0);
    CHECK(seqret::testing::max_relative_error(g, fd) < 1e-5);
  }
}

TEST_CASE("fisher vectors") {
  Eigen::VectorXd g(2);
  g << 3.0, -4.0;
  const auto v = fisher_vector(g, FisherConfig{});
  CHECK(v.v.norm() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(v.v(0) == doctest::Approx(0.6));

  FisherConfig ones{FisherMode::diagonal, Eigen::VectorXd::Ones(2), 0.0};
  CHECK((fisher_vector(g, ones).v - v.v).norm() < 1e-15);

  FisherConfig diag{FisherMode::diagonal, Eigen::Vector2d(4.0, 1.0), 1e-6};
  const auto w = fisher_vector(Eigen::Vector2d(2.0, 2.0), diag);
  CHECK(w.v(0) == doctest::Approx(1.0 / std::sqrt(5.0)).epsilon(1e-6));
  CHECK(w.v(1) == doctest::Approx(2.0 / std::sqrt(5.0)).epsilon(1e-6));

  CHECK_THROWS_AS(fisher_vector(Eigen::VectorXd::Zero(3), FisherConfig{}), VanishingGradient);
  CHECK_THROWS_AS(fisher_vector(g, FisherConfig{FisherMode::diagonal, Eigen::Vector2d(-1.0, 1.0), 1e-6}),
                  std::invalid_argument);
}

TEST_CASE("kernel self-similarity") {
  Rng rng(3);
  for (auto v : {Variant::self_attention, Variant::cross_attention}) {
    const auto model = trained_like(v, 3);
    for (int i = 0; i < 10; ++i) {
      const auto s = random_sequence(rng, 2 + i, 4);
      // In the cross variant the corpus side conditioned on q equals the query side when c == q.
      CHECK(fisher_kernel(s, s, UnwarpParams::identity(), model, {}) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("kernel from hand-computed gradients") {
  // Only the heads' biases are nonzero, so each one-event gradient lives in the
  // time bias (dmu = z / sigma, dlog sigma = z^2 - 1) and mark bias (e_x - p).
  ModelConfig cfg;
  cfg.dim = 2;
  cfg.marks = 3;
  cfg.max_len = 4;
  const auto model = ModelParams::zeros(cfg);
  const auto a = seq({{std::exp(1.0), 0}}, 3.0, "a");
  const auto b = seq({{std::exp(1.0), 1}}, 3.0, "b");
  // g_a = (1, 0, 2/3, -1/3, -1/3), g_b = (1, 0, -1/3, 2/3, -1/3): cosine 0.4.
  CHECK(fisher_kernel(a, b, UnwarpParams::identity(), model, {}) == doctest::Approx(0.4).epsilon(1e-12));
  const Eigen::VectorXd g = grad_log_likelihood(a, nullptr, model);
  const std::size_t tb = model.offset_of("time_bias");
  const std::size_t mb = model.offset_of("mark_bias");
  CHECK(g(tb) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(g(tb + 1)) < 1e-12);
  CHECK(g(mb) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(std::abs(g.norm() - std::sqrt(5.0 / 3.0)) < 1e-12);
}

TEST_CASE("kernel is bounded and scale free") {
  Rng rng(4);
  const auto model = trained_like(Variant::self_attention, 4);
  for (int i = 0; i < 100; ++i) {
    const auto q = random_sequence(rng, 1 + i % 9, 4);
    const auto c = random_sequence(rng, 1 + i % 11, 4);
    const double k = fisher_kernel(q, c, UnwarpParams::identity(), model, {});
    CHECK(std::abs(k) <= 1.0 + 1e-12);
    const Eigen::VectorXd gq = grad_log_likelihood(q, nullptr, model);
    const Eigen::VectorXd gc = grad_log_likelihood(c, nullptr, model);
    CHECK(std::abs(k - gq.normalized().dot(gc.normalized())) < 1e-12);
    const double lambda = std::exp(std::normal_distribution<double>(0.0, 2.0)(rng));
    CHECK(std::abs(k - fisher_vector(lambda * gq, {}).v.dot(fisher_vector(gc, {}).v)) < 1e-9);
  }
}

TEST_CASE("relevance score") {
  const auto model = trained_like(Variant::self_attention, 5);
  Rng rng(5);
  const auto s = random_sequence(rng, 6, 4);
  CHECK(relevance_score(s, s, UnwarpParams::identity(), model, {}, 0.1) == doctest::Approx(1.0).epsilon(1e-9));
  const auto c = random_sequence(rng, 4, 4);
  const double k = fisher_kernel(s, c, UnwarpParams::identity(), model, {});
  CHECK(relevance_score(s, c, UnwarpParams::identity(), model, {}, 0.0) == k);
  const double sim = sim_score(s, c, UnwarpParams::identity());
  CHECK(relevance_score(s, c, UnwarpParams::identity(), model, {}, 0.1) ==
        doctest::Approx(k + 0.1 * sim).epsilon(1e-12));
  CHECK_THROWS_AS(relevance_score(s, c, UnwarpParams::identity(), model, {}, -1.0), std::invalid_argument);
  // kappa 0.5 and Sim -4 compose to 0.1 at gamma 0.1.
  CHECK(0.5 + 0.1 * -4.0 == doctest::Approx(0.1));
}

TEST_CASE("scorer ablations") {
  Checkpoint ck{trained_like(Variant::cross_attention, 6), UnwarpParams::identity()};
  Rng rng(6);
  const auto q = random_sequence(rng, 5, 4);
  const auto c = random_sequence(rng, 7, 4);
  const Scorer full(ck, {});
  const Scorer sim_only(ck, {0.1, false, true, {}});
  const auto pq = full.prepare(q);
  const auto parts = full.score(pq, c);
  CHECK(parts.score == doctest::Approx(parts.kappa + 0.1 * parts.sim));
  const Eigen::VectorXd vc = full.corpus_vector(pq, c);
  CHECK(full.score(pq, c, &vc).score == parts.score);
  const auto so = sim_only.score(sim_only.prepare(q), c);
  CHECK(so.kappa == 0.0);
  CHECK(so.score == doctest::Approx(0.1 * parts.sim));
}
