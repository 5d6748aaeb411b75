#pragma once

// Trainable monotone time unwarping U(t) = integral_0^t u(tau) dtau + eta,
// where u is a small rectified network, so U is non-decreasing by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "seqret/autodiff.hpp"
#include "seqret/core.hpp"
#include "seqret/params.hpp"
#include "seqret/random.hpp"

namespace seqret {

struct UnwarpConfig {
  int hidden1 = 128;
  int hidden2 = 128;
  /// Trapezoid nodes per unit of time (single times) or over [0, horizon] (sequences).
  int grid_nodes = 64;
  /// Standard deviation of the additive offset drawn in training mode.
  double noise_scale = 0.01;
  /// The sigma of the unbiasedness penalty (1/sigma^2) int (u - 1)^2.
  double reg_sigma = 1.0;
};

/// Parameters of u(t) = relu(w3 relu(w2 relu(w1 t + b1) + b2) + b3).
/// A disabled instance is the identity map and owns no trainable blocks.
struct UnwarpParams {
  bool enabled = true;
  UnwarpConfig config;
  Eigen::MatrixXd w1, b1, w2, b2, w3, b3;

  /// u == 1 exactly: zero weights with output bias 1.
  static UnwarpParams identity(const UnwarpConfig& config = {});
  /// Normal(0, 0.02) weights, zero hidden biases, output bias 1 (so u ~ 1).
  static UnwarpParams init(const UnwarpConfig& config, Rng& rng);
  static UnwarpParams disabled();

  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;
  std::size_t parameter_count() const { return total_size(blocks()); }
};

/// u(t) >= 0.
double u_rate(double t, const UnwarpParams& params);
Eigen::RowVectorXd u_rate(const Eigen::RowVectorXd& t, const UnwarpParams& params);

/// U(t) by composite trapezoid with step 1/(grid_nodes - 1) from 0 and a
/// partial last cell ending at t. In training mode a Normal(0, noise_scale) offset is added (requires `rng`).
double unwarp_time(double t, const UnwarpParams& params, bool train_mode = false, Rng* rng = nullptr);

struct UnwarpResult {
  EventSequence sequence;
  /// Set when a tie produced by a flat stretch of u had to be separated.
  bool separated = false;
};

/// Applies U to every event time and to the horizon, marks untouched.
UnwarpResult unwarp_sequence(const EventSequence& seq, const UnwarpParams& params);

/// (1/sigma^2) int_0^T (u(t) - 1)^2 dt by trapezoid on grid_nodes nodes.
double unbiasedness_penalty(const UnwarpParams& params, double horizon);

// ---------------------------------------------------------------------------
// Tape versions used by training and by gradient computations.

template <class S>
struct UnwarpLeaves {
  ad::Value<S> w1, b1, w2, b2, w3, b3;
};

template <class S>
UnwarpLeaves<S> make_unwarp_leaves(ad::Tape<S>& tape, const UnwarpParams& params, bool differentiable) {
  auto mk = [&](const Eigen::MatrixXd& m) {
    ad::Mat<S> v = m.cast<S>();
    return differentiable ? tape.leaf(std::move(v)) : tape.constant(std::move(v));
  };
  return {mk(params.w1), mk(params.b1), mk(params.w2), mk(params.b2), mk(params.w3), mk(params.b3)};
}

/// u evaluated at every entry of a 1 x k row of times.
template <class S>
ad::Value<S> u_rate_on_tape(const UnwarpLeaves<S>& p, ad::Value<S> t_row) {
  using namespace ad;
  auto h1 = relu(add_colvec(matmul(p.w1, t_row), p.b1));
  auto h2 = relu(add_colvec(matmul(p.w2, h1), p.b2));
  return relu(add_colvec(matmul(p.w3, h2), p.b3));
}

/// Unwarped times (1 x n), gaps measured from U(0) (1 x n), and U(horizon).
template <class S>
struct UnwarpedTimes {
  ad::Value<S> times;
  ad::Value<S> gaps;
  ad::Value<S> horizon;
  bool separated = false;
};

namespace detail {
inline double separation_epsilon(double x) { return 1e-9 * std::max(1.0, std::abs(x)); }
}  // namespace detail

/// Untransformed times of `seq` as tape constants (the identity unwarp).
template <class S>
UnwarpedTimes<S> raw_times_on_tape(ad::Tape<S>& tape, const EventSequence& seq) {
  const auto n = static_cast<Eigen::Index>(seq.size());
  ad::Mat<S> t(1, n), g(1, n), h(1, 1);
  double prev = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    t(0, i) = seq.events[static_cast<std::size_t>(i)].time;
    g(0, i) = t(0, i) - prev;
    prev = seq.events[static_cast<std::size_t>(i)].time;
  }
  h(0, 0) = seq.horizon;
  return {tape.constant(std::move(t)), tape.constant(std::move(g)), tape.constant(std::move(h)), false};
}

/// U applied to a sequence: one grid over [0, horizon] with cached prefix
/// integrals, plus a partial trapezoid from the last grid node to each event.
/// `offset` is the additive eta (0 in evaluation mode).
template <class S>
UnwarpedTimes<S> unwarp_on_tape(ad::Tape<S>& tape, const UnwarpLeaves<S>& p, const EventSequence& seq,
                                int grid_nodes, double offset) {
  using namespace ad;
  const Eigen::Index n = std::max(grid_nodes, 2);
  const auto m = static_cast<Eigen::Index>(seq.size());
  const double span = std::max(seq.horizon, m > 0 ? seq.events.back().time : 0.0);
  const double h = span / static_cast<double>(n - 1);

  Mat<S> nodes(1, n + m);
  for (Eigen::Index k = 0; k < n; ++k) nodes(0, k) = h * static_cast<double>(k);
  std::vector<Eigen::Index> cell(static_cast<std::size_t>(m));
  Mat<S> partial_width(1, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double t = seq.events[static_cast<std::size_t>(i)].time;
    nodes(0, n + i) = t;
    Eigen::Index k = h > 0.0 ? static_cast<Eigen::Index>(std::floor(t / h)) : 0;
    k = std::clamp<Eigen::Index>(k, 0, n - 2);
    cell[static_cast<std::size_t>(i)] = k;
    partial_width(0, i) = 0.5 * (t - h * static_cast<double>(k));
  }

  auto u_all = u_rate_on_tape(p, tape.constant(std::move(nodes)));
  auto u_grid = cols(u_all, 0, n);
  auto u_events = cols(u_all, n, m);

  // prefix(k) = int_0^{x_k} u, prefix(0) = 0.
  auto segments = scale(add(cols(u_grid, 0, n - 1), cols(u_grid, 1, n - 1)), S(0.5 * h));
  auto prefix = hcat(tape.constant(Mat<S>::Zero(1, 1)), cumsum_cols(segments));
  auto horizon_value = cols(prefix, n - 1, 1);

  auto u_left = select_cols(u_grid, cell);
  auto base = select_cols(prefix, cell);
  auto times = add(base, mul(add(u_left, u_events), tape.constant(std::move(partial_width))));
  auto gaps = diff_cols(times);

  // Separate exact ties so downstream log-gaps stay finite.
  bool separated = false;
  const Mat<S>& gv = gaps.value();
  const Mat<S>& tv = times.value();
  Mat<S> fix = Mat<S>::Zero(1, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double eps = seqret::detail::separation_epsilon(primal(tv(0, i)));
    if (primal(gv(0, i)) < eps) {
      fix(0, i) = S(eps - primal(gv(0, i)));
      separated = true;
    }
  }
  if (separated) {
    Mat<S> cum = fix;
    for (Eigen::Index i = 1; i < m; ++i) cum(0, i) += cum(0, i - 1);
    gaps = add(gaps, tape.constant(fix));
    times = add(times, tape.constant(cum));
    horizon_value = add(horizon_value, tape.constant(Mat<S>::Constant(1, 1, cum(0, m - 1))));
  }
  if (m > 0) {
    // Trapezoid rules on different cells can disagree slightly; keep U(T) >= U(t_m).
    auto last = cols(times, m - 1, 1);
    horizon_value = add(last, relu(sub(horizon_value, last)));
  }
  if (offset != 0.0) {
    times = shift(times, S(offset));
    horizon_value = shift(horizon_value, S(offset));
  }
  return {times, gaps, horizon_value, separated};
}

/// (1/sigma^2) int_0^T (u - 1)^2 on the tape.
template <class S>
ad::Value<S> unbiasedness_penalty_on_tape(ad::Tape<S>& tape, const UnwarpLeaves<S>& p, int grid_nodes,
                                          double reg_sigma, double horizon) {
  using namespace ad;
  const Eigen::Index n = std::max(grid_nodes, 2);
  const double h = horizon / static_cast<double>(n - 1);
  Mat<S> nodes(1, n);
  Mat<S> weights(1, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    nodes(0, k) = h * static_cast<double>(k);
    weights(0, k) = (k == 0 || k == n - 1) ? 0.5 * h : h;
  }
  auto u = u_rate_on_tape(p, tape.constant(std::move(nodes)));
  auto dev = square(shift(u, S(-1.0)));
  return scale(dot(dev, tape.constant(std::move(weights))), S(1.0 / (reg_sigma * reg_sigma)));
}

}  // namespace seqret
