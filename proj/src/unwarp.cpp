#include "seqret/unwarp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace seqret {

UnwarpParams UnwarpParams::identity(const UnwarpConfig& config) {
  UnwarpParams p;
  p.config = config;
  p.w1 = Eigen::MatrixXd::Zero(config.hidden1, 1);
  p.b1 = Eigen::MatrixXd::Zero(config.hidden1, 1);
  p.w2 = Eigen::MatrixXd::Zero(config.hidden2, config.hidden1);
  p.b2 = Eigen::MatrixXd::Zero(config.hidden2, 1);
  p.w3 = Eigen::MatrixXd::Zero(1, config.hidden2);
  p.b3 = Eigen::MatrixXd::Ones(1, 1);
  return p;
}

UnwarpParams UnwarpParams::init(const UnwarpConfig& config, Rng& rng) {
  UnwarpParams p = identity(config);
  p.w1 = normal_matrix(config.hidden1, 1, 0.02, rng);
  p.w2 = normal_matrix(config.hidden2, config.hidden1, 0.02, rng);
  p.w3 = normal_matrix(1, config.hidden2, 0.02, rng);
  return p;
}

UnwarpParams UnwarpParams::disabled() {
  UnwarpParams p = identity(UnwarpConfig{1, 1, 2, 0.0, 1.0});
  p.enabled = false;
  return p;
}

std::vector<ParamBlock> UnwarpParams::blocks() {
  if (!enabled) return {};
  return {{"unwarp.w1", &w1}, {"unwarp.b1", &b1}, {"unwarp.w2", &w2},
          {"unwarp.b2", &b2}, {"unwarp.w3", &w3}, {"unwarp.b3", &b3}};
}

std::vector<ConstParamBlock> UnwarpParams::blocks() const {
  if (!enabled) return {};
  return {{"unwarp.w1", &w1}, {"unwarp.b1", &b1}, {"unwarp.w2", &w2},
          {"unwarp.b2", &b2}, {"unwarp.w3", &w3}, {"unwarp.b3", &b3}};
}

Eigen::RowVectorXd u_rate(const Eigen::RowVectorXd& t, const UnwarpParams& params) {
  if (!params.enabled) return Eigen::RowVectorXd::Ones(t.size());
  Eigen::MatrixXd h1 = ((params.w1 * t).colwise() + params.b1.col(0)).cwiseMax(0.0);
  Eigen::MatrixXd h2 = ((params.w2 * h1).colwise() + params.b2.col(0)).cwiseMax(0.0);
  Eigen::RowVectorXd u = ((params.w3 * h2).array() + params.b3(0, 0)).matrix().cwiseMax(0.0);
  return u;
}

double u_rate(double t, const UnwarpParams& params) {
  Eigen::RowVectorXd row(1);
  row(0) = t;
  return u_rate(row, params)(0);
}

double unwarp_time(double t, const UnwarpParams& params, bool train_mode, Rng* rng) {
  if (t < 0.0) throw std::invalid_argument("unwarp_time: negative time");
  double eta = 0.0;
  if (train_mode && params.enabled && params.config.noise_scale > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("unwarp_time: training mode needs an rng");
    eta = std::normal_distribution<double>(0.0, params.config.noise_scale)(*rng);
  }
  if (!params.enabled) return t + eta;
  // Fixed step so the integrand interpolant does not depend on t; that keeps
  // U monotone in t even where u has kinks.
  const double h = 1.0 / static_cast<double>(std::max(params.config.grid_nodes, 2) - 1);
  const auto full = static_cast<Eigen::Index>(std::floor(t / h));
  Eigen::RowVectorXd nodes(full + 2);
  for (Eigen::Index k = 0; k <= full; ++k) nodes(k) = h * static_cast<double>(k);
  nodes(full + 1) = t;
  const Eigen::RowVectorXd u = u_rate(nodes, params);
  double total = 0.0;
  for (Eigen::Index k = 0; k < full; ++k) total += 0.5 * h * (u(k) + u(k + 1));
  total += 0.5 * (t - nodes(full)) * (u(full) + u(full + 1));
  return total + eta;
}

UnwarpResult unwarp_sequence(const EventSequence& seq, const UnwarpParams& params) {
  if (!params.enabled) return {seq, false};
  ad::Tape<double> tape;
  const auto leaves = make_unwarp_leaves(tape, params, false);
  const auto u = unwarp_on_tape(tape, leaves, seq, params.config.grid_nodes, 0.0);
  UnwarpResult out{seq, u.separated};
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out.sequence.events[i].time = u.times.value()(0, static_cast<Eigen::Index>(i));
  }
  out.sequence.horizon = std::max(u.horizon.scalar(), seq.empty() ? 0.0 : out.sequence.events.back().time);
  return out;
}

double unbiasedness_penalty(const UnwarpParams& params, double horizon) {
  if (!(horizon > 0.0)) throw std::invalid_argument("unbiasedness_penalty: horizon must be positive");
  if (!params.enabled) return 0.0;
  ad::Tape<double> tape;
  const auto leaves = make_unwarp_leaves(tape, params, false);
  return unbiasedness_penalty_on_tape(tape, leaves, params.config.grid_nodes, params.config.reg_sigma, horizon)
      .scalar();
}

}  // namespace seqret
