#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Core>

#include "seqret/core.hpp"
#include "seqret/random.hpp"

namespace seqret::testing {

/// Central differences of f at x.
inline Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                          const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y(i) = x(i) + h;
    const double up = f(y);
    y(i) = x(i) - h;
    const double down = f(y);
    y(i) = x(i);
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-7) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a(i)), std::abs(b(i)), floor});
    worst = std::max(worst, std::abs(a(i) - b(i)) / scale);
  }
  return worst;
}

/// Strictly increasing random times on (0, horizon) with marks in [0, marks).
inline EventSequence random_sequence(Rng& rng, int length, int marks, const std::string& id = "s") {
  std::lognormal_distribution<double> gap(-0.5, 0.5);
  std::uniform_int_distribution<int> mark(0, marks - 1);
  EventSequence s;
  s.id = id;
  double t = 0.0;
  for (int i = 0; i < length; ++i) {
    t += gap(rng);
    s.events.push_back({t, mark(rng)});
  }
  s.horizon = t + gap(rng);
  return s;
}

}  // namespace seqret::testing
