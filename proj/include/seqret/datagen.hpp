#pragma once

// Seeded synthetic benchmark. Each base sequence is a lognormal renewal
// process with first-order Markov marks; corpus and query sequences are
// contiguous windows of a base, and a query is relevant to every other
// window of its own base.

#include <cstdint>
#include <string>
#include <vector>

#include "seqret/core.hpp"
#include "seqret/random.hpp"

namespace seqret {

enum class WarpFamily { identity, affine, quadratic };

std::string to_string(WarpFamily w);
WarpFamily parse_warp(const std::string& name);

struct GenConfig {
  int bases = 80;
  int base_length_min = 200;
  int base_length_max = 300;
  int marks = 5;
  /// Per-base log-gap location mu ~ U[min, max] and scale sigma ~ U[min, max].
  double gap_mu_min = -3.5;
  double gap_mu_max = -2.0;
  double gap_sigma_min = 0.3;
  double gap_sigma_max = 0.8;
  int windows_min = 20;
  int windows_max = 30;
  int window_length_min = 20;
  int window_length_max = 60;
  WarpFamily warp = WarpFamily::affine;
  double warp_scale_min = 0.5;
  double warp_scale_max = 2.0;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on degenerate ranges.
  void validate() const;
};

/// Generating parameters of one base, kept for statistical checks.
struct BaseProcess {
  double mu = 0.0;
  double sigma = 1.0;
  Eigen::MatrixXd transition;  // row-stochastic, marks x marks
};

struct BaseSet {
  std::vector<EventSequence> sequences;  // ids "b{index}"
  std::vector<BaseProcess> processes;
};

BaseSet generate_base(const GenConfig& config);

struct Benchmark {
  Corpus queries;
  Corpus corpus;
  RelevanceJudgments judgments;
  /// Scale applied to query times (affine warp), 1 otherwise.
  double warp_scale = 1.0;
  /// Mean |C_q+| / |C| over queries.
  double relevance_ratio = 0.0;
};

/// Windows "b{b}_s{k}"; query "q{b}" is one window per base drawn uniformly
/// and then warped. Throws std::invalid_argument when a base would have no
/// positive (fewer than two windows).
Benchmark make_benchmark(const BaseSet& base, const GenConfig& config);

/// identity: unchanged. affine: t -> scale * t. quadratic: t -> t^2 / T with T
/// the sequence horizon. Horizons are mapped the same way.
EventSequence apply_warp(const EventSequence& seq, WarpFamily family, double scale = 1.0);

}  // namespace seqret
