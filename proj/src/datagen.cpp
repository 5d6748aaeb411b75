#include "seqret/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "seqret/parallel.hpp"

namespace seqret {

std::string to_string(WarpFamily w) {
  switch (w) {
    case WarpFamily::identity:
      return "identity";
    case WarpFamily::affine:
      return "affine";
    case WarpFamily::quadratic:
      return "quadratic";
  }
  return "identity";
}

WarpFamily parse_warp(const std::string& name) {
  if (name == "identity") return WarpFamily::identity;
  if (name == "affine") return WarpFamily::affine;
  if (name == "quadratic") return WarpFamily::quadratic;
  throw std::invalid_argument("unknown warp family '" + name + "' (identity|affine|quadratic)");
}

void GenConfig::validate() const {
  auto range = [](int lo, int hi, int floor, const char* what) {
    if (lo < floor || hi < lo) {
      throw std::invalid_argument(std::string("gen: bad ") + what + " range [" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + "]");
    }
  };
  if (bases < 1) throw std::invalid_argument("gen: need at least one base");
  if (marks < 2) throw std::invalid_argument("gen: mark count must be >= 2");
  range(base_length_min, base_length_max, 1, "base length");
  range(windows_min, windows_max, 1, "window count");
  range(window_length_min, window_length_max, 1, "window length");
  if (window_length_max > base_length_min) throw std::invalid_argument("gen: windows longer than the shortest base");
  if (gap_mu_max < gap_mu_min || !(gap_sigma_min > 0.0) || gap_sigma_max < gap_sigma_min) {
    throw std::invalid_argument("gen: bad gap distribution range");
  }
  if (!(warp_scale_min > 0.0) || warp_scale_max < warp_scale_min) throw std::invalid_argument("gen: bad warp scale range");
}

BaseSet generate_base(const GenConfig& config) {
  config.validate();
  BaseSet out;
  out.sequences.resize(static_cast<std::size_t>(config.bases));
  out.processes.resize(static_cast<std::size_t>(config.bases));
  const std::uint64_t root = derive_seed(config.seed, "base");
  parallel_for(out.sequences.size(), [&](std::size_t b) {
    Rng rng(derive_seed(root, b));
    BaseProcess p;
    p.mu = std::uniform_real_distribution<double>(config.gap_mu_min, config.gap_mu_max)(rng);
    p.sigma = std::uniform_real_distribution<double>(config.gap_sigma_min, config.gap_sigma_max)(rng);
    // Rows favour a few marks so bases differ in mark statistics.
    p.transition.resize(config.marks, config.marks);
    std::gamma_distribution<double> conc(0.5, 1.0);
    for (int r = 0; r < config.marks; ++r) {
      double s = 0.0;
      for (int c = 0; c < config.marks; ++c) {
        p.transition(r, c) = conc(rng) + 1e-3;
        s += p.transition(r, c);
      }
      p.transition.row(r) /= s;
    }
    const int n = std::uniform_int_distribution<int>(config.base_length_min, config.base_length_max)(rng);
    std::lognormal_distribution<double> gap(p.mu, p.sigma);
    EventSequence s;
    s.id = "b" + std::to_string(b);
    int mark = std::uniform_int_distribution<int>(0, config.marks - 1)(rng);
    double t = 0.0;
    for (int i = 0; i < n; ++i) {
      t += gap(rng);
      if (i > 0) {
        const Eigen::RowVectorXd row = p.transition.row(mark);  // rows are strided in column-major storage
        mark = std::discrete_distribution<int>(row.data(), row.data() + row.size())(rng);
      }
      s.events.push_back({t, mark});
    }
    s.horizon = t + gap(rng);
    out.sequences[b] = std::move(s);
    out.processes[b] = std::move(p);
  });
  return out;
}

EventSequence apply_warp(const EventSequence& seq, WarpFamily family, double scale) {
  EventSequence out = seq;
  switch (family) {
    case WarpFamily::identity:
      break;
    case WarpFamily::affine:
      for (auto& e : out.events) e.time *= scale;
      out.horizon *= scale;
      break;
    case WarpFamily::quadratic: {
      const double T = seq.horizon;
      if (!(T > 0.0)) throw std::invalid_argument("apply_warp: quadratic warp needs a positive horizon");
      for (auto& e : out.events) e.time = e.time * e.time / T;
      out.horizon = T;
      break;
    }
  }
  return out;
}

namespace {

/// Window [start, start + len) of a base, shifted so the preceding event sits
/// at time 0; the horizon is the next event after the window.
EventSequence window(const EventSequence& base, std::size_t start, std::size_t len, std::string id) {
  const double origin = start == 0 ? 0.0 : base.events[start - 1].time;
  EventSequence s;
  s.id = std::move(id);
  for (std::size_t i = start; i < start + len; ++i) s.events.push_back({base.events[i].time - origin, base.events[i].mark});
  s.horizon = (start + len < base.size() ? base.events[start + len].time : base.horizon) - origin;
  return s;
}

}  // namespace

Benchmark make_benchmark(const BaseSet& base, const GenConfig& config) {
  config.validate();
  if (config.windows_min < 2) throw std::invalid_argument("gen: each base needs at least two windows for a positive");
  Rng rng(derive_seed(config.seed, "benchmark"));
  Benchmark out;
  out.warp_scale = config.warp == WarpFamily::affine
                       ? std::uniform_real_distribution<double>(config.warp_scale_min, config.warp_scale_max)(rng)
                       : 1.0;
  std::vector<EventSequence> queries, corpus;
  std::vector<std::vector<std::string>> members(base.sequences.size());
  for (std::size_t b = 0; b < base.sequences.size(); ++b) {
    const EventSequence& s = base.sequences[b];
    const int count = std::uniform_int_distribution<int>(config.windows_min, config.windows_max)(rng);
    const int query_slot = std::uniform_int_distribution<int>(0, count - 1)(rng);
    for (int k = 0; k < count; ++k) {
      const int hi = std::min<int>(config.window_length_max, static_cast<int>(s.size()));
      const auto len = static_cast<std::size_t>(std::uniform_int_distribution<int>(config.window_length_min, hi)(rng));
      const auto start = std::uniform_int_distribution<std::size_t>(0, s.size() - len)(rng);
      if (k == query_slot) {
        auto q = window(s, start, len, "q" + std::to_string(b));
        queries.push_back(apply_warp(q, config.warp, out.warp_scale));
      } else {
        const std::string id = "b" + std::to_string(b) + "_s" + std::to_string(k);
        corpus.push_back(window(s, start, len, id));
        members[b].push_back(id);
      }
    }
  }
  double ratio = 0.0;
  for (std::size_t b = 0; b < members.size(); ++b) {
    const std::string qid = "q" + std::to_string(b);
    for (std::size_t o = 0; o < members.size(); ++o) {
      for (const auto& id : members[o]) out.judgments.set(qid, id, o == b ? 1 : -1);
    }
    ratio += static_cast<double>(members[b].size()) / static_cast<double>(corpus.size());
  }
  out.relevance_ratio = ratio / static_cast<double>(members.size());
  out.queries = Corpus(std::move(queries), config.marks);
  out.corpus = Corpus(std::move(corpus), config.marks);
  return out;
}

}  // namespace seqret
