#include "seqret/retrieval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <unordered_set>

#include "seqret/binary_io.hpp"
#include "seqret/metrics.hpp"
#include "seqret/parallel.hpp"

namespace seqret {

std::string to_string(HashMethod m) { return m == HashMethod::trained ? "trained" : "random"; }

HashMethod parse_hash_method(const std::string& name) {
  if (name == "trained") return HashMethod::trained;
  if (name == "random") return HashMethod::random_hyperplane;
  throw std::invalid_argument("unknown hash method '" + name + "' (trained|random)");
}

std::string to_string(RetrievalMode m) {
  switch (m) {
    case RetrievalMode::hashed:
      return "hashed";
    case RetrievalMode::fallback:
      return "exhaustive-fallback";
    case RetrievalMode::exhaustive:
      return "exhaustive";
  }
  return "exhaustive";
}

HashCode Pipeline::code(const Eigen::VectorXd& fisher) const {
  return method == HashMethod::trained ? hash_code(fisher, net) : hyperplane_code(fisher, planes);
}

HashCode Pipeline::query_code(const EventSequence& query) const {
  const EventSequence unwarped = unwarp_sequence(query, self.unwarp).sequence;
  return code(fisher_vector(unwarped, nullptr, self.model, {}).v);
}

PipelineBuild build_pipeline(const Corpus& corpus, const Checkpoint& self, const HashConfig& config,
                             const std::function<void(const std::string&)>& warn) {
  if (self.model.config.variant != Variant::self_attention) {
    throw std::invalid_argument("build_pipeline: hashing needs a self-attention checkpoint");
  }
  PipelineBuild out;
  out.pipeline.self = self;
  out.pipeline.method = config.method;

  std::vector<Eigen::VectorXd> vecs(corpus.size());
  std::vector<char> ok(corpus.size(), 1);
  parallel_for(corpus.size(), [&](std::size_t i) {
    try {
      vecs[i] = fisher_vector(corpus[i], nullptr, self.model, {}).v;
    } catch (const VanishingGradient&) {
      ok[i] = 0;
    }
  });
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (ok[i] != 0) {
      out.ids.push_back(corpus[i].id);
    } else {
      out.pipeline.excluded.push_back(corpus[i].id);
      if (warn) warn("excluding '" + corpus[i].id + "': vanishing log-likelihood gradient");
    }
  }
  if (out.ids.empty()) throw std::invalid_argument("build_pipeline: no corpus sequence can be indexed");
  const auto dim = static_cast<Eigen::Index>(self.model.parameter_count());
  out.vectors.resize(dim, static_cast<Eigen::Index>(out.ids.size()));
  Eigen::Index col = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (ok[i] != 0) out.vectors.col(col++) = vecs[i];
  }

  const int bits = config.bits > 0 ? config.bits : self.model.config.dim;
  if (config.method == HashMethod::trained) {
    HashNetConfig net = config.net;
    net.bits = bits;
    net.seed = derive_seed(config.seed, "hash-net");
    out.pipeline.net = train_hash_net(out.vectors, net).params;
  } else {
    out.pipeline.planes = random_hyperplanes(bits, dim, derive_seed(config.seed, "hyperplanes"));
  }
  out.codes.resize(out.ids.size());
  parallel_for(out.ids.size(), [&](std::size_t i) {
    out.codes[i] = out.pipeline.code(out.vectors.col(static_cast<Eigen::Index>(i)));
  });
  out.pipeline.index = index_codes(out, config.tables, config.table_bits, derive_seed(config.seed, "index"));
  return out;
}

HashIndex index_codes(const PipelineBuild& build, int tables, int table_bits, std::uint64_t seed) {
  std::vector<std::pair<std::string, HashCode>> codes;
  for (std::size_t i = 0; i < build.ids.size(); ++i) codes.emplace_back(build.ids[i], build.codes[i]);
  return build_index(codes, tables, table_bits, seed);
}

void rank_items(std::vector<std::pair<std::string, double>>& items, std::size_t k) {
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
  if (items.size() > k) items.resize(k);
}

namespace {

RankedResult score_ids(const EventSequence& query, const std::vector<std::string>& ids, std::size_t k,
                       const Scorer& scorer, const Corpus& corpus, RetrievalMode mode) {
  if (k < 1) throw std::invalid_argument("top-k: K must be at least 1");
  RankedResult r;
  r.query_id = query.id;
  r.mode = mode;
  r.examined = ids.size();
  const auto prepared = scorer.prepare(query);
  r.items.reserve(ids.size());
  for (const auto& id : ids) r.items.emplace_back(id, scorer.score(prepared, corpus.at(id)).score);
  rank_items(r.items, k);
  return r;
}

std::vector<std::string> all_ids(const Corpus& corpus) {
  std::vector<std::string> ids;
  for (const auto& s : corpus) ids.push_back(s.id);
  return ids;
}

}  // namespace

RankedResult query_topk(const EventSequence& query, std::size_t k, const Pipeline& pipeline, const Scorer& rescorer,
                        const Corpus& corpus, const std::vector<std::string>* universe) {
  std::vector<std::string> candidates = pipeline.index.lookup(pipeline.query_code(query));
  if (universe != nullptr) {
    const std::unordered_set<std::string> allowed(universe->begin(), universe->end());
    std::erase_if(candidates, [&](const std::string& id) { return allowed.count(id) == 0; });
  }
  if (candidates.empty()) {
    return score_ids(query, universe != nullptr ? *universe : all_ids(corpus), k, rescorer, corpus,
                     RetrievalMode::fallback);
  }
  return score_ids(query, candidates, k, rescorer, corpus, RetrievalMode::hashed);
}

RankedResult exhaustive_topk(const EventSequence& query, std::size_t k, const Corpus& corpus, const Scorer& scorer,
                             const std::vector<std::string>* universe) {
  return score_ids(query, universe != nullptr ? *universe : all_ids(corpus), k, scorer, corpus,
                   RetrievalMode::exhaustive);
}

std::vector<std::string> evaluation_pool(const std::string& query_id, const Corpus& corpus,
                                         const RelevanceJudgments& judgments, const EvalConfig& config) {
  if (config.negatives <= 0) return all_ids(corpus);
  std::vector<std::string> pool;
  for (const auto& id : judgments.positives(query_id)) {
    if (corpus.contains(id)) pool.push_back(id);
  }
  std::vector<std::string> neg;
  for (const auto& id : judgments.negatives(query_id)) {
    if (corpus.contains(id)) neg.push_back(id);
  }
  Rng rng(derive_seed(derive_seed(config.seed, "eval-pool"), query_id));
  const std::size_t n = std::min(neg.size(), static_cast<std::size_t>(config.negatives));
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, neg.size() - 1);
    std::swap(neg[i], neg[pick(rng)]);
  }
  pool.insert(pool.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(pool.begin(), pool.end());
  return pool;
}

EvalReport summarize(const std::vector<RankedResult>& results, const std::vector<std::size_t>& universe_sizes,
                     const RelevanceJudgments& judgments, const Corpus& corpus) {
  EvalReport rep;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    rep.comparisons += r.examined;
    rep.universe += universe_sizes[i];
    if (r.mode == RetrievalMode::fallback) ++rep.fallbacks;
    std::size_t total = 0;
    for (const auto& id : judgments.positives(r.query_id)) total += corpus.contains(id) ? 1 : 0;
    if (total == 0) {
      rep.skipped.push_back(r.query_id);
      continue;
    }
    std::vector<bool> rel;
    for (const auto& [id, s] : r.items) rel.push_back(judgments.is_relevant(r.query_id, id));
    const double ap = average_precision(rel, total);
    rep.per_query_ap.emplace_back(r.query_id, ap);
    rep.map += ap;
    rep.mrr += reciprocal_rank(rel);
    rep.ndcg10 += ndcg_at(rel, 10, total);
    rep.ndcg20 += ndcg_at(rel, 20, total);
    ++rep.queries;
  }
  if (rep.queries > 0) {
    const auto n = static_cast<double>(rep.queries);
    rep.map /= n;
    rep.mrr /= n;
    rep.ndcg10 /= n;
    rep.ndcg20 /= n;
  }
  rep.reduction = rep.universe == 0 ? 0.0
                                    : 1.0 - static_cast<double>(rep.comparisons) / static_cast<double>(rep.universe);
  return rep;
}

Evaluation evaluate_protocol(const std::vector<std::string>& query_ids, const Corpus& queries, const Corpus& corpus,
                             const RelevanceJudgments& judgments, const Pipeline* pipeline, const Scorer& rescorer,
                             const EvalConfig& config) {
  Evaluation out;
  out.results.resize(query_ids.size());
  std::vector<std::size_t> sizes(query_ids.size());
  parallel_for(query_ids.size(), [&](std::size_t i) {
    const auto pool = evaluation_pool(query_ids[i], corpus, judgments, config);
    sizes[i] = pool.size();
    const auto& q = queries.at(query_ids[i]);
    out.results[i] = pipeline != nullptr ? query_topk(q, pool.size(), *pipeline, rescorer, corpus, &pool)
                                         : exhaustive_topk(q, pool.size(), corpus, rescorer, &pool);
  });
  out.report = summarize(out.results, sizes, judgments, corpus);
  return out;
}

std::string format_results(const std::vector<RankedResult>& results) {
  std::string out;
  char buf[64];
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.items.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", r.items[i].second);
      out += r.query_id + '\t' + std::to_string(i + 1) + '\t' + r.items[i].first + '\t' + buf + '\t' +
             to_string(r.mode) + '\n';
    }
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

}  // namespace

void write_results(const std::filesystem::path& path, const std::vector<RankedResult>& results) {
  write_text(path, format_results(results));
}

std::string format_report(const EvalReport& r) {
  std::string out;
  char buf[96];
  auto kv = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s=%.17g\n", key, v);
    out += buf;
  };
  kv("map", r.map);
  kv("ndcg@10", r.ndcg10);
  kv("ndcg@20", r.ndcg20);
  kv("mrr", r.mrr);
  kv("reduction_factor", r.reduction);
  out += "comparisons=" + std::to_string(r.comparisons) + "\n";
  out += "universe=" + std::to_string(r.universe) + "\n";
  out += "queries=" + std::to_string(r.queries) + "\n";
  out += "fallbacks=" + std::to_string(r.fallbacks) + "\n";
  out += "skipped=" + std::to_string(r.skipped.size()) + "\n";
  for (const auto& [id, ap] : r.per_query_ap) {
    std::snprintf(buf, sizeof buf, "%.17g", ap);
    out += "ap." + id + "=" + buf + "\n";
  }
  return out;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  write_text(path, format_report(report));
}

namespace {

std::string encode_planes(const Eigen::MatrixXd& planes) {
  ByteWriter w;
  w.magic("SQRTHPLN");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(planes.rows()));
  w.u32(static_cast<std::uint32_t>(planes.cols()));
  for (Eigen::Index r = 0; r < planes.rows(); ++r) {
    for (Eigen::Index c = 0; c < planes.cols(); ++c) w.f64(planes(r, c));
  }
  return w.bytes();
}

Eigen::MatrixXd decode_planes(const std::string& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SQRTHPLN");
  if (r.u32() != 1) throw FormatError("unsupported hyperplane file version");
  const auto rows = r.u32();
  const auto cols = r.u32();
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  }
  if (!r.at_end()) throw FormatError("trailing bytes in hyperplane file");
  return m;
}

}  // namespace

void save_pipeline(const std::filesystem::path& dir, const Pipeline& pipeline) {
  std::filesystem::create_directories(dir);
  pipeline.index.save(dir / "index.bin");
  // Only one parameter file may exist; load_pipeline picks the method from it.
  if (pipeline.method == HashMethod::trained) {
    std::filesystem::remove(dir / "hyperplanes.bin");
    write_binary(dir / "hashnet.bin", encode_hash_net(pipeline.net));
  } else {
    std::filesystem::remove(dir / "hashnet.bin");
    write_binary(dir / "hyperplanes.bin", encode_planes(pipeline.planes));
  }
  std::string excluded;
  for (const auto& id : pipeline.excluded) excluded += id + "\n";
  write_text(dir / "excluded.txt", excluded);
}

Pipeline load_pipeline(const std::filesystem::path& dir, const Checkpoint& self) {
  Pipeline p;
  p.self = self;
  p.index = HashIndex::load(dir / "index.bin");
  const auto dim = static_cast<Eigen::Index>(self.model.parameter_count());
  if (std::filesystem::exists(dir / "hashnet.bin")) {
    p.method = HashMethod::trained;
    p.net = decode_hash_net(read_binary(dir / "hashnet.bin"));
    if (p.net.w1.cols() != dim) throw FormatError("hash net input size does not match the self checkpoint");
    if (p.net.bits() != p.index.bits()) throw FormatError("hash net and index disagree on the code length");
  } else {
    p.method = HashMethod::random_hyperplane;
    p.planes = decode_planes(read_binary(dir / "hyperplanes.bin"));
    if (p.planes.cols() != dim) throw FormatError("hyperplanes do not match the self checkpoint");
    if (p.planes.rows() != p.index.bits()) throw FormatError("hyperplanes and index disagree on the code length");
  }
  std::ifstream ex(dir / "excluded.txt");
  for (std::string line; std::getline(ex, line);) {
    if (!line.empty()) p.excluded.push_back(line);
  }
  return p;
}

}  // namespace seqret
