#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "seqret/binary_io.hpp"
#include "seqret/datagen.hpp"
#include "seqret/parallel.hpp"
#include "seqret/retrieval.hpp"
#include "seqret/trainer.hpp"

namespace fs = std::filesystem;

namespace seqret::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shared {
  std::string config;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::string out;
};

struct DataPaths {
  std::string data;
  int marks = 0;  // 0: read from meta.txt
};

struct ScoreFlags {
  double gamma = 0.1;
  bool no_kernel = false;
  bool no_sim = false;
  std::string fisher = "identity";
};

struct State {
  Shared gen_shared, train_shared, index_shared, query_shared, eval_shared, bench_shared;

  GenConfig gen;
  std::string gen_warp = "affine";

  DataPaths train_data;
  std::string variant = "cross";
  int dim = 16;
  int blocks = 1;
  int max_len = 64;
  double init_std = 0.1;
  bool no_unwarp = false;
  UnwarpConfig unwarp{16, 16, 32, 0.01, 1.0};
  TrainConfig train;
  std::vector<double> split{0.5, 0.1, 0.4};

  DataPaths index_data;
  std::string index_self;
  std::string hash_method = "trained";
  HashConfig hash;

  DataPaths query_data;
  std::string query_file, query_self, query_index, query_rescorer;
  std::size_t k = 10;
  bool query_exhaustive = false;
  ScoreFlags query_score;

  DataPaths eval_data;
  std::string eval_split, eval_self, eval_index, eval_rescorer;
  int eval_negatives = 100;
  ScoreFlags eval_score;

  DataPaths bench_data;
  std::string bench_split, bench_self, bench_rescorer;
  std::string bench_method = "trained";
  std::vector<int> bench_table_bits{2, 4, 6, 8, 10, 12};
  int bench_tables = 10;
  int bench_negatives = 100;
  HashNetConfig bench_net;
  ScoreFlags bench_score;
};

void add_shared(CLI::App* sub, Shared& s, bool out_required) {
  sub->add_option("--config", s.config, "key=value file of flag defaults (keys are long flag names; flags win)");
  sub->add_option("--seed", s.seed, "Root seed; components derive their own streams from it")->capture_default_str();
  sub->add_option("--threads", s.threads, "Worker threads (0 = all cores)")->capture_default_str();
  auto* o = sub->add_option("--out", s.out, "Output directory");
  if (out_required) o->required();
}

void add_data(CLI::App* sub, DataPaths& d) {
  sub->add_option("--data", d.data, "Directory with queries.jsonl, corpus.jsonl, judgments.tsv")->required();
  sub->add_option("--marks", d.marks, "Mark vocabulary size (default: from <data>/meta.txt)");
}

void add_score(CLI::App* sub, ScoreFlags& s) {
  sub->add_option("--gamma", s.gamma, "Weight of the model-independent similarity")->capture_default_str();
  sub->add_flag("--no-kernel", s.no_kernel, "Drop the Fisher kernel term (similarity only)");
  sub->add_flag("--no-sim", s.no_sim, "Drop the model-independent similarity term");
  sub->add_option("--fisher", s.fisher, "Fisher preconditioning: identity | diagonal")
      ->check(CLI::IsMember({"identity", "diagonal"}))
      ->capture_default_str();
}

void add_hash_net(CLI::App* sub, HashNetConfig& n) {
  sub->add_option("--hash-hidden", n.hidden, "Hidden width of the hash network")->capture_default_str();
  sub->add_option("--hash-epochs", n.epochs, "Full-batch Adam epochs for the hash network")->capture_default_str();
  sub->add_option("--hash-lr", n.learning_rate, "Hash network learning rate")->capture_default_str();
  sub->add_option("--eta1", n.eta1, "Weight of the per-code balance term")->capture_default_str();
  sub->add_option("--eta2", n.eta2, "Weight of the saturation term")->capture_default_str();
  sub->add_option("--eta3", n.eta3, "Weight of the bit independence term")->capture_default_str();
  sub->add_flag("--hash-biases", n.biases, "Train biases in the hash network");
}

// ---------------------------------------------------------------------------
// Shared plumbing

std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::map<std::string, std::string> kv;
  int n = 0;
  for (std::string line; std::getline(f, line);) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw DataError("missing file " + p.string());
}

void require_dir(const fs::path& p) {
  if (!fs::is_directory(p)) throw DataError("missing directory " + p.string());
}

struct Data {
  Corpus queries;
  Corpus corpus;
  RelevanceJudgments judgments;
};

void check_data(const DataPaths& d) {
  require_dir(d.data);
  for (const char* f : {"queries.jsonl", "corpus.jsonl", "judgments.tsv"}) require_file(fs::path(d.data) / f);
  if (d.marks == 0) require_file(fs::path(d.data) / "meta.txt");
}

int mark_count(const DataPaths& d) {
  if (d.marks > 0) return d.marks;
  const auto meta = read_key_values(fs::path(d.data) / "meta.txt");
  const auto it = meta.find("marks");
  if (it == meta.end()) throw DataError("meta.txt has no 'marks' entry; pass --marks");
  return std::stoi(it->second);
}

Data load_data(const DataPaths& d) {
  const int marks = mark_count(d);
  const fs::path dir(d.data);
  Data out{load_corpus(dir / "queries.jsonl", marks), load_corpus(dir / "corpus.jsonl", marks),
           load_judgments(dir / "judgments.tsv")};
  out.judgments.validate(out.queries, out.corpus);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void start(const Shared& s) {
  thread_limit().store(s.threads);
  if (!s.out.empty()) fs::create_directories(s.out);
}

/// Split file lines: `<query_id>\t<train|valid|test>`.
DatasetSplit read_split(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  DatasetSplit s;
  int n = 0;
  for (std::string line; std::getline(f, line);) {
    ++n;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string id = line.substr(0, tab);
    const std::string part = tab == std::string::npos ? "" : line.substr(tab + 1);
    if (part == "train") {
      s.train.push_back(id);
    } else if (part == "valid") {
      s.valid.push_back(id);
    } else if (part == "test") {
      s.test.push_back(id);
    } else {
      throw DataError(path.string() + ":" + std::to_string(n) + ": expected <query_id>\\t<train|valid|test>");
    }
  }
  return s;
}

std::string format_split(const DatasetSplit& s) {
  std::string out;
  for (const auto& id : s.train) out += id + "\ttrain\n";
  for (const auto& id : s.valid) out += id + "\tvalid\n";
  for (const auto& id : s.test) out += id + "\ttest\n";
  return out;
}

std::vector<std::string> test_ids(const std::string& split_path, const Data& data) {
  if (!split_path.empty()) return read_split(split_path).test;
  std::vector<std::string> ids;
  for (const auto& q : data.queries) ids.push_back(q.id);
  return ids;
}

Scorer make_scorer(const Checkpoint& ck, const ScoreFlags& f, const Corpus& corpus) {
  ScorerOptions o;
  o.gamma = f.gamma;
  o.use_kernel = !f.no_kernel;
  o.use_sim = !f.no_sim;
  if (!o.use_kernel && !o.use_sim) throw UsageError("--no-kernel and --no-sim leave nothing to score");
  if (f.fisher == "diagonal") {
    o.fisher.mode = FisherMode::diagonal;
    o.fisher.diagonal = estimate_fisher_diagonal(corpus.sequences(), ck.model);
  }
  return Scorer(ck, o);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen(State& st, std::ostream& out) {
  start(st.gen_shared);
  GenConfig c = st.gen;
  c.warp = parse_warp(st.gen_warp);
  c.seed = st.gen_shared.seed;
  const Benchmark bm = make_benchmark(generate_base(c), c);
  const fs::path dir(st.gen_shared.out);
  save_corpus(dir / "queries.jsonl", bm.queries);
  save_corpus(dir / "corpus.jsonl", bm.corpus);
  save_judgments(dir / "judgments.tsv", bm.judgments, bm.queries, bm.corpus);
  write_text(dir / "meta.txt", "marks=" + std::to_string(c.marks) + "\nqueries=" + std::to_string(bm.queries.size()) +
                                   "\ncorpus=" + std::to_string(bm.corpus.size()) + "\nwarp=" + to_string(c.warp) +
                                   "\nwarp_scale=" + num(bm.warp_scale) + "\nrelevance_ratio=" +
                                   num(bm.relevance_ratio) + "\nseed=" + std::to_string(c.seed) + "\n");
  out << "gen: " << bm.queries.size() << " queries, " << bm.corpus.size() << " corpus sequences, relevance ratio "
      << bm.relevance_ratio << "\n";
}

void cmd_train(State& st, std::ostream& out) {
  check_data(st.train_data);
  if (st.split.size() != 3) throw UsageError("--split needs three fractions");
  start(st.train_shared);
  const Data data = load_data(st.train_data);
  const std::uint64_t root = st.train_shared.seed;

  std::vector<std::string> ids;
  for (const auto& q : data.queries) ids.push_back(q.id);
  const DatasetSplit split = split_queries(ids, {st.split[0], st.split[1], st.split[2]}, derive_seed(root, "split"));

  ModelConfig mc;
  mc.variant = parse_variant(st.variant);
  mc.dim = st.dim;
  mc.blocks = st.blocks;
  mc.max_len = st.max_len;
  mc.marks = data.corpus.mark_count();
  Rng init_rng(derive_seed(root, "init"));
  Checkpoint init{ModelParams::init(mc, init_rng, st.init_std),
                  st.no_unwarp ? UnwarpParams::disabled() : UnwarpParams::init(st.unwarp, init_rng)};

  TrainConfig tc = st.train;
  tc.seed = derive_seed(root, "train");
  const fs::path dir(st.train_shared.out);
  const TrainResult res = train(data.queries, data.corpus, data.judgments, split.train, split.valid, init, tc,
                                [&](const CurveRow& r) {
                                  out << "epoch " << r.epoch << " loss " << r.loss << " valid_map " << r.valid_map
                                      << "\n";
                                  out.flush();
                                });
  save_checkpoint(dir / "model.ckpt", res.best);
  save_checkpoint(dir / "last.ckpt", res.last);
  write_loss_curve(dir / "loss_curve.tsv", res.curve);
  write_text(dir / "split.tsv", format_split(split));
  out << "train: best epoch " << res.best_epoch << ", skipped queries " << res.skipped_queries << "\n";
}

void cmd_index(State& st, std::ostream& out, std::ostream& err) {
  check_data(st.index_data);
  require_file(st.index_self);
  start(st.index_shared);
  const Data data = load_data(st.index_data);
  const Checkpoint self = load_checkpoint(st.index_self);
  HashConfig hc = st.hash;
  hc.method = parse_hash_method(st.hash_method);
  hc.seed = derive_seed(st.index_shared.seed, "index");
  const PipelineBuild b = build_pipeline(data.corpus, self, hc, [&](const std::string& w) { err << "warning: " << w << "\n"; });
  save_pipeline(st.index_shared.out, b.pipeline);
  std::string codes;
  for (std::size_t i = 0; i < b.ids.size(); ++i) {
    codes += b.ids[i] + '\t';
    for (int bit : b.codes[i]) codes += bit > 0 ? '1' : '0';
    codes += '\n';
  }
  write_text(fs::path(st.index_shared.out) / "codes.tsv", codes);
  out << "index: " << b.ids.size() << " sequences, " << b.pipeline.excluded.size() << " excluded, R="
      << b.pipeline.index.bits() << " M=" << b.pipeline.index.tables() << " L=" << b.pipeline.index.table_bits()
      << "\n";
}

void cmd_query(State& st, std::ostream& out) {
  check_data(st.query_data);
  require_file(st.query_rescorer);
  if (!st.query_exhaustive) {
    if (st.query_index.empty() || st.query_self.empty()) throw UsageError("query: --index and --self are required unless --exhaustive");
    require_dir(st.query_index);
    require_file(st.query_self);
  }
  if (!st.query_file.empty()) require_file(st.query_file);
  if (st.k < 1) throw UsageError("--k must be at least 1");
  start(st.query_shared);
  const Data data = load_data(st.query_data);
  const Corpus queries =
      st.query_file.empty() ? data.queries : load_corpus(st.query_file, data.corpus.mark_count());
  const Scorer rescorer = make_scorer(load_checkpoint(st.query_rescorer), st.query_score, data.corpus);
  std::optional<Pipeline> pipeline;
  if (!st.query_exhaustive) pipeline = load_pipeline(st.query_index, load_checkpoint(st.query_self));
  std::vector<RankedResult> results(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    results[i] = pipeline ? query_topk(queries[i], st.k, *pipeline, rescorer, data.corpus)
                          : exhaustive_topk(queries[i], st.k, data.corpus, rescorer);
  });
  const std::string text = format_results(results);
  if (st.query_shared.out.empty()) {
    out << text;
  } else {
    write_text(fs::path(st.query_shared.out) / "results.tsv", text);
    out << "query: " << results.size() << " queries ranked\n";
  }
}

void cmd_eval(State& st, std::ostream& out) {
  check_data(st.eval_data);
  require_file(st.eval_rescorer);
  if (!st.eval_split.empty()) require_file(st.eval_split);
  if (!st.eval_index.empty()) {
    require_dir(st.eval_index);
    if (st.eval_self.empty()) throw UsageError("eval: --index needs --self");
    require_file(st.eval_self);
  }
  start(st.eval_shared);
  const Data data = load_data(st.eval_data);
  const auto ids = test_ids(st.eval_split, data);
  const Scorer rescorer = make_scorer(load_checkpoint(st.eval_rescorer), st.eval_score, data.corpus);
  std::optional<Pipeline> pipeline;
  if (!st.eval_index.empty()) pipeline = load_pipeline(st.eval_index, load_checkpoint(st.eval_self));
  EvalConfig ec;
  ec.negatives = st.eval_negatives;
  ec.seed = derive_seed(st.eval_shared.seed, "eval");
  const Evaluation ev = evaluate_protocol(ids, data.queries, data.corpus, data.judgments,
                                          pipeline ? &*pipeline : nullptr, rescorer, ec);
  const fs::path dir(st.eval_shared.out);
  write_results(dir / "results.tsv", ev.results);
  write_report(dir / "report.txt", ev.report);
  out << "eval: map " << ev.report.map << " ndcg@10 " << ev.report.ndcg10 << " mrr " << ev.report.mrr
      << " reduction " << ev.report.reduction << "\n";
}

void cmd_bench(State& st, std::ostream& out, std::ostream& err) {
  check_data(st.bench_data);
  require_file(st.bench_self);
  require_file(st.bench_rescorer);
  if (!st.bench_split.empty()) require_file(st.bench_split);
  start(st.bench_shared);
  const Data data = load_data(st.bench_data);
  const auto ids = test_ids(st.bench_split, data);
  const Checkpoint self = load_checkpoint(st.bench_self);
  const Scorer rescorer = make_scorer(load_checkpoint(st.bench_rescorer), st.bench_score, data.corpus);
  EvalConfig ec;
  ec.negatives = st.bench_negatives;
  ec.seed = derive_seed(st.bench_shared.seed, "eval");

  auto t0 = std::chrono::steady_clock::now();
  const Evaluation ex = evaluate_protocol(ids, data.queries, data.corpus, data.judgments, nullptr, rescorer, ec);
  const double ex_ms = 1e3 * seconds_since(t0) / static_cast<double>(std::max<std::size_t>(ids.size(), 1));

  HashConfig hc;
  hc.method = parse_hash_method(st.bench_method);
  hc.net = st.bench_net;
  hc.tables = st.bench_tables;
  hc.table_bits = 1;
  hc.seed = derive_seed(st.bench_shared.seed, "index");
  t0 = std::chrono::steady_clock::now();
  PipelineBuild build = build_pipeline(data.corpus, self, hc, [&](const std::string& w) { err << "warning: " << w << "\n"; });
  const double build_s = seconds_since(t0);

  std::string table = "method\ttables\ttable_bits\treduction_factor\tndcg@10\tmap\tms_per_query\n";
  table += "exhaustive\t0\t0\t" + num(ex.report.reduction) + "\t" + num(ex.report.ndcg10) + "\t" +
           num(ex.report.map) + "\t" + num(ex_ms) + "\n";
  for (int L : st.bench_table_bits) {
    if (L > build.pipeline.index.bits()) {
      err << "warning: skipping L=" << L << " > R=" << build.pipeline.index.bits() << "\n";
      continue;
    }
    build.pipeline.index = index_codes(build, hc.tables, L, hc.seed);
    t0 = std::chrono::steady_clock::now();
    const Evaluation ev =
        evaluate_protocol(ids, data.queries, data.corpus, data.judgments, &build.pipeline, rescorer, ec);
    const double ms = 1e3 * seconds_since(t0) / static_cast<double>(std::max<std::size_t>(ids.size(), 1));
    table += to_string(hc.method) + "\t" + std::to_string(hc.tables) + "\t" + std::to_string(L) + "\t" +
             num(ev.report.reduction) + "\t" + num(ev.report.ndcg10) + "\t" + num(ev.report.map) + "\t" + num(ms) +
             "\n";
  }
  const fs::path dir(st.bench_shared.out);
  write_text(dir / "tradeoff.tsv", table);
  write_text(dir / "timing.txt", "index_build_seconds=" + num(build_s) + "\nexhaustive_ms_per_query=" + num(ex_ms) +
                                     "\nqueries=" + std::to_string(ids.size()) + "\n");
  out << table;
}

// ---------------------------------------------------------------------------

struct Registered {
  State state;
  CLI::App* gen = nullptr;
  CLI::App* train = nullptr;
  CLI::App* index = nullptr;
  CLI::App* query = nullptr;
  CLI::App* eval = nullptr;
  CLI::App* bench = nullptr;
};

std::shared_ptr<Registered> register_all(CLI::App& app) {
  auto r = std::make_shared<Registered>();
  State& st = r->state;
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  auto* gen = r->gen = app.add_subcommand("gen", "Generate a synthetic benchmark (queries, corpus, judgments)");
  add_shared(gen, st.gen_shared, true);
  gen->add_option("--bases", st.gen.bases, "Number of base sequences (one query each)")->capture_default_str();
  gen->add_option("--base-length-min", st.gen.base_length_min, "Shortest base sequence")->capture_default_str();
  gen->add_option("--base-length-max", st.gen.base_length_max, "Longest base sequence")->capture_default_str();
  gen->add_option("--marks", st.gen.marks, "Mark vocabulary size")->capture_default_str();
  gen->add_option("--gap-mu-min", st.gen.gap_mu_min, "Lower bound of the per-base log-gap location")->capture_default_str();
  gen->add_option("--gap-mu-max", st.gen.gap_mu_max, "Upper bound of the per-base log-gap location")->capture_default_str();
  gen->add_option("--gap-sigma-min", st.gen.gap_sigma_min, "Lower bound of the per-base log-gap scale")->capture_default_str();
  gen->add_option("--gap-sigma-max", st.gen.gap_sigma_max, "Upper bound of the per-base log-gap scale")->capture_default_str();
  gen->add_option("--windows-min", st.gen.windows_min, "Fewest windows cut from a base")->capture_default_str();
  gen->add_option("--windows-max", st.gen.windows_max, "Most windows cut from a base")->capture_default_str();
  gen->add_option("--window-length-min", st.gen.window_length_min, "Shortest window")->capture_default_str();
  gen->add_option("--window-length-max", st.gen.window_length_max, "Longest window")->capture_default_str();
  gen->add_option("--warp", st.gen_warp, "Query warp: identity | affine | quadratic")
      ->check(CLI::IsMember({"identity", "affine", "quadratic"}))
      ->capture_default_str();
  gen->add_option("--warp-scale-min", st.gen.warp_scale_min, "Smallest affine time scale")->capture_default_str();
  gen->add_option("--warp-scale-max", st.gen.warp_scale_max, "Largest affine time scale")->capture_default_str();

  auto* train = r->train = app.add_subcommand("train", "Train a self- or cross-attention model with its unwarping");
  add_shared(train, st.train_shared, true);
  add_data(train, st.train_data);
  train->add_option("--variant", st.variant, "Model variant: self | cross")
      ->check(CLI::IsMember({"self", "cross"}))
      ->capture_default_str();
  train->add_option("--dim", st.dim, "Hidden dimension D")->capture_default_str();
  train->add_option("--blocks", st.blocks, "Attention blocks")->capture_default_str();
  train->add_option("--max-len", st.max_len, "Longest sequence the position table covers")->capture_default_str();
  train->add_option("--init-std", st.init_std, "Standard deviation of the initial weights")->capture_default_str();
  train->add_flag("--no-unwarp", st.no_unwarp, "Disable the unwarping function (identity time map)");
  train->add_option("--unwarp-hidden", st.unwarp.hidden1, "Width of both unwarp hidden layers")
      ->each([&st](const std::string&) { st.unwarp.hidden2 = st.unwarp.hidden1; })
      ->capture_default_str();
  train->add_option("--unwarp-grid", st.unwarp.grid_nodes, "Trapezoid nodes of the unwarp integral")->capture_default_str();
  train->add_option("--unwarp-noise", st.unwarp.noise_scale, "Std of the training-time unwarp offset")->capture_default_str();
  train->add_option("--unwarp-sigma", st.unwarp.reg_sigma, "Sigma of the unbiasedness penalty")->capture_default_str();
  st.train.learning_rate = 1e-2;
  st.train.batch_size = 8;
  st.train.negatives = 50;
  st.train.max_pairs = 200;
  st.train.epochs = 20;
  train->add_option("--epochs", st.train.epochs, "Training epochs")->capture_default_str();
  train->add_option("--lr", st.train.learning_rate, "Adam learning rate")->capture_default_str();
  train->add_option("--batch", st.train.batch_size, "Queries per step")->capture_default_str();
  train->add_option("--negatives", st.train.negatives, "Negatives sampled per query and epoch")->capture_default_str();
  train->add_option("--max-pairs", st.train.max_pairs, "Cap on (positive, negative) pairs per query")->capture_default_str();
  train->add_option("--margin", st.train.margin, "Hinge margin delta")->capture_default_str();
  train->add_option("--gamma", st.train.gamma, "Weight of the model-independent similarity")->capture_default_str();
  train->add_option("--unbiased-weight", st.train.unbiased_weight, "Weight of the unwarp unbiasedness penalty")
      ->capture_default_str();
  train->add_option("--l2", st.train.l2, "L2 weight on all parameters")->capture_default_str();
  train->add_flag("--freeze-unwarp", [&st](std::int64_t) { st.train.train_unwarp = false; },
                  "Keep the unwarp parameters at their initial values");
  train->add_option("--valid-negatives", st.train.valid_negatives, "Negatives per validation query")->capture_default_str();
  train->add_option("--split", st.split, "Train, validation and test fractions of the queries")
      ->delimiter(',')
      ->expected(3)
      ->capture_default_str();

  auto* index = r->index = app.add_subcommand("index", "Hash corpus Fisher vectors and build the bucket index");
  add_shared(index, st.index_shared, true);
  add_data(index, st.index_data);
  index->add_option("--self", st.index_self, "Self-attention checkpoint")->required();
  index->add_option("--method", st.hash_method, "Code method: trained | random")
      ->check(CLI::IsMember({"trained", "random"}))
      ->capture_default_str();
  index->add_option("--bits", st.hash.bits, "Code length R (0 = the model's D)")->capture_default_str();
  index->add_option("--tables", st.hash.tables, "Hash tables M")->capture_default_str();
  index->add_option("--table-bits", st.hash.table_bits, "Bits per table L")->capture_default_str();
  add_hash_net(index, st.hash.net);

  auto* query = r->query = app.add_subcommand("query", "Top-K retrieval for each query");
  add_shared(query, st.query_shared, false);
  add_data(query, st.query_data);
  query->add_option("--queries", st.query_file, "Query file (default: <data>/queries.jsonl)");
  query->add_option("--rescorer", st.query_rescorer, "Checkpoint used to score candidates")->required();
  query->add_option("--self", st.query_self, "Self-attention checkpoint the index was built with");
  query->add_option("--index", st.query_index, "Index directory from `index`");
  query->add_option("--k", st.k, "Results per query")->capture_default_str();
  query->add_flag("--exhaustive", st.query_exhaustive, "Score the whole corpus instead of hashing");
  add_score(query, st.query_score);

  auto* eval = r->eval = app.add_subcommand("eval", "Rank test queries and report MAP, NDCG, MRR and reduction");
  add_shared(eval, st.eval_shared, true);
  add_data(eval, st.eval_data);
  eval->add_option("--split", st.eval_split, "split.tsv from `train` (default: all queries)");
  eval->add_option("--rescorer", st.eval_rescorer, "Checkpoint used to score candidates")->required();
  eval->add_option("--self", st.eval_self, "Self-attention checkpoint the index was built with");
  eval->add_option("--index", st.eval_index, "Index directory (omit for exhaustive ranking)");
  eval->add_option("--negatives", st.eval_negatives, "Sampled negatives per query pool (0 = whole corpus)")
      ->capture_default_str();
  add_score(eval, st.eval_score);

  auto* bench = r->bench = app.add_subcommand("bench", "Timing and the reduction / NDCG@10 tradeoff over L");
  add_shared(bench, st.bench_shared, true);
  add_data(bench, st.bench_data);
  bench->add_option("--split", st.bench_split, "split.tsv from `train` (default: all queries)");
  bench->add_option("--self", st.bench_self, "Self-attention checkpoint for the codes")->required();
  bench->add_option("--rescorer", st.bench_rescorer, "Checkpoint used to score candidates")->required();
  bench->add_option("--method", st.bench_method, "Code method: trained | random")
      ->check(CLI::IsMember({"trained", "random"}))
      ->capture_default_str();
  bench->add_option("--tables", st.bench_tables, "Hash tables M")->capture_default_str();
  bench->add_option("--table-bits", st.bench_table_bits, "Comma-separated L values to sweep")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--negatives", st.bench_negatives, "Sampled negatives per query pool (0 = whole corpus)")
      ->capture_default_str();
  add_hash_net(bench, st.bench_net);
  add_score(bench, st.bench_score);
  return r;
}

/// Inserts `--key=value` for every config entry right after the subcommand,
/// so flags given on the command line come later and win.
std::vector<std::string> expand_config(const std::vector<std::string>& args, const CLI::App& app) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::size_t sub = 0;
  while (sub < args.size() && args[sub].rfind("-", 0) == 0) ++sub;
  if (sub == args.size()) return args;
  const CLI::App* cmd = app.get_subcommand_no_throw(args[sub]);
  if (cmd == nullptr) return args;
  std::vector<std::string> injected;
  for (const auto& [key, value] : read_key_values(path)) {
    if (key == "config") continue;
    if (cmd->get_option_no_throw("--" + key) == nullptr) {
      throw UsageError("config key '" + key + "' is not a flag of '" + args[sub] + "'");
    }
    injected.push_back("--" + key + "=" + value);
  }
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub) + 1);
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub) + 1, args.end());
  return out;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  }
  return s;
}

}  // namespace

CommandLine make_command_line() {
  CommandLine c;
  c.app = std::make_unique<CLI::App>("Event-sequence retrieval: data generation, training, hashing and evaluation",
                                     "seqret");
  c.state = register_all(*c.app);
  return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  auto fail = [&](const char* kind, const std::string& msg) {
    err << "error\t" << kind << "\t" << one_line(msg) << "\n";
    return kind == std::string("usage") ? 2 : 1;
  };
  CommandLine cl = make_command_line();
  auto& reg = *std::static_pointer_cast<Registered>(cl.state);
  CLI::App& app = *cl.app;
  try {
    std::vector<std::string> argv = expand_config(args, app);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    // Subcommand help arrives here with the subcommand as the help target.
    if (e.get_exit_code() == 0) {
      for (CLI::App* sub : app.get_subcommands()) out << sub->help();
      if (app.get_subcommands().empty()) out << app.help();
      return 0;
    }
    return fail("usage", e.what());
  } catch (const UsageError& e) {
    return fail("usage", e.what());
  } catch (const std::exception& e) {
    return fail("data", e.what());
  }
  try {
    State& st = reg.state;
    if (reg.gen->parsed()) cmd_gen(st, out);
    if (reg.train->parsed()) cmd_train(st, out);
    if (reg.index->parsed()) cmd_index(st, out, err);
    if (reg.query->parsed()) cmd_query(st, out);
    if (reg.eval->parsed()) cmd_eval(st, out);
    if (reg.bench->parsed()) cmd_bench(st, out, err);
  } catch (const UsageError& e) {
    return fail("usage", e.what());
  } catch (const DataError& e) {
    return fail("data", e.what());
  } catch (const FormatError& e) {
    return fail("format", e.what());
  } catch (const NonFiniteGradient& e) {
    return fail("numeric", e.what());
  } catch (const TrainingDiverged& e) {
    return fail("numeric", e.what());
  } catch (const std::invalid_argument& e) {
    return fail("usage", e.what());
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}

}  // namespace seqret::cli
