#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "cli.hpp"
#include "doctest.h"

namespace fs = std::filesystem;
using seqret::cli::run;

namespace {

struct Outcome {
  int status;
  std::string out;
  std::string err;
};

Outcome call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int status = run(args, out, err);
  return {status, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::vector<std::string> kTinyGen{"--bases",          "6",  "--windows-min",       "4",
                                        "--windows-max",    "5",  "--base-length-min",   "60",
                                        "--base-length-max", "70", "--window-length-min", "8",
                                        "--window-length-max", "15"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("every flag of every subcommand is documented in its help") {
  const auto cl = seqret::cli::make_command_line();
  const auto subs = cl.app->get_subcommands([](CLI::App*) { return true; });
  REQUIRE(subs.size() == 6);
  for (CLI::App* sub : subs) {
    const Outcome h = call({sub->get_name(), "--help"});
    CHECK(h.status == 0);
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help") continue;
      CAPTURE(sub->get_name());
      CAPTURE(opt->get_name());
      CHECK_FALSE(opt->get_description().empty());
      CHECK(h.out.find(opt->get_name()) != std::string::npos);
    }
    for (const char* shared : {"--config", "--seed", "--threads", "--out"}) {
      CHECK(sub->get_option_no_throw(shared) != nullptr);
    }
  }
  CHECK(call({"--help"}).out.find("bench") != std::string::npos);
}

TEST_CASE("errors are one machine-readable line with a nonzero status") {
  const auto missing = call({"train", "--data", "/nonexistent/dir", "--out", "/tmp/x"});
  CHECK(missing.status != 0);
  CHECK(missing.err.rfind("error\tdata\t", 0) == 0);
  CHECK(std::count(missing.err.begin(), missing.err.end(), '\n') == 1);
  const auto usage = call({"gen"});
  CHECK(usage.status == 2);
  CHECK(usage.err.rfind("error\tusage\t", 0) == 0);
  CHECK(call({"frobnicate"}).status == 2);
  const auto bad = call({"gen", "--out", "/tmp/seqret_bad_gen", "--marks", "1"});
  CHECK(bad.status != 0);
  CHECK(bad.err.rfind("error\tusage\t", 0) == 0);
}

TEST_CASE("config file supplies defaults and flags win") {
  const fs::path dir = fs::temp_directory_path() / "seqret_cli_config";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "gen.cfg") << "# tiny\nbases = 3\nwindows-min=2\nwindows-max=2\nmarks=4\n";
  const auto r = call({"gen", "--config", (dir / "gen.cfg").string(), "--marks", "3", "--out", (dir / "d").string()});
  REQUIRE(r.status == 0);
  const auto meta = key_values(slurp(dir / "d" / "meta.txt"));
  CHECK(meta.at("queries") == "3");
  CHECK(meta.at("corpus") == "3");
  CHECK(meta.at("marks") == "3");
  std::ofstream(dir / "bad.cfg") << "epochs=3\n";
  const auto bad = call({"gen", "--config", (dir / "bad.cfg").string(), "--out", (dir / "e").string()});
  CHECK(bad.status == 2);
  fs::remove_all(dir);
}

TEST_CASE("end-to-end smoke run") {
  const fs::path dir = fs::temp_directory_path() / "seqret_cli_smoke";
  fs::remove_all(dir);
  const std::string data = (dir / "data").string();
  REQUIRE(call(cat({"gen", "--seed", "1", "--out", data}, kTinyGen)).status == 0);
  for (const char* f : {"queries.jsonl", "corpus.jsonl", "judgments.tsv", "meta.txt"}) CHECK(fs::exists(fs::path(data) / f));

  for (const char* v : {"self", "cross"}) {
    const auto r = call({"train", "--data", data, "--variant", v, "--dim", "4", "--epochs", "2", "--negatives", "5",
                         "--max-pairs", "20", "--unwarp-hidden", "4", "--split", "0.5,0.17,0.33", "--out",
                         (dir / v).string()});
    REQUIRE_MESSAGE(r.status == 0, r.err);
    for (const char* f : {"model.ckpt", "last.ckpt", "loss_curve.tsv", "split.tsv"}) CHECK(fs::exists(dir / v / f));
    CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 4);  // rows 0..2 and the summary
  }
  const std::string self = (dir / "self" / "model.ckpt").string();
  const std::string cross = (dir / "cross" / "model.ckpt").string();
  const std::string split = (dir / "cross" / "split.tsv").string();

  const auto ix = call({"index", "--data", data, "--self", self, "--tables", "3", "--table-bits", "2", "--hash-epochs",
                        "5", "--out", (dir / "index").string()});
  REQUIRE_MESSAGE(ix.status == 0, ix.err);
  for (const char* f : {"index.bin", "hashnet.bin", "excluded.txt", "codes.tsv"}) CHECK(fs::exists(dir / "index" / f));

  const auto q = call({"query", "--data", data, "--self", self, "--index", (dir / "index").string(), "--rescorer",
                       cross, "--k", "5"});
  REQUIRE_MESSAGE(q.status == 0, q.err);
  std::map<std::string, int> per_query;
  std::istringstream lines(q.out);
  for (std::string line; std::getline(lines, line);) ++per_query[line.substr(0, line.find('\t'))];
  CHECK(per_query.size() == 6);
  for (const auto& [id, n] : per_query) CHECK(n <= 5);

  const auto ex = call({"eval", "--data", data, "--split", split, "--rescorer", cross, "--out", (dir / "ex").string()});
  REQUIRE_MESSAGE(ex.status == 0, ex.err);
  CHECK(key_values(slurp(dir / "ex" / "report.txt")).at("reduction_factor") == "0");
  CHECK(fs::exists(dir / "ex" / "results.tsv"));

  const auto hashed = call({"eval", "--data", data, "--split", split, "--rescorer", cross, "--self", self, "--index",
                            (dir / "index").string(), "--out", (dir / "hashed").string()});
  REQUIRE_MESSAGE(hashed.status == 0, hashed.err);
  const auto rep = key_values(slurp(dir / "hashed" / "report.txt"));
  for (const char* k : {"map", "ndcg@10", "ndcg@20", "mrr", "reduction_factor", "comparisons", "universe"}) {
    CHECK(rep.count(k) == 1);
  }

  const auto b = call({"bench", "--data", data, "--split", split, "--self", self, "--rescorer", cross, "--method",
                       "random", "--tables", "2", "--table-bits", "1,2,3", "--out", (dir / "bench").string()});
  REQUIRE_MESSAGE(b.status == 0, b.err);
  CHECK(std::count(b.out.begin(), b.out.end(), '\n') == 5);  // header, exhaustive, three L values
  CHECK(fs::exists(dir / "bench" / "timing.txt"));
  fs::remove_all(dir);
}
