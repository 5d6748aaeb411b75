#include "seqret/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace seqret {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

Eigen::VectorXd EventSequence::times() const {
  Eigen::VectorXd t(static_cast<Eigen::Index>(events.size()));
  for (std::size_t i = 0; i < events.size(); ++i) t(static_cast<Eigen::Index>(i)) = events[i].time;
  return t;
}

std::vector<int> EventSequence::marks() const {
  std::vector<int> m;
  m.reserve(events.size());
  for (const auto& e : events) m.push_back(e.mark);
  return m;
}

void validate(const EventSequence& seq, int mark_count) {
  const auto where = [&seq](std::size_t i) {
    return "sequence '" + seq.id + "' event " + std::to_string(i);
  };
  if (!std::isfinite(seq.horizon)) throw DataError("sequence '" + seq.id + "': non-finite horizon");
  for (std::size_t i = 0; i < seq.events.size(); ++i) {
    const Event& e = seq.events[i];
    if (!std::isfinite(e.time) || e.time < 0.0) throw DataError(where(i) + ": negative or non-finite time");
    if (e.mark < 0 || e.mark >= mark_count) {
      throw DataError(where(i) + ": mark " + std::to_string(e.mark) + " out of range [0, " +
                      std::to_string(mark_count) + ")");
    }
    if (i > 0 && !(seq.events[i - 1].time < e.time)) throw DataError(where(i) + ": unsorted times");
    if (e.time > seq.horizon) throw DataError(where(i) + ": time exceeds horizon");
  }
}

std::vector<double> inter_arrival_times(const EventSequence& seq) {
  std::vector<double> gaps;
  gaps.reserve(seq.events.size());
  double prev = 0.0;
  for (const auto& e : seq.events) {
    gaps.push_back(e.time - prev);
    prev = e.time;
  }
  return gaps;
}

// ---------------------------------------------------------------------------

Corpus::Corpus(std::vector<EventSequence> sequences, int mark_count)
    : sequences_(std::move(sequences)), mark_count_(mark_count) {
  index_.reserve(sequences_.size());
  for (std::size_t i = 0; i < sequences_.size(); ++i) {
    validate(sequences_[i], mark_count_);
    if (!index_.emplace(sequences_[i].id, i).second) {
      throw DataError("duplicate id '" + sequences_[i].id + "'");
    }
  }
}

std::size_t Corpus::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DataError("unknown sequence id '" + id + "'");
  return it->second;
}

double Corpus::max_horizon() const {
  double m = 0.0;
  for (const auto& s : sequences_) m = std::max(m, s.horizon);
  return m;
}

Corpus parse_corpus(const std::string& text, int mark_count, const LoadOptions& options) {
  std::vector<EventSequence> seqs;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string at = "line " + std::to_string(line_no) + ": ";
    EventSequence seq;
    try {
      const auto rec = nlohmann::json::parse(line);
      seq.id = rec.at("id").get<std::string>();
      seq.horizon = rec.at("horizon").get<double>();
      for (const auto& ev : rec.at("events")) {
        if (!ev.is_array() || ev.size() != 2) throw DataError("event must be [time, mark]");
        seq.events.push_back(Event{ev[0].get<double>(), ev[1].get<int>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(at + "parse error: " + e.what());
    } catch (const DataError& e) {
      throw DataError(at + e.what());
    }
    try {
      validate(seq, mark_count);
    } catch (const DataError& e) {
      throw DataError(at + e.what());
    }
    seqs.push_back(std::move(seq));
  }
  if (options.normalize_time && !seqs.empty()) {
    double scale = 0.0;
    for (const auto& s : seqs) scale = std::max(scale, s.horizon);
    if (scale > 0.0) {
      for (auto& s : seqs) {
        s.horizon /= scale;
        for (auto& e : s.events) e.time /= scale;
      }
    }
  }
  return Corpus(std::move(seqs), mark_count);
}

Corpus load_corpus(const std::filesystem::path& path, int mark_count, const LoadOptions& options) {
  return parse_corpus(read_file(path), mark_count, options);
}

std::string format_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& seq : corpus) {
    nlohmann::ordered_json rec;
    rec["id"] = seq.id;
    rec["horizon"] = seq.horizon;
    auto events = nlohmann::ordered_json::array();
    for (const auto& e : seq.events) events.push_back({e.time, e.mark});
    rec["events"] = std::move(events);
    out += rec.dump();
    out += '\n';
  }
  return out;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  write_file(path, format_corpus(corpus));
}

// ---------------------------------------------------------------------------

void RelevanceJudgments::set(const std::string& query, const std::string& corpus_id, int label) {
  if (label != 1 && label != -1) throw DataError("relevance label must be +1 or -1");
  auto [it, inserted] = labels_.emplace(std::make_pair(query, corpus_id), label);
  if (!inserted) {
    if (it->second == label) return;
    throw DataError("conflicting labels for (" + query + ", " + corpus_id + ")");
  }
  (label > 0 ? positives_ : negatives_)[query].push_back(corpus_id);
}

int RelevanceJudgments::label(const std::string& query, const std::string& corpus_id) const {
  auto it = labels_.find({query, corpus_id});
  return it == labels_.end() ? 0 : it->second;
}

const std::vector<std::string>& RelevanceJudgments::positives(const std::string& query) const {
  static const std::vector<std::string> kEmpty;
  auto it = positives_.find(query);
  return it == positives_.end() ? kEmpty : it->second;
}

const std::vector<std::string>& RelevanceJudgments::negatives(const std::string& query) const {
  static const std::vector<std::string> kEmpty;
  auto it = negatives_.find(query);
  return it == negatives_.end() ? kEmpty : it->second;
}

std::vector<std::string> RelevanceJudgments::query_ids() const {
  std::vector<std::string> ids;
  for (const auto& [key, _] : positives_) ids.push_back(key);
  for (const auto& [key, _] : negatives_) {
    if (!positives_.count(key)) ids.push_back(key);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

void RelevanceJudgments::validate(const Corpus& queries, const Corpus& corpus) const {
  for (const auto& [key, _] : labels_) {
    if (!queries.contains(key.first)) throw DataError("judgment references unknown query '" + key.first + "'");
    if (!corpus.contains(key.second)) {
      throw DataError("judgment references unknown corpus sequence '" + key.second + "'");
    }
  }
}

RelevanceJudgments parse_judgments(const std::string& text) {
  RelevanceJudgments j;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string q, c, y;
    if (!std::getline(fields, q, '\t') || !std::getline(fields, c, '\t') || !std::getline(fields, y)) {
      throw DataError("line " + std::to_string(line_no) + ": expected <query>\\t<corpus>\\t<label>");
    }
    int label = 0;
    if (y == "+1" || y == "1") {
      label = 1;
    } else if (y == "-1") {
      label = -1;
    } else {
      throw DataError("line " + std::to_string(line_no) + ": bad label '" + y + "'");
    }
    try {
      j.set(q, c, label);
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return j;
}

RelevanceJudgments load_judgments(const std::filesystem::path& path) {
  return parse_judgments(read_file(path));
}

void save_judgments(const std::filesystem::path& path, const RelevanceJudgments& judgments,
                    const Corpus& queries, const Corpus& corpus) {
  std::string out;
  for (const auto& q : queries) {
    for (const auto& c : corpus) {
      const int y = judgments.label(q.id, c.id);
      if (y == 0) continue;
      out += q.id;
      out += '\t';
      out += c.id;
      out += y > 0 ? "\t+1\n" : "\t-1\n";
    }
  }
  write_file(path, out);
}

// ---------------------------------------------------------------------------

DatasetSplit split_queries(const std::vector<std::string>& query_ids,
                           const std::array<double, 3>& fractions, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split fractions must be nonnegative");
  }
  if (query_ids.empty()) throw std::invalid_argument("cannot split an empty query set");

  std::vector<std::string> ids = query_ids;
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::floor(n * fractions[0] + 1e-9));
  const auto n_valid = static_cast<std::size_t>(std::floor(n * fractions[1] + 1e-9));

  DatasetSplit split;
  split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.valid.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                     ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), ids.end());
  return split;
}

}  // namespace seqret
