#include "seqret/hashing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "seqret/binary_io.hpp"
#include "seqret/parallel.hpp"

namespace seqret {

HashNetParams HashNetParams::init(const HashNetConfig& config, Eigen::Index input_dim, Rng& rng) {
  if (config.bits < 1 || config.hidden < 1 || input_dim < 1) {
    throw std::invalid_argument("hash net: bits, hidden width and input size must be positive");
  }
  HashNetParams p;
  p.config = config;
  p.center = Eigen::VectorXd::Zero(input_dim);
  p.w1 = normal_matrix(config.hidden, input_dim, config.init_scale / std::sqrt(static_cast<double>(input_dim)), rng);
  p.b1 = Eigen::MatrixXd::Zero(config.hidden, 1);
  p.w2 = normal_matrix(config.bits, config.hidden, config.init_scale / std::sqrt(static_cast<double>(config.hidden)),
                       rng);
  p.b2 = Eigen::MatrixXd::Zero(config.bits, 1);
  return p;
}

std::vector<ParamBlock> HashNetParams::blocks() { return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}}; }
std::vector<ConstParamBlock> HashNetParams::blocks() const {
  return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}};
}

std::array<double, 3> HashNetParams::normalized_etas() const {
  const double s = config.eta1 + config.eta2 + config.eta3;
  if (!(s > 0.0) || config.eta1 < 0.0 || config.eta2 < 0.0 || config.eta3 < 0.0) {
    throw std::invalid_argument("hash net: term weights must be nonnegative with a positive sum");
  }
  return {config.eta1 / s, config.eta2 / s, config.eta3 / s};
}

namespace {

Eigen::MatrixXd logits_of(const Eigen::MatrixXd& vectors, const HashNetParams& psi) {
  if (vectors.rows() != psi.w1.cols()) {
    throw std::invalid_argument("hash net: expected vectors of size " + std::to_string(psi.w1.cols()) + ", got " +
                                std::to_string(vectors.rows()));
  }
  Eigen::MatrixXd h = psi.w1 * (vectors.colwise() - psi.center);
  h.colwise() += psi.b1.col(0);
  h = h.array().tanh().matrix();
  Eigen::MatrixXd out = psi.w2 * h;
  out.colwise() += psi.b2.col(0);
  return out;
}

}  // namespace

Eigen::VectorXd hash_logits(const Eigen::VectorXd& v, const HashNetParams& psi) { return logits_of(v, psi).col(0); }

HashCode sign_code(const Eigen::VectorXd& logits) {
  HashCode c(static_cast<std::size_t>(logits.size()));
  for (Eigen::Index i = 0; i < logits.size(); ++i) c[static_cast<std::size_t>(i)] = logits(i) >= 0.0 ? 1 : -1;
  return c;
}

HashCode hash_code(const Eigen::VectorXd& v, const HashNetParams& psi) { return sign_code(hash_logits(v, psi)); }

HashLossTerms hash_loss_from_outputs(const Eigen::MatrixXd& z, const std::array<double, 3>& etas) {
  ad::Tape<double> tape;
  const auto t = hash_terms_on_tape(tape.constant(z), etas);
  return {t[0].scalar(), t[1].scalar(), t[2].scalar()};
}

HashLossTerms hash_training_loss(const Eigen::MatrixXd& vectors, const HashNetParams& psi) {
  return hash_loss_from_outputs(logits_of(vectors, psi).array().tanh().matrix(), psi.normalized_etas());
}

namespace {

HashLossGradient hash_step(const Eigen::MatrixXd& centered, const HashNetParams& psi, const std::array<double, 3>& etas) {
  using namespace ad;
  Tape<double> tape;
  auto w1 = tape.leaf(psi.w1);
  auto b1 = tape.leaf(psi.b1);
  auto w2 = tape.leaf(psi.w2);
  auto b2 = tape.leaf(psi.b2);
  auto x = tape.constant(centered);
  auto h = ad::tanh(add_colvec(matmul(w1, x), b1));
  auto z = ad::tanh(add_colvec(matmul(w2, h), b2));
  const auto terms = hash_terms_on_tape(z, etas);
  auto loss = add(add(terms[0], terms[1]), terms[2]);
  tape.backward(loss);
  std::vector<Eigen::MatrixXd> grads{tape.grad(w1), tape.grad(b1), tape.grad(w2), tape.grad(b2)};
  if (!psi.config.biases) {
    grads[1].setZero();
    grads[3].setZero();
  }
  std::vector<ConstParamBlock> gb;
  for (auto& g : grads) gb.push_back({"", &g});
  return {loss.scalar(), flatten(gb)};
}

}  // namespace

HashLossGradient hash_loss_gradient(const Eigen::MatrixXd& vectors, const HashNetParams& psi) {
  if (vectors.rows() != psi.w1.cols()) throw std::invalid_argument("hash net: input size mismatch");
  return hash_step(vectors.colwise() - psi.center, psi, psi.normalized_etas());
}

HashTrainResult train_hash_net(const Eigen::MatrixXd& vectors, const HashNetConfig& config) {
  if (vectors.cols() == 0) throw std::invalid_argument("train_hash_net: no vectors");
  Rng rng(derive_seed(config.seed, "hash-net"));
  HashTrainResult out;
  HashNetParams psi = HashNetParams::init(config, vectors.rows(), rng);
  psi.center = vectors.rowwise().mean();
  const Eigen::MatrixXd centered = vectors.colwise() - psi.center;
  const auto etas = psi.normalized_etas();

  Eigen::VectorXd m, v;
  double best = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch <= config.epochs; ++epoch) {
    const HashLossGradient step = hash_step(centered, psi, etas);
    if (!std::isfinite(step.loss) || !step.grad.allFinite()) {
      throw std::runtime_error("hash training diverged at epoch " + std::to_string(epoch));
    }
    out.curve.push_back(step.loss);
    if (step.loss < best) {
      best = step.loss;
      out.params = psi;
      out.best_epoch = epoch;
    }
    if (epoch == config.epochs) break;
    // Adam with the usual constants.
    if (m.size() == 0) {
      m = Eigen::VectorXd::Zero(step.grad.size());
      v = Eigen::VectorXd::Zero(step.grad.size());
    }
    m = 0.9 * m + 0.1 * step.grad;
    v = 0.999 * v + 0.001 * step.grad.cwiseProduct(step.grad);
    const double c1 = 1.0 - std::pow(0.9, epoch + 1);
    const double c2 = 1.0 - std::pow(0.999, epoch + 1);
    const Eigen::VectorXd update =
        config.learning_rate * ((m / c1).array() / ((v / c2).array().sqrt() + 1e-8)).matrix();
    Eigen::VectorXd flat = flatten(std::as_const(psi).blocks()) - update;
    unflatten(std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())), psi.blocks());
  }
  return out;
}

Eigen::MatrixXd random_hyperplanes(int bits, Eigen::Index dim, std::uint64_t seed) {
  if (bits < 1) throw std::invalid_argument("random_hyperplanes: need at least one bit");
  Rng rng(derive_seed(seed, "hyperplanes"));
  return normal_matrix(bits, dim, 1.0, rng);
}

HashCode hyperplane_code(const Eigen::VectorXd& v, const Eigen::MatrixXd& planes) {
  if (planes.cols() != v.size()) throw std::invalid_argument("hyperplane_code: dimension mismatch");
  return sign_code(planes * v);
}

HashIndex::HashIndex(int bits, int tables, int table_bits, std::uint64_t seed)
    : bits_(bits), table_bits_(table_bits), seed_(seed) {
  if (tables < 1 || table_bits < 1) throw std::invalid_argument("hash index: need M >= 1 and L >= 1");
  if (table_bits > bits) {
    throw std::invalid_argument("hash index: L = " + std::to_string(table_bits) + " exceeds code length R = " +
                                std::to_string(bits));
  }
  if (table_bits > 63) throw std::invalid_argument("hash index: L must be at most 63");
  Rng rng(derive_seed(seed, "bucket-bits"));
  std::vector<int> all(static_cast<std::size_t>(bits));
  std::iota(all.begin(), all.end(), 0);
  for (int t = 0; t < tables; ++t) {
    for (int i = 0; i < table_bits; ++i) {
      std::uniform_int_distribution<int> pick(i, bits - 1);
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<int> pos(all.begin(), all.begin() + table_bits);
    std::sort(pos.begin(), pos.end());
    positions_.push_back(std::move(pos));
  }
  buckets_.resize(static_cast<std::size_t>(tables));
}

HashIndex HashIndex::with_positions(int bits, std::vector<std::vector<int>> positions) {
  if (positions.empty() || positions.front().empty()) throw std::invalid_argument("hash index: need M >= 1 and L >= 1");
  HashIndex h;
  h.bits_ = bits;
  h.table_bits_ = static_cast<int>(positions.front().size());
  if (h.table_bits_ > bits || h.table_bits_ > 63) throw std::invalid_argument("hash index: L exceeds code length");
  for (auto& pos : positions) {
    std::sort(pos.begin(), pos.end());
    const bool bad = static_cast<int>(pos.size()) != h.table_bits_ || pos.front() < 0 || pos.back() >= bits ||
                     std::adjacent_find(pos.begin(), pos.end()) != pos.end();
    if (bad) throw std::invalid_argument("hash index: table positions must be L distinct bits in [0, R)");
  }
  h.positions_ = std::move(positions);
  h.buckets_.resize(h.positions_.size());
  return h;
}

std::uint64_t HashIndex::bucket_of(const HashCode& code, int table) const {
  if (static_cast<int>(code.size()) != bits_) {
    throw std::invalid_argument("hash index: code has " + std::to_string(code.size()) + " bits, expected " +
                                std::to_string(bits_));
  }
  std::uint64_t key = 0;
  for (int p : positions_[static_cast<std::size_t>(table)]) key = (key << 1) | (code[static_cast<std::size_t>(p)] > 0 ? 1u : 0u);
  return key;
}

void HashIndex::insert(const std::string& id, const HashCode& code) {
  for (int t = 0; t < tables(); ++t) buckets_[static_cast<std::size_t>(t)][bucket_of(code, t)].push_back(id);
  ++size_;
}

std::vector<std::string> HashIndex::lookup(const HashCode& code) const {
  std::set<std::string> out;
  for (int t = 0; t < tables(); ++t) {
    const auto& b = buckets_[static_cast<std::size_t>(t)];
    const auto it = b.find(bucket_of(code, t));
    if (it != b.end()) out.insert(it->second.begin(), it->second.end());
  }
  return {out.begin(), out.end()};
}

std::string HashIndex::encode() const {
  ByteWriter w;
  w.magic("SQRTHIDX");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(bits_));
  w.u32(static_cast<std::uint32_t>(tables()));
  w.u32(static_cast<std::uint32_t>(table_bits_));
  w.u64(seed_);
  w.u64(size_);
  for (int t = 0; t < tables(); ++t) {
    for (int p : positions_[static_cast<std::size_t>(t)]) w.u32(static_cast<std::uint32_t>(p));
    const auto& b = buckets_[static_cast<std::size_t>(t)];
    w.u64(b.size());
    for (const auto& [key, ids] : b) {
      w.u64(key);
      w.u64(ids.size());
      for (const auto& id : ids) w.str(id);
    }
  }
  return w.bytes();
}

HashIndex HashIndex::decode(const std::string& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SQRTHIDX");
  if (r.u32() != 1) throw FormatError("unsupported hash index version");
  HashIndex h;
  h.bits_ = static_cast<int>(r.u32());
  const auto tables = r.u32();
  h.table_bits_ = static_cast<int>(r.u32());
  h.seed_ = r.u64();
  h.size_ = r.u64();
  if (h.table_bits_ > h.bits_ || h.table_bits_ < 1 || tables < 1) throw FormatError("inconsistent hash index header");
  h.buckets_.resize(tables);
  for (std::uint32_t t = 0; t < tables; ++t) {
    std::vector<int> pos;
    for (int i = 0; i < h.table_bits_; ++i) {
      const auto p = static_cast<int>(r.u32());
      if (p >= h.bits_) throw FormatError("hash index bit position out of range");
      pos.push_back(p);
    }
    h.positions_.push_back(std::move(pos));
    const auto n = r.u64();
    std::size_t total = 0;
    for (std::uint64_t k = 0; k < n; ++k) {
      const auto key = r.u64();
      auto& ids = h.buckets_[t][key];
      const auto m = r.u64();
      for (std::uint64_t i = 0; i < m; ++i) ids.push_back(r.str());
      total += ids.size();
    }
    if (total != h.size_) throw FormatError("hash index table " + std::to_string(t) + " does not cover the corpus");
  }
  if (!r.at_end()) throw FormatError("trailing bytes in hash index");
  return h;
}

void HashIndex::save(const std::filesystem::path& path) const { write_binary(path, encode()); }
HashIndex HashIndex::load(const std::filesystem::path& path) { return decode(read_binary(path)); }

HashIndex build_index(const std::vector<std::pair<std::string, HashCode>>& codes, int tables, int table_bits,
                      std::uint64_t seed) {
  if (codes.empty()) throw std::invalid_argument("build_index: no codes");
  HashIndex index(static_cast<int>(codes.front().second.size()), tables, table_bits, seed);
  for (const auto& [id, code] : codes) index.insert(id, code);
  return index;
}

namespace {

void write_matrix(ByteWriter& w, const Eigen::MatrixXd& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
  }
}

Eigen::MatrixXd read_matrix(ByteReader& r) {
  const auto rows = r.u32();
  const auto cols = r.u32();
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  }
  return m;
}

}  // namespace

std::string encode_hash_net(const HashNetParams& psi) {
  ByteWriter w;
  w.magic("SQRTHNET");
  w.u32(1);
  const auto& c = psi.config;
  w.u32(static_cast<std::uint32_t>(c.bits));
  w.u32(static_cast<std::uint32_t>(c.hidden));
  w.f64(c.eta1);
  w.f64(c.eta2);
  w.f64(c.eta3);
  write_matrix(w, psi.center);
  for (const auto& b : psi.blocks()) write_matrix(w, *b.value);
  return w.bytes();
}

HashNetParams decode_hash_net(const std::string& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SQRTHNET");
  if (r.u32() != 1) throw FormatError("unsupported hash net version");
  HashNetParams p;
  p.config.bits = static_cast<int>(r.u32());
  p.config.hidden = static_cast<int>(r.u32());
  p.config.eta1 = r.f64();
  p.config.eta2 = r.f64();
  p.config.eta3 = r.f64();
  p.center = read_matrix(r);
  for (const auto& b : p.blocks()) *b.value = read_matrix(r);
  if (p.w1.rows() != p.config.hidden || p.w2.rows() != p.config.bits || p.w1.cols() != p.center.rows() ||
      p.w2.cols() != p.config.hidden || p.b1.rows() != p.config.hidden || p.b2.rows() != p.config.bits) {
    throw FormatError("hash net matrices do not match the header");
  }
  if (!r.at_end()) throw FormatError("trailing bytes in hash net");
  return p;
}

}  // namespace seqret
