#pragma once

// Binary codes over Fisher vectors and the multi-table bucket index.
//
// Trained codes are sign(Lambda_psi(v)) with Lambda_psi a one-hidden-layer
// tanh network on the corpus-centered vector. The training objective with
// z = tanh(Lambda_psi(v^c)) is
//   eta1/|C| sum_c |1'z|  +  eta2/|C| sum_c || |z| - 1 ||_1
//   + 2 eta3 / C(R,2) * sum_{i<j} | (1/|C|) sum_c z_i z_j |.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "seqret/autodiff.hpp"
#include "seqret/params.hpp"
#include "seqret/random.hpp"

namespace seqret {

using HashCode = std::vector<int>;  // entries exactly -1 or +1

struct HashNetConfig {
  int bits = 16;    // R
  int hidden = 32;  // width of the tanh layer
  /// Term weights; normalized to sum 1 before use.
  double eta1 = 0.4;
  double eta2 = 0.3;
  double eta3 = 0.3;
  int epochs = 300;
  double learning_rate = 1e-2;
  double init_scale = 0.5;
  /// Train the hidden and output biases; otherwise they stay at zero.
  bool biases = false;
  std::uint64_t seed = 0;
};

struct HashNetParams {
  HashNetConfig config;
  Eigen::VectorXd center;  // subtracted from every input vector
  Eigen::MatrixXd w1, b1, w2, b2;

  /// Normal(0, init_scale / sqrt(fan_in)) weights, zero biases.
  static HashNetParams init(const HashNetConfig& config, Eigen::Index input_dim, Rng& rng);

  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;
  int bits() const { return static_cast<int>(w2.rows()); }
  /// eta_i / sum(eta).
  std::array<double, 3> normalized_etas() const;
};

/// R logits for one vector.
Eigen::VectorXd hash_logits(const Eigen::VectorXd& v, const HashNetParams& psi);
/// sign of the logits; a logit of exactly 0 maps to +1.
HashCode sign_code(const Eigen::VectorXd& logits);
HashCode hash_code(const Eigen::VectorXd& v, const HashNetParams& psi);

struct HashLossTerms {
  double balance = 0.0;       // eta1 term
  double saturation = 0.0;    // eta2 term
  double independence = 0.0;  // eta3 term
  double total() const { return balance + saturation + independence; }
};

/// Loss terms from tanh outputs z (R x |C|), already weighted by `etas`.
template <class S>
std::array<ad::Value<S>, 3> hash_terms_on_tape(ad::Value<S> z, const std::array<double, 3>& etas) {
  using namespace ad;
  const Eigen::Index r = z.rows();
  const auto n = static_cast<double>(z.cols());
  auto& tape = *z.tape;
  auto per_code = matmul(tape.constant(Mat<S>::Ones(1, r)), z);  // 1 x |C|
  auto balance = scale(sum(abs(per_code)), S(etas[0] / n));
  auto saturation = scale(sum(abs(shift(abs(z), S(-1.0)))), S(etas[1] / n));
  // Mean co-activation of each bit pair i < j over the corpus.
  Mat<S> upper = Mat<S>::Zero(r, r);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = i + 1; j < r; ++j) upper(i, j) = S(1.0);
  }
  auto co = scale(matmul(z, transpose(z)), S(1.0 / n));
  auto pairs = sum(mul(abs(co), tape.constant(std::move(upper))));
  const double choose2 = r >= 2 ? 0.5 * static_cast<double>(r * (r - 1)) : 1.0;
  auto independence = scale(pairs, S(2.0 * etas[2] / choose2));
  return {balance, saturation, independence};
}

/// Columns of `vectors` are Fisher vectors.
HashLossTerms hash_training_loss(const Eigen::MatrixXd& vectors, const HashNetParams& psi);
/// Same terms evaluated directly on tanh outputs z (R x |C|).
HashLossTerms hash_loss_from_outputs(const Eigen::MatrixXd& z, const std::array<double, 3>& etas);

struct HashLossGradient {
  double loss = 0.0;
  Eigen::VectorXd grad;  // flattened in blocks() order
};

/// Total objective and its gradient with respect to the network weights.
HashLossGradient hash_loss_gradient(const Eigen::MatrixXd& vectors, const HashNetParams& psi);

struct HashTrainResult {
  HashNetParams params;
  std::vector<double> curve;  // loss before each epoch, then the final loss
  int best_epoch = 0;
};

/// Full-batch Adam on the objective; returns the lowest-loss parameters.
/// The input center is set to the mean of the columns. Throws
/// std::runtime_error on a non-finite loss.
HashTrainResult train_hash_net(const Eigen::MatrixXd& vectors, const HashNetConfig& config);

/// R Normal(0, I) hyperplanes as rows.
Eigen::MatrixXd random_hyperplanes(int bits, Eigen::Index dim, std::uint64_t seed);
HashCode hyperplane_code(const Eigen::VectorXd& v, const Eigen::MatrixXd& planes);

/// M tables, each keyed by L code bits at sorted random positions. The first
/// selected position is the most significant bit; -1 -> 0, +1 -> 1.
class HashIndex {
 public:
  HashIndex() = default;
  /// Throws std::invalid_argument when L > R, L > 63, M < 1 or a code has the
  /// wrong length.
  HashIndex(int bits, int tables, int table_bits, std::uint64_t seed);
  /// Fixed bit positions per table (sorted on entry); all tables need the
  /// same size L. The seed is recorded as 0.
  static HashIndex with_positions(int bits, std::vector<std::vector<int>> positions);

  void insert(const std::string& id, const HashCode& code);
  std::uint64_t bucket_of(const HashCode& code, int table) const;
  /// Union over tables of the query's buckets, ascending and unique.
  std::vector<std::string> lookup(const HashCode& code) const;

  int bits() const { return bits_; }
  int tables() const { return static_cast<int>(positions_.size()); }
  int table_bits() const { return table_bits_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::vector<int>>& positions() const { return positions_; }
  const std::map<std::uint64_t, std::vector<std::string>>& buckets(int table) const { return buckets_[table]; }
  std::size_t size() const { return size_; }

  /// "SQRTHIDX" | u32 version=1 | u32 R | u32 M | u32 L | u64 seed | u64 count
  /// | per table: L x u32 positions, u64 buckets, per bucket u64 key, u64 n,
  /// n ids (u32 length + bytes). All little-endian.
  std::string encode() const;
  static HashIndex decode(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static HashIndex load(const std::filesystem::path& path);

 private:
  int bits_ = 0;
  int table_bits_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t size_ = 0;
  std::vector<std::vector<int>> positions_;
  std::vector<std::map<std::uint64_t, std::vector<std::string>>> buckets_;
};

/// Builds an index over `codes` in the given id order.
HashIndex build_index(const std::vector<std::pair<std::string, HashCode>>& codes, int tables, int table_bits,
                      std::uint64_t seed);

/// Binary layout of trained hash parameters ("SQRTHNET").
std::string encode_hash_net(const HashNetParams& psi);
HashNetParams decode_hash_net(const std::string& bytes);

}  // namespace seqret
