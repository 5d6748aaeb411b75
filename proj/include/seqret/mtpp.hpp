#pragma once

// Intensity-free marked temporal point process with an attention encoder.
//
// Each event is embedded from its mark, time and gap plus a learned position
// vector. A self-attention encoder (causal, corpus-only) or a cross-attention
// encoder (corpus events attend over all events of a conditioning query)
// produces per-event vectors h_j; the output layer accumulates
//   hbar_r = sum_{j<=r} [w_out * relu(h_j * w_ff + b_ff) + b_out].
// The state before event i is hbar_{i-1}, with a learned start vector standing
// in for hbar_0. From the state a linear head gives (mu, log sigma) of a
// lognormal gap density and another gives mark logits.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "seqret/autodiff.hpp"
#include "seqret/core.hpp"
#include "seqret/params.hpp"
#include "seqret/random.hpp"
#include "seqret/unwarp.hpp"

namespace seqret {

enum class Variant : std::uint32_t { self_attention = 0, cross_attention = 1 };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

struct ModelConfig {
  Variant variant = Variant::self_attention;
  int dim = 16;
  int max_len = 128;
  int marks = 5;
  int blocks = 1;
};

struct AttentionWeights {
  Eigen::MatrixXd query;  // D x D
  Eigen::MatrixXd key;    // D x D
  Eigen::MatrixXd value;  // D x D
};

/// MTPP parameters. Canonical order (see blocks()): input layer, positions,
/// attention blocks (query, key, value), output layer, start vector, time
/// head, mark head. Each matrix flattens row-major.
struct ModelParams {
  ModelConfig config;
  Eigen::MatrixXd mark_embedding;  // D x C
  Eigen::MatrixXd time_weight;     // D x 1
  Eigen::MatrixXd gap_weight;      // D x 1
  Eigen::MatrixXd input_bias;      // D x 1
  Eigen::MatrixXd positions;       // D x max_len
  std::vector<AttentionWeights> attention;
  Eigen::MatrixXd ff_weight;       // D x 1
  Eigen::MatrixXd ff_bias;         // D x 1
  Eigen::MatrixXd out_weight;      // D x 1
  Eigen::MatrixXd out_bias;        // D x 1
  Eigen::MatrixXd start;           // D x 1
  Eigen::MatrixXd time_head;       // 2 x D, rows (mu, log sigma)
  Eigen::MatrixXd time_bias;       // 2 x 1
  Eigen::MatrixXd mark_head;       // C x D
  Eigen::MatrixXd mark_bias;       // C x 1

  static ModelParams zeros(const ModelConfig& config);
  /// Weights and positions ~ Normal(0, stddev), biases and start zero.
  static ModelParams init(const ModelConfig& config, Rng& rng, double stddev = 0.02);

  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;
  std::size_t parameter_count() const { return total_size(blocks()); }
  Eigen::VectorXd flatten() const { return seqret::flatten(blocks()); }
  void unflatten(const Eigen::VectorXd& flat);
  /// Offset of a named block in the flattened vector.
  std::size_t offset_of(std::string_view block) const;
};

// ---------------------------------------------------------------------------
// Tape-level model

template <class S>
struct ModelLeaves {
  ad::Value<S> mark_embedding, time_weight, gap_weight, input_bias, positions;
  std::vector<std::array<ad::Value<S>, 3>> attention;
  ad::Value<S> ff_weight, ff_bias, out_weight, out_bias, start;
  ad::Value<S> time_head, time_bias, mark_head, mark_bias;

  /// Same order as ModelParams::blocks().
  std::vector<ad::Value<S>> ordered() const {
    std::vector<ad::Value<S>> v{mark_embedding, time_weight, gap_weight, input_bias, positions};
    for (const auto& a : attention) v.insert(v.end(), a.begin(), a.end());
    v.insert(v.end(), {ff_weight, ff_bias, out_weight, out_bias, start, time_head, time_bias, mark_head, mark_bias});
    return v;
  }
};

/// Places the parameters on a tape. For Dual scalars, `direction` (flattened,
/// canonical order) seeds the tangent parts.
template <class S>
ModelLeaves<S> make_model_leaves(ad::Tape<S>& tape, const ModelParams& params, bool differentiable,
                                 const Eigen::VectorXd* direction = nullptr) {
  Eigen::Index offset = 0;
  auto mk = [&](const Eigen::MatrixXd& m) {
    ad::Mat<S> v = m.cast<S>();
    if constexpr (std::is_same_v<S, Dual>) {
      if (direction != nullptr) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
          for (Eigen::Index c = 0; c < m.cols(); ++c) v(r, c).d = (*direction)(offset + r * m.cols() + c);
        }
      }
    }
    offset += m.size();
    return differentiable ? tape.leaf(std::move(v)) : tape.constant(std::move(v));
  };
  ModelLeaves<S> l;
  l.mark_embedding = mk(params.mark_embedding);
  l.time_weight = mk(params.time_weight);
  l.gap_weight = mk(params.gap_weight);
  l.input_bias = mk(params.input_bias);
  l.positions = mk(params.positions);
  for (const auto& a : params.attention) {
    auto q = mk(a.query);
    auto k = mk(a.key);
    auto v = mk(a.value);
    l.attention.push_back({q, k, v});
  }
  l.ff_weight = mk(params.ff_weight);
  l.ff_bias = mk(params.ff_bias);
  l.out_weight = mk(params.out_weight);
  l.out_bias = mk(params.out_bias);
  l.start = mk(params.start);
  l.time_head = mk(params.time_head);
  l.time_bias = mk(params.time_bias);
  l.mark_head = mk(params.mark_head);
  l.mark_bias = mk(params.mark_bias);
  return l;
}

/// Sequence as seen by the encoder: times and gaps may be tape values (the
/// unwarped query) or constants.
template <class S>
struct SequenceInput {
  ad::Value<S> times;  // 1 x n
  ad::Value<S> gaps;   // 1 x n
  std::vector<int> marks;

  Eigen::Index size() const { return static_cast<Eigen::Index>(marks.size()); }
};

template <class S>
SequenceInput<S> constant_input(ad::Tape<S>& tape, const EventSequence& seq) {
  auto raw = raw_times_on_tape(tape, seq);
  return {raw.times, raw.gaps, seq.marks()};
}

template <class S>
SequenceInput<S> unwarped_input(const UnwarpedTimes<S>& u, const EventSequence& seq) {
  return {u.times, u.gaps, seq.marks()};
}

class SequenceTooLong : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input layer: mark column + time/gap features + bias + position vector (D x n).
template <class S>
ad::Value<S> embed_on_tape(const ModelLeaves<S>& p, const SequenceInput<S>& in, int max_len) {
  using namespace ad;
  const Eigen::Index n = in.size();
  if (n > max_len) {
    throw SequenceTooLong("sequence of length " + std::to_string(n) + " exceeds max_len " + std::to_string(max_len));
  }
  std::vector<Eigen::Index> marks(in.marks.begin(), in.marks.end());
  auto y = select_cols(p.mark_embedding, std::move(marks));
  y = add(y, matmul(p.time_weight, in.times));
  y = add(y, matmul(p.gap_weight, in.gaps));
  y = add_colvec(y, p.input_bias);
  return add(y, cols(p.positions, 0, n));
}

/// Scaled dot-product attention: rows of `source` issue queries, `context`
/// supplies keys and values. Causal masking restricts position j to 0..j.
template <class S>
ad::Value<S> attention_on_tape(const std::array<ad::Value<S>, 3>& w, ad::Value<S> source, ad::Value<S> context,
                               bool causal) {
  using namespace ad;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(source.rows()));
  auto s = matmul(w[0], source);
  auto k = matmul(w[1], context);
  auto v = matmul(w[2], context);
  auto logits = scale(matmul(transpose(s), k), S(inv_sqrt_d));
  auto weights = softmax_rows(logits, causal);
  return matmul(v, transpose(weights));
}

/// hbar_1..hbar_n as columns (D x n).
template <class S>
ad::Value<S> encode_on_tape(const ModelLeaves<S>& p, const ModelConfig& config, const SequenceInput<S>& seq,
                            const std::type_identity_t<SequenceInput<S>>* conditioning) {
  using namespace ad;
  auto x = embed_on_tape(p, seq, config.max_len);
  if (config.variant == Variant::self_attention) {
    for (const auto& w : p.attention) x = attention_on_tape(w, x, x, true);
  } else {
    if (conditioning == nullptr || conditioning->size() == 0) {
      throw std::invalid_argument("cross-attention encoder needs a non-empty conditioning sequence");
    }
    auto context = embed_on_tape(p, *conditioning, config.max_len);
    for (const auto& w : p.attention) x = attention_on_tape(w, x, context, false);
  }
  auto f = relu(add_colvec(mul_colvec(x, p.ff_weight), p.ff_bias));
  f = add_colvec(mul_colvec(f, p.out_weight), p.out_bias);
  return cumsum_cols(f);
}

/// State conditioning event i is column i: [start, hbar_1, ..., hbar_{n-1}].
template <class S>
ad::Value<S> prefix_states_on_tape(const ModelLeaves<S>& p, ad::Value<S> hbar) {
  const Eigen::Index n = hbar.cols();
  if (n <= 1) return p.start;
  return ad::hcat(p.start, ad::cols(hbar, 0, n - 1));
}

/// Per-event log-likelihood terms log rho(gap_i) + log m(x_i) as a 1 x n row.
template <class S>
ad::Value<S> log_likelihood_terms_on_tape(const ModelLeaves<S>& p, const ModelConfig& config,
                                          const SequenceInput<S>& seq, const std::type_identity_t<SequenceInput<S>>* conditioning) {
  using namespace ad;
  if ((config.variant == Variant::cross_attention) != (conditioning != nullptr)) {
    throw std::invalid_argument("conditioning must be given exactly for the cross-attention variant");
  }
  if (seq.size() == 0) throw std::invalid_argument("log-likelihood of an empty sequence");
  auto hbar = encode_on_tape(p, config, seq, conditioning);
  auto states = prefix_states_on_tape(p, hbar);

  auto heads = add_colvec(matmul(p.time_head, states), p.time_bias);
  auto mu = row(heads, 0);
  auto log_sigma = row(heads, 1);
  auto log_gap = log(seq.gaps);
  auto z = mul(sub(log_gap, mu), exp(neg(log_sigma)));
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  auto time_terms = shift(sub(neg(add(log_gap, log_sigma)), scale(square(z), S(0.5))), S(-half_log_2pi));

  auto logits = add_colvec(matmul(p.mark_head, states), p.mark_bias);
  std::vector<Eigen::Index> marks(seq.marks.begin(), seq.marks.end());
  auto mark_terms = pick(log_softmax_cols(logits), std::move(marks));
  return add(time_terms, mark_terms);
}

/// log p(H) = sum_i [log rho(t_i) + log m(x_i)] as a scalar tape value.
template <class S>
ad::Value<S> log_likelihood_on_tape(const ModelLeaves<S>& p, const ModelConfig& config,
                                    const SequenceInput<S>& seq, const std::type_identity_t<SequenceInput<S>>* conditioning) {
  return ad::sum(log_likelihood_terms_on_tape(p, config, seq, conditioning));
}

// ---------------------------------------------------------------------------
// Plain evaluation API

/// Per-position output-layer vectors hbar_r (D x n).
struct EncodedState {
  Eigen::MatrixXd hidden;

  Eigen::Index size() const { return hidden.cols(); }
  /// State conditioning event i (0-based): start vector for i = 0, else hbar_i.
  Eigen::VectorXd before(Eigen::Index i, const ModelParams& params) const;
};

Eigen::MatrixXd embed_events(const EventSequence& seq, const ModelParams& params);
EncodedState encode_self(const EventSequence& corpus_seq, const ModelParams& params);
/// `query_seq` must already be unwarped by the caller.
EncodedState encode_cross(const EventSequence& corpus_seq, const EventSequence& query_seq, const ModelParams& params);

/// Log of the lognormal density of `gap`.
template <class S>
S time_log_density(const S& gap, const S& mu, const S& sigma) {
  if (!(primal(gap) > 0.0) || !(primal(sigma) > 0.0)) {
    throw std::domain_error("time_log_density: gap and sigma must be positive");
  }
  using std::log;
  const S lg = log(gap);
  const S z = (lg - mu) / sigma;
  return -lg - log(sigma) - S(0.5 * std::log(2.0 * std::numbers::pi)) - S(0.5) * z * z;
}

struct TimeParams {
  double mu;
  double sigma;
};

TimeParams time_params(const Eigen::VectorXd& state, const ModelParams& params);
Eigen::VectorXd mark_log_probs(const Eigen::VectorXd& state, const ModelParams& params);
double mark_log_prob(int mark, const Eigen::VectorXd& state, const ModelParams& params);

/// Conditioning is required exactly for the cross-attention variant.
double sequence_log_likelihood(const EventSequence& corpus_seq, const EventSequence* conditioning,
                               const ModelParams& params);
Eigen::RowVectorXd log_likelihood_terms(const EventSequence& corpus_seq, const EventSequence* conditioning,
                                        const ModelParams& params);
/// Gradient of the log-likelihood with respect to every parameter, canonical order.
Eigen::VectorXd grad_log_likelihood(const EventSequence& corpus_seq, const EventSequence* conditioning,
                                    const ModelParams& params);

struct SampledEvent {
  double gap;
  int mark;
};

/// gap = exp(mu + sigma * N(0, 1)), mark ~ softmax(mark logits).
SampledEvent sample_next_event(const Eigen::VectorXd& state, const ModelParams& params, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelParams model;
  UnwarpParams unwarp;
};

/// Little-endian layout:
///   "SQRTCKPT" | u32 version=1 | u32 variant | u32 dim | u32 max_len | u32 marks
///   | u32 blocks | u64 n_theta | f64[n_theta]
///   | u32 unwarp_enabled | u32 hidden1 | u32 hidden2 | u32 grid_nodes
///   | f64 noise_scale | f64 reg_sigma | u64 n_phi | f64[n_phi]
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace seqret
