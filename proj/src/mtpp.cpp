#include "seqret/mtpp.hpp"

#include <random>
#include <stdexcept>

#include "seqret/binary_io.hpp"

namespace seqret {

std::string_view to_string(Variant v) {
  return v == Variant::self_attention ? "self" : "cross";
}

Variant parse_variant(std::string_view name) {
  if (name == "self") return Variant::self_attention;
  if (name == "cross") return Variant::cross_attention;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "' (expected self or cross)");
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
  if (config.dim < 1 || config.max_len < 1 || config.marks < 1 || config.blocks < 1) {
    throw std::invalid_argument("model config: dim, max_len, marks and blocks must be positive");
  }
  const int d = config.dim;
  const int c = config.marks;
  ModelParams p;
  p.config = config;
  p.mark_embedding = Eigen::MatrixXd::Zero(d, c);
  p.time_weight = Eigen::MatrixXd::Zero(d, 1);
  p.gap_weight = Eigen::MatrixXd::Zero(d, 1);
  p.input_bias = Eigen::MatrixXd::Zero(d, 1);
  p.positions = Eigen::MatrixXd::Zero(d, config.max_len);
  for (int b = 0; b < config.blocks; ++b) {
    p.attention.push_back(
        {Eigen::MatrixXd::Zero(d, d), Eigen::MatrixXd::Zero(d, d), Eigen::MatrixXd::Zero(d, d)});
  }
  p.ff_weight = Eigen::MatrixXd::Zero(d, 1);
  p.ff_bias = Eigen::MatrixXd::Zero(d, 1);
  p.out_weight = Eigen::MatrixXd::Zero(d, 1);
  p.out_bias = Eigen::MatrixXd::Zero(d, 1);
  p.start = Eigen::MatrixXd::Zero(d, 1);
  p.time_head = Eigen::MatrixXd::Zero(2, d);
  p.time_bias = Eigen::MatrixXd::Zero(2, 1);
  p.mark_head = Eigen::MatrixXd::Zero(c, d);
  p.mark_bias = Eigen::MatrixXd::Zero(c, 1);
  return p;
}

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng, double stddev) {
  ModelParams p = zeros(config);
  const int d = config.dim;
  p.mark_embedding = normal_matrix(d, config.marks, stddev, rng);
  p.time_weight = normal_matrix(d, 1, stddev, rng);
  p.gap_weight = normal_matrix(d, 1, stddev, rng);
  p.positions = normal_matrix(d, config.max_len, stddev, rng);
  for (auto& a : p.attention) {
    a.query = normal_matrix(d, d, stddev, rng);
    a.key = normal_matrix(d, d, stddev, rng);
    a.value = normal_matrix(d, d, stddev, rng);
  }
  p.ff_weight = normal_matrix(d, 1, stddev, rng);
  p.out_weight = normal_matrix(d, 1, stddev, rng);
  p.time_head = normal_matrix(2, d, stddev, rng);
  p.mark_head = normal_matrix(config.marks, d, stddev, rng);
  return p;
}

namespace {

template <class Block, class Self>
std::vector<Block> model_blocks(Self& p) {
  std::vector<Block> out{{"mark_embedding", &p.mark_embedding},
                         {"time_weight", &p.time_weight},
                         {"gap_weight", &p.gap_weight},
                         {"input_bias", &p.input_bias},
                         {"positions", &p.positions}};
  for (std::size_t b = 0; b < p.attention.size(); ++b) {
    const std::string prefix = "attention" + std::to_string(b) + ".";
    out.push_back({prefix + "query", &p.attention[b].query});
    out.push_back({prefix + "key", &p.attention[b].key});
    out.push_back({prefix + "value", &p.attention[b].value});
  }
  out.insert(out.end(), {{"ff_weight", &p.ff_weight},
                         {"ff_bias", &p.ff_bias},
                         {"out_weight", &p.out_weight},
                         {"out_bias", &p.out_bias},
                         {"start", &p.start},
                         {"time_head", &p.time_head},
                         {"time_bias", &p.time_bias},
                         {"mark_head", &p.mark_head},
                         {"mark_bias", &p.mark_bias}});
  return out;
}

}  // namespace

std::vector<ParamBlock> ModelParams::blocks() { return model_blocks<ParamBlock>(*this); }
std::vector<ConstParamBlock> ModelParams::blocks() const { return model_blocks<ConstParamBlock>(*this); }

void ModelParams::unflatten(const Eigen::VectorXd& flat) {
  seqret::unflatten(std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())), blocks());
}

std::size_t ModelParams::offset_of(std::string_view block) const {
  std::size_t offset = 0;
  for (const auto& b : blocks()) {
    if (b.name == block) return offset;
    offset += static_cast<std::size_t>(b.value->size());
  }
  throw std::invalid_argument("no parameter block named '" + std::string(block) + "'");
}

Eigen::VectorXd EncodedState::before(Eigen::Index i, const ModelParams& params) const {
  if (i < 0 || i > size()) throw std::out_of_range("EncodedState::before: position out of range");
  if (i == 0) return params.start.col(0);
  return hidden.col(i - 1);
}

Eigen::MatrixXd embed_events(const EventSequence& seq, const ModelParams& params) {
  ad::Tape<double> tape;
  const auto leaves = make_model_leaves(tape, params, false);
  const auto in = constant_input(tape, seq);
  return embed_on_tape(leaves, in, params.config.max_len).value();
}

EncodedState encode_self(const EventSequence& corpus_seq, const ModelParams& params) {
  ModelParams self = params;
  self.config.variant = Variant::self_attention;
  ad::Tape<double> tape;
  const auto leaves = make_model_leaves(tape, self, false);
  const auto in = constant_input(tape, corpus_seq);
  return {encode_on_tape(leaves, self.config, in, nullptr).value()};
}

EncodedState encode_cross(const EventSequence& corpus_seq, const EventSequence& query_seq, const ModelParams& params) {
  ModelParams cross = params;
  cross.config.variant = Variant::cross_attention;
  ad::Tape<double> tape;
  const auto leaves = make_model_leaves(tape, cross, false);
  const auto in = constant_input(tape, corpus_seq);
  const auto cond = constant_input(tape, query_seq);
  return {encode_on_tape(leaves, cross.config, in, &cond).value()};
}

TimeParams time_params(const Eigen::VectorXd& state, const ModelParams& params) {
  const Eigen::Vector2d head = params.time_head * state + params.time_bias.col(0);
  return {head(0), std::exp(head(1))};
}

Eigen::VectorXd mark_log_probs(const Eigen::VectorXd& state, const ModelParams& params) {
  const Eigen::VectorXd logits = params.mark_head * state + params.mark_bias.col(0);
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

double mark_log_prob(int mark, const Eigen::VectorXd& state, const ModelParams& params) {
  if (mark < 0 || mark >= params.config.marks) throw std::out_of_range("mark_log_prob: mark out of range");
  return mark_log_probs(state, params)(mark);
}

Eigen::RowVectorXd log_likelihood_terms(const EventSequence& corpus_seq, const EventSequence* conditioning,
                                        const ModelParams& params) {
  ad::Tape<double> tape;
  const auto leaves = make_model_leaves(tape, params, false);
  const auto in = constant_input(tape, corpus_seq);
  if (conditioning != nullptr) {
    const auto cond = constant_input(tape, *conditioning);
    return log_likelihood_terms_on_tape(leaves, params.config, in, &cond).value();
  }
  return log_likelihood_terms_on_tape(leaves, params.config, in, nullptr).value();
}

double sequence_log_likelihood(const EventSequence& corpus_seq, const EventSequence* conditioning,
                               const ModelParams& params) {
  return log_likelihood_terms(corpus_seq, conditioning, params).sum();
}

Eigen::VectorXd grad_log_likelihood(const EventSequence& corpus_seq, const EventSequence* conditioning,
                                    const ModelParams& params) {
  ad::Tape<double> tape;
  const auto leaves = make_model_leaves(tape, params, true);
  const auto in = constant_input(tape, corpus_seq);
  ad::Value<double> ll;
  if (conditioning != nullptr) {
    const auto cond = constant_input(tape, *conditioning);
    ll = log_likelihood_on_tape(leaves, params.config, in, &cond);
  } else {
    ll = log_likelihood_on_tape(leaves, params.config, in, nullptr);
  }
  tape.backward(ll);
  Eigen::VectorXd g(static_cast<Eigen::Index>(params.parameter_count()));
  Eigen::Index k = 0;
  for (const auto& leaf : leaves.ordered()) {
    const Eigen::MatrixXd m = tape.grad(leaf);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) g(k++) = m(r, c);
    }
  }
  return g;
}

SampledEvent sample_next_event(const Eigen::VectorXd& state, const ModelParams& params, std::uint64_t seed) {
  Rng rng(seed);
  const TimeParams tp = time_params(state, params);
  const double z = std::normal_distribution<double>(0.0, 1.0)(rng);
  const Eigen::VectorXd probs = mark_log_probs(state, params).array().exp();
  std::discrete_distribution<int> pick(probs.data(), probs.data() + probs.size());
  const double gap = std::exp(tp.mu + tp.sigma * z);
  return {gap, pick(rng)};
}

namespace {
constexpr std::string_view kCheckpointMagic = "SQRTCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  const ModelConfig& c = ckpt.model.config;
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.variant));
  w.u32(static_cast<std::uint32_t>(c.dim));
  w.u32(static_cast<std::uint32_t>(c.max_len));
  w.u32(static_cast<std::uint32_t>(c.marks));
  w.u32(static_cast<std::uint32_t>(c.blocks));
  const Eigen::VectorXd theta = ckpt.model.flatten();
  w.u64(static_cast<std::uint64_t>(theta.size()));
  for (Eigen::Index i = 0; i < theta.size(); ++i) w.f64(theta(i));

  const UnwarpConfig& u = ckpt.unwarp.config;
  w.u32(ckpt.unwarp.enabled ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(u.hidden1));
  w.u32(static_cast<std::uint32_t>(u.hidden2));
  w.u32(static_cast<std::uint32_t>(u.grid_nodes));
  w.f64(u.noise_scale);
  w.f64(u.reg_sigma);
  const Eigen::VectorXd phi = flatten(ckpt.unwarp.blocks());
  w.u64(static_cast<std::uint64_t>(phi.size()));
  for (Eigen::Index i = 0; i < phi.size(); ++i) w.f64(phi(i));
  return w.bytes();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic);
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(v) + " is not supported");
  }
  ModelConfig c;
  const std::uint32_t variant = r.u32();
  if (variant > 1) throw FormatError("checkpoint: unknown variant tag");
  c.variant = static_cast<Variant>(variant);
  c.dim = static_cast<int>(r.u32());
  c.max_len = static_cast<int>(r.u32());
  c.marks = static_cast<int>(r.u32());
  c.blocks = static_cast<int>(r.u32());
  Checkpoint ckpt;
  ckpt.model = ModelParams::zeros(c);
  const std::uint64_t n_theta = r.u64();
  if (n_theta != ckpt.model.parameter_count()) throw FormatError("checkpoint: parameter count mismatch");
  Eigen::VectorXd theta(static_cast<Eigen::Index>(n_theta));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = r.f64();
  ckpt.model.unflatten(theta);

  const bool enabled = r.u32() != 0;
  UnwarpConfig u;
  u.hidden1 = static_cast<int>(r.u32());
  u.hidden2 = static_cast<int>(r.u32());
  u.grid_nodes = static_cast<int>(r.u32());
  u.noise_scale = r.f64();
  u.reg_sigma = r.f64();
  if (enabled) {
    ckpt.unwarp = UnwarpParams::identity(u);
  } else {
    ckpt.unwarp = UnwarpParams::disabled();
    ckpt.unwarp.config = u;
  }
  const std::uint64_t n_phi = r.u64();
  if (n_phi != ckpt.unwarp.parameter_count()) throw FormatError("checkpoint: unwarp parameter count mismatch");
  std::vector<double> phi(n_phi);
  for (auto& x : phi) x = r.f64();
  unflatten(phi, ckpt.unwarp.blocks());
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_binary(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_binary(path)); }

}  // namespace seqret
