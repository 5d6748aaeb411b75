#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace seqret {

/// Named view of one trainable matrix inside a parameter struct.
struct ParamBlock {
  std::string name;
  Eigen::MatrixXd* value;
};

struct ConstParamBlock {
  std::string name;
  const Eigen::MatrixXd* value;
};

inline std::size_t total_size(const std::vector<ConstParamBlock>& blocks) {
  std::size_t n = 0;
  for (const auto& b : blocks) n += static_cast<std::size_t>(b.value->size());
  return n;
}

/// Concatenates blocks in order, each block row-major.
inline Eigen::VectorXd flatten(const std::vector<ConstParamBlock>& blocks) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(total_size(blocks)));
  Eigen::Index k = 0;
  for (const auto& b : blocks) {
    const Eigen::MatrixXd& m = *b.value;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) out(k++) = m(r, c);
    }
  }
  return out;
}

/// Inverse of flatten; the span length must equal the total block size.
inline void unflatten(std::span<const double> flat, const std::vector<ParamBlock>& blocks) {
  std::size_t need = 0;
  for (const auto& b : blocks) need += static_cast<std::size_t>(b.value->size());
  if (flat.size() != need) {
    throw std::invalid_argument("unflatten: expected " + std::to_string(need) + " values, got " +
                                std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (const auto& b : blocks) {
    Eigen::MatrixXd& m = *b.value;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[k++];
    }
  }
}

inline std::vector<ConstParamBlock> as_const(const std::vector<ParamBlock>& blocks) {
  std::vector<ConstParamBlock> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back({b.name, b.value});
  return out;
}

}  // namespace seqret
