#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntk/common.hpp"
#include "ntk/toymodel.hpp"

namespace ntk {

// Fixed-length classification examples; the attention mask is all ones.
struct ClsDataset {
  std::int64_t seq_len = 0;
  std::vector<std::int32_t> tokens;  // [n * seq_len]
  std::vector<std::int32_t> labels;  // [n]

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

// Masked-token prediction examples: tokens already carry the mask substitutions,
// targets hold the original id at masked positions and -1 elsewhere.
struct MlmDataset {
  std::int64_t seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::string> warnings;

  std::int64_t size() const {
    return seq_len == 0 ? 0 : static_cast<std::int64_t>(tokens.size()) / seq_len;
  }
};

inline Batch make_cls_batch(const ClsDataset& data, const std::vector<std::int64_t>& indices) {
  Batch b;
  b.batch = static_cast<std::int64_t>(indices.size());
  b.seq = data.seq_len;
  b.tokens.reserve(static_cast<std::size_t>(b.batch * b.seq));
  b.mask.assign(static_cast<std::size_t>(b.batch * b.seq), 1);
  for (std::int64_t i : indices) {
    const auto* src = data.tokens.data() + i * data.seq_len;
    b.tokens.insert(b.tokens.end(), src, src + data.seq_len);
    b.cls_labels.push_back(data.labels[static_cast<std::size_t>(i)]);
  }
  return b;
}

inline Batch make_mlm_batch(const MlmDataset& data, const std::vector<std::int64_t>& indices) {
  Batch b;
  b.batch = static_cast<std::int64_t>(indices.size());
  b.seq = data.seq_len;
  b.mask.assign(static_cast<std::size_t>(b.batch * b.seq), 1);
  for (std::int64_t i : indices) {
    const auto* tok = data.tokens.data() + i * data.seq_len;
    const auto* tgt = data.targets.data() + i * data.seq_len;
    b.tokens.insert(b.tokens.end(), tok, tok + data.seq_len);
    b.mlm_targets.insert(b.mlm_targets.end(), tgt, tgt + data.seq_len);
  }
  return b;
}

}  // namespace ntk
