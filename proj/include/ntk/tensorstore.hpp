#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ntk {

// One named, shaped, row-major f32 matrix. Scalars use shape [1]; there is no
// zero-rank tensor.
struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
  void validate() const;
};

// Ordered collection of uniquely named tensors. Iteration order is insertion
// order and survives save/load round trips.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::string> metadata;

  void add(NamedTensor t);
  const NamedTensor* find(std::string_view name) const;
  NamedTensor* find(std::string_view name);
  void validate() const;
};

struct TensorDiff {
  std::string name;
  double max_abs = 0.0;
  double mean_abs = 0.0;
};

struct DiffReport {
  std::vector<TensorDiff> tensors;
  std::vector<std::string> only_in_a;
  std::vector<std::string> only_in_b;
  std::vector<std::string> shape_mismatch;

  bool identical() const;
  double max_abs() const;
};

// Container layout: magic "NTK1" | header length u64 LE | UTF-8 JSON header |
// payload of concatenated row-major f32 LE tensor data. The header lists
// tensors in insertion order with contiguous ascending offsets. Saving the
// same checkpoint value twice produces byte-identical files.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

// Accepts the binary container, or (detected by a leading '{') an all-JSON
// fixture {"tensors":[{"name","shape","data":[...]}],"metadata":{...}}.
Checkpoint load_checkpoint(const std::string& path);

DiffReport checkpoint_diff(const Checkpoint& a, const Checkpoint& b);

}  // namespace ntk
