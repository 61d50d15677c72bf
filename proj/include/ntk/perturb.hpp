#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ntk/tensorstore.hpp"

namespace ntk {

enum class NoiseDistribution { Uniform, Gaussian };
enum class NoiseScope { MatrixWise, Global };

// Perturbation recipe: each kept tensor element gets an independent zero-mean
// draw scaled by lambda and a standard deviation (its own matrix's under
// MatrixWise, the pooled one under Global).
struct NoiseSpec {
  double lambda = 0.15;
  NoiseDistribution distribution = NoiseDistribution::Uniform;
  NoiseScope scope = NoiseScope::MatrixWise;
  std::vector<std::string> exclude;
  std::uint64_t seed = 0;

  void validate() const;

  // Lighter noise and untouched token embeddings, for checkpoints whose
  // embedding geometry must be preserved across languages.
  static NoiseSpec multilingual_preset();
};

enum class PerturbStatus { Perturbed, SkippedZeroStd, SkippedExcluded };

struct PerturbRecord {
  std::string name;
  double std = 0.0;    // the tensor's own sample std
  double scale = 0.0;  // multiplier applied to the unit draw (0 when skipped)
  PerturbStatus status = PerturbStatus::Perturbed;
};

struct PerturbReport {
  NoiseSpec spec;
  std::optional<double> pooled_std;  // present only under Global scope
  std::vector<PerturbRecord> records;
};

const char* to_string(PerturbStatus s);
const char* to_string(NoiseDistribution d);
const char* to_string(NoiseScope s);
NoiseDistribution distribution_from_string(std::string_view s);
NoiseScope scope_from_string(std::string_view s);

// Glob match with '*' as the only wildcard.
bool pattern_matches(std::string_view pattern, std::string_view name);
bool name_excluded(std::span<const std::string> patterns, std::string_view name);

// Bessel-corrected sample std over all elements; 0 when numel <= 1 or all
// elements are equal.
double tensor_std(const NamedTensor& t);

// Sample std over the concatenation of all non-excluded tensors' elements.
double pooled_std(const Checkpoint& ckpt, std::span<const std::string> exclude);

std::pair<Checkpoint, PerturbReport> perturb_checkpoint(const Checkpoint& ckpt,
                                                        const NoiseSpec& spec);

}  // namespace ntk
