#include "ntk/perturb.hpp"

#include <cmath>
#include <cstring>

#include "ntk/common.hpp"
#include "ntk/kernels.hpp"
#include "ntk/rng.hpp"

namespace ntk {

namespace {

constexpr double kInvSqrt12 = 0.28867513459481287;  // 1/sqrt(12)

// Two-pass sample std over a sequence of f32 spans, accumulated in f64.
// Returns 0 for n <= 1. The min==max early-out makes "all elements equal -> 0"
// hold regardless of rounding.
double pooled_sample_std(const std::vector<std::span<const float>>& parts) {
  std::int64_t n = 0;
  for (const auto& p : parts) n += static_cast<std::int64_t>(p.size());
  if (n <= 1) return 0.0;

  float lo = parts.front().front();
  float hi = lo;
  for (const auto& p : parts)
    for (float v : p) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  if (lo == hi) return 0.0;

  std::vector<double> buffer;
  buffer.reserve(static_cast<std::size_t>(n));
  for (const auto& p : parts)
    for (float v : p) buffer.push_back(static_cast<double>(v));

  double mean = kernels::sum(buffer) / static_cast<double>(n);
  double ssd = kernels::sum_sq_dev(buffer, mean);
  return std::sqrt(ssd / static_cast<double>(n - 1));
}

void perturb_tensor(const NamedTensor& in, NamedTensor& out, double scale_for_draw,
                    NoiseDistribution dist, std::uint64_t seed) {
  Rng rng = derive_substream(seed, in.name);
  // Bound on |out - in| under Uniform; rounding to f32 may overshoot it by one
  // ulp, corrected below so the bound holds exactly on stored values.
  const double bound = 0.5 * scale_for_draw;
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    double delta;
    if (dist == NoiseDistribution::Uniform) {
      delta = (rng.uniform01() - 0.5) * scale_for_draw;
    } else {
      delta = rng.normal() * scale_for_draw;
    }
    if (delta == 0.0) {
      out.data[i] = in.data[i];  // bit copy; keeps -0 and NaN payloads intact
      continue;
    }
    const double w = static_cast<double>(in.data[i]);
    float y = static_cast<float>(w + delta);
    if (dist == NoiseDistribution::Uniform) {
      while (std::abs(static_cast<double>(y) - w) > bound)
        y = std::nextafterf(y, in.data[i]);
    }
    out.data[i] = y;
  }
}

}  // namespace

void NoiseSpec::validate() const {
  if (!(lambda >= 0.0))
    throw ValidationError("noise lambda must be a nonnegative number, got " +
                          format_double("%g", lambda));
  for (const auto& p : exclude)
    if (p.empty()) throw ValidationError("empty exclusion pattern");
}

NoiseSpec NoiseSpec::multilingual_preset() {
  NoiseSpec spec;
  spec.lambda = 0.1;
  spec.exclude = {"embed_tokens"};
  return spec;
}

const char* to_string(PerturbStatus s) {
  switch (s) {
    case PerturbStatus::Perturbed: return "perturbed";
    case PerturbStatus::SkippedZeroStd: return "skipped_zero_std";
    case PerturbStatus::SkippedExcluded: return "skipped_excluded";
  }
  return "?";
}

const char* to_string(NoiseDistribution d) {
  return d == NoiseDistribution::Uniform ? "uniform" : "gaussian";
}

const char* to_string(NoiseScope s) {
  return s == NoiseScope::MatrixWise ? "matrix" : "global";
}

NoiseDistribution distribution_from_string(std::string_view s) {
  if (s == "uniform") return NoiseDistribution::Uniform;
  if (s == "gaussian") return NoiseDistribution::Gaussian;
  throw ConfigError("unknown noise distribution '" + std::string(s) +
                    "' (expected uniform|gaussian)");
}

NoiseScope scope_from_string(std::string_view s) {
  if (s == "matrix") return NoiseScope::MatrixWise;
  if (s == "global") return NoiseScope::Global;
  throw ConfigError("unknown noise scope '" + std::string(s) + "' (expected matrix|global)");
}

bool pattern_matches(std::string_view pattern, std::string_view name) {
  std::size_t p = 0, n = 0;
  std::size_t star = std::string_view::npos, star_n = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      star_n = n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++star_n;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

bool name_excluded(std::span<const std::string> patterns, std::string_view name) {
  for (const auto& p : patterns)
    if (pattern_matches(p, name)) return true;
  return false;
}

double tensor_std(const NamedTensor& t) {
  return pooled_sample_std({std::span<const float>(t.data)});
}

double pooled_std(const Checkpoint& ckpt, std::span<const std::string> exclude) {
  std::vector<std::span<const float>> parts;
  for (const auto& t : ckpt.tensors)
    if (!name_excluded(exclude, t.name)) parts.emplace_back(t.data);
  std::int64_t n = 0;
  for (const auto& p : parts) n += static_cast<std::int64_t>(p.size());
  if (n == 0) throw DomainError("pooled std over an empty pool: every tensor is excluded");
  return pooled_sample_std(parts);
}

std::pair<Checkpoint, PerturbReport> perturb_checkpoint(const Checkpoint& ckpt,
                                                        const NoiseSpec& spec) {
  ckpt.validate();
  spec.validate();

  PerturbReport report;
  report.spec = spec;
  if (spec.scope == NoiseScope::Global)
    report.pooled_std = pooled_std(ckpt, spec.exclude);

  Checkpoint out;
  out.metadata = ckpt.metadata;
  out.tensors.resize(ckpt.tensors.size());
  report.records.resize(ckpt.tensors.size());

  const std::int64_t count = static_cast<std::int64_t>(ckpt.tensors.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    const NamedTensor& in = ckpt.tensors[static_cast<std::size_t>(i)];
    NamedTensor& dst = out.tensors[static_cast<std::size_t>(i)];
    PerturbRecord& rec = report.records[static_cast<std::size_t>(i)];
    dst.name = in.name;
    dst.shape = in.shape;
    dst.data = in.data;
    rec.name = in.name;
    rec.std = tensor_std(in);

    if (name_excluded(spec.exclude, in.name)) {
      rec.status = PerturbStatus::SkippedExcluded;
      continue;
    }
    const double s = spec.scope == NoiseScope::MatrixWise ? rec.std : *report.pooled_std;
    if (spec.scope == NoiseScope::MatrixWise && s == 0.0) {
      rec.status = PerturbStatus::SkippedZeroStd;
      continue;
    }
    rec.status = PerturbStatus::Perturbed;
    rec.scale = spec.distribution == NoiseDistribution::Uniform
                    ? spec.lambda * s
                    : spec.lambda * s * kInvSqrt12;
    perturb_tensor(in, dst, rec.scale, spec.distribution, spec.seed);
  }

  return {std::move(out), std::move(report)};
}

}  // namespace ntk
