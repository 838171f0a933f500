#include "stta/iobmn.hpp"

#include <algorithm>
#include <cmath>

#include "stta/errors.hpp"
#include "stta/tape.hpp"

namespace stta::iobmn {

namespace {

void require_populated(const IoBMNState& s) {
  if (!s.populated) throw StateError("IoBMN state has not been populated by an adaptation step");
}

}  // namespace

IoBMNState make_state(ChannelStats memory_stats, std::size_t length, std::size_t memory_count,
                      double alpha) {
  validate(memory_stats);
  if (length < 1 || memory_count < 1) throw DomainError("IoBMN state needs L >= 1 and M >= 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw DomainError("IoBMN alpha must be >= 0");
  return IoBMNState{std::move(memory_stats), length, memory_count, alpha, true};
}

SamplingVariances sampling_variances(const IoBMNState& s) {
  require_populated(s);
  const std::size_t lm = s.length * s.memory_count;
  if (lm < 2) throw DomainError("sampling variances undefined for L*M < 2");
  const double n = static_cast<double>(lm);
  SamplingVariances out;
  out.mean.reserve(s.memory_stats.channels());
  out.var.reserve(s.memory_stats.channels());
  for (double v : s.memory_stats.var) {
    out.mean.push_back(v / n);
    out.var.push_back(2.0 * v * v / (n - 1.0));
  }
  return out;
}

double soft_shrinkage(double x, double lambda) {
  if (!(lambda >= 0.0)) throw DomainError("soft_shrinkage: lambda must be non-negative");
  const double mag = std::abs(x) - lambda;
  if (mag <= 0.0) return 0.0;
  return x > 0.0 ? mag : -mag;
}

std::vector<double> soft_shrinkage(std::span<const double> x, std::span<const double> lambda) {
  if (x.size() != lambda.size()) throw DimensionError("soft_shrinkage: length mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = soft_shrinkage(x[i], lambda[i]);
  return out;
}

ChannelStats corrected_stats(const IoBMNState& s, const ChannelStats& live) {
  require_populated(s);
  const std::size_t c = s.memory_stats.channels();
  if (live.channels() != c || live.var.size() != c) {
    throw DimensionError("IoBMN: live stats have " + std::to_string(live.channels()) +
                         " channels, memory has " + std::to_string(c));
  }
  const SamplingVariances sv = sampling_variances(s);
  ChannelStats out;
  out.mean.resize(c);
  out.var.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double lambda_mean = s.alpha * std::sqrt(sv.mean[ch]);
    const double lambda_var = s.alpha * std::sqrt(sv.var[ch]);
    const double mm = s.memory_stats.mean[ch];
    const double mv = s.memory_stats.var[ch];
    out.mean[ch] = mm + soft_shrinkage(live.mean[ch] - mm, lambda_mean);
    out.var[ch] = std::max(0.0, mv + soft_shrinkage(live.var[ch] - mv, lambda_var));
  }
  return out;
}

Tensor normalize(const IoBMNState& s, const Tensor& f, std::span<const double> gamma,
                 std::span<const double> beta, double epsilon) {
  return affine_normalize(f, corrected_stats(s, channel_stats(f)), gamma, beta, epsilon);
}

}  // namespace stta::iobmn
