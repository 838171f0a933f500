#include "stta/stats.hpp"

#include <cmath>

#include "stta/errors.hpp"

namespace stta {

ChannelStats channel_stats(const Tensor& f) {
  if (f.rank() != 3) throw DimensionError("channel_stats expects a [B x C x L] tensor");
  auto [mean, var] = reduce_mean_var(f, {0, 2});
  return {mean.values(), var.values()};
}

std::vector<SampleStats> sample_stats(const Tensor& f) {
  if (f.rank() != 3) throw DimensionError("sample_stats expects a [B x C x L] tensor");
  auto [mean, var] = reduce_mean_var(f, {2});
  const std::size_t b = f.dim(0), c = f.dim(1);
  std::vector<SampleStats> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i].mu.resize(c);
    out[i].sigma.resize(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      out[i].mu[ch] = mean.at(i, ch);
      out[i].sigma[ch] = std::sqrt(var.at(i, ch));
    }
  }
  return out;
}

void validate(const ChannelStats& s) {
  if (s.mean.size() != s.var.size()) throw DimensionError("channel stats length mismatch");
  for (std::size_t c = 0; c < s.mean.size(); ++c) {
    if (!std::isfinite(s.mean[c]) || !std::isfinite(s.var[c]) || s.var[c] < 0.0) {
      throw DomainError("channel stats must be finite with non-negative variance");
    }
  }
}

void validate(const SampleStats& s) {
  if (s.mu.size() != s.sigma.size()) throw DimensionError("sample stats length mismatch");
  for (std::size_t c = 0; c < s.mu.size(); ++c) {
    if (!std::isfinite(s.mu[c]) || !std::isfinite(s.sigma[c]) || s.sigma[c] < 0.0) {
      throw DomainError("sample stats must be finite with non-negative sigma");
    }
  }
}

}  // namespace stta
