#pragma once

#include <cstddef>
#include <vector>

#include "stta/tensor.hpp"

namespace stta {

// Per-channel mean and population variance of a feature map.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;

  std::size_t channels() const { return mean.size(); }
  bool operator==(const ChannelStats&) const = default;
};

// Per-channel mean and standard deviation of one sample's features.
struct SampleStats {
  std::vector<double> mu;
  std::vector<double> sigma;

  std::size_t channels() const { return mu.size(); }
  bool operator==(const SampleStats&) const = default;
};

// Batch statistics of a [B x C x L] feature map, reduced over B and L.
ChannelStats channel_stats(const Tensor& f);

// Per-sample (mean, std over L) of a [B x C x L] feature map.
std::vector<SampleStats> sample_stats(const Tensor& f);

// Throws DimensionError / DomainError when the invariants do not hold.
void validate(const ChannelStats& s);
void validate(const SampleStats& s);

}  // namespace stta
