#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stta/stats.hpp"
#include "stta/tensor.hpp"

namespace stta::iobmn {

/// Memory statistics of one normalization layer, captured at the last
/// adaptation event, plus what is needed to derive their standard errors.
struct IoBMNState {
  ChannelStats memory_stats;
  std::size_t length = 0;        // spatial extent L of the layer's feature map
  std::size_t memory_count = 0;  // M, samples in the adapted memory batch
  double alpha = 4.0;
  bool populated = false;

  bool operator==(const IoBMNState&) const = default;
};

IoBMNState make_state(ChannelStats memory_stats, std::size_t length, std::size_t memory_count,
                      double alpha);

struct SamplingVariances {
  std::vector<double> mean;  // s^2 of the memory mean:      var / (L*M)
  std::vector<double> var;   // s^2 of the memory variance:  2 var^2 / (L*M - 1)
};

SamplingVariances sampling_variances(const IoBMNState& s);

// sign(x) * max(|x| - lambda, 0)
double soft_shrinkage(double x, double lambda);
std::vector<double> soft_shrinkage(std::span<const double> x, std::span<const double> lambda);

/// Memory statistics moved toward `live` by the soft-shrunk deviation. Within
/// alpha standard errors nothing moves; beyond, the result stays exactly
/// alpha standard errors away from the live value. Variances are clamped at 0.
ChannelStats corrected_stats(const IoBMNState& s, const ChannelStats& live);

// Normalizes a [B x C x L] map with the stats corrected toward its own batch.
Tensor normalize(const IoBMNState& s, const Tensor& f, std::span<const double> gamma,
                 std::span<const double> beta, double epsilon);

}  // namespace stta::iobmn
