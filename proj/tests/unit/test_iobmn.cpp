#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stta/errors.hpp"
#include "stta/iobmn.hpp"
#include "stta/tape.hpp"

using namespace stta;
using namespace stta::iobmn;

namespace {

IoBMNState random_state(std::mt19937_64& rng, std::size_t channels, double alpha) {
  std::uniform_real_distribution<double> mean(-2, 2), var(0.05, 4);
  std::uniform_int_distribution<std::size_t> len(1, 8), count(2, 16);
  ChannelStats s;
  for (std::size_t c = 0; c < channels; ++c) {
    s.mean.push_back(mean(rng));
    s.var.push_back(var(rng));
  }
  return make_state(std::move(s), len(rng), count(rng), alpha);
}

std::vector<oracle::Real> widen(std::span<const double> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(SamplingVariances, KnownValues) {
  const IoBMNState zero = make_state({{0.0}, {0.0}}, 8, 16, 4.0);
  const SamplingVariances z = sampling_variances(zero);
  EXPECT_EQ(z.mean[0], 0.0);
  EXPECT_EQ(z.var[0], 0.0);

  const SamplingVariances sv = sampling_variances(make_state({{1.0}, {4.0}}, 8, 16, 4.0));
  EXPECT_DOUBLE_EQ(sv.mean[0], 0.03125);
  EXPECT_NEAR(sv.var[0], 32.0 / 127.0, 1e-15);
  EXPECT_NEAR(sv.var[0], 0.251968, 1e-6);
}

TEST(SamplingVariances, DegenerateAndUnpopulated) {
  EXPECT_THROW(sampling_variances(make_state({{0.0}, {1.0}}, 1, 1, 4.0)), DomainError);
  EXPECT_THROW(sampling_variances(IoBMNState{}), StateError);
  EXPECT_THROW(make_state({{0.0}, {1.0}}, 0, 4, 4.0), DomainError);
  EXPECT_THROW(make_state({{0.0}, {1.0}}, 2, 4, -1.0), DomainError);
  EXPECT_THROW(make_state({{0.0}, {-1.0}}, 2, 4, 1.0), DomainError);
}

TEST(SamplingVariances, MatchesExtendedPrecision) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const IoBMNState s = random_state(rng, 5, 4.0);
    const SamplingVariances sv = sampling_variances(s);
    const oracle::Real lm = static_cast<oracle::Real>(s.length * s.memory_count);
    for (std::size_t c = 0; c < 5; ++c) {
      const oracle::Real v = s.memory_stats.var[c];
      EXPECT_NEAR(sv.mean[c], static_cast<double>(v / lm), 1e-12);
      EXPECT_NEAR(sv.var[c], static_cast<double>(2 * v * v / (lm - 1)), 1e-12);
    }
  }
}

TEST(SoftShrinkage, Examples) {
  EXPECT_EQ(soft_shrinkage(0.5, 1.0), 0.0);
  EXPECT_EQ(soft_shrinkage(3.0, 1.0), 2.0);
  EXPECT_EQ(soft_shrinkage(-3.0, 1.0), -2.0);
  EXPECT_EQ(soft_shrinkage(1.0, 1.0), 0.0);
  EXPECT_EQ(soft_shrinkage(-0.25, 0.0), -0.25);
  EXPECT_THROW(soft_shrinkage(1.0, -0.1), DomainError);
  const std::vector<double> x{2, -2}, lam{1, 3};
  EXPECT_EQ(soft_shrinkage(x, lam), (std::vector<double>{1, 0}));
  EXPECT_THROW(soft_shrinkage(x, std::vector<double>{1}), DimensionError);
}

TEST(CorrectedStats, ZeroDeviationReturnsMemory) {
  std::mt19937_64 rng(2);
  const IoBMNState s = random_state(rng, 4, 4.0);
  EXPECT_EQ(corrected_stats(s, s.memory_stats), s.memory_stats);
  EXPECT_THROW(corrected_stats(IoBMNState{}, s.memory_stats), StateError);
  EXPECT_THROW(corrected_stats(s, ChannelStats{{0.0}, {1.0}}), DimensionError);
}

TEST(CorrectedStats, DeadZoneAndSaturation) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  int inside = 0, outside = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const IoBMNState s = random_state(rng, 3, 4.0);
    const SamplingVariances sv = sampling_variances(s);
    ChannelStats live = s.memory_stats;
    for (std::size_t c = 0; c < 3; ++c) {
      live.mean[c] += 3.0 * u(rng) * 4.0 * std::sqrt(sv.mean[c]);
      live.var[c] = std::max(0.0, live.var[c] + 3.0 * u(rng) * 4.0 * std::sqrt(sv.var[c]));
    }
    const ChannelStats out = corrected_stats(s, live);
    for (std::size_t c = 0; c < 3; ++c) {
      const double lambda = 4.0 * std::sqrt(sv.mean[c]);
      const double d = live.mean[c] - s.memory_stats.mean[c];
      EXPECT_LE(std::abs(out.mean[c] - live.mean[c]), lambda + 1e-12);
      if (std::abs(d) <= lambda) {
        EXPECT_EQ(out.mean[c], s.memory_stats.mean[c]);
        ++inside;
      } else {
        EXPECT_NEAR(out.mean[c], live.mean[c] - std::copysign(lambda, d), 1e-12);
        EXPECT_NEAR(std::abs(out.mean[c] - live.mean[c]), lambda, 1e-12);
        ++outside;
      }
      EXPECT_GE(out.var[c], 0.0);
    }
  }
  EXPECT_GT(inside, 100);
  EXPECT_GT(outside, 100);
}

TEST(CorrectedStats, MonotoneInLiveMean) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const IoBMNState s = random_state(rng, 1, 4.0);
    ChannelStats live = s.memory_stats;
    double prev = -1e300;
    for (int i = -200; i <= 200; ++i) {
      live.mean[0] = s.memory_stats.mean[0] + 0.02 * i;
      const double m = corrected_stats(s, live).mean[0];
      EXPECT_GE(m, prev);
      prev = m;
    }
  }
}

TEST(CorrectedStats, VarianceStaysBetweenLiveAndMemory) {
  // Shrinking the deviation keeps the result between live and memory values,
  // so a non-negative live variance never yields a negative one.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const IoBMNState s = random_state(rng, 2, u(rng));
    const ChannelStats live{{0.0, 0.0}, {u(rng), 0.0}};
    const ChannelStats out = corrected_stats(s, live);
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_GE(out.var[c], std::min(live.var[c], s.memory_stats.var[c]));
      EXPECT_LE(out.var[c], std::max(live.var[c], s.memory_stats.var[c]));
    }
  }
}

TEST(Normalize, AlphaZeroIsBatchNorm) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const IoBMNState s = random_state(rng, 4, 0.0);
    const Tensor f = oracle::random_tensor({3, 4, 5}, rng, -3, 3);
    const std::vector<double> g{1.0, 0.5, 2.0, -1.0}, b{0.0, 0.1, -0.2, 0.3};
    const Tensor out = normalize(s, f, g, b, 1e-5);
    const Tensor bn = affine_normalize(f, channel_stats(f), g, b, 1e-5);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], bn[i], 1e-12);
  }
}

TEST(Normalize, HugeAlphaPinsToMemory) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const IoBMNState s = random_state(rng, 4, 1e9);
    const Tensor f = oracle::random_tensor({3, 4, 5}, rng, -3, 3);
    const std::vector<double> g(4, 1.0), b(4, 0.0);
    const Tensor out = normalize(s, f, g, b, 1e-5);
    const Tensor mem = affine_normalize(f, s.memory_stats, g, b, 1e-5);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], mem[i], 1e-12);
  }
}

TEST(Normalize, DeadZoneIsBitIdenticalToMemoryStats) {
  std::mt19937_64 rng(7);
  const Tensor f = oracle::random_tensor({4, 3, 6}, rng);
  const ChannelStats live = channel_stats(f);
  // Memory stats within a hair of the live ones, with a wide dead zone.
  ChannelStats mem = live;
  for (double& m : mem.mean) m += 1e-4;
  for (double& v : mem.var) v *= 1.001;
  const IoBMNState s = make_state(mem, 6, 4, 4.0);
  const std::vector<double> g{1.5, 1.0, 0.5}, b{0.0, 1.0, -1.0};
  EXPECT_EQ(normalize(s, f, g, b, 1e-5), affine_normalize(f, mem, g, b, 1e-5));
}

TEST(Normalize, MatchesExtendedPrecisionOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const double alpha = std::uniform_real_distribution<double>(0, 6)(rng);
    const IoBMNState s = random_state(rng, 3, alpha);
    const Tensor f = oracle::random_tensor({4, 3, 5}, rng, -3, 3);
    const std::vector<double> g{1.2, -0.7, 0.9}, b{0.3, 0.0, -0.5};
    const Tensor out = normalize(s, f, g, b, 1e-5);
    const auto x = widen(f.data());
    const auto live = oracle::batch_stats(x, 4, 3, 5);
    const auto corrected = oracle::iobmn_corrected(s.memory_stats.mean, s.memory_stats.var, s.length,
                                                   s.memory_count, s.alpha, live);
    const auto ref = oracle::normalize(x, 4, 3, 5, corrected, g, b, 1e-5);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], static_cast<double>(ref[i]), 1e-10);
  }
}
