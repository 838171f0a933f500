#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stta/dataset.hpp"
#include "stta/tensor.hpp"

namespace stta {

// x' = scale * x + offset + N(0, noise^2), then an optional fixed channel
// permutation drawn from perm_seed.
struct Corruption {
  std::string name = "identity";
  double scale = 1.0;
  double offset = 0.0;
  double noise = 0.0;
  bool permute = false;
  std::uint64_t perm_seed = 0;

  bool operator==(const Corruption&) const = default;
};

// The five named presets plus "identity". Throws DataError on unknown names.
Corruption corruption_preset(const std::string& name);
std::vector<std::string> corruption_preset_names();

struct DomainSpec {
  std::size_t classes = 3;
  std::size_t channels = 16;
  std::size_t length = 8;
  Tensor class_means;  // [K x C x L]
  double sigma_src = 0.5;
  Corruption corruption;
};

// Class means are random channel patterns, constant along L, scaled so that
// every pair of means lies `separation` apart (over all C * L entries) in
// expectation.
DomainSpec make_domain(std::size_t classes, std::size_t channels, std::size_t length,
                       double separation, double sigma_src, std::uint64_t world_seed);

// n class-balanced draws (histogram differs by at most one) in random order.
LabeledDataset sample_source(const DomainSpec& spec, std::size_t n, std::uint64_t seed);

// Applies `c` to every row of a [N x C x L] tensor, drawing noise in row-major
// order from `rng`.
Tensor corrupt(const Tensor& x, const Corruption& c, std::mt19937_64& rng);

enum class StreamOrder { iid, class_correlated };

struct Segment {
  Corruption corruption;
  std::size_t batches = 0;
};

struct StreamSpec {
  std::vector<Segment> segments;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  StreamOrder order = StreamOrder::iid;

  std::size_t total_batches() const;
};

struct StreamBatch {
  Tensor inputs;            // [B x C x L]
  std::vector<int> labels;  // evaluation labels
  std::size_t segment = 0;
  std::size_t index = 0;
};

/// Lazily generates the configured batches. Each segment draws from its own
/// seed-derived generator, so output depends only on (domain, spec).
class StreamGenerator {
 public:
  StreamGenerator(DomainSpec domain, StreamSpec spec);

  std::optional<StreamBatch> next();
  std::vector<StreamBatch> collect();

 private:
  void start_segment(std::size_t s);

  DomainSpec domain_;
  StreamSpec spec_;
  std::size_t segment_ = 0;
  std::size_t batch_in_segment_ = 0;
  std::size_t index_ = 0;
  std::vector<int> segment_labels_;
  std::mt19937_64 rng_;
};

std::vector<StreamBatch> make_stream(const DomainSpec& domain, const StreamSpec& spec);

}  // namespace stta
