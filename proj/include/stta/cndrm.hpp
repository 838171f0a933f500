#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stta/stats.hpp"
#include "stta/tensor.hpp"

namespace stta {

// Memory policies; everything except `cndrm` exists for ablations.
enum class SelectionMode {
  naive,        // admit everything, evict the oldest
  random,       // admit everything, evict uniformly at random
  low_entropy,  // admit below the entropy threshold, evict the highest entropy
  crm,          // confidence + class balance, evict the oldest of the largest class
  cndrm,        // confidence + class balance, evict the farthest from the domain centroid
};

const char* to_string(SelectionMode mode);
SelectionMode selection_mode_from_string(const std::string& name);

// Momentum-tracked per-channel (mean, std) of early-layer batch statistics.
struct DomainCentroid {
  std::vector<double> mu;
  std::vector<double> sigma;
  double beta = 0.9;  // weight of the newest batch
  bool initialized = false;

  bool operator==(const DomainCentroid&) const = default;
};

struct MemorySample {
  Tensor input;  // [C x L]
  int pseudo_label = 0;
  double confidence = 0.0;
  SampleStats stats;
  double wdist = 0.0;
  std::uint64_t arrival_index = 0;
  double entropy = 0.0;  // prediction entropy at observation time

  bool operator==(const MemorySample&) const = default;
};

// Largest class probability.
double confidence(std::span<const double> probabilities);

/// Closed-form 2-Wasserstein distance between diagonal Gaussians given by
/// per-channel (mean, std): sqrt(sum_c (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2).
double wasserstein(std::span<const double> mu_a, std::span<const double> sigma_a,
                   std::span<const double> mu_b, std::span<const double> sigma_b);
double wasserstein(const SampleStats& a, const DomainCentroid& b);
double wasserstein(const DomainCentroid& a, const DomainCentroid& b);

struct CentroidUpdate {
  DomainCentroid centroid;
  double shift = 0.0;  // +inf on initialization
};

// Blends means and variances with weight beta on the batch.
CentroidUpdate update_centroid(const DomainCentroid& c, const ChannelStats& batch_stats);

struct CnDRMConfig {
  std::size_t capacity = 16;
  double tau_conf = 0.5;
  double tau_delta = 0.1;
  double beta = 0.9;
  SelectionMode mode = SelectionMode::cndrm;
  double entropy_threshold = 1e300;  // low_entropy admission bound
  std::uint64_t seed = 0;            // random eviction
};

// Whether a prediction with this confidence/entropy may enter the memory.
bool eligible(const CnDRMConfig& cfg, double confidence, double entropy);

// Row indices of a [B x K] probability batch that `eligible` admits.
std::vector<std::size_t> ablation_select(const CnDRMConfig& cfg, const Tensor& probabilities);

struct InsertOutcome {
  enum class Kind { rejected_low_conf, rejected_high_entropy, inserted, inserted_with_eviction };
  Kind kind;
  std::optional<MemorySample> evicted;
};

/// Class- and domain-representative memory.
///
/// Samples are kept in arrival order. When an admitted candidate pushes the
/// memory over capacity, the most populous class (ties: the class holding the
/// farthest sample, then the lowest id) loses its sample farthest from the
/// domain centroid (ties: earliest arrival).
class CnDRM {
 public:
  explicit CnDRM(CnDRMConfig cfg);

  const CnDRMConfig& config() const { return cfg_; }
  const std::vector<MemorySample>& samples() const { return samples_; }
  const DomainCentroid& centroid() const { return centroid_; }
  std::size_t size() const { return samples_.size(); }
  // Arrival index the next admitted candidate will receive.
  std::uint64_t next_arrival() const { return next_arrival_; }

  // A candidate scored against the current centroid (0 before initialization).
  MemorySample make_candidate(Tensor input, int pseudo_label, double confidence, SampleStats stats,
                              double entropy = 0.0);

  InsertOutcome insert(MemorySample candidate);

  // Applies update_centroid to the stored centroid and returns the shift.
  double update_centroid(const ChannelStats& batch_stats);

  // Recomputes every stored distance iff shift > tau_delta; returns the count.
  std::size_t maybe_rescore(double shift);

  // Stacked inputs [n x C x L] in arrival order; nullopt when empty.
  std::optional<Tensor> memory_batch() const;

  // One line per sample: arrival_index pseudo_label confidence wdist.
  void dump(std::ostream& os) const;

  void save(std::ostream& os) const;
  static CnDRM load(std::istream& is);

 private:
  std::size_t pick_eviction();
  std::size_t pick_eviction_cndrm() const;
  std::size_t pick_eviction_crm() const;

  CnDRMConfig cfg_;
  std::vector<MemorySample> samples_;
  DomainCentroid centroid_;
  std::uint64_t next_arrival_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace stta
