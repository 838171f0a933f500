#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "stta/cndrm.hpp"
#include "stta/datagen.hpp"
#include "stta/model.hpp"

namespace stta {

// Statistics the norm layers use during inference.
enum class InferenceStats {
  iobmn,   // corrected memory statistics (batch statistics until the first adaptation)
  ema,     // moving average of test batches
  batch,   // test batch statistics
  source,  // running statistics from pretraining
};

const char* to_string(InferenceStats s);
InferenceStats inference_stats_from_string(const std::string& name);

struct EngineConfig {
  double ar = 0.1;
  double tau_conf = 0.5;
  double tau_delta = 0.1;
  double alpha = 4.0;
  double beta_centroid = 0.9;
  double lr = 1e-3;
  std::size_t memory_capacity = 16;
  SelectionMode selection = SelectionMode::cndrm;
  InferenceStats inference = InferenceStats::iobmn;
  std::uint64_t seed = 0;
  double ema_momentum = 0.9;
  // low_entropy admits samples with entropy < entropy_ratio * ln K.
  double entropy_ratio = 0.4;
  // Recompute IoBMN memory statistics from the current memory every batch
  // instead of freezing them at the last adaptation.
  bool iobmn_refresh_every_batch = false;

  void validate() const;
  bool operator==(const EngineConfig&) const = default;
};

/// Decides which batches trigger an update so that exactly floor(n * ar)
/// of the first n batches adapt.
///
/// The rate is held as an integer numerator over 1e9, so decimal rates such
/// as 0.1 or 0.3 accumulate without rounding drift.
class AdaptationSchedule {
 public:
  static constexpr std::uint64_t kDenominator = 1'000'000'000;

  explicit AdaptationSchedule(double ar = 1.0);

  // Call exactly once per batch, in order.
  bool should_adapt();

  double ar() const { return static_cast<double>(step_) / kDenominator; }
  double credit() const { return static_cast<double>(credit_) / kDenominator; }
  std::uint64_t adapt_count() const { return adapt_count_; }
  std::uint64_t batch_count() const { return batch_count_; }

  void save(std::ostream& os) const;
  static AdaptationSchedule load(std::istream& is);

  bool operator==(const AdaptationSchedule&) const = default;

 private:
  std::uint64_t step_ = 0;
  std::uint64_t credit_ = 0;
  std::uint64_t adapt_count_ = 0;
  std::uint64_t batch_count_ = 0;
};

struct BatchRecord {
  std::size_t index = 0;
  std::size_t segment = 0;
  std::size_t batch_size = 0;
  bool has_labels = false;
  std::size_t correct = 0;
  bool adapted = false;
  bool adapt_skipped = false;  // scheduled but the memory could not support it
  double inference_seconds = 0.0;
  double adaptation_seconds = 0.0;
  std::size_t memory_size = 0;
  std::size_t memory_labeled = 0;  // stored samples with a known eval label
  std::size_t memory_correct = 0;  // ... whose pseudo-label matches it
  std::size_t rescored = 0;
  double centroid_shift = 0.0;
};

struct SegmentAccuracy {
  std::size_t segment = 0;
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct RunMetrics {
  std::vector<BatchRecord> batches;

  std::size_t adapt_count() const;
  std::size_t skipped_adaptations() const;
  double accuracy() const;
  std::vector<SegmentAccuracy> segments() const;
  // Mean wall time of batches with / without an adaptation step.
  double mean_latency_adapt() const;
  double mean_latency_non_adapt() const;
  // Total adaptation time over total (inference + adaptation) time.
  double adaptation_time_share() const;
  double mean_memory_size() const;
  // Pseudo-label accuracy of the stored samples, pooled over all batches.
  double memory_label_accuracy() const;

  void append(const RunMetrics& other);
};

/// The streaming loop for one target stream.
///
/// Per batch: inference, candidate scoring and insertion, centroid update and
/// optional rescoring, then (if scheduled) one adaptation step on the memory.
/// Evaluation labels only feed metrics.
class Engine {
 public:
  Engine(Model model, EngineConfig cfg);

  BatchRecord process_batch(const Tensor& x, std::span<const int> eval_labels = {},
                            std::size_t segment = 0);

  const EngineConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const CnDRM& memory() const { return memory_; }
  const AdaptationSchedule& schedule() const { return schedule_; }
  std::size_t batches_processed() const { return batches_; }

  void save(std::ostream& os) const;
  static Engine load(std::istream& is);

 private:
  NormSource inference_source() const;
  void populate_iobmn(const std::vector<ChannelStats>& layer_stats, std::size_t length,
                      std::size_t count);

  EngineConfig cfg_;
  Model model_;
  CnDRM memory_;
  AdaptationSchedule schedule_;
  std::size_t batches_ = 0;
  std::map<std::uint64_t, int> eval_labels_;  // arrival index -> label, metrics only
};

CnDRMConfig memory_config(const EngineConfig& cfg, std::size_t classes);

RunMetrics run_stream(Engine& engine, StreamGenerator& stream, bool use_labels = true);
RunMetrics run_stream(Engine& engine, std::span<const StreamBatch> stream, bool use_labels = true);

}  // namespace stta
