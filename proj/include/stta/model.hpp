#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <vector>

#include "stta/dataset.hpp"
#include "stta/iobmn.hpp"
#include "stta/stats.hpp"
#include "stta/tape.hpp"
#include "stta/tensor.hpp"

namespace stta {

enum class LayerKind { channel_mix, norm, relu, global_mean_pool, classifier_head };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;

  bool operator==(const LayerSpec&) const = default;
};

// Where a normalization layer takes its statistics from during forward().
enum class NormSource {
  batch,    // live statistics of the current input
  iobmn,    // memory statistics corrected toward the live ones
  running,  // source statistics recorded at the end of pretraining
  ema,      // moving average of live statistics; updated by the call
};

// Weights of a channel_mix ([out x in], [out]) or classifier_head ([K x C], [K]).
struct DenseParams {
  Tensor weight;
  Tensor bias;

  bool operator==(const DenseParams&) const = default;
};

struct NormLayerState {
  std::vector<double> gamma;
  std::vector<double> beta;
  double epsilon = 1e-5;
  iobmn::IoBMNState iobmn;
  ChannelStats running;
  ChannelStats ema;
  bool ema_initialized = false;

  bool operator==(const NormLayerState&) const = default;
};

struct Layer {
  LayerSpec spec;
  DenseParams dense;    // channel_mix and classifier_head only
  NormLayerState norm;  // norm only

  bool operator==(const Layer&) const = default;
};

struct ForwardResult {
  Tensor logits;                          // [B x K], pre-softmax
  std::vector<SampleStats> early_stats;   // per sample, input of the first norm layer
  std::vector<ChannelStats> layer_stats;  // live batch stats of every norm layer input
};

// Default backbone: `norm_layers` blocks of (channel_mix, norm, relu), then
// mean pooling over L and a linear head.
struct ModelShape {
  std::size_t in_channels = 16;
  std::size_t hidden = 16;
  std::size_t norm_layers = 3;
  std::size_t classes = 3;
};

/// Feed-forward classifier over [B x C x L] feature maps.
///
/// The affine parameters of the normalization layers are the only thing test
/// time adaptation touches; everything else is fixed after pretraining.
class Model {
 public:
  Model() = default;
  Model(std::vector<LayerSpec> specs, std::uint64_t seed);
  static Model make(const ModelShape& shape, std::uint64_t seed);

  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t input_channels() const { return layers_.front().spec.in_channels; }
  std::size_t num_classes() const { return layers_.back().spec.out_channels; }
  std::size_t norm_layer_count() const { return norm_index_.size(); }
  NormLayerState& norm(std::size_t k) { return layers_.at(norm_index_.at(k)).norm; }
  const NormLayerState& norm(std::size_t k) const { return layers_.at(norm_index_.at(k)).norm; }
  DenseParams& dense(std::size_t layer) { return layers_.at(layer).dense; }

  // Momentum of the `ema` normalization source: ema <- m * ema + (1 - m) * live.
  double ema_momentum() const { return ema_momentum_; }
  void set_ema_momentum(double m);

  // Non-const only because NormSource::ema advances the moving averages.
  ForwardResult forward(const Tensor& x, NormSource source);

  // Records the forward pass on `tape`. Norm affine parameters (and, when
  // `all_trainable`, every weight) become parameters with slot
  // 2 * layer_index (weight/gamma) and 2 * layer_index + 1 (bias/beta).
  struct Recorded {
    Var logits;
    ForwardResult result;  // logits left empty
  };
  Recorded record_forward(Tape& tape, const Tensor& x, NormSource source, bool all_trainable);

  bool operator==(const Model&) const = default;

 private:
  void index_layers();

  std::vector<Layer> layers_;
  std::vector<std::size_t> norm_index_;
  double ema_momentum_ = 0.9;
};

double entropy_loss(const Tensor& logits);

// Gradient of the mean prediction entropy w.r.t. every norm layer's affine
// parameters, forwarding `batch` with live batch statistics.
struct AffineGradients {
  std::vector<std::vector<double>> gamma;
  std::vector<std::vector<double>> beta;
  double loss = 0.0;
  std::vector<ChannelStats> layer_stats;
};
AffineGradients entropy_gradients(Model& model, const Tensor& batch);

struct AdaptResult {
  std::vector<ChannelStats> layer_stats;  // per norm layer, observed on the memory batch
  double loss = 0.0;                      // entropy before the step
};

// One SGD step on the norm affine parameters. nullopt (no update) for an
// empty batch.
std::optional<AdaptResult> adapt_step(Model& model, const Tensor& memory_batch, double lr);

struct PretrainOptions {
  std::size_t epochs = 30;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  double source_accuracy = 0.0;  // on the training data, with running stats
  double final_loss = 0.0;
};

// Cross-entropy SGD over all weights, then records the running statistics of
// every norm layer over the full training set.
PretrainReport pretrain(Model& model, const LabeledDataset& source, const PretrainOptions& opts);

double accuracy(Model& model, const LabeledDataset& data, NormSource source);

void save_model(std::ostream& os, const Model& model);
Model load_model(std::istream& is);

}  // namespace stta
