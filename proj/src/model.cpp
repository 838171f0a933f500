#include "stta/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stta/errors.hpp"
#include "stta/text_io.hpp"

namespace stta {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::channel_mix: return "channel_mix";
    case LayerKind::norm: return "norm";
    case LayerKind::relu: return "relu";
    case LayerKind::global_mean_pool: return "global_mean_pool";
    case LayerKind::classifier_head: return "classifier_head";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::channel_mix, LayerKind::norm, LayerKind::relu,
                      LayerKind::global_mean_pool, LayerKind::classifier_head}) {
    if (name == to_string(k)) return k;
  }
  throw DataError("unknown layer kind '" + name + "'");
}

namespace {

void validate_specs(const std::vector<LayerSpec>& specs) {
  if (specs.empty()) throw DimensionError("model needs at least one layer");
  bool pooled = false;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if (s.in_channels == 0 || s.out_channels == 0) throw DimensionError("layer with zero channels");
    if (i > 0 && specs[i - 1].out_channels != s.in_channels) {
      throw DimensionError("layer " + std::to_string(i) + " input extent does not chain");
    }
    const bool shape_preserving = s.kind == LayerKind::norm || s.kind == LayerKind::relu ||
                                  s.kind == LayerKind::global_mean_pool;
    if (shape_preserving && s.in_channels != s.out_channels) {
      throw DimensionError(std::string(to_string(s.kind)) + " layer must preserve channels");
    }
    if (s.kind == LayerKind::classifier_head && i + 1 != specs.size()) {
      throw DimensionError("classifier_head must be the last layer");
    }
    if ((s.kind == LayerKind::channel_mix || s.kind == LayerKind::norm) && pooled) {
      throw DimensionError("feature-map layers cannot follow global_mean_pool");
    }
    if (s.kind == LayerKind::global_mean_pool) {
      if (pooled) throw DimensionError("at most one global_mean_pool");
      pooled = true;
    }
  }
  if (specs.back().kind != LayerKind::classifier_head) {
    throw DimensionError("model must end with a classifier_head");
  }
  if (!pooled) throw DimensionError("classifier_head requires a preceding global_mean_pool");
}

DenseParams init_dense(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  DenseParams p{Tensor({out, in}), Tensor({out})};
  for (double& w : p.weight.data()) w = normal(rng);
  return p;
}

ChannelStats unit_stats(std::size_t c) { return {std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)}; }

}  // namespace

Model::Model(std::vector<LayerSpec> specs, std::uint64_t seed) {
  validate_specs(specs);
  std::mt19937_64 rng(seed);
  for (const LayerSpec& s : specs) {
    Layer layer{s, {}, {}};
    if (s.kind == LayerKind::channel_mix || s.kind == LayerKind::classifier_head) {
      layer.dense = init_dense(s.in_channels, s.out_channels, rng);
    } else if (s.kind == LayerKind::norm) {
      layer.norm.gamma.assign(s.in_channels, 1.0);
      layer.norm.beta.assign(s.in_channels, 0.0);
      layer.norm.running = unit_stats(s.in_channels);
    }
    layers_.push_back(std::move(layer));
  }
  index_layers();
}

Model Model::make(const ModelShape& shape, std::uint64_t seed) {
  if (shape.norm_layers == 0) throw DimensionError("model needs at least one norm layer");
  std::vector<LayerSpec> specs;
  std::size_t c = shape.in_channels;
  for (std::size_t k = 0; k < shape.norm_layers; ++k) {
    specs.push_back({LayerKind::channel_mix, c, shape.hidden});
    c = shape.hidden;
    specs.push_back({LayerKind::norm, c, c});
    specs.push_back({LayerKind::relu, c, c});
  }
  specs.push_back({LayerKind::global_mean_pool, c, c});
  specs.push_back({LayerKind::classifier_head, c, shape.classes});
  return Model(std::move(specs), seed);
}

void Model::index_layers() {
  norm_index_.clear();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].spec.kind == LayerKind::norm) norm_index_.push_back(i);
  }
}

void Model::set_ema_momentum(double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw DomainError("ema momentum must lie in [0, 1]");
  ema_momentum_ = m;
}

Model::Recorded Model::record_forward(Tape& tape, const Tensor& x, NormSource source,
                                      bool all_trainable) {
  if (layers_.empty()) throw StateError("model has no layers");
  if (x.rank() != 3 || x.dim(1) != input_channels() || x.dim(0) == 0 || x.dim(2) == 0) {
    throw DimensionError("model input must be [B x " + std::to_string(input_channels()) +
                         " x L], got " + shape_string(x.shape()));
  }
  if (source == NormSource::iobmn) {
    for (std::size_t idx : norm_index_) {
      if (!layers_[idx].norm.iobmn.populated) {
        throw StateError("IoBMN normalization requested before any adaptation populated it");
      }
    }
  }

  Recorded rec{tape.constant(x), {}};
  Var h = rec.logits;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& layer = layers_[i];
    const auto param = [&](const Tensor& value, std::size_t slot, bool trainable) {
      return trainable ? tape.parameter(value, slot) : tape.constant(value);
    };
    switch (layer.spec.kind) {
      case LayerKind::channel_mix: {
        Var w = param(layer.dense.weight, 2 * i, all_trainable);
        Var b = param(layer.dense.bias, 2 * i + 1, all_trainable);
        h = ad::channel_mix(tape, w, b, h);
        break;
      }
      case LayerKind::norm: {
        NormLayerState& n = layer.norm;
        const std::size_t c = n.gamma.size();
        Var gamma = tape.parameter(Tensor({c}, n.gamma), 2 * i);
        Var beta = tape.parameter(Tensor({c}, n.beta), 2 * i + 1);
        const Tensor& in = tape.value(h);
        if (rec.result.layer_stats.empty()) rec.result.early_stats = sample_stats(in);
        if (source == NormSource::batch) {
          ad::NormOutput out = ad::batch_norm(tape, h, gamma, beta, n.epsilon);
          rec.result.layer_stats.push_back(std::move(out.stats));
          h = out.out;
          break;
        }
        ChannelStats live = channel_stats(in);
        ChannelStats used;
        if (source == NormSource::iobmn) {
          used = iobmn::corrected_stats(n.iobmn, live);
        } else if (source == NormSource::running) {
          used = n.running;
        } else {
          if (!n.ema_initialized) {
            n.ema = live;
            n.ema_initialized = true;
          } else {
            for (std::size_t ch = 0; ch < c; ++ch) {
              n.ema.mean[ch] = ema_momentum_ * n.ema.mean[ch] + (1.0 - ema_momentum_) * live.mean[ch];
              n.ema.var[ch] = ema_momentum_ * n.ema.var[ch] + (1.0 - ema_momentum_) * live.var[ch];
            }
          }
          used = n.ema;
        }
        h = ad::fixed_norm(tape, h, gamma, beta, used, n.epsilon);
        rec.result.layer_stats.push_back(std::move(live));
        break;
      }
      case LayerKind::relu:
        h = ad::relu(tape, h);
        break;
      case LayerKind::global_mean_pool:
        h = ad::mean_pool(tape, h);
        break;
      case LayerKind::classifier_head: {
        Var w = param(layer.dense.weight, 2 * i, all_trainable);
        Var b = param(layer.dense.bias, 2 * i + 1, all_trainable);
        // logits = h W^T + b, with W stored [K x C]
        const Tensor& wv = layer.dense.weight;
        Tensor wt({wv.dim(1), wv.dim(0)});
        for (std::size_t r = 0; r < wv.dim(0); ++r)
          for (std::size_t col = 0; col < wv.dim(1); ++col) wt.at(col, r) = wv.at(r, col);
        Var wt_var = tape.record(std::move(wt), {w}, [](const Tensor& g, std::span<Tensor* const> gr) {
          if (!gr[0]) return;
          for (std::size_t r = 0; r < g.dim(0); ++r)
            for (std::size_t col = 0; col < g.dim(1); ++col) gr[0]->at(col, r) += g.at(r, col);
        });
        h = ad::add_row_bias(tape, ad::matmul(tape, h, wt_var), b);
        break;
      }
    }
  }
  rec.logits = h;
  return rec;
}

ForwardResult Model::forward(const Tensor& x, NormSource source) {
  Tape tape;
  Recorded rec = record_forward(tape, x, source, false);
  rec.result.logits = tape.value(rec.logits);
  return std::move(rec.result);
}

double entropy_loss(const Tensor& logits) {
  Tape tape;
  return tape.value(ad::entropy_mean(tape, tape.constant(logits)))[0];
}

AffineGradients entropy_gradients(Model& model, const Tensor& batch) {
  Tape tape;
  Model::Recorded rec = model.record_forward(tape, batch, NormSource::batch, false);
  Var loss = ad::entropy_mean(tape, rec.logits);
  const Gradients grads = tape.backward(loss);

  AffineGradients out;
  out.loss = tape.value(loss)[0];
  out.layer_stats = std::move(rec.result.layer_stats);
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].spec.kind != LayerKind::norm) continue;
    out.gamma.push_back(grads.at(2 * i).values());
    out.beta.push_back(grads.at(2 * i + 1).values());
  }
  return out;
}

std::optional<AdaptResult> adapt_step(Model& model, const Tensor& memory_batch, double lr) {
  if (memory_batch.rank() == 0 || memory_batch.empty()) return std::nullopt;
  AffineGradients g = entropy_gradients(model, memory_batch);
  for (std::size_t k = 0; k < model.norm_layer_count(); ++k) {
    NormLayerState& n = model.norm(k);
    for (std::size_t c = 0; c < n.gamma.size(); ++c) {
      n.gamma[c] -= lr * g.gamma[k][c];
      n.beta[c] -= lr * g.beta[k][c];
    }
  }
  return AdaptResult{std::move(g.layer_stats), g.loss};
}

namespace {

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  const std::size_t stride = x.size() / x.dim(0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * stride), stride,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return out;
}

}  // namespace

PretrainReport pretrain(Model& model, const LabeledDataset& source, const PretrainOptions& opts) {
  const std::size_t n = source.size();
  if (source.inputs.rank() != 3 || source.inputs.dim(0) != n) {
    throw DataError("pretrain: inputs and labels disagree in length");
  }
  for (int y : source.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.num_classes()) {
      throw DataError("pretrain: label " + std::to_string(y) + " out of range");
    }
  }
  PretrainReport report;
  if (opts.epochs == 0) return report;
  if (n == 0 || opts.batch_size == 0) throw DataError("pretrain: empty dataset or batch size");

  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& layers = model.layers();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t stop = std::min(n, start + opts.batch_size);
      if (stop - start < 2) continue;  // batch statistics need two samples
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      std::vector<int> labels;
      for (std::size_t r : rows) labels.push_back(source.labels[r]);

      Tape tape;
      Model::Recorded rec = model.record_forward(tape, gather_rows(source.inputs, rows),
                                                 NormSource::batch, true);
      Var loss = ad::cross_entropy_mean(tape, rec.logits, labels);
      const Gradients grads = tape.backward(loss);
      report.final_loss = tape.value(loss)[0];

      std::size_t norm_k = 0;
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerKind kind = layers[i].spec.kind;
        if (kind == LayerKind::norm) {
          NormLayerState& s = model.norm(norm_k++);
          const Tensor& gg = grads.at(2 * i);
          const Tensor& gb = grads.at(2 * i + 1);
          for (std::size_t c = 0; c < s.gamma.size(); ++c) {
            s.gamma[c] -= opts.lr * gg[c];
            s.beta[c] -= opts.lr * gb[c];
          }
        } else if (kind == LayerKind::channel_mix || kind == LayerKind::classifier_head) {
          DenseParams& p = model.dense(i);
          const Tensor& gw = grads.at(2 * i);
          const Tensor& gb = grads.at(2 * i + 1);
          for (std::size_t k = 0; k < p.weight.size(); ++k) p.weight[k] -= opts.lr * gw[k];
          for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] -= opts.lr * gb[k];
        }
      }
    }
  }

  const ForwardResult full = model.forward(source.inputs, NormSource::batch);
  for (std::size_t k = 0; k < model.norm_layer_count(); ++k) model.norm(k).running = full.layer_stats[k];
  report.source_accuracy = accuracy(model, source, NormSource::running);
  return report;
}

double accuracy(Model& model, const LabeledDataset& data, NormSource source) {
  if (data.size() == 0) return 0.0;
  const std::vector<int> pred = argmax_rows(model.forward(data.inputs, source).logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void save_model(std::ostream& os, const Model& model) {
  using text_io::write_vector;
  os << "stta-model 1\n";
  os << "layers " << model.layers().size() << '\n';
  for (const Layer& layer : model.layers()) {
    os << "layer " << to_string(layer.spec.kind) << ' ' << layer.spec.in_channels << ' '
       << layer.spec.out_channels << '\n';
    if (layer.spec.kind == LayerKind::channel_mix || layer.spec.kind == LayerKind::classifier_head) {
      write_vector(os, "weight", layer.dense.weight.data());
      write_vector(os, "bias", layer.dense.bias.data());
    } else if (layer.spec.kind == LayerKind::norm) {
      const NormLayerState& n = layer.norm;
      os << "epsilon ";
      text_io::write_real(os, n.epsilon);
      os << '\n';
      write_vector(os, "gamma", n.gamma);
      write_vector(os, "beta", n.beta);
      write_vector(os, "running_mean", n.running.mean);
      write_vector(os, "running_var", n.running.var);
      os << "ema " << (n.ema_initialized ? 1 : 0) << '\n';
      write_vector(os, "ema_mean", n.ema.mean);
      write_vector(os, "ema_var", n.ema.var);
      os << "iobmn " << (n.iobmn.populated ? 1 : 0) << ' ' << n.iobmn.length << ' '
         << n.iobmn.memory_count << ' ';
      text_io::write_real(os, n.iobmn.alpha);
      os << '\n';
      write_vector(os, "iobmn_mean", n.iobmn.memory_stats.mean);
      write_vector(os, "iobmn_var", n.iobmn.memory_stats.var);
    }
  }
  os << "ema_momentum ";
  text_io::write_real(os, model.ema_momentum());
  os << "\nend-model\n";
}

Model load_model(std::istream& is) {
  using namespace text_io;
  expect(is, "stta-model");
  if (read_uint(is) != 1) throw DataError("unsupported model checkpoint version");
  expect(is, "layers");
  const std::size_t count = read_uint(is);
  std::vector<LayerSpec> specs;
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    expect(is, "layer");
    Layer layer{};
    layer.spec.kind = layer_kind_from_string(read_token(is));
    layer.spec.in_channels = read_uint(is);
    layer.spec.out_channels = read_uint(is);
    const std::size_t in = layer.spec.in_channels, out = layer.spec.out_channels;
    if (layer.spec.kind == LayerKind::channel_mix || layer.spec.kind == LayerKind::classifier_head) {
      layer.dense.weight = Tensor({out, in}, read_vector(is, "weight"));
      layer.dense.bias = Tensor({out}, read_vector(is, "bias"));
    } else if (layer.spec.kind == LayerKind::norm) {
      NormLayerState& n = layer.norm;
      expect(is, "epsilon");
      n.epsilon = read_real(is);
      n.gamma = read_vector(is, "gamma");
      n.beta = read_vector(is, "beta");
      n.running.mean = read_vector(is, "running_mean");
      n.running.var = read_vector(is, "running_var");
      expect(is, "ema");
      n.ema_initialized = read_uint(is) != 0;
      n.ema.mean = read_vector(is, "ema_mean");
      n.ema.var = read_vector(is, "ema_var");
      expect(is, "iobmn");
      n.iobmn.populated = read_uint(is) != 0;
      n.iobmn.length = read_uint(is);
      n.iobmn.memory_count = read_uint(is);
      n.iobmn.alpha = read_real(is);
      n.iobmn.memory_stats.mean = read_vector(is, "iobmn_mean");
      n.iobmn.memory_stats.var = read_vector(is, "iobmn_var");
      if (n.gamma.size() != in || n.beta.size() != in || !(n.epsilon > 0.0)) {
        throw DataError("checkpoint: malformed norm layer");
      }
    }
    specs.push_back(layer.spec);
    layers.push_back(std::move(layer));
  }
  expect(is, "ema_momentum");
  const double momentum = read_real(is);
  expect(is, "end-model");

  Model model(specs, 0);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerKind kind = layers[i].spec.kind;
    if (kind == LayerKind::channel_mix || kind == LayerKind::classifier_head) {
      model.dense(i) = std::move(layers[i].dense);
    }
  }
  std::size_t k = 0;
  for (Layer& layer : layers) {
    if (layer.spec.kind == LayerKind::norm) model.norm(k++) = std::move(layer.norm);
  }
  model.set_ema_momentum(momentum);
  return model;
}

}  // namespace stta
