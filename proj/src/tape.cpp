#include "stta/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>

#include "stta/errors.hpp"

namespace stta {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace

const Tensor& Gradients::at(std::size_t slot) const {
  auto it = by_slot.find(slot);
  if (it == by_slot.end()) throw UsageError("no gradient for slot " + std::to_string(slot));
  return it->second;
}

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false, 0});
  return Var(id_, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value, std::size_t slot) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true, slot});
  return Var(id_, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (Var v : inputs) {
    check(v);
    node.inputs.push_back(v.index_);
    node.requires_grad = node.requires_grad || nodes_[v.index_].requires_grad;
  }
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(id_, nodes_.size() - 1);
}

void Tape::check(Var v) const {
  if (v.tape_ != id_ || v.index_ >= nodes_.size()) {
    throw UsageError("variable is not recorded on this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.index_].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.index_].requires_grad;
}

Gradients Tape::backward(Var loss) const {
  check(loss);
  if (nodes_[loss.index_].value.size() != 1) throw UsageError("backward: loss must be a scalar");

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[loss.index_] = Tensor::filled(nodes_[loss.index_].value.shape(), 1.0);

  for (std::size_t i = loss.index_ + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || !grads[i] || !node.backward) continue;
    std::vector<Tensor*> input_grads(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape());
      input_grads[k] = &*grads[in];
    }
    node.backward(*grads[i], input_grads);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (!node.is_parameter) continue;
    out.by_slot.insert_or_assign(node.slot, grads[i] ? *grads[i] : Tensor(node.value.shape()));
  }
  return out;
}

Tensor affine_normalize(const Tensor& f, const ChannelStats& stats, std::span<const double> gamma,
                        std::span<const double> beta, double epsilon) {
  if (f.rank() != 3) throw DimensionError("normalize expects a [B x C x L] tensor");
  const std::size_t b = f.dim(0), c = f.dim(1), l = f.dim(2);
  if (stats.channels() != c || gamma.size() != c || beta.size() != c) {
    throw DimensionError("normalize: channel count mismatch");
  }
  Tensor out(f.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double sd = std::sqrt(stats.var[ch] + epsilon);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t p = 0; p < l; ++p) {
        out.at(i, ch, p) = gamma[ch] * ((f.at(i, ch, p) - stats.mean[ch]) / sd) + beta[ch];
      }
    }
  }
  return out;
}

namespace ad {

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  Tensor out = stta::matmul(av, bv);
  return t.record(std::move(out), {a, b}, [av, bv](const Tensor& g, std::span<Tensor* const> gr) {
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (gr[0]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g.at(i, j) * bv.at(p, j);
          gr[0]->at(i, p) += acc;
        }
    }
    if (gr[1]) {
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += av.at(i, p) * g.at(i, j);
          gr[1]->at(p, j) += acc;
        }
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return t.record(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> gr) {
    for (Tensor* dst : gr) {
      if (!dst) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record(std::move(out), {a, b}, [av, bv](const Tensor& g, std::span<Tensor* const> gr) {
    if (gr[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i] * bv[i];
    if (gr[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[1])[i] += g[i] * av[i];
  });
}

Var sum(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  double total = 0.0;
  for (double v : xv.data()) total += v;
  return t.record(Tensor::scalar(total), {x}, [](const Tensor& g, std::span<Tensor* const> gr) {
    if (!gr[0]) return;
    for (double& d : gr[0]->data()) d += g[0];
  });
}

Var add_row_bias(Tape& t, Var x, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_row_bias: shape mismatch");
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < xv.dim(0); ++i)
    for (std::size_t j = 0; j < xv.dim(1); ++j) out.at(i, j) += bv[j];
  return t.record(std::move(out), {x, bias}, [](const Tensor& g, std::span<Tensor* const> gr) {
    if (gr[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i];
    if (gr[1])
      for (std::size_t i = 0; i < g.dim(0); ++i)
        for (std::size_t j = 0; j < g.dim(1); ++j) (*gr[1])[j] += g.at(i, j);
  });
}

Var channel_mix(Tape& t, Var weight, Var bias, Var x) {
  const Tensor& w = t.value(weight);
  const Tensor& bv = t.value(bias);
  const Tensor& xv = t.value(x);
  if (w.rank() != 2 || bv.rank() != 1 || xv.rank() != 3 || w.dim(1) != xv.dim(1) ||
      bv.dim(0) != w.dim(0)) {
    throw DimensionError("channel_mix: weight " + shape_string(w.shape()) + " incompatible with " +
                         shape_string(xv.shape()));
  }
  const std::size_t batch = xv.dim(0), in = xv.dim(1), len = xv.dim(2), out_c = w.dim(0);
  Tensor out({batch, out_c, len});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_c; ++o) {
      for (std::size_t l = 0; l < len; ++l) out.at(b, o, l) = bv[o];
      for (std::size_t i = 0; i < in; ++i) {
        const double wo = w.at(o, i);
        for (std::size_t l = 0; l < len; ++l) out.at(b, o, l) += wo * xv.at(b, i, l);
      }
    }
  return t.record(std::move(out), {weight, bias, x},
                  [w, xv](const Tensor& g, std::span<Tensor* const> gr) {
                    const std::size_t batch = xv.dim(0), in = xv.dim(1), len = xv.dim(2),
                                      out_c = w.dim(0);
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t o = 0; o < out_c; ++o)
                        for (std::size_t l = 0; l < len; ++l) {
                          const double go = g.at(b, o, l);
                          if (gr[1]) (*gr[1])[o] += go;
                          for (std::size_t i = 0; i < in; ++i) {
                            if (gr[0]) gr[0]->at(o, i) += go * xv.at(b, i, l);
                            if (gr[2]) gr[2]->at(b, i, l) += go * w.at(o, i);
                          }
                        }
                  });
}

namespace {

void check_norm_operands(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 3 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1)) {
    throw DimensionError("norm: gamma/beta must match the channel extent of " +
                         shape_string(x.shape()));
  }
}

}  // namespace

NormOutput batch_norm(Tape& t, Var x, Var gamma, Var beta, double epsilon) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  check_norm_operands(xv, gv, bv);
  ChannelStats stats = channel_stats(xv);
  Tensor out = affine_normalize(xv, stats, gv.data(), bv.data(), epsilon);

  const std::size_t c = xv.dim(1);
  std::vector<double> sd(c);
  for (std::size_t ch = 0; ch < c; ++ch) sd[ch] = std::sqrt(stats.var[ch] + epsilon);
  Tensor xhat(xv.shape());
  for (std::size_t b = 0; b < xv.dim(0); ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t l = 0; l < xv.dim(2); ++l)
        xhat.at(b, ch, l) = (xv.at(b, ch, l) - stats.mean[ch]) / sd[ch];

  Var y = t.record(std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), sd, gv](const Tensor& g, std::span<Tensor* const> gr) {
                     const std::size_t batch = g.dim(0), c = g.dim(1), len = g.dim(2);
                     const double n = static_cast<double>(batch * len);
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       double sum_g = 0.0, sum_gx = 0.0;
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t l = 0; l < len; ++l) {
                           sum_g += g.at(b, ch, l);
                           sum_gx += g.at(b, ch, l) * xhat.at(b, ch, l);
                         }
                       if (gr[1]) (*gr[1])[ch] += sum_gx;
                       if (gr[2]) (*gr[2])[ch] += sum_g;
                       if (!gr[0]) continue;
                       // dx = gamma/sd * (g - mean(g) - xhat * mean(g * xhat))
                       const double scale = gv[ch] / sd[ch];
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t l = 0; l < len; ++l)
                           gr[0]->at(b, ch, l) +=
                               scale * (g.at(b, ch, l) - sum_g / n - xhat.at(b, ch, l) * sum_gx / n);
                     }
                   });
  return {y, std::move(stats)};
}

Var fixed_norm(Tape& t, Var x, Var gamma, Var beta, const ChannelStats& stats, double epsilon) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  check_norm_operands(xv, gv, bv);
  validate(stats);
  Tensor out = affine_normalize(xv, stats, gv.data(), bv.data(), epsilon);
  return t.record(std::move(out), {x, gamma, beta},
                  [xv, gv, stats, epsilon](const Tensor& g, std::span<Tensor* const> gr) {
                    for (std::size_t ch = 0; ch < g.dim(1); ++ch) {
                      const double sd = std::sqrt(stats.var[ch] + epsilon);
                      for (std::size_t b = 0; b < g.dim(0); ++b)
                        for (std::size_t l = 0; l < g.dim(2); ++l) {
                          const double go = g.at(b, ch, l);
                          const double xhat = (xv.at(b, ch, l) - stats.mean[ch]) / sd;
                          if (gr[0]) gr[0]->at(b, ch, l) += go * gv[ch] / sd;
                          if (gr[1]) (*gr[1])[ch] += go * xhat;
                          if (gr[2]) (*gr[2])[ch] += go;
                        }
                    }
                  });
}

Var relu(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return t.record(std::move(out), {x}, [xv](const Tensor& g, std::span<Tensor* const> gr) {
    if (!gr[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) (*gr[0])[i] += g[i];
  });
}

Var mean_pool(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3 || xv.dim(2) == 0) throw DimensionError("mean_pool expects [B x C x L], L>0");
  const std::size_t batch = xv.dim(0), c = xv.dim(1), len = xv.dim(2);
  Tensor out({batch, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t l = 0; l < len; ++l) acc += xv.at(b, ch, l);
      out.at(b, ch) = acc / static_cast<double>(len);
    }
  return t.record(std::move(out), {x}, [len](const Tensor& g, std::span<Tensor* const> gr) {
    if (!gr[0]) return;
    for (std::size_t b = 0; b < g.dim(0); ++b)
      for (std::size_t ch = 0; ch < g.dim(1); ++ch)
        for (std::size_t l = 0; l < len; ++l)
          gr[0]->at(b, ch, l) += g.at(b, ch) / static_cast<double>(len);
  });
}

Var softmax(Tape& t, Var logits) {
  const Tensor& z = t.value(logits);
  if (z.rank() != 2) throw DimensionError("softmax expects a [N x K] tensor");
  Tensor p = stta::softmax(z);
  return t.record(p, {logits}, [p](const Tensor& g, std::span<Tensor* const> gr) {
    if (!gr[0]) return;
    for (std::size_t i = 0; i < p.dim(0); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p.dim(1); ++j) dot += g.at(i, j) * p.at(i, j);
      for (std::size_t j = 0; j < p.dim(1); ++j) gr[0]->at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

Var entropy_mean(Tape& t, Var logits) {
  const Tensor& z = t.value(logits);
  if (z.rank() != 2 || z.dim(0) == 0 || z.dim(1) == 0) {
    throw DimensionError("entropy_mean expects a non-empty [B x K] tensor");
  }
  const std::size_t rows = z.dim(0), k = z.dim(1);
  Tensor p = stta::softmax(z);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double zmax = z.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z.at(i, j));
    double norm = 0.0;
    for (std::size_t j = 0; j < k; ++j) norm += std::exp(z.at(i, j) - zmax);
    const double log_norm = std::log(norm);
    for (std::size_t j = 0; j < k; ++j) {
      total -= p.at(i, j) * (z.at(i, j) - zmax - log_norm);
    }
  }
  const double n = static_cast<double>(rows);
  return t.record(Tensor::scalar(total / n), {logits},
                  [p, z, n](const Tensor& g, std::span<Tensor* const> gr) {
                    if (!gr[0]) return;
                    // dH/dz_k = -p_k (z_k - sum_j p_j z_j)
                    for (std::size_t i = 0; i < p.dim(0); ++i) {
                      double zbar = 0.0;
                      for (std::size_t j = 0; j < p.dim(1); ++j) zbar += p.at(i, j) * z.at(i, j);
                      for (std::size_t j = 0; j < p.dim(1); ++j)
                        gr[0]->at(i, j) -= g[0] * p.at(i, j) * (z.at(i, j) - zbar) / n;
                    }
                  });
}

Var cross_entropy_mean(Tape& t, Var logits, std::span<const int> labels) {
  const Tensor& z = t.value(logits);
  if (z.rank() != 2 || z.dim(0) != labels.size() || z.dim(0) == 0) {
    throw DimensionError("cross_entropy_mean: logits/labels mismatch");
  }
  const std::size_t k = z.dim(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw DataError("label out of range");
  }
  Tensor p = stta::softmax(z);
  double total = 0.0;
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double zmax = z.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z.at(i, j));
    double norm = 0.0;
    for (std::size_t j = 0; j < k; ++j) norm += std::exp(z.at(i, j) - zmax);
    total += std::log(norm) + zmax - z.at(i, static_cast<std::size_t>(labels[i]));
  }
  const double n = static_cast<double>(z.dim(0));
  std::vector<int> ys(labels.begin(), labels.end());
  return t.record(Tensor::scalar(total / n), {logits},
                  [p, ys, n](const Tensor& g, std::span<Tensor* const> gr) {
                    if (!gr[0]) return;
                    for (std::size_t i = 0; i < p.dim(0); ++i)
                      for (std::size_t j = 0; j < p.dim(1); ++j) {
                        const double target = static_cast<int>(j) == ys[i] ? 1.0 : 0.0;
                        gr[0]->at(i, j) += g[0] * (p.at(i, j) - target) / n;
                      }
                  });
}

}  // namespace ad
}  // namespace stta
