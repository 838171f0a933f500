#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "stta/stats.hpp"
#include "stta/tensor.hpp"

namespace stta {

class Tape;

// Handle to a value recorded on a specific tape.
class Var {
 public:
  std::size_t index() const { return index_; }

 private:
  friend class Tape;
  Var(std::uint64_t tape, std::size_t index) : tape_(tape), index_(index) {}
  std::uint64_t tape_;
  std::size_t index_;
};

// Receives the gradient of the node's output and accumulates (+=) into the
// gradient buffers of its inputs. A null pointer marks an input that does not
// need a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grads)>;

// Gradients of a scalar loss, keyed by trainable slot id.
struct Gradients {
  std::map<std::size_t, Tensor> by_slot;

  bool contains(std::size_t slot) const { return by_slot.count(slot) != 0; }
  const Tensor& at(std::size_t slot) const;
};

/// Linear record of differentiable operations.
///
/// Nodes are appended in evaluation order; backward() walks them in exact
/// reverse. A node needs a gradient iff it is a trainable parameter or one of
/// its inputs needs one, so constants never allocate gradient buffers.
class Tape {
 public:
  Tape();

  Var constant(Tensor value);
  Var parameter(Tensor value, std::size_t slot);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Every parameter slot on the tape receives an entry, zero if unreachable.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_parameter = false;
    std::size_t slot = 0;
  };

  void check(Var v) const;

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

// Differentiable operations.
namespace ad {

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var sum(Tape& t, Var x);

// [M x N] + bias[N] broadcast over rows.
Var add_row_bias(Tape& t, Var x, Var bias);

// y[b,o,l] = sum_i w[o,i] x[b,i,l] + bias[o]; the 1x1 convolution over L.
Var channel_mix(Tape& t, Var weight, Var bias, Var x);

struct NormOutput {
  Var out;
  ChannelStats stats;  // live statistics of the input
};

// Normalization with the input's own batch statistics; gradients flow
// through the statistics.
NormOutput batch_norm(Tape& t, Var x, Var gamma, Var beta, double epsilon);

// Normalization with externally supplied (constant) statistics.
Var fixed_norm(Tape& t, Var x, Var gamma, Var beta, const ChannelStats& stats, double epsilon);

Var relu(Tape& t, Var x);

// [B x C x L] -> [B x C], mean over L.
Var mean_pool(Tape& t, Var x);

Var softmax(Tape& t, Var logits);

// Mean over rows of the Shannon entropy (natural log) of softmax(logits).
Var entropy_mean(Tape& t, Var logits);

Var cross_entropy_mean(Tape& t, Var logits, std::span<const int> labels);

}  // namespace ad

// gamma * (f - mean) / sqrt(var + eps) + beta, per channel of [B x C x L].
Tensor affine_normalize(const Tensor& f, const ChannelStats& stats, std::span<const double> gamma,
                        std::span<const double> beta, double epsilon);

}  // namespace stta
