#include "stta/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stta/errors.hpp"

namespace stta {

namespace {

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

std::vector<std::size_t> channel_permutation(std::size_t channels, std::uint64_t seed) {
  std::vector<std::size_t> perm(channels);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng = derived_rng(seed, 0x9e37, 1);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

// Draws `labels.size()` rows around the class means.
Tensor draw_rows(const DomainSpec& spec, std::span<const int> labels, std::mt19937_64& rng) {
  const std::size_t c = spec.channels, l = spec.length, row = c * l;
  Tensor out({labels.size(), c, l});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* mean = spec.class_means.data().data() + static_cast<std::size_t>(labels[i]) * row;
    double* dst = out.data().data() + i * row;
    for (std::size_t k = 0; k < row; ++k) dst[k] = mean[k] + spec.sigma_src * normal(rng);
  }
  return out;
}

}  // namespace

std::vector<std::string> corruption_preset_names() {
  return {"identity", "mild_scale", "strong_scale", "offset", "noise", "permute"};
}

Corruption corruption_preset(const std::string& name) {
  Corruption c;
  c.name = name;
  if (name == "identity") return c;
  if (name == "mild_scale") {
    c.scale = 1.5;
    c.offset = 0.5;
    c.noise = 0.2;
  } else if (name == "strong_scale") {
    c.scale = 2.5;
    c.offset = 1.5;
    c.noise = 0.6;
  } else if (name == "offset") {
    c.offset = 2.0;
  } else if (name == "noise") {
    c.noise = 1.0;
  } else if (name == "permute") {
    c.permute = true;
    c.perm_seed = 17;
    c.noise = 0.2;
  } else {
    throw DataError("unknown corruption preset '" + name + "'");
  }
  return c;
}

DomainSpec make_domain(std::size_t classes, std::size_t channels, std::size_t length,
                       double separation, double sigma_src, std::uint64_t world_seed) {
  if (classes < 2) throw DomainError("a domain needs at least two classes");
  if (channels == 0 || length == 0) throw DomainError("a domain needs C, L >= 1");
  if (!(sigma_src >= 0.0) || !(separation >= 0.0)) throw DomainError("negative domain scale");
  DomainSpec spec;
  spec.classes = classes;
  spec.channels = channels;
  spec.length = length;
  spec.sigma_src = sigma_src;
  spec.class_means = Tensor({classes, channels, length});
  std::mt19937_64 rng = derived_rng(world_seed, 0x5eed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  // A per-class channel pattern repeated along L. E|z_i - z_j|^2 = 2D for
  // standard normal z in D = C * L dimensions.
  const double scale = separation / std::sqrt(2.0 * static_cast<double>(channels * length));
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = scale * normal(rng);
      for (std::size_t l = 0; l < length; ++l) spec.class_means.at(k, c, l) = v;
    }
  return spec;
}

LabeledDataset sample_source(const DomainSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < spec.classes) throw DomainError("sample_source: need at least one sample per class");
  std::mt19937_64 rng = derived_rng(seed, 0x50c, 0);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.classes);
  std::shuffle(labels.begin(), labels.end(), rng);
  Tensor inputs = draw_rows(spec, labels, rng);
  return {std::move(inputs), std::move(labels)};
}

Tensor corrupt(const Tensor& x, const Corruption& c, std::mt19937_64& rng) {
  if (x.rank() != 3) throw DimensionError("corrupt expects [N x C x L]");
  if (!std::isfinite(c.scale) || !std::isfinite(c.offset) || !(c.noise >= 0.0)) {
    throw DomainError("corruption parameters must be finite with noise >= 0");
  }
  const std::size_t n = x.dim(0), ch = x.dim(1), len = x.dim(2);
  Tensor out(x.shape());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = c.scale * x[i] + c.offset;
    if (c.noise > 0.0) out[i] += c.noise * normal(rng);
  }
  if (!c.permute) return out;
  const std::vector<std::size_t> perm = channel_permutation(ch, c.perm_seed);
  Tensor permuted(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < ch; ++k)
      for (std::size_t l = 0; l < len; ++l) permuted.at(b, k, l) = out.at(b, perm[k], l);
  return permuted;
}

std::size_t StreamSpec::total_batches() const {
  std::size_t total = 0;
  for (const Segment& s : segments) total += s.batches;
  return total;
}

StreamGenerator::StreamGenerator(DomainSpec domain, StreamSpec spec)
    : domain_(std::move(domain)), spec_(std::move(spec)) {
  if (spec_.batch_size == 0) throw DomainError("stream batch size must be positive");
  if (spec_.total_batches() == 0) throw DomainError("stream must contain at least one batch");
  segment_ = 0;
  while (segment_ < spec_.segments.size() && spec_.segments[segment_].batches == 0) ++segment_;
  if (segment_ < spec_.segments.size()) start_segment(segment_);
}

void StreamGenerator::start_segment(std::size_t s) {
  batch_in_segment_ = 0;
  rng_ = derived_rng(spec_.seed, 0x57e4, s);
  const std::size_t n = spec_.segments[s].batches * spec_.batch_size;
  segment_labels_.resize(n);
  if (spec_.order == StreamOrder::iid) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(domain_.classes) - 1);
    for (int& y : segment_labels_) y = pick(rng_);
  } else {
    for (std::size_t i = 0; i < n; ++i) segment_labels_[i] = static_cast<int>(i % domain_.classes);
    std::sort(segment_labels_.begin(), segment_labels_.end());
  }
}

std::optional<StreamBatch> StreamGenerator::next() {
  if (segment_ >= spec_.segments.size()) return std::nullopt;
  const Segment& seg = spec_.segments[segment_];
  const std::size_t b = spec_.batch_size;
  std::span<const int> labels(segment_labels_.data() + batch_in_segment_ * b, b);
  Tensor clean = draw_rows(domain_, labels, rng_);
  StreamBatch batch{corrupt(clean, seg.corruption, rng_), {labels.begin(), labels.end()}, segment_,
                    index_++};
  if (++batch_in_segment_ == seg.batches) {
    ++segment_;
    while (segment_ < spec_.segments.size() && spec_.segments[segment_].batches == 0) ++segment_;
    if (segment_ < spec_.segments.size()) start_segment(segment_);
  }
  return batch;
}

std::vector<StreamBatch> StreamGenerator::collect() {
  std::vector<StreamBatch> out;
  while (auto b = next()) out.push_back(std::move(*b));
  return out;
}

std::vector<StreamBatch> make_stream(const DomainSpec& domain, const StreamSpec& spec) {
  return StreamGenerator(domain, spec).collect();
}

}  // namespace stta
