#include "stta/cndrm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "stta/errors.hpp"
#include "stta/text_io.hpp"

namespace stta {

const char* to_string(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::naive: return "naive";
    case SelectionMode::random: return "random";
    case SelectionMode::low_entropy: return "low_entropy";
    case SelectionMode::crm: return "crm";
    case SelectionMode::cndrm: return "cndrm";
  }
  return "?";
}

SelectionMode selection_mode_from_string(const std::string& name) {
  for (SelectionMode m : {SelectionMode::naive, SelectionMode::random, SelectionMode::low_entropy,
                          SelectionMode::crm, SelectionMode::cndrm}) {
    if (name == to_string(m)) return m;
  }
  throw DataError("unknown selection mode '" + name + "'");
}

double confidence(std::span<const double> probabilities) {
  if (probabilities.empty()) throw DimensionError("confidence of an empty probability vector");
  return *std::max_element(probabilities.begin(), probabilities.end());
}

double wasserstein(std::span<const double> mu_a, std::span<const double> sigma_a,
                   std::span<const double> mu_b, std::span<const double> sigma_b) {
  if (mu_a.size() != sigma_a.size() || mu_b.size() != sigma_b.size() || mu_a.size() != mu_b.size()) {
    throw DimensionError("wasserstein: channel count mismatch");
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < mu_a.size(); ++c) {
    const double dm = mu_a[c] - mu_b[c];
    const double ds = sigma_a[c] - sigma_b[c];
    acc += dm * dm + ds * ds;
  }
  return std::sqrt(acc);
}

double wasserstein(const SampleStats& a, const DomainCentroid& b) {
  return wasserstein(a.mu, a.sigma, b.mu, b.sigma);
}

double wasserstein(const DomainCentroid& a, const DomainCentroid& b) {
  return wasserstein(a.mu, a.sigma, b.mu, b.sigma);
}

CentroidUpdate update_centroid(const DomainCentroid& c, const ChannelStats& batch_stats) {
  validate(batch_stats);
  CentroidUpdate out{c, 0.0};
  DomainCentroid& next = out.centroid;
  const std::size_t channels = batch_stats.channels();
  if (!c.initialized) {
    next.mu = batch_stats.mean;
    next.sigma.resize(channels);
    for (std::size_t i = 0; i < channels; ++i) next.sigma[i] = std::sqrt(batch_stats.var[i]);
    next.initialized = true;
    out.shift = std::numeric_limits<double>::infinity();
    return out;
  }
  if (c.mu.size() != channels) throw DimensionError("centroid/batch channel mismatch");
  const double b = c.beta;
  for (std::size_t i = 0; i < channels; ++i) {
    next.mu[i] = (1.0 - b) * c.mu[i] + b * batch_stats.mean[i];
    const double var = (1.0 - b) * c.sigma[i] * c.sigma[i] + b * batch_stats.var[i];
    next.sigma[i] = std::sqrt(var);
  }
  out.shift = wasserstein(c, next);
  return out;
}

bool eligible(const CnDRMConfig& cfg, double confidence, double entropy) {
  switch (cfg.mode) {
    case SelectionMode::naive:
    case SelectionMode::random: return true;
    case SelectionMode::low_entropy: return entropy < cfg.entropy_threshold;
    case SelectionMode::crm:
    case SelectionMode::cndrm: return confidence > cfg.tau_conf;
  }
  return false;
}

std::vector<std::size_t> ablation_select(const CnDRMConfig& cfg, const Tensor& probabilities) {
  if (probabilities.rank() != 2) throw DimensionError("ablation_select expects [B x K]");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < probabilities.dim(0); ++i) {
    const auto row = probabilities.data().subspan(i * probabilities.dim(1), probabilities.dim(1));
    double h = 0.0;
    for (double p : row)
      if (p > 0.0) h -= p * std::log(p);
    if (eligible(cfg, confidence(row), h)) out.push_back(i);
  }
  return out;
}

CnDRM::CnDRM(CnDRMConfig cfg) : cfg_(cfg), rng_(cfg.seed) {
  if (cfg_.capacity == 0) throw DomainError("memory capacity must be positive");
  if (!(cfg_.beta > 0.0 && cfg_.beta <= 1.0)) throw DomainError("centroid beta must lie in (0, 1]");
  if (!(cfg_.tau_delta >= 0.0)) throw DomainError("tau_delta must be non-negative");
  centroid_.beta = cfg_.beta;
}

MemorySample CnDRM::make_candidate(Tensor input, int pseudo_label, double conf, SampleStats stats,
                                   double entropy) {
  validate(stats);
  MemorySample s;
  s.input = std::move(input);
  s.pseudo_label = pseudo_label;
  s.confidence = conf;
  s.wdist = centroid_.initialized ? wasserstein(stats, centroid_) : 0.0;
  s.stats = std::move(stats);
  s.entropy = entropy;
  return s;
}

InsertOutcome CnDRM::insert(MemorySample candidate) {
  if (!eligible(cfg_, candidate.confidence, candidate.entropy)) {
    return {cfg_.mode == SelectionMode::low_entropy ? InsertOutcome::Kind::rejected_high_entropy
                                                    : InsertOutcome::Kind::rejected_low_conf,
            std::nullopt};
  }
  candidate.arrival_index = next_arrival_++;
  samples_.push_back(std::move(candidate));
  if (samples_.size() <= cfg_.capacity) return {InsertOutcome::Kind::inserted, std::nullopt};

  const std::size_t victim = pick_eviction();
  MemorySample evicted = std::move(samples_[victim]);
  samples_.erase(samples_.begin() + static_cast<std::ptrdiff_t>(victim));
  return {InsertOutcome::Kind::inserted_with_eviction, std::move(evicted)};
}

std::size_t CnDRM::pick_eviction() {
  switch (cfg_.mode) {
    case SelectionMode::naive: return 0;
    case SelectionMode::random: {
      std::uniform_int_distribution<std::size_t> pick(0, samples_.size() - 1);
      return pick(rng_);
    }
    case SelectionMode::low_entropy: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < samples_.size(); ++i) {
        if (samples_[i].entropy > samples_[best].entropy) best = i;
      }
      return best;
    }
    case SelectionMode::crm: return pick_eviction_crm();
    case SelectionMode::cndrm: return pick_eviction_cndrm();
  }
  return 0;
}

std::size_t CnDRM::pick_eviction_cndrm() const {
  struct ClassInfo {
    std::size_t count = 0;
    std::size_t farthest = 0;  // index of max wdist, earliest arrival on ties
  };
  std::map<int, ClassInfo> classes;
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    auto [it, fresh] = classes.try_emplace(samples_[i].pseudo_label);
    ClassInfo& info = it->second;
    if (fresh || samples_[i].wdist > samples_[info.farthest].wdist) info.farthest = i;
    ++info.count;
  }
  // std::map iterates in increasing class id, so strict comparisons keep the
  // lowest id on a complete tie.
  const ClassInfo* largest = nullptr;
  for (const auto& [label, info] : classes) {
    if (!largest || info.count > largest->count ||
        (info.count == largest->count &&
         samples_[info.farthest].wdist > samples_[largest->farthest].wdist)) {
      largest = &info;
    }
  }
  return largest->farthest;
}

std::size_t CnDRM::pick_eviction_crm() const {
  std::map<int, std::pair<std::size_t, std::size_t>> classes;  // label -> (count, oldest index)
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    auto [it, fresh] = classes.try_emplace(samples_[i].pseudo_label, 0, i);
    ++it->second.first;
  }
  const std::pair<std::size_t, std::size_t>* largest = nullptr;
  for (const auto& [label, info] : classes) {
    if (!largest || info.first > largest->first) largest = &info;
  }
  return largest->second;
}

double CnDRM::update_centroid(const ChannelStats& batch_stats) {
  CentroidUpdate u = stta::update_centroid(centroid_, batch_stats);
  centroid_ = std::move(u.centroid);
  return u.shift;
}

std::size_t CnDRM::maybe_rescore(double shift) {
  if (!(shift > cfg_.tau_delta) || !centroid_.initialized) return 0;
  for (MemorySample& s : samples_) s.wdist = wasserstein(s.stats, centroid_);
  return samples_.size();
}

std::optional<Tensor> CnDRM::memory_batch() const {
  if (samples_.empty()) return std::nullopt;
  std::vector<Tensor> inputs;
  inputs.reserve(samples_.size());
  for (const MemorySample& s : samples_) inputs.push_back(s.input);
  return stack(inputs);
}

void CnDRM::dump(std::ostream& os) const {
  char buf[128];
  for (const MemorySample& s : samples_) {
    std::snprintf(buf, sizeof buf, "%llu %d %.17g %.17g\n",
                  static_cast<unsigned long long>(s.arrival_index), s.pseudo_label, s.confidence,
                  s.wdist);
    os << buf;
  }
}

void CnDRM::save(std::ostream& os) const {
  using text_io::write_real;
  using text_io::write_vector;
  os << "stta-memory 1\n";
  os << "config " << cfg_.capacity << ' ';
  write_real(os, cfg_.tau_conf);
  os << ' ';
  write_real(os, cfg_.tau_delta);
  os << ' ';
  write_real(os, cfg_.beta);
  os << ' ' << to_string(cfg_.mode) << ' ';
  write_real(os, cfg_.entropy_threshold);
  os << ' ' << cfg_.seed << '\n';
  os << "centroid " << (centroid_.initialized ? 1 : 0) << '\n';
  write_vector(os, "mu", centroid_.mu);
  write_vector(os, "sigma", centroid_.sigma);
  os << "next_arrival " << next_arrival_ << '\n';
  std::ostringstream rng_state;
  rng_state << rng_;
  os << "rng " << rng_state.str() << " end-rng\n";
  os << "samples " << samples_.size() << '\n';
  for (const MemorySample& s : samples_) {
    os << "sample " << s.arrival_index << ' ' << s.pseudo_label << ' ';
    write_real(os, s.confidence);
    os << ' ';
    write_real(os, s.wdist);
    os << ' ';
    write_real(os, s.entropy);
    os << ' ' << s.input.dim(0) << ' ' << s.input.dim(1) << '\n';
    write_vector(os, "input", s.input.data());
    write_vector(os, "stats_mu", s.stats.mu);
    write_vector(os, "stats_sigma", s.stats.sigma);
  }
  os << "end-memory\n";
}

CnDRM CnDRM::load(std::istream& is) {
  using namespace text_io;
  expect(is, "stta-memory");
  if (read_uint(is) != 1) throw DataError("unsupported memory checkpoint version");
  expect(is, "config");
  CnDRMConfig cfg;
  cfg.capacity = read_uint(is);
  cfg.tau_conf = read_real(is);
  cfg.tau_delta = read_real(is);
  cfg.beta = read_real(is);
  cfg.mode = selection_mode_from_string(read_token(is));
  cfg.entropy_threshold = read_real(is);
  cfg.seed = read_uint(is);
  CnDRM mem(cfg);
  expect(is, "centroid");
  mem.centroid_.initialized = read_uint(is) != 0;
  mem.centroid_.mu = read_vector(is, "mu");
  mem.centroid_.sigma = read_vector(is, "sigma");
  expect(is, "next_arrival");
  mem.next_arrival_ = read_uint(is);
  expect(is, "rng");
  std::string state;
  for (std::string tok = read_token(is); tok != "end-rng"; tok = read_token(is)) state += tok + ' ';
  std::istringstream rng_in(state);
  rng_in >> mem.rng_;
  if (!rng_in) throw DataError("checkpoint: bad rng state");
  expect(is, "samples");
  const std::size_t n = read_uint(is);
  for (std::size_t i = 0; i < n; ++i) {
    expect(is, "sample");
    MemorySample s;
    s.arrival_index = read_uint(is);
    s.pseudo_label = read_int(is);
    s.confidence = read_real(is);
    s.wdist = read_real(is);
    s.entropy = read_real(is);
    const std::size_t c = read_uint(is), l = read_uint(is);
    s.input = Tensor({c, l}, read_vector(is, "input"));
    s.stats.mu = read_vector(is, "stats_mu");
    s.stats.sigma = read_vector(is, "stats_sigma");
    mem.samples_.push_back(std::move(s));
  }
  expect(is, "end-memory");
  return mem;
}

}  // namespace stta
