#include "stta/engine.hpp"

#include <chrono>
#include <cmath>

#include "stta/errors.hpp"
#include "stta/text_io.hpp"

namespace stta {

const char* to_string(InferenceStats s) {
  switch (s) {
    case InferenceStats::iobmn: return "iobmn";
    case InferenceStats::ema: return "ema";
    case InferenceStats::batch: return "batch";
    case InferenceStats::source: return "source";
  }
  return "?";
}

InferenceStats inference_stats_from_string(const std::string& name) {
  for (InferenceStats s : {InferenceStats::iobmn, InferenceStats::ema, InferenceStats::batch,
                           InferenceStats::source}) {
    if (name == to_string(s)) return s;
  }
  throw DataError("unknown inference statistics '" + name + "'");
}

void EngineConfig::validate() const {
  const auto require = [](bool ok, const char* what) {
    if (!ok) throw DomainError(std::string("engine config: ") + what);
  };
  require(ar >= 0.0 && ar <= 1.0, "ar must lie in [0, 1]");
  require(tau_conf >= 0.0 && tau_conf < 1.0, "tau_conf must lie in [0, 1)");
  require(tau_delta >= 0.0, "tau_delta must be >= 0");
  require(alpha >= 0.0 && std::isfinite(alpha), "alpha must be finite and >= 0");
  require(beta_centroid > 0.0 && beta_centroid <= 1.0, "beta_centroid must lie in (0, 1]");
  require(lr >= 0.0 && std::isfinite(lr), "lr must be finite and >= 0");
  require(memory_capacity >= 2, "memory_capacity must be >= 2");
  require(ema_momentum >= 0.0 && ema_momentum <= 1.0, "ema_momentum must lie in [0, 1]");
  require(entropy_ratio > 0.0, "entropy_ratio must be > 0");
}

AdaptationSchedule::AdaptationSchedule(double ar) {
  if (!(ar >= 0.0 && ar <= 1.0)) throw DomainError("adaptation rate must lie in [0, 1]");
  step_ = static_cast<std::uint64_t>(std::llround(ar * static_cast<double>(kDenominator)));
}

bool AdaptationSchedule::should_adapt() {
  ++batch_count_;
  credit_ += step_;
  if (credit_ < kDenominator) return false;
  credit_ -= kDenominator;
  ++adapt_count_;
  return true;
}

void AdaptationSchedule::save(std::ostream& os) const {
  os << "schedule " << step_ << ' ' << credit_ << ' ' << adapt_count_ << ' ' << batch_count_ << '\n';
}

AdaptationSchedule AdaptationSchedule::load(std::istream& is) {
  text_io::expect(is, "schedule");
  AdaptationSchedule s;
  s.step_ = text_io::read_uint(is);
  s.credit_ = text_io::read_uint(is);
  s.adapt_count_ = text_io::read_uint(is);
  s.batch_count_ = text_io::read_uint(is);
  if (s.step_ > kDenominator || s.credit_ >= kDenominator) throw DataError("bad schedule state");
  return s;
}

std::size_t RunMetrics::adapt_count() const {
  std::size_t n = 0;
  for (const BatchRecord& b : batches) n += b.adapted;
  return n;
}

std::size_t RunMetrics::skipped_adaptations() const {
  std::size_t n = 0;
  for (const BatchRecord& b : batches) n += b.adapt_skipped;
  return n;
}

double RunMetrics::accuracy() const {
  std::size_t correct = 0, total = 0;
  for (const BatchRecord& b : batches) {
    if (!b.has_labels) continue;
    correct += b.correct;
    total += b.batch_size;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

std::vector<SegmentAccuracy> RunMetrics::segments() const {
  std::vector<SegmentAccuracy> out;
  for (const BatchRecord& b : batches) {
    if (!b.has_labels) continue;
    if (out.empty() || out.back().segment != b.segment) out.push_back({b.segment, 0, 0});
    out.back().correct += b.correct;
    out.back().total += b.batch_size;
  }
  return out;
}

namespace {

double mean_latency(const std::vector<BatchRecord>& batches, bool adapted) {
  double total = 0.0;
  std::size_t n = 0;
  for (const BatchRecord& b : batches) {
    if (b.adapted != adapted) continue;
    total += b.inference_seconds + b.adaptation_seconds;
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace

double RunMetrics::mean_latency_adapt() const { return mean_latency(batches, true); }
double RunMetrics::mean_latency_non_adapt() const { return mean_latency(batches, false); }

double RunMetrics::adaptation_time_share() const {
  double adapt = 0.0, total = 0.0;
  for (const BatchRecord& b : batches) {
    adapt += b.adaptation_seconds;
    total += b.inference_seconds + b.adaptation_seconds;
  }
  return total > 0.0 ? adapt / total : 0.0;
}

double RunMetrics::mean_memory_size() const {
  if (batches.empty()) return 0.0;
  double total = 0.0;
  for (const BatchRecord& b : batches) total += static_cast<double>(b.memory_size);
  return total / static_cast<double>(batches.size());
}

double RunMetrics::memory_label_accuracy() const {
  std::size_t correct = 0, labeled = 0;
  for (const BatchRecord& b : batches) {
    correct += b.memory_correct;
    labeled += b.memory_labeled;
  }
  return labeled ? static_cast<double>(correct) / static_cast<double>(labeled) : 0.0;
}

void RunMetrics::append(const RunMetrics& other) {
  batches.insert(batches.end(), other.batches.begin(), other.batches.end());
}

CnDRMConfig memory_config(const EngineConfig& cfg, std::size_t classes) {
  CnDRMConfig m;
  m.capacity = cfg.memory_capacity;
  m.tau_conf = cfg.tau_conf;
  m.tau_delta = cfg.tau_delta;
  m.beta = cfg.beta_centroid;
  m.mode = cfg.selection;
  m.entropy_threshold = cfg.entropy_ratio * std::log(static_cast<double>(classes));
  m.seed = cfg.seed;
  return m;
}

Engine::Engine(Model model, EngineConfig cfg)
    : cfg_(cfg),
      model_(std::move(model)),
      memory_((cfg.validate(), memory_config(cfg, model_.num_classes()))),
      schedule_(cfg.ar) {
  model_.set_ema_momentum(cfg_.ema_momentum);
}

NormSource Engine::inference_source() const {
  switch (cfg_.inference) {
    case InferenceStats::batch: return NormSource::batch;
    case InferenceStats::source: return NormSource::running;
    case InferenceStats::ema: return NormSource::ema;
    case InferenceStats::iobmn:
      return model_.norm(0).iobmn.populated ? NormSource::iobmn : NormSource::batch;
  }
  return NormSource::batch;
}

void Engine::populate_iobmn(const std::vector<ChannelStats>& layer_stats, std::size_t length,
                            std::size_t count) {
  for (std::size_t k = 0; k < model_.norm_layer_count(); ++k) {
    model_.norm(k).iobmn = iobmn::make_state(layer_stats[k], length, count, cfg_.alpha);
  }
}

BatchRecord Engine::process_batch(const Tensor& x, std::span<const int> eval_labels,
                                  std::size_t segment) {
  using Clock = std::chrono::steady_clock;
  if (x.rank() != 3 || x.dim(0) == 0) throw DomainError("process_batch: empty batch");
  const std::size_t b = x.dim(0);
  if (!eval_labels.empty() && eval_labels.size() != b) {
    throw DimensionError("process_batch: label count does not match batch size");
  }

  const auto t0 = Clock::now();
  BatchRecord rec;
  rec.index = batches_++;
  rec.segment = segment;
  rec.batch_size = b;
  rec.has_labels = !eval_labels.empty();

  ForwardResult fwd = model_.forward(x, inference_source());
  const Tensor probs = softmax(fwd.logits);
  const std::vector<int> pred = argmax_rows(fwd.logits);
  const std::size_t k = probs.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    if (rec.has_labels) rec.correct += pred[i] == eval_labels[i];
    const auto row = probs.data().subspan(i * k, k);
    double entropy = 0.0;
    for (double p : row)
      if (p > 0.0) entropy -= p * std::log(p);
    const std::uint64_t arrival = memory_.next_arrival();
    InsertOutcome out = memory_.insert(memory_.make_candidate(
        x.slice0(i), pred[i], confidence(row), std::move(fwd.early_stats[i]), entropy));
    if (rec.has_labels && out.kind != InsertOutcome::Kind::rejected_low_conf &&
        out.kind != InsertOutcome::Kind::rejected_high_entropy) {
      eval_labels_[arrival] = eval_labels[i];
    }
  }

  rec.centroid_shift = memory_.update_centroid(fwd.layer_stats.front());
  rec.rescored = memory_.maybe_rescore(rec.centroid_shift);

  if (cfg_.iobmn_refresh_every_batch && model_.norm(0).iobmn.populated) {
    if (auto batch = memory_.memory_batch(); batch && batch->dim(0) * batch->dim(2) >= 2) {
      const ForwardResult mem = model_.forward(*batch, NormSource::batch);
      populate_iobmn(mem.layer_stats, batch->dim(2), batch->dim(0));
    }
  }
  const auto t1 = Clock::now();

  if (schedule_.should_adapt()) {
    auto batch = memory_.memory_batch();
    if (!batch || batch->dim(0) * batch->dim(2) < 2) {
      rec.adapt_skipped = true;
    } else {
      auto result = adapt_step(model_, *batch, cfg_.lr);
      populate_iobmn(result->layer_stats, batch->dim(2), batch->dim(0));
      rec.adapted = true;
    }
  }
  const auto t2 = Clock::now();
  rec.inference_seconds = std::chrono::duration<double>(t1 - t0).count();
  rec.adaptation_seconds = std::chrono::duration<double>(t2 - t1).count();

  // Keep labels only for samples still stored.
  std::map<std::uint64_t, int> kept;
  for (const MemorySample& s : memory_.samples()) {
    auto it = eval_labels_.find(s.arrival_index);
    if (it == eval_labels_.end()) continue;
    kept.insert(*it);
    ++rec.memory_labeled;
    rec.memory_correct += it->second == s.pseudo_label;
  }
  eval_labels_ = std::move(kept);
  rec.memory_size = memory_.size();
  return rec;
}

void Engine::save(std::ostream& os) const {
  using text_io::write_real;
  os << "stta-engine 1\n";
  os << "config ";
  for (double v : {cfg_.ar, cfg_.tau_conf, cfg_.tau_delta, cfg_.alpha, cfg_.beta_centroid, cfg_.lr,
                   cfg_.ema_momentum, cfg_.entropy_ratio}) {
    write_real(os, v);
    os << ' ';
  }
  os << cfg_.memory_capacity << ' ' << to_string(cfg_.selection) << ' ' << to_string(cfg_.inference)
     << ' ' << cfg_.seed << ' ' << (cfg_.iobmn_refresh_every_batch ? 1 : 0) << '\n';
  os << "batches " << batches_ << '\n';
  schedule_.save(os);
  save_model(os, model_);
  memory_.save(os);
  os << "eval_labels " << eval_labels_.size();
  for (const auto& [arrival, label] : eval_labels_) os << ' ' << arrival << ' ' << label;
  os << "\nend-engine\n";
}

Engine Engine::load(std::istream& is) {
  using namespace text_io;
  expect(is, "stta-engine");
  if (read_uint(is) != 1) throw DataError("unsupported engine checkpoint version");
  expect(is, "config");
  EngineConfig cfg;
  for (double* v : {&cfg.ar, &cfg.tau_conf, &cfg.tau_delta, &cfg.alpha, &cfg.beta_centroid, &cfg.lr,
                    &cfg.ema_momentum, &cfg.entropy_ratio}) {
    *v = read_real(is);
  }
  cfg.memory_capacity = read_uint(is);
  cfg.selection = selection_mode_from_string(read_token(is));
  cfg.inference = inference_stats_from_string(read_token(is));
  cfg.seed = read_uint(is);
  cfg.iobmn_refresh_every_batch = read_uint(is) != 0;
  expect(is, "batches");
  const std::size_t batches = read_uint(is);
  AdaptationSchedule schedule = AdaptationSchedule::load(is);
  Model model = load_model(is);
  Engine engine(std::move(model), cfg);
  engine.batches_ = batches;
  engine.schedule_ = schedule;
  engine.memory_ = CnDRM::load(is);
  expect(is, "eval_labels");
  const std::size_t n = read_uint(is);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t arrival = read_uint(is);
    engine.eval_labels_[arrival] = read_int(is);
  }
  expect(is, "end-engine");
  return engine;
}

RunMetrics run_stream(Engine& engine, StreamGenerator& stream, bool use_labels) {
  RunMetrics metrics;
  while (auto batch = stream.next()) {
    metrics.batches.push_back(engine.process_batch(
        batch->inputs, use_labels ? std::span<const int>(batch->labels) : std::span<const int>{},
        batch->segment));
  }
  return metrics;
}

RunMetrics run_stream(Engine& engine, std::span<const StreamBatch> stream, bool use_labels) {
  RunMetrics metrics;
  for (const StreamBatch& batch : stream) {
    metrics.batches.push_back(engine.process_batch(
        batch.inputs, use_labels ? std::span<const int>(batch.labels) : std::span<const int>{},
        batch.segment));
  }
  return metrics;
}

}  // namespace stta
