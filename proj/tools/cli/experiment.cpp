#include "cli/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

namespace stta::cli {

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct SeedAssets {
  std::optional<Model> model;
  double source_accuracy = 0.0;
  std::vector<StreamBatch> stream;
  std::string error;
};

}  // namespace

std::vector<Cell> expand_cells(const ExperimentSpec& spec) {
  std::vector<Cell> cells;
  for (const auto& mode : spec.modes) {
    if (!mode_adapts(mode)) {
      cells.push_back({mode, 0.0});
      continue;
    }
    for (double ar : spec.ars) {
      const Cell c{mode, ar};
      if (std::none_of(cells.begin(), cells.end(), [&](const Cell& o) { return o.id() == c.id(); })) {
        cells.push_back(c);
      }
    }
  }
  return cells;
}

bool ExperimentResult::all_ok() const {
  return std::all_of(runs.begin(), runs.end(), [](const SeedRun& r) { return r.ok; });
}

DomainSpec build_domain(const ExperimentSpec& spec) {
  const DomainSettings& d = spec.domain;
  return make_domain(d.classes, d.channels, d.length, d.separation, d.sigma, d.world_seed);
}

Model build_model(const ExperimentSpec& spec, std::uint64_t seed, PretrainReport* report) {
  const DomainSpec domain = build_domain(spec);
  const LabeledDataset source = sample_source(domain, spec.domain.source_samples, seed);
  Model model = Model::make({spec.domain.channels, spec.model.hidden, spec.model.norm_layers, spec.domain.classes}, seed);
  PretrainOptions opts = spec.pretrain;
  opts.seed = seed;
  const PretrainReport r = pretrain(model, source, opts);
  if (report) *report = r;
  return model;
}

void validate_spec(const ExperimentSpec& spec) {
  if (spec.seeds.empty()) throw UsageError("no seeds given");
  if (spec.modes.empty()) throw UsageError("no modes given");
  if (spec.ars.empty()) throw UsageError("no adaptation rates given");
  if (spec.stream.batch_size == 0) throw UsageError("stream batch size must be positive");
  for (const auto& mode : spec.modes) {
    if (std::find(mode_names().begin(), mode_names().end(), mode) == mode_names().end()) {
      throw UsageError("unknown mode '" + mode + "'");
    }
  }
  for (const Cell& cell : expand_cells(spec)) {
    EngineConfig c = mode_config(cell.mode, spec.engine, cell.ar);
    if (!spec.capacity_explicit) c.memory_capacity = spec.stream.batch_size;
    try {
      c.validate();
    } catch (const Error& e) {
      throw UsageError("cell " + cell.id() + ": " + e.what());
    }
  }
  for (const auto& [name, batches] : spec.stream.segments) (void)resolve_corruption(spec, name);
  try {
    (void)build_domain(spec);
  } catch (const Error& e) {
    throw UsageError(std::string("domain: ") + e.what());
  }
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const ProgressFn& progress) {
  validate_spec(spec);
  const DomainSpec domain = build_domain(spec);

  std::optional<Model> shared;
  if (!spec.checkpoint.empty()) {
    std::ifstream in(spec.checkpoint);
    if (!in) throw UsageError("cannot open checkpoint '" + spec.checkpoint + "'");
    shared = load_model(in);
    if (shared->input_channels() != spec.domain.channels || shared->num_classes() != spec.domain.classes) {
      throw UsageError("checkpoint '" + spec.checkpoint + "' does not match the configured domain");
    }
  }

  std::vector<SeedAssets> assets(spec.seeds.size());
  parallel_for(spec.seeds.size(), spec.workers, [&](std::size_t i) {
    SeedAssets& a = assets[i];
    const std::uint64_t seed = spec.seeds[i];
    try {
      if (shared) {
        a.model = *shared;
      } else {
        PretrainReport report;
        a.model = build_model(spec, seed, &report);
        a.source_accuracy = report.source_accuracy;
      }
      a.stream = make_stream(domain, stream_spec(spec, seed));
    } catch (const std::exception& e) {
      a.model.reset();
      a.error = std::string("setup failed: ") + e.what();
    }
  });

  ExperimentResult result;
  result.cells = expand_cells(spec);
  for (const Cell& cell : result.cells) {
    for (std::size_t i = 0; i < spec.seeds.size(); ++i) {
      SeedRun r;
      r.cell = cell;
      r.seed = spec.seeds[i];
      r.config = mode_config(cell.mode, spec.engine, cell.ar);
      if (!spec.capacity_explicit) r.config.memory_capacity = spec.stream.batch_size;
      r.config.seed = spec.engine.seed + r.seed;
      result.runs.push_back(std::move(r));
    }
  }

  std::mutex progress_mutex;
  parallel_for(result.runs.size(), spec.workers, [&](std::size_t k) {
    SeedRun& r = result.runs[k];
    const SeedAssets& a = assets[k % spec.seeds.size()];
    const auto start = std::chrono::steady_clock::now();
    if (!a.model) {
      r.error = a.error;
    } else {
      try {
        Engine engine(*a.model, r.config);
        r.metrics = run_stream(engine, std::span<const StreamBatch>(a.stream));
        r.source_accuracy = a.source_accuracy;
        r.ok = true;
      } catch (const std::exception& e) {
        r.error = e.what();
      }
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(r);
    }
  });
  return result;
}

}  // namespace stta::cli
