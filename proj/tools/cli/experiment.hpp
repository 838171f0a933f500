#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cli/config.hpp"
#include "stta/engine.hpp"

namespace stta::cli {

struct Cell {
  std::string mode;
  double ar = 0.0;

  std::string id() const { return mode + "@" + format_real(ar); }
};

// Expands modes x ars in file order. Modes that never adapt collapse to a
// single ar = 0 cell.
std::vector<Cell> expand_cells(const ExperimentSpec& spec);

struct SeedRun {
  Cell cell;
  std::uint64_t seed = 0;
  EngineConfig config;
  bool ok = false;
  std::string error;
  double source_accuracy = 0.0;  // of the pretrained model on its training data
  RunMetrics metrics;
  double wall_seconds = 0.0;
};

struct ExperimentResult {
  std::vector<Cell> cells;
  std::vector<SeedRun> runs;  // cell-major, then seed, in spec order

  bool all_ok() const;
};

using ProgressFn = std::function<void(const SeedRun&)>;

// Builds the per-seed models and streams, then runs every (cell, seed) pair
// on a worker pool. Failures are recorded per run rather than thrown; only
// configuration problems throw.
ExperimentResult run_experiment(const ExperimentSpec& spec, const ProgressFn& progress = {});

// Pretrains the model for one experiment seed; the report goes to `report`
// when given.
Model build_model(const ExperimentSpec& spec, std::uint64_t seed, PretrainReport* report = nullptr);
DomainSpec build_domain(const ExperimentSpec& spec);

// Validates everything that can be checked before any work starts.
void validate_spec(const ExperimentSpec& spec);

}  // namespace stta::cli
