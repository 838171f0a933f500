#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cli/experiment.hpp"

namespace stta::cli {

inline constexpr const char* kResultsSchema = "stta-results";
inline constexpr int kResultsSchemaVersion = 1;

// results.jsonl: one line per (cell, seed). Contains no timing, so repeated
// runs of the same configuration produce byte-identical files.
void write_results(std::ostream& os, const ExperimentSpec& spec, const ExperimentResult& result);
// timing.jsonl: wall-clock figures for the same runs, keyed by cell and seed.
void write_timing(std::ostream& os, const ExperimentResult& result);

struct CellSummary {
  std::string cell;
  std::string mode;
  double ar = 0.0;
  std::size_t seeds = 0;   // runs that finished
  std::size_t failed = 0;  // runs that did not
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;  // sample standard deviation, 0 for one seed
  double adapt_count_mean = 0.0;
  double memory_label_accuracy_mean = 0.0;
  double adaptation_time_share_mean = 0.0;  // console only; not written to the csv
};

std::vector<CellSummary> summarize(const ExperimentResult& result);
// Deterministic like results.jsonl: no timing columns.
void write_summary_csv(std::ostream& os, const std::vector<CellSummary>& rows);

// Writes the three files into `dir` (created if missing).
void write_outputs(const std::string& dir, const ExperimentSpec& spec, const ExperimentResult& result);

// One results line as read back for comparison.
struct ResultRecord {
  std::string cell;
  std::string mode;
  double ar = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  double accuracy = 0.0;
  std::optional<double> mean_batch_seconds;  // from timing.jsonl when present
};

// Reads results.jsonl (and the sibling timing.jsonl) from a directory or a
// results file. Throws DataError on a wrong schema or version.
std::vector<ResultRecord> read_results(const std::string& path);

}  // namespace stta::cli
