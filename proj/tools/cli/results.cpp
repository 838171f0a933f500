#include "cli/results.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace stta::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

ordered_json config_json(const EngineConfig& c) {
  ordered_json j;
  j["ar"] = c.ar;
  j["selection"] = to_string(c.selection);
  j["inference"] = to_string(c.inference);
  j["tau_conf"] = c.tau_conf;
  j["tau_delta"] = c.tau_delta;
  j["alpha"] = c.alpha;
  j["beta_centroid"] = c.beta_centroid;
  j["lr"] = c.lr;
  j["memory_capacity"] = c.memory_capacity;
  j["ema_momentum"] = c.ema_momentum;
  j["entropy_ratio"] = c.entropy_ratio;
  j["iobmn_refresh"] = c.iobmn_refresh_every_batch;
  j["seed"] = c.seed;
  return j;
}

double mean_batch_seconds(const RunMetrics& m) {
  if (m.batches.empty()) return 0.0;
  double total = 0.0;
  for (const auto& b : m.batches) total += b.inference_seconds + b.adaptation_seconds;
  return total / static_cast<double>(m.batches.size());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

std::string csv_real(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

}  // namespace

void write_results(std::ostream& os, const ExperimentSpec& spec, const ExperimentResult& result) {
  for (const SeedRun& r : result.runs) {
    ordered_json j;
    j["schema"] = kResultsSchema;
    j["schema_version"] = kResultsSchemaVersion;
    j["experiment"] = spec.name;
    j["cell"] = r.cell.id();
    j["mode"] = r.cell.mode;
    j["ar"] = r.cell.ar;
    j["seed"] = r.seed;
    j["status"] = r.ok ? "ok" : "error";
    j["error"] = r.ok ? ordered_json(nullptr) : ordered_json(r.error);
    j["config"] = config_json(r.config);
    if (r.ok) {
      const RunMetrics& m = r.metrics;
      j["batches"] = m.batches.size();
      j["accuracy"] = m.accuracy();
      j["adapt_count"] = m.adapt_count();
      j["skipped_adaptations"] = m.skipped_adaptations();
      j["memory_label_accuracy"] = m.memory_label_accuracy();
      j["mean_memory_size"] = m.mean_memory_size();
      j["source_accuracy"] = r.source_accuracy;
      ordered_json segs = ordered_json::array();
      for (const SegmentAccuracy& s : m.segments()) {
        segs.push_back({{"segment", s.segment}, {"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy()}});
      }
      j["segments"] = std::move(segs);
    }
    os << j.dump() << '\n';
  }
}

void write_timing(std::ostream& os, const ExperimentResult& result) {
  for (const SeedRun& r : result.runs) {
    ordered_json j;
    j["cell"] = r.cell.id();
    j["seed"] = r.seed;
    j["wall_seconds"] = r.wall_seconds;
    if (r.ok) {
      j["mean_batch_seconds"] = mean_batch_seconds(r.metrics);
      j["mean_latency_adapt"] = r.metrics.mean_latency_adapt();
      j["mean_latency_non_adapt"] = r.metrics.mean_latency_non_adapt();
      j["adaptation_time_share"] = r.metrics.adaptation_time_share();
    }
    os << j.dump() << '\n';
  }
}

std::vector<CellSummary> summarize(const ExperimentResult& result) {
  std::vector<CellSummary> rows;
  for (const Cell& cell : result.cells) {
    CellSummary s;
    s.cell = cell.id();
    s.mode = cell.mode;
    s.ar = cell.ar;
    std::vector<double> acc;
    for (const SeedRun& r : result.runs) {
      if (r.cell.id() != s.cell) continue;
      if (!r.ok) {
        ++s.failed;
        continue;
      }
      acc.push_back(r.metrics.accuracy());
      s.adapt_count_mean += static_cast<double>(r.metrics.adapt_count());
      s.memory_label_accuracy_mean += r.metrics.memory_label_accuracy();
      s.adaptation_time_share_mean += r.metrics.adaptation_time_share();
    }
    s.seeds = acc.size();
    if (!acc.empty()) {
      const double n = static_cast<double>(acc.size());
      for (double a : acc) s.accuracy_mean += a;
      s.accuracy_mean /= n;
      s.adapt_count_mean /= n;
      s.memory_label_accuracy_mean /= n;
      s.adaptation_time_share_mean /= n;
      if (acc.size() > 1) {
        double ss = 0.0;
        for (double a : acc) ss += (a - s.accuracy_mean) * (a - s.accuracy_mean);
        s.accuracy_std = std::sqrt(ss / (n - 1.0));
      }
    }
    rows.push_back(s);
  }
  return rows;
}

void write_summary_csv(std::ostream& os, const std::vector<CellSummary>& rows) {
  os << "cell,mode,ar,seeds,failed,accuracy_mean,accuracy_std,adapt_count_mean,memory_label_accuracy_mean\n";
  for (const CellSummary& s : rows) {
    os << s.cell << ',' << s.mode << ',' << format_real(s.ar) << ',' << s.seeds << ',' << s.failed << ','
       << csv_real(s.accuracy_mean) << ',' << csv_real(s.accuracy_std) << ',' << csv_real(s.adapt_count_mean) << ','
       << csv_real(s.memory_label_accuracy_mean) << '\n';
  }
}

void write_outputs(const std::string& dir, const ExperimentSpec& spec, const ExperimentResult& result) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
  std::ostringstream results, timing, summary;
  write_results(results, spec, result);
  write_timing(timing, result);
  write_summary_csv(summary, summarize(result));
  write_file(fs::path(dir) / "results.jsonl", results.str());
  write_file(fs::path(dir) / "timing.jsonl", timing.str());
  write_file(fs::path(dir) / "summary.csv", summary.str());
}

std::vector<ResultRecord> read_results(const std::string& path) {
  fs::path file = path;
  if (fs::is_directory(file)) file /= "results.jsonl";
  std::ifstream in(file);
  if (!in) throw DataError("cannot open '" + file.string() + "'");

  std::vector<ResultRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = file.string() + ":" + std::to_string(lineno) + ": ";
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw DataError(where + "invalid JSON");
    }
    if (!j.is_object() || j.value("schema", "") != kResultsSchema) throw DataError(where + "not a results record");
    if (j.value("schema_version", -1) != kResultsSchemaVersion) {
      throw DataError(where + "unsupported schema_version " + j["schema_version"].dump());
    }
    try {
      ResultRecord r;
      r.cell = j.at("cell").get<std::string>();
      r.mode = j.at("mode").get<std::string>();
      r.ar = j.at("ar").get<double>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.ok = j.at("status").get<std::string>() == "ok";
      if (r.ok) r.accuracy = j.at("accuracy").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
  }

  const fs::path timing = file.parent_path() / "timing.jsonl";
  std::ifstream tin(timing);
  while (tin && std::getline(tin, line)) {
    if (line.empty()) continue;
    const auto j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("mean_batch_seconds")) continue;
    for (ResultRecord& r : out) {
      if (r.cell == j.value("cell", "") && r.seed == j.value("seed", std::uint64_t{0})) {
        r.mean_batch_seconds = j["mean_batch_seconds"].get<double>();
      }
    }
  }
  return out;
}

}  // namespace stta::cli
