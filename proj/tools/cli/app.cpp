#include "cli/app.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "cli/config.hpp"
#include "cli/experiment.hpp"
#include "cli/results.hpp"

namespace stta::cli {

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "Experiment config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.sets, "Override one config key: section.key=value (repeatable)");
}

// "--set engine.lr=1e-3" becomes a one-entry document. Corruption sections
// keep their name: corruption.NAME.key.
IniDocument sets_document(const std::vector<std::string>& sets) {
  IniDocument doc;
  doc.source = "--set";
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const std::string& s = sets[i];
    const auto eq = s.find('=');
    const std::string path = eq == std::string::npos ? s : s.substr(0, eq);
    std::size_t dot = path.find('.');
    if (dot != std::string::npos && path.compare(0, dot, "corruption") == 0) dot = path.find('.', dot + 1);
    if (eq == std::string::npos || dot == std::string::npos || eq + 1 == s.size()) {
      throw ConfigError("--set", i + 1, "expected section.key=value, got '" + s + "'");
    }
    IniSection& sec = doc.sections[path.substr(0, dot)];
    if (!sec.line) sec.line = i + 1;
    if (!sec.entries.try_emplace(path.substr(dot + 1), IniEntry{s.substr(eq + 1), i + 1}).second) {
      throw ConfigError("--set", i + 1, "duplicate override '" + path + "'");
    }
  }
  return doc;
}

ExperimentSpec load_spec(const CommonOptions& o) {
  ExperimentSpec spec;
  if (!o.config.empty()) apply_document(spec, parse_ini_file(o.config));
  if (!o.sets.empty()) apply_document(spec, sets_document(o.sets));
  return spec;
}

std::vector<std::string> flatten_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items)
    for (auto& part : split_list(item)) out.push_back(std::move(part));
  return out;
}

std::optional<double> threshold_for(const ExperimentSpec& spec, const std::string& mode) {
  if (auto it = spec.thresholds.min_accuracy_mode.find(mode); it != spec.thresholds.min_accuracy_mode.end()) {
    return it->second;
  }
  return spec.thresholds.min_accuracy;
}

void print_summary(std::ostream& out, const std::vector<CellSummary>& rows) {
  out << std::left << std::setw(24) << "cell" << std::right << std::setw(6) << "seeds" << std::setw(10) << "acc"
      << std::setw(9) << "std" << std::setw(10) << "adapts" << std::setw(10) << "mem_acc" << std::setw(10)
      << "adapt_t" << '\n';
  out << std::fixed;
  for (const CellSummary& s : rows) {
    out << std::left << std::setw(24) << s.cell << std::right << std::setw(6) << s.seeds << std::setprecision(4)
        << std::setw(10) << s.accuracy_mean << std::setw(9) << s.accuracy_std << std::setprecision(1) << std::setw(10)
        << s.adapt_count_mean << std::setprecision(4) << std::setw(10) << s.memory_label_accuracy_mean
        << std::setw(10) << s.adaptation_time_share_mean;
    if (s.failed) out << "  (" << s.failed << " failed)";
    out << '\n';
  }
  out << std::defaultfloat;
}

struct RunOptions {
  CommonOptions common;
  std::string out_dir = "results";
  std::vector<std::string> modes, ars, seeds;
  std::optional<std::size_t> workers;
  std::string checkpoint, name;
  bool quiet = false;
};

int do_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
  ExperimentSpec spec = load_spec(o.common);
  if (!o.modes.empty()) spec.modes = flatten_list(o.modes);
  if (!o.ars.empty()) {
    spec.ars.clear();
    for (const auto& a : flatten_list(o.ars)) spec.ars.push_back(parse_real(a, "--ar", 0));
  }
  if (!o.seeds.empty()) {
    spec.seeds.clear();
    for (const auto& s : flatten_list(o.seeds)) spec.seeds.push_back(parse_uint(s, "--seeds", 0));
  }
  if (o.workers) spec.workers = *o.workers;
  if (!o.checkpoint.empty()) spec.checkpoint = o.checkpoint;
  if (!o.name.empty()) spec.name = o.name;
  validate_spec(spec);

  const ProgressFn progress = [&](const SeedRun& r) {
    if (o.quiet) return;
    err << r.cell.id() << " seed " << r.seed << ": ";
    if (r.ok) err << "accuracy " << std::fixed << std::setprecision(4) << r.metrics.accuracy() << std::defaultfloat;
    else err << "FAILED: " << r.error;
    err << '\n';
  };
  const ExperimentResult result = run_experiment(spec, progress);
  write_outputs(o.out_dir, spec, result);

  const auto rows = summarize(result);
  print_summary(out, rows);
  out << "wrote " << o.out_dir << "/{results.jsonl,timing.jsonl,summary.csv}\n";

  if (!result.all_ok()) {
    err << "error: some runs failed; partial results were written\n";
    return kExitRuntime;
  }
  int code = kExitOk;
  for (const CellSummary& s : rows) {
    const auto t = threshold_for(spec, s.mode);
    if (t && s.accuracy_mean < *t) {
      err << "threshold: " << s.cell << " accuracy " << s.accuracy_mean << " < " << *t << '\n';
      code = kExitThreshold;
    }
  }
  return code;
}

struct PretrainCmdOptions {
  CommonOptions common;
  std::uint64_t seed = 0;
  std::string out;
};

int do_pretrain(const PretrainCmdOptions& o, std::ostream& out) {
  const ExperimentSpec spec = load_spec(o.common);
  PretrainReport report;
  const Model model = build_model(spec, o.seed, &report);
  std::ofstream os(o.out, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + o.out + "'");
  save_model(os, model);
  os.close();
  if (!os) throw DataError("write to '" + o.out + "' failed");
  out << "seed " << o.seed << ": source accuracy " << std::fixed << std::setprecision(4) << report.source_accuracy
      << std::defaultfloat << ", checkpoint " << o.out << '\n';
  return kExitOk;
}

struct CompareOptions {
  std::string a, b;
  std::string key = "cell";
  std::optional<double> max_drop;
  std::optional<double> max_latency_ratio;
};

struct KeyStats {
  std::size_t ok = 0;
  double accuracy = 0.0;
  std::size_t timed = 0;
  double batch_seconds = 0.0;
  std::string mode;
};

std::vector<std::pair<std::string, KeyStats>> group(const std::vector<ResultRecord>& records, const std::string& key,
                                                    const std::string& label) {
  std::vector<std::pair<std::string, KeyStats>> groups;
  for (const ResultRecord& r : records) {
    const std::string k = key == "ar" ? format_real(r.ar) : r.cell;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == k; });
    if (it == groups.end()) {
      groups.push_back({k, KeyStats{}});
      it = std::prev(groups.end());
      it->second.mode = r.mode;
    } else if (it->second.mode != r.mode) {
      throw UsageError(label + ": ar " + k + " appears under modes '" + it->second.mode + "' and '" + r.mode +
                       "'; use --key cell");
    }
    if (!r.ok) continue;
    ++it->second.ok;
    it->second.accuracy += r.accuracy;
    if (r.mean_batch_seconds) {
      ++it->second.timed;
      it->second.batch_seconds += *r.mean_batch_seconds;
    }
  }
  for (auto& [k, s] : groups) {
    if (s.ok) s.accuracy /= static_cast<double>(s.ok);
    if (s.timed) s.batch_seconds /= static_cast<double>(s.timed);
  }
  return groups;
}

int do_compare(const CompareOptions& o, std::ostream& out, std::ostream& err) {
  const auto ga = group(read_results(o.a), o.key, o.a);
  const auto gb = group(read_results(o.b), o.key, o.b);
  const auto find = [](const auto& g, const std::string& k) -> const KeyStats* {
    for (const auto& [key, s] : g)
      if (key == k) return &s;
    return nullptr;
  };

  std::vector<std::string> keys;
  for (const auto& [k, s] : ga) keys.push_back(k);
  for (const auto& [k, s] : gb)
    if (!find(ga, k)) keys.push_back(k);
  const bool overlap = std::any_of(ga.begin(), ga.end(), [&](const auto& g) { return find(gb, g.first); });
  if (!overlap) {
    err << "error: no " << o.key << " appears in both inputs\n";
    return kExitUsage;
  }

  int code = kExitOk;
  out << std::left << std::setw(24) << o.key << std::right << std::setw(10) << "acc_a" << std::setw(10) << "acc_b"
      << std::setw(10) << "delta" << std::setw(12) << "lat_ratio" << '\n';
  for (const std::string& k : keys) {
    const KeyStats* a = find(ga, k);
    const KeyStats* b = find(gb, k);
    out << std::left << std::setw(24) << k << std::right << std::fixed << std::setprecision(4);
    if (!a || !b || !a->ok || !b->ok) {
      const auto acc = [](const KeyStats* s) {
        std::ostringstream os;
        if (s && s->ok) os << std::fixed << std::setprecision(4) << s->accuracy;
        else os << "GAP";
        return os.str();
      };
      out << std::setw(10) << acc(a) << std::setw(10) << acc(b) << std::setw(10) << "GAP" << std::setw(12) << "GAP"
          << '\n';
      continue;
    }
    const double delta = b->accuracy - a->accuracy;
    out << std::setw(10) << a->accuracy << std::setw(10) << b->accuracy << std::showpos << std::setw(10) << delta
        << std::noshowpos;
    std::optional<double> ratio;
    if (a->timed && b->timed && a->batch_seconds > 0.0) ratio = b->batch_seconds / a->batch_seconds;
    if (ratio) out << std::setprecision(3) << std::setw(12) << *ratio;
    else out << std::setw(12) << "n/a";
    std::string flags;
    if (o.max_drop && -delta > *o.max_drop) flags += "  DROP";
    if (o.max_latency_ratio && ratio && *ratio > *o.max_latency_ratio) flags += "  SLOW";
    if (!flags.empty()) code = kExitThreshold;
    out << flags << '\n';
  }
  out << std::defaultfloat;
  return code;
}

}  // namespace

int run_app(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Streaming test-time adaptation benchmark", "stta-bench"};
  app.require_subcommand(1);

  RunOptions run;
  CLI::App* run_cmd = app.add_subcommand("run", "Run an experiment grid and write results");
  add_common(run_cmd, run.common);
  run_cmd->add_option("-o,--out", run.out_dir, "Output directory")->envname("STTA_OUT_DIR");
  run_cmd->add_option("-m,--mode", run.modes, "Modes to run (comma separated or repeated)");
  run_cmd->add_option("--ar", run.ars, "Adaptation rates");
  run_cmd->add_option("--seeds", run.seeds, "Experiment seeds");
  run_cmd->add_option("-j,--workers", run.workers, "Worker threads (0 = all cores)");
  run_cmd->add_option("--checkpoint", run.checkpoint, "Use this model for every seed")->check(CLI::ExistingFile);
  run_cmd->add_option("--name", run.name, "Experiment name recorded in results");
  run_cmd->add_flag("-q,--quiet", run.quiet, "No per-run progress");

  PretrainCmdOptions pre;
  CLI::App* pre_cmd = app.add_subcommand("pretrain", "Pretrain a source model and save a checkpoint");
  add_common(pre_cmd, pre.common);
  pre_cmd->add_option("--seed", pre.seed, "Experiment seed");
  pre_cmd->add_option("-o,--out", pre.out, "Checkpoint path")->required();

  CompareOptions cmp;
  CLI::App* cmp_cmd = app.add_subcommand("compare", "Compare two result sets");
  cmp_cmd->add_option("a", cmp.a, "Baseline results directory or file")->required();
  cmp_cmd->add_option("b", cmp.b, "Candidate results directory or file")->required();
  cmp_cmd->add_option("--key", cmp.key, "Match on cell id or on ar alone")->check(CLI::IsMember({"cell", "ar"}));
  cmp_cmd->add_option("--max-drop", cmp.max_drop, "Fail when accuracy drops by more than this");
  cmp_cmd->add_option("--max-latency-ratio", cmp.max_latency_ratio, "Fail when per-batch latency grows beyond this");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*run_cmd) return do_run(run, out, err);
    if (*pre_cmd) return do_pretrain(pre, out);
    return do_compare(cmp, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return *cmp_cmd ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace stta::cli
