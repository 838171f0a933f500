#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli/app.hpp"
#include "cli/config.hpp"
#include "cli/experiment.hpp"
#include "cli/results.hpp"

using namespace stta;
using namespace stta::cli;
namespace fs = std::filesystem;

namespace {

const std::string kData = STTA_TEST_DATA_DIR;

std::string data(const std::string& name) { return kData + "/" + name; }

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stta_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct AppRun {
  int code;
  std::string out, err;
};

AppRun app(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_app(args, out, err);
  return {code, out.str(), err.str()};
}

IniDocument parse(const std::string& text) {
  std::istringstream in(text);
  return parse_ini(in, "inline.ini");
}

ExperimentSpec tiny_spec() {
  ExperimentSpec spec;
  apply_document(spec, parse_ini_file(data("tiny.ini")));
  return spec;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST(IniParser, SectionsCommentsAndValues) {
  const IniDocument doc = parse("# header\n; also a comment\n[a]\nx = 1  # trailing\n\n[b.c]\ny=two words\n[a]\nz = 3\n");
  ASSERT_EQ(doc.sections.size(), 2u);
  const IniSection& a = doc.sections.at("a");
  EXPECT_EQ(a.entries.at("x").value, "1");
  EXPECT_EQ(a.entries.at("x").line, 4u);
  EXPECT_EQ(a.entries.at("z").value, "3");
  EXPECT_EQ(doc.sections.at("b.c").entries.at("y").value, "two words");
}

TEST(IniParser, ErrorsCarryTheLineNumber) {
  const auto message = [](const std::string& text) {
    try {
      parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(message("x = 1\n"), "inline.ini:1: key outside of any [section]");
  EXPECT_EQ(message("[a]\nx = 1\nx = 2\n"), "inline.ini:3: duplicate key 'x'");
  EXPECT_EQ(message("[a]\n\njust words\n"), "inline.ini:3: expected 'key = value'");
  EXPECT_EQ(message("[a\n"), "inline.ini:1: unterminated section header");
  EXPECT_EQ(message("[A]\n"), "inline.ini:1: invalid section name 'A'");
  EXPECT_EQ(message("[a]\nx =\n"), "inline.ini:2: empty value for 'x'");
}

TEST(Config, FixtureErrorsPointAtTheLine) {
  EXPECT_THROW(
      {
        try {
          parse_ini_file(data("duplicate_key.ini"));
        } catch (const ConfigError& e) {
          EXPECT_EQ(e.line(), 4u);
          throw;
        }
      },
      ConfigError);
  ExperimentSpec spec;
  try {
    apply_document(spec, parse_ini_file(data("unknown_key.ini")));
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_NE(std::string(e.what()).find("bacth_count"), std::string::npos);
  }
  EXPECT_THROW(parse_ini_file(data("missing.ini")), ConfigError);
}

TEST(Config, ValuesAreValidated) {
  ExperimentSpec spec;
  EXPECT_THROW(apply_document(spec, parse("[engine]\nlr = fast\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[engine]\nlr = nan\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[domain]\nclasses = -3\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[experiment]\nmodes = snap, warp\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[stream]\nsegments = strong_scale\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[stream]\nsegments = fog:3\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[stream]\norder = sorted\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[engine]\nselection = best\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[thresholds]\nmin_accuracy.warp = 0.5\n")), ConfigError);
  EXPECT_THROW(apply_document(spec, parse("[nonsense]\nx = 1\n")), ConfigError);
}

TEST(Config, FixtureIsAppliedOverDefaults) {
  const ExperimentSpec spec = tiny_spec();
  EXPECT_EQ(spec.name, "tiny");
  EXPECT_EQ(spec.seeds, (std::vector<std::uint64_t>{0, 1}));
  EXPECT_EQ(spec.modes, (std::vector<std::string>{"naive", "snap"}));
  EXPECT_EQ(spec.domain.channels, 4u);
  EXPECT_EQ(spec.domain.classes, 3u);  // untouched default
  EXPECT_EQ(spec.stream.segments.size(), 2u);
  EXPECT_EQ(spec.stream.segments[1].first, "tilted");
  EXPECT_DOUBLE_EQ(spec.corruptions.at("tilted").scale, 1.5);
  EXPECT_FALSE(spec.capacity_explicit);
  const StreamSpec s = stream_spec(spec, 1);
  EXPECT_EQ(s.seed, 101u);
  EXPECT_EQ(s.segments[1].corruption.offset, 0.5);
}

TEST(Config, ModesMapToEngineSettings) {
  const EngineConfig base;
  EXPECT_EQ(mode_config("snap", base, 0.1).inference, InferenceStats::iobmn);
  EXPECT_EQ(mode_config("naive", base, 0.1).selection, SelectionMode::naive);
  EXPECT_EQ(mode_config("ema", base, 0.1).inference, InferenceStats::ema);
  const EngineConfig tent = mode_config("tent-equivalent", base, 1.0);
  EXPECT_EQ(tent.tau_conf, 0.0);
  EXPECT_EQ(tent.inference, InferenceStats::batch);
  EXPECT_EQ(mode_config("source-only", base, 0.5).ar, 0.0);
  EXPECT_EQ(mode_config("bn-stats", base, 0.5).ar, 0.0);
  EngineConfig custom = base;
  custom.selection = SelectionMode::crm;
  custom.inference = InferenceStats::ema;
  EngineConfig want = custom;
  want.ar = 0.2;
  EXPECT_EQ(mode_config("custom", custom, 0.2), want);
  EXPECT_THROW(mode_config("warp", base, 0.1), UsageError);
}

TEST(Cells, NonAdaptingModesCollapse) {
  ExperimentSpec spec;
  spec.modes = {"source-only", "snap", "naive"};
  spec.ars = {0.1, 0.5, 0.1};
  std::vector<std::string> ids;
  for (const Cell& c : expand_cells(spec)) ids.push_back(c.id());
  EXPECT_EQ(ids, (std::vector<std::string>{"source-only@0", "snap@0.1", "snap@0.5", "naive@0.1", "naive@0.5"}));
  EXPECT_EQ(format_real(0.3), "0.3");
  EXPECT_EQ(format_real(1.0), "1");
}

TEST(Experiment, TentEquivalentCellMatchesStandaloneLoop) {
  ExperimentSpec spec = tiny_spec();
  spec.modes = {"tent-equivalent"};
  spec.ars = {1.0};
  spec.seeds = {3};
  const ExperimentResult result = run_experiment(spec);
  ASSERT_EQ(result.runs.size(), 1u);
  ASSERT_TRUE(result.runs[0].ok) << result.runs[0].error;

  Model tent = build_model(spec, 3);
  std::size_t correct = 0, total = 0;
  for (const StreamBatch& b : make_stream(build_domain(spec), stream_spec(spec, 3))) {
    const auto pred = argmax_rows(tent.forward(b.inputs, NormSource::batch).logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
    total += pred.size();
    const AffineGradients g = entropy_gradients(tent, b.inputs);
    for (std::size_t k = 0; k < tent.norm_layer_count(); ++k)
      for (std::size_t c = 0; c < tent.norm(k).gamma.size(); ++c) {
        tent.norm(k).gamma[c] -= spec.engine.lr * g.gamma[k][c];
        tent.norm(k).beta[c] -= spec.engine.lr * g.beta[k][c];
      }
  }
  const RunMetrics& m = result.runs[0].metrics;
  EXPECT_EQ(m.adapt_count(), 10u);
  EXPECT_EQ(m.accuracy(), static_cast<double>(correct) / static_cast<double>(total));
}

TEST(Experiment, ZeroRateNeverAdapts) {
  ExperimentSpec spec = tiny_spec();
  spec.modes = {"naive", "snap"};
  spec.ars = {0.0};
  const ExperimentResult result = run_experiment(spec);
  ASSERT_TRUE(result.all_ok());
  for (const SeedRun& r : result.runs) EXPECT_EQ(r.metrics.adapt_count(), 0u) << r.cell.id();
}

TEST(Experiment, SetupErrorsAreUsageErrors) {
  ExperimentSpec spec = tiny_spec();
  spec.seeds.clear();
  EXPECT_THROW(run_experiment(spec), UsageError);
  spec = tiny_spec();
  spec.engine.tau_delta = -1.0;
  EXPECT_THROW(run_experiment(spec), UsageError);
  spec = tiny_spec();
  spec.checkpoint = data("no_such_checkpoint.txt");
  EXPECT_THROW(run_experiment(spec), UsageError);
}

TEST(Results, SummaryUsesSampleStandardDeviation) {
  ExperimentResult r;
  r.cells = {{"naive", 0.5}};
  for (double acc : {0.5, 0.75}) {
    SeedRun run;
    run.cell = r.cells[0];
    run.ok = true;
    BatchRecord b;
    b.batch_size = 4;
    b.has_labels = true;
    b.correct = static_cast<std::size_t>(acc * 4);
    run.metrics.batches.push_back(b);
    r.runs.push_back(run);
  }
  SeedRun failed;
  failed.cell = r.cells[0];
  failed.error = "boom";
  r.runs.push_back(failed);
  const auto rows = summarize(r);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].seeds, 2u);
  EXPECT_EQ(rows[0].failed, 1u);
  EXPECT_DOUBLE_EQ(rows[0].accuracy_mean, 0.625);
  EXPECT_DOUBLE_EQ(rows[0].accuracy_std, std::sqrt(2 * 0.125 * 0.125));

  std::ostringstream csv;
  write_summary_csv(csv, rows);
  EXPECT_EQ(csv.str(),
            "cell,mode,ar,seeds,failed,accuracy_mean,accuracy_std,adapt_count_mean,memory_label_accuracy_mean\n"
            "naive@0.5,naive,0.5,2,1,0.625000,0.176777,0.000000,0.000000\n");
}

TEST(App, RunWritesDeterministicResults) {
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const AppRun ra = app({"run", "-c", data("tiny.ini"), "-o", a.string(), "-q"});
  ASSERT_EQ(ra.code, 0) << ra.err;
  const AppRun rb = app({"run", "-c", data("tiny.ini"), "-o", b.string(), "-q", "-j", "1"});
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(slurp(a / "results.jsonl"), slurp(b / "results.jsonl"));
  EXPECT_EQ(slurp(a / "summary.csv"), slurp(b / "summary.csv"));
  EXPECT_TRUE(fs::exists(a / "timing.jsonl"));

  const auto lines = read_jsonl(a / "results.jsonl");
  ASSERT_EQ(lines.size(), 4u);  // 2 cells x 2 seeds
  const auto& first = lines[0];
  EXPECT_EQ(first["schema"], "stta-results");
  EXPECT_EQ(first["schema_version"], 1);
  EXPECT_EQ(first["cell"], "naive@0.5");
  EXPECT_EQ(first["status"], "ok");
  EXPECT_TRUE(first["error"].is_null());
  EXPECT_EQ(first["batches"], 10);
  EXPECT_EQ(first["adapt_count"], 5);
  EXPECT_EQ(first["config"]["memory_capacity"], 8);  // follows the stream batch size
  EXPECT_EQ(first["segments"].size(), 2u);
  EXPECT_FALSE(first.contains("wall_seconds"));

  const auto records = read_results(a.string());
  ASSERT_EQ(records.size(), 4u);
  EXPECT_EQ(records[3].cell, "snap@0.5");
  EXPECT_EQ(records[3].seed, 1u);
  EXPECT_EQ(records[3].accuracy, lines[3]["accuracy"].get<double>());
  EXPECT_TRUE(records[3].mean_batch_seconds.has_value());
}

TEST(App, FlagsOverrideSetsOverrideFile) {
  const fs::path dir = scratch_dir("precedence");
  const AppRun r = app({"run", "-c", data("tiny.ini"), "--set", "engine.lr=0.002", "--set", "experiment.ar=0.25",
                        "--ar", "1", "-m", "bn-stats,naive", "--seeds", "4", "-o", dir.string(), "-q"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = read_jsonl(dir / "results.jsonl");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0]["cell"], "bn-stats@0");
  EXPECT_EQ(lines[0]["adapt_count"], 0);
  EXPECT_EQ(lines[1]["cell"], "naive@1");
  EXPECT_EQ(lines[1]["seed"], 4);
  EXPECT_EQ(lines[1]["config"]["lr"], 0.002);
  EXPECT_EQ(lines[1]["adapt_count"], 10);
}

TEST(App, OutputDirectoryFromEnvironment) {
  const fs::path dir = scratch_dir("env");
  ::setenv("STTA_OUT_DIR", dir.string().c_str(), 1);
  const AppRun r = app({"run", "-c", data("tiny.ini"), "-m", "bn-stats", "--seeds", "0", "-q"});
  ::unsetenv("STTA_OUT_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "results.jsonl"));
}

TEST(App, ExitCodes) {
  const fs::path dir = scratch_dir("codes");
  EXPECT_EQ(app({"run", "--help"}).code, kExitOk);
  EXPECT_EQ(app({}).code, kExitUsage);
  EXPECT_EQ(app({"run", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(app({"run", "-c", data("tiny.ini"), "-m", "warp", "-o", dir.string()}).code, kExitUsage);
  EXPECT_EQ(app({"run", "-c", data("tiny.ini"), "--ar", "x", "-o", dir.string()}).code, kExitUsage);
  EXPECT_EQ(app({"run", "-c", data("tiny.ini"), "--set", "engine.lr", "-o", dir.string()}).code, kExitUsage);

  const AppRun bad = app({"run", "-c", data("unknown_key.ini"), "-o", dir.string()});
  EXPECT_EQ(bad.code, kExitUsage);
  EXPECT_NE(bad.err.find("unknown_key.ini:4:"), std::string::npos) << bad.err;

  const AppRun threshold = app({"run", "-c", data("tiny.ini"), "-o", dir.string(), "-q", "--set",
                                "thresholds.min_accuracy.snap=1.01", "--set", "thresholds.min_accuracy=0"});
  EXPECT_EQ(threshold.code, kExitThreshold) << threshold.err;
  EXPECT_NE(threshold.err.find("snap@0.5"), std::string::npos);
  EXPECT_EQ(threshold.err.find("naive@0.5"), std::string::npos);

  const fs::path garbage = dir / "garbage.ckpt";
  std::ofstream(garbage) << "not a model\n";
  EXPECT_EQ(app({"run", "-c", data("tiny.ini"), "--checkpoint", garbage.string(), "-o", dir.string(), "-q"}).code,
            kExitRuntime);
}

TEST(App, PretrainCheckpointFeedsRun) {
  const fs::path dir = scratch_dir("pretrain");
  const std::string ckpt = (dir / "model.ckpt").string();
  const AppRun p = app({"pretrain", "-c", data("tiny.ini"), "--seed", "1", "-o", ckpt});
  ASSERT_EQ(p.code, 0) << p.err;
  const AppRun a = app({"run", "-c", data("tiny.ini"), "--checkpoint", ckpt, "--seeds", "1", "-o",
                        (dir / "a").string(), "-q"});
  ASSERT_EQ(a.code, 0) << a.err;
  // Same weights as the per-seed pretraining, so the results agree.
  const AppRun b = app({"run", "-c", data("tiny.ini"), "--seeds", "1", "-o", (dir / "b").string(), "-q"});
  ASSERT_EQ(b.code, 0) << b.err;
  const auto ra = read_jsonl(dir / "a" / "results.jsonl"), rb = read_jsonl(dir / "b" / "results.jsonl");
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(ra[i]["accuracy"], rb[i]["accuracy"]);
}

class Compare : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    base_ = scratch_dir("compare").string();
    const AppRun r = app({"run", "-c", data("tiny.ini"), "--ar", "0.5,1", "-o", base_, "-q"});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static fs::path write(const std::string& name, const std::vector<nlohmann::json>& lines) {
    const fs::path p = fs::path(base_) / name;
    std::ofstream out(p);
    for (const auto& j : lines) out << j.dump() << '\n';
    return p;
  }

  static inline std::string base_;
};

TEST_F(Compare, SelfComparisonHasZeroDeltas) {
  const AppRun r = app({"compare", base_, base_, "--max-drop", "0"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("snap@1"), std::string::npos);
  EXPECT_NE(r.out.find("+0.0000"), std::string::npos);
  EXPECT_EQ(r.out.find("-0.0"), std::string::npos);
  EXPECT_EQ(r.out.find("GAP"), std::string::npos);
}

TEST_F(Compare, MissingCellsShowAsGaps) {
  auto lines = read_jsonl(fs::path(base_) / "results.jsonl");
  std::vector<nlohmann::json> partial;
  for (const auto& j : lines)
    if (j["cell"] != "naive@1") partial.push_back(j);
  const fs::path p = write("partial.jsonl", partial);
  const AppRun r = app({"compare", base_, p.string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("GAP"), std::string::npos);
}

TEST_F(Compare, DropBeyondLimitFails) {
  auto lines = read_jsonl(fs::path(base_) / "results.jsonl");
  for (auto& j : lines)
    if (j["cell"] == "snap@0.5") j["accuracy"] = j["accuracy"].get<double>() - 0.2;
  const fs::path p = write("worse.jsonl", lines);
  const AppRun loose = app({"compare", base_, p.string(), "--max-drop", "0.25"});
  EXPECT_EQ(loose.code, kExitOk);
  const AppRun strict = app({"compare", base_, p.string(), "--max-drop", "0.1"});
  EXPECT_EQ(strict.code, kExitThreshold);
  EXPECT_NE(strict.out.find("DROP"), std::string::npos);
}

TEST_F(Compare, KeyByRateMatchesAcrossModes) {
  auto lines = read_jsonl(fs::path(base_) / "results.jsonl");
  std::vector<nlohmann::json> naive, snap;
  for (const auto& j : lines) (j["mode"] == "naive" ? naive : snap).push_back(j);
  const fs::path a = write("naive.jsonl", naive), b = write("snap.jsonl", snap);
  EXPECT_EQ(app({"compare", a.string(), b.string()}).code, kExitUsage);  // no shared cell id
  const AppRun r = app({"compare", a.string(), b.string(), "--key", "ar"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("0.5"), std::string::npos);
  // Two modes under one rate cannot be keyed by rate.
  EXPECT_EQ(app({"compare", base_, b.string(), "--key", "ar"}).code, kExitUsage);
}

TEST_F(Compare, SchemaMismatchIsRejected) {
  auto lines = read_jsonl(fs::path(base_) / "results.jsonl");
  lines[0]["schema_version"] = 2;
  const fs::path p = write("future.jsonl", lines);
  const AppRun r = app({"compare", base_, p.string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("schema_version"), std::string::npos);
  EXPECT_EQ(app({"compare", base_, (fs::path(base_) / "nope.jsonl").string()}).code, kExitUsage);
}

TEST(ShippedConfigs, DefaultFileMatchesBuiltInDefaults) {
  ExperimentSpec from_file;
  apply_document(from_file, parse_ini_file(std::string(STTA_CONFIG_DIR) + "/default.ini"));
  const ExperimentSpec builtin;
  EXPECT_EQ(from_file.name, builtin.name);
  EXPECT_EQ(from_file.seeds, builtin.seeds);
  EXPECT_EQ(from_file.ars, builtin.ars);
  EXPECT_EQ(from_file.engine, builtin.engine);
  EXPECT_FALSE(from_file.capacity_explicit);
  EXPECT_EQ(from_file.domain.channels, builtin.domain.channels);
  EXPECT_EQ(from_file.domain.source_samples, builtin.domain.source_samples);
  EXPECT_EQ(from_file.domain.world_seed, builtin.domain.world_seed);
  EXPECT_EQ(from_file.domain.separation, builtin.domain.separation);
  EXPECT_EQ(from_file.domain.sigma, builtin.domain.sigma);
  EXPECT_EQ(from_file.model.hidden, builtin.model.hidden);
  EXPECT_EQ(from_file.model.norm_layers, builtin.model.norm_layers);
  EXPECT_EQ(from_file.pretrain.epochs, builtin.pretrain.epochs);
  EXPECT_EQ(from_file.pretrain.lr, builtin.pretrain.lr);
  EXPECT_EQ(from_file.pretrain.batch_size, builtin.pretrain.batch_size);
  EXPECT_EQ(from_file.stream.batch_size, builtin.stream.batch_size);
  EXPECT_EQ(from_file.stream.seed_offset, builtin.stream.seed_offset);
  EXPECT_EQ(from_file.stream.segments, builtin.stream.segments);

  ExperimentSpec continual;
  EXPECT_NO_THROW(apply_document(continual, parse_ini_file(std::string(STTA_CONFIG_DIR) + "/continual.ini")));
  EXPECT_NO_THROW(validate_spec(continual));
}
