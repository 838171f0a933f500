#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stta/datagen.hpp"
#include "stta/engine.hpp"
#include "stta/errors.hpp"

namespace stta::cli {

// A configuration problem, anchored at a source line when one is known.
class ConfigError : public UsageError {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct IniEntry {
  std::string value;
  std::size_t line = 0;
};

struct IniSection {
  std::size_t line = 0;
  std::map<std::string, IniEntry> entries;
};

/// Parsed key/value file. Grammar (one construct per line):
///
///   # comment            ; comment
///   [section]            [section.name]
///   key = value          trailing "# ..." after whitespace is a comment
///
/// Keys and section names use [a-z0-9_.-]. Repeated sections merge; a
/// repeated key is an error.
struct IniDocument {
  std::string source;
  std::map<std::string, IniSection> sections;
};

IniDocument parse_ini(std::istream& in, const std::string& source);
IniDocument parse_ini_file(const std::string& path);

struct DomainSettings {
  std::size_t classes = 3;
  std::size_t channels = 16;
  std::size_t length = 8;
  double separation = 3.0;
  double sigma = 0.5;
  std::uint64_t world_seed = 7;
  std::size_t source_samples = 3000;
};

struct ModelSettings {
  std::size_t hidden = 16;
  std::size_t norm_layers = 3;
};

struct StreamSettings {
  std::size_t batch_size = 16;
  StreamOrder order = StreamOrder::iid;
  std::uint64_t seed_offset = 100;  // stream seed = seed_offset + experiment seed
  // (corruption name, batches)
  std::vector<std::pair<std::string, std::size_t>> segments{{"strong_scale", 200}};
};

struct Thresholds {
  std::optional<double> min_accuracy;                // every cell
  std::map<std::string, double> min_accuracy_mode;   // per mode, overrides the above
};

/// Everything needed to run a grid of (mode, ar) cells over seeds.
struct ExperimentSpec {
  std::string name = "default";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<double> ars{0.1};
  std::vector<std::string> modes{"snap"};
  std::size_t workers = 0;  // 0 = available parallelism
  std::string checkpoint;   // load this model instead of pretraining per seed

  // Mode-independent fields. selection and inference only matter for the
  // custom mode; every other mode sets them itself.
  EngineConfig engine;
  bool capacity_explicit = false;  // otherwise capacity = stream batch size

  DomainSettings domain;
  ModelSettings model;
  PretrainOptions pretrain;  // seed is replaced by the experiment seed
  StreamSettings stream;
  std::map<std::string, Corruption> corruptions;  // user-defined presets
  Thresholds thresholds;
};

// Applies the document on top of `base`; unknown sections or keys and
// malformed values raise ConfigError with the offending line.
void apply_document(ExperimentSpec& spec, const IniDocument& doc);

// The modes understood by --mode and [experiment] modes.
const std::vector<std::string>& mode_names();

// Engine configuration of a mode. Modes without adaptation force ar = 0;
// "custom" keeps base.selection and base.inference.
EngineConfig mode_config(const std::string& mode, EngineConfig base, double ar);
bool mode_adapts(const std::string& mode);

Corruption resolve_corruption(const ExperimentSpec& spec, const std::string& name);
StreamSpec stream_spec(const ExperimentSpec& spec, std::uint64_t seed);

// Value parsers shared with the flag layer; they throw ConfigError.
double parse_real(const std::string& text, const std::string& source, std::size_t line);
std::uint64_t parse_uint(const std::string& text, const std::string& source, std::size_t line);
std::vector<std::string> split_list(const std::string& text);

// Shortest round-trip decimal text of a double.
std::string format_real(double v);

}  // namespace stta::cli
