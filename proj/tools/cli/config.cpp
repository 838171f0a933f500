#include "cli/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>

namespace stta::cli {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::islower(c) || std::isdigit(c) || c == '_' || c == '.' || c == '-';
  });
}

// Removes a trailing comment introduced by whitespace followed by '#' or ';'.
std::string strip_comment(const std::string& s) {
  for (std::size_t i = 1; i < s.size(); ++i) {
    if ((s[i] == '#' || s[i] == ';') && (s[i - 1] == ' ' || s[i - 1] == '\t')) return s.substr(0, i);
  }
  return s;
}

bool parse_bool(const std::string& v, const std::string& src, std::size_t line) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(src, line, "expected a boolean, got '" + v + "'");
}

}  // namespace

ConfigError::ConfigError(const std::string& source, std::size_t line, const std::string& what)
    : UsageError(line ? source + ":" + std::to_string(line) + ": " + what : source + ": " + what),
      line_(line) {}

IniDocument parse_ini(std::istream& in, const std::string& source) {
  IniDocument doc;
  doc.source = source;
  std::string raw;
  std::size_t line = 0;
  IniSection* current = nullptr;
  while (std::getline(in, raw)) {
    ++line;
    const std::string text = trim(raw);
    if (text.empty() || text[0] == '#' || text[0] == ';') continue;
    if (text[0] == '[') {
      const std::string body = trim(strip_comment(text));
      if (body.back() != ']') throw ConfigError(source, line, "unterminated section header");
      const std::string name = trim(body.substr(1, body.size() - 2));
      if (!valid_name(name)) throw ConfigError(source, line, "invalid section name '" + name + "'");
      auto [it, fresh] = doc.sections.try_emplace(name);
      if (fresh) it->second.line = line;
      current = &it->second;
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(source, line, "expected 'key = value'");
    if (!current) throw ConfigError(source, line, "key outside of any [section]");
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(strip_comment(text.substr(eq + 1)));
    if (!valid_name(key)) throw ConfigError(source, line, "invalid key '" + key + "'");
    if (value.empty()) throw ConfigError(source, line, "empty value for '" + key + "'");
    if (!current->entries.try_emplace(key, IniEntry{value, line}).second) {
      throw ConfigError(source, line, "duplicate key '" + key + "'");
    }
  }
  return doc;
}

IniDocument parse_ini_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, 0, "cannot open config file");
  return parse_ini(in, path);
}

double parse_real(const std::string& text, const std::string& source, std::size_t line) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ConfigError(source, line, "expected a finite number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& text, const std::string& source, std::size_t line) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(source, line, "expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string item = trim(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string format_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

const std::vector<std::string>& mode_names() {
  static const std::vector<std::string> names{"snap",     "cndrm", "naive",          "random",      "low_entropy",
                                              "crm",      "ema",   "tent-equivalent", "source-only", "bn-stats",
                                              "custom"};
  return names;
}

bool mode_adapts(const std::string& mode) { return mode != "source-only" && mode != "bn-stats"; }

EngineConfig mode_config(const std::string& mode, EngineConfig base, double ar) {
  EngineConfig c = base;
  c.ar = ar;
  if (mode == "snap") {
    c.selection = SelectionMode::cndrm;
    c.inference = InferenceStats::iobmn;
  } else if (mode == "cndrm") {
    c.selection = SelectionMode::cndrm;
    c.inference = InferenceStats::batch;
  } else if (mode == "ema") {
    c.selection = SelectionMode::cndrm;
    c.inference = InferenceStats::ema;
  } else if (mode == "naive" || mode == "random" || mode == "low_entropy" || mode == "crm") {
    c.selection = selection_mode_from_string(mode);
    c.inference = InferenceStats::batch;
  } else if (mode == "tent-equivalent") {
    c.selection = SelectionMode::naive;
    c.inference = InferenceStats::batch;
    c.tau_conf = 0.0;
  } else if (mode == "source-only") {
    c.ar = 0.0;
    c.inference = InferenceStats::source;
  } else if (mode == "bn-stats") {
    c.ar = 0.0;
    c.inference = InferenceStats::batch;
  } else if (mode != "custom") {
    throw UsageError("unknown mode '" + mode + "'");
  }
  return c;
}

Corruption resolve_corruption(const ExperimentSpec& spec, const std::string& name) {
  if (auto it = spec.corruptions.find(name); it != spec.corruptions.end()) return it->second;
  return corruption_preset(name);
}

StreamSpec stream_spec(const ExperimentSpec& spec, std::uint64_t seed) {
  StreamSpec s;
  s.batch_size = spec.stream.batch_size;
  s.order = spec.stream.order;
  s.seed = spec.stream.seed_offset + seed;
  for (const auto& [name, batches] : spec.stream.segments) s.segments.push_back({resolve_corruption(spec, name), batches});
  return s;
}

namespace {

using Handler = std::function<void(const IniEntry&)>;

void apply_section(const IniDocument& doc, const std::string& section, const IniSection& sec,
                   const std::map<std::string, Handler>& handlers) {
  for (const auto& [key, entry] : sec.entries) {
    const auto it = handlers.find(key);
    if (it == handlers.end()) {
      throw ConfigError(doc.source, entry.line, "unknown key '" + key + "' in [" + section + "]");
    }
    it->second(entry);
  }
}

}  // namespace

void apply_document(ExperimentSpec& spec, const IniDocument& doc) {
  const std::string& src = doc.source;
  const auto real = [&](double& dst) {
    return [&dst, &src](const IniEntry& e) { dst = parse_real(e.value, src, e.line); };
  };
  const auto size = [&](std::size_t& dst) {
    return [&dst, &src](const IniEntry& e) { dst = static_cast<std::size_t>(parse_uint(e.value, src, e.line)); };
  };
  const auto u64 = [&](std::uint64_t& dst) {
    return [&dst, &src](const IniEntry& e) { dst = parse_uint(e.value, src, e.line); };
  };

  for (const auto& [name, sec] : doc.sections) {
    if (name == "experiment") {
      apply_section(doc, name, sec,
                    {{"name", [&](const IniEntry& e) { spec.name = e.value; }},
                     {"seeds",
                      [&](const IniEntry& e) {
                        spec.seeds.clear();
                        for (const auto& s : split_list(e.value)) spec.seeds.push_back(parse_uint(s, src, e.line));
                      }},
                     {"ar",
                      [&](const IniEntry& e) {
                        spec.ars.clear();
                        for (const auto& s : split_list(e.value)) spec.ars.push_back(parse_real(s, src, e.line));
                      }},
                     {"modes",
                      [&](const IniEntry& e) {
                        spec.modes = split_list(e.value);
                        for (const auto& m : spec.modes)
                          if (std::find(mode_names().begin(), mode_names().end(), m) == mode_names().end())
                            throw ConfigError(src, e.line, "unknown mode '" + m + "'");
                      }},
                     {"workers", size(spec.workers)},
                     {"checkpoint", [&](const IniEntry& e) { spec.checkpoint = e.value; }}});
    } else if (name == "engine") {
      EngineConfig& c = spec.engine;
      apply_section(doc, name, sec,
                    {{"tau_conf", real(c.tau_conf)},
                     {"tau_delta", real(c.tau_delta)},
                     {"alpha", real(c.alpha)},
                     {"beta_centroid", real(c.beta_centroid)},
                     {"lr", real(c.lr)},
                     {"ema_momentum", real(c.ema_momentum)},
                     {"entropy_ratio", real(c.entropy_ratio)},
                     {"memory_capacity",
                      [&](const IniEntry& e) {
                        c.memory_capacity = static_cast<std::size_t>(parse_uint(e.value, src, e.line));
                        spec.capacity_explicit = true;
                      }},
                     {"iobmn_refresh",
                      [&](const IniEntry& e) { c.iobmn_refresh_every_batch = parse_bool(e.value, src, e.line); }},
                     {"seed", u64(c.seed)},
                     {"selection",
                      [&](const IniEntry& e) {
                        try {
                          c.selection = selection_mode_from_string(e.value);
                        } catch (const Error& err) {
                          throw ConfigError(src, e.line, err.what());
                        }
                      }},
                     {"inference", [&](const IniEntry& e) {
                        try {
                          c.inference = inference_stats_from_string(e.value);
                        } catch (const Error& err) {
                          throw ConfigError(src, e.line, err.what());
                        }
                      }}});
    } else if (name == "domain") {
      DomainSettings& d = spec.domain;
      apply_section(doc, name, sec,
                    {{"classes", size(d.classes)},
                     {"channels", size(d.channels)},
                     {"length", size(d.length)},
                     {"separation", real(d.separation)},
                     {"sigma", real(d.sigma)},
                     {"world_seed", u64(d.world_seed)},
                     {"source_samples", size(d.source_samples)}});
    } else if (name == "model") {
      apply_section(doc, name, sec, {{"hidden", size(spec.model.hidden)}, {"norm_layers", size(spec.model.norm_layers)}});
    } else if (name == "pretrain") {
      apply_section(doc, name, sec,
                    {{"epochs", size(spec.pretrain.epochs)},
                     {"lr", real(spec.pretrain.lr)},
                     {"batch_size", size(spec.pretrain.batch_size)}});
    } else if (name == "stream") {
      apply_section(doc, name, sec,
                    {{"batch_size", size(spec.stream.batch_size)},
                     {"seed_offset", u64(spec.stream.seed_offset)},
                     {"order",
                      [&](const IniEntry& e) {
                        if (e.value == "iid") spec.stream.order = StreamOrder::iid;
                        else if (e.value == "class_correlated") spec.stream.order = StreamOrder::class_correlated;
                        else throw ConfigError(src, e.line, "order must be iid or class_correlated");
                      }},
                     {"segments", [&](const IniEntry& e) {
                        spec.stream.segments.clear();
                        for (const auto& item : split_list(e.value)) {
                          const auto colon = item.find(':');
                          if (colon == std::string::npos) {
                            throw ConfigError(src, e.line, "segment '" + item + "' must be corruption:batches");
                          }
                          spec.stream.segments.emplace_back(
                              trim(item.substr(0, colon)),
                              static_cast<std::size_t>(parse_uint(trim(item.substr(colon + 1)), src, e.line)));
                        }
                        if (spec.stream.segments.empty()) throw ConfigError(src, e.line, "no segments given");
                      }}});
    } else if (name.rfind("corruption.", 0) == 0) {
      Corruption c;
      c.name = name.substr(std::string("corruption.").size());
      if (c.name.empty()) throw ConfigError(src, sec.line, "corruption section needs a name");
      apply_section(doc, name, sec,
                    {{"scale", real(c.scale)},
                     {"offset", real(c.offset)},
                     {"noise", real(c.noise)},
                     {"permute", [&](const IniEntry& e) { c.permute = parse_bool(e.value, src, e.line); }},
                     {"perm_seed", u64(c.perm_seed)}});
      if (c.noise < 0.0) throw ConfigError(src, sec.line, "corruption noise must be >= 0");
      spec.corruptions[c.name] = c;
    } else if (name == "thresholds") {
      for (const auto& [key, entry] : sec.entries) {
        const double v = parse_real(entry.value, src, entry.line);
        if (key == "min_accuracy") {
          spec.thresholds.min_accuracy = v;
        } else if (key.rfind("min_accuracy.", 0) == 0) {
          const std::string mode = key.substr(std::string("min_accuracy.").size());
          if (std::find(mode_names().begin(), mode_names().end(), mode) == mode_names().end()) {
            throw ConfigError(src, entry.line, "unknown mode '" + mode + "' in threshold");
          }
          spec.thresholds.min_accuracy_mode[mode] = v;
        } else {
          throw ConfigError(src, entry.line, "unknown key '" + key + "' in [thresholds]");
        }
      }
    } else {
      throw ConfigError(src, sec.line, "unknown section [" + name + "]");
    }
  }

  // Cross-field checks that can point at a line.
  for (const auto& [name, batches] : spec.stream.segments) {
    if (spec.corruptions.count(name)) continue;
    const auto& presets = corruption_preset_names();
    if (std::find(presets.begin(), presets.end(), name) == presets.end()) {
      const auto sec = doc.sections.find("stream");
      const std::size_t line = sec != doc.sections.end() && sec->second.entries.count("segments")
                                   ? sec->second.entries.at("segments").line
                                   : 0;
      throw ConfigError(src, line, "unknown corruption '" + name + "'");
    }
  }
}

}  // namespace stta::cli
