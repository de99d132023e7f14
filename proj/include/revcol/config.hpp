#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "revcol/train.hpp"

namespace revcol {

struct ParsedConfig {
  ModelConfig model;
  TrainConfig train;
  SupervisionSchedule schedule;
};

// Named presets: channel widths / block counts / column counts of the
// reference variant sizes, plus the desk-scale fixture used by the verification
// commands.
inline bool apply_preset(const std::string& name, ModelConfig& m) {
  auto set = [&](std::array<std::int64_t, 4> c, std::array<std::int64_t, 4> b, int col) {
    m.channels = c;
    m.blocks = b;
    m.columns = col;
  };
  if (name == "revcol-t") set({64, 128, 256, 512}, {2, 2, 4, 2}, 4);
  else if (name == "revcol-s") set({64, 128, 256, 512}, {2, 2, 4, 2}, 8);
  else if (name == "revcol-b") set({72, 144, 288, 576}, {1, 1, 3, 2}, 16);
  else if (name == "revcol-l") set({128, 256, 512, 1024}, {1, 2, 6, 2}, 8);
  else if (name == "revcol-xl") set({224, 448, 896, 1792}, {1, 2, 6, 2}, 8);
  else if (name == "revcol-h") set({360, 720, 1440, 2880}, {1, 2, 6, 2}, 8);
  else if (name == "tiny-desk") {
    set({8, 16, 32, 64}, {1, 1, 1, 1}, 4);
    m.num_classes = 4;
    m.input_h = m.input_w = 32;
  } else {
    return false;
  }
  return true;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class Fn>
void parse_int_list(const std::string& v, int line, Fn&& fn) {
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t used = 0;
    long long parsed = 0;
    try {
      parsed = std::stoll(item, &used);
    } catch (...) {
      throw ConfigError("line " + std::to_string(line) + ": '" + item + "' is not an integer");
    }
    if (used != item.size())
      throw ConfigError("line " + std::to_string(line) + ": '" + item + "' is not an integer");
    fn(parsed);
  }
}

template <class Fn>
void parse_real_list(const std::string& v, int line, Fn&& fn) {
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t used = 0;
    double parsed = 0;
    try {
      parsed = std::stod(item, &used);
    } catch (...) {
      throw ConfigError("line " + std::to_string(line) + ": '" + item + "' is not a number");
    }
    if (used != item.size())
      throw ConfigError("line " + std::to_string(line) + ": '" + item + "' is not a number");
    fn(parsed);
  }
}

}  // namespace detail

// Plain-text `key = value` configuration with '#' comments. A preset (or
// explicit channels/blocks/columns) is required; every other key overrides
// a default. Unknown keys are rejected with their line number.
inline ParsedConfig parse_config_text(const std::string& text) {
  ParsedConfig out;
  bool have_preset = false, have_channels = false, have_blocks = false, have_columns = false;
  bool custom_alpha = false, custom_beta = false, have_heads_n = false;
  std::vector<double> alpha, beta;
  std::vector<int> head_cols;
  bool custom_head_cols = false;

  std::istringstream is(text);
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    raw = detail::trim(raw);
    if (raw.empty()) continue;
    const auto eq = raw.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line) + ": expected 'key = value'");
    const std::string key = detail::trim(raw.substr(0, eq));
    const std::string value = detail::trim(raw.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(line) + ": expected 'key = value'");

    if (key == "preset") {
      if (!apply_preset(value, out.model))
        throw ConfigError("line " + std::to_string(line) + ": unknown preset '" + value + "'");
      have_preset = true;
    } else if (key == "channels") {
      std::vector<std::int64_t> c;
      detail::parse_int_list(value, line, [&](long long v) { c.push_back(v); });
      if (c.size() != 4) throw ConfigError("line " + std::to_string(line) + ": channels needs 4 values");
      for (int i = 0; i < 4; ++i) out.model.channels[static_cast<std::size_t>(i)] = c[static_cast<std::size_t>(i)];
      have_channels = true;
    } else if (key == "blocks") {
      std::vector<std::int64_t> b;
      detail::parse_int_list(value, line, [&](long long v) { b.push_back(v); });
      if (b.size() != 4) throw ConfigError("line " + std::to_string(line) + ": blocks needs 4 values");
      for (int i = 0; i < 4; ++i) out.model.blocks[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)];
      have_blocks = true;
    } else if (key == "columns") {
      out.model.columns = static_cast<int>(std::stoll(value));
      have_columns = true;
    } else if (key == "kernel_size") {
      out.model.kernel_size = std::stoll(value);
    } else if (key == "num_classes") {
      out.model.num_classes = std::stoll(value);
    } else if (key == "input_size") {
      const auto x = value.find('x');
      if (x == std::string::npos) {
        out.model.input_h = out.model.input_w = std::stoll(value);
      } else {
        out.model.input_h = std::stoll(value.substr(0, x));
        out.model.input_w = std::stoll(value.substr(x + 1));
      }
    } else if (key == "gamma_floor") {
      out.model.gamma_floor = std::stod(value);
    } else if (key == "heads") {
      out.train.supervision_n = static_cast<int>(std::stoll(value));
      have_heads_n = true;
    } else if (key == "head_columns") {
      detail::parse_int_list(value, line, [&](long long v) { head_cols.push_back(static_cast<int>(v)); });
      custom_head_cols = true;
    } else if (key == "alpha") {
      detail::parse_real_list(value, line, [&](double v) { alpha.push_back(v); });
      custom_alpha = true;
    } else if (key == "beta") {
      detail::parse_real_list(value, line, [&](double v) { beta.push_back(v); });
      custom_beta = true;
    } else if (key == "epochs") {
      out.train.epochs = std::stoll(value);
    } else if (key == "batch_size") {
      out.train.batch_size = std::stoll(value);
    } else if (key == "lr") {
      out.train.peak_lr = std::stod(value);
    } else if (key == "warmup_steps") {
      out.train.warmup_steps = std::stoll(value);
    } else if (key == "total_steps") {
      out.train.total_steps = std::stoll(value);
    } else if (key == "weight_decay") {
      out.train.weight_decay = std::stod(value);
    } else if (key == "label_smoothing") {
      out.train.label_smoothing = std::stod(value);
      if (out.train.label_smoothing < 0 || out.train.label_smoothing >= 1)
        throw ConfigError("line " + std::to_string(line) + ": label_smoothing must be in [0,1)");
    } else if (key == "grad_clip") {
      out.train.grad_clip = std::stod(value);
    } else if (key == "seed") {
      out.train.seed = static_cast<std::uint64_t>(std::stoull(value));
    } else if (key == "precision") {
      if (value == "f32") out.train.precision = Precision::f32;
      else if (value == "f64") out.train.precision = Precision::f64;
      else throw ConfigError("line " + std::to_string(line) + ": precision must be f32 or f64");
    } else if (key == "mode") {
      if (value == "store_all") out.train.mode = ExecMode::store_all;
      else if (value == "reversible") out.train.mode = ExecMode::reversible;
      else throw ConfigError("line " + std::to_string(line) + ": mode must be store_all or reversible");
    } else {
      throw ConfigError("line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
  }

  if (!have_preset && !(have_channels && have_blocks && have_columns))
    throw ConfigError("missing preset or explicit channels/blocks/columns");

  // Supervision layout: explicit columns win, then n, then the default 3
  // (clamped so the intermediate heads fit before the final column).
  if (!have_heads_n)
    out.train.supervision_n = std::min(out.train.supervision_n, out.model.columns - 1);
  if (custom_head_cols) {
    out.schedule.head_columns = head_cols;
    out.train.supervision_n = static_cast<int>(head_cols.size());
  } else {
    auto placed = place_heads(out.model.columns, out.train.supervision_n);
    out.schedule.head_columns.assign(placed.begin(), placed.end() - 1);
  }
  auto defaults = default_schedule(out.model.columns, out.train.supervision_n);
  out.schedule.alpha = custom_alpha ? alpha : defaults.alpha;
  out.schedule.beta = custom_beta ? beta : defaults.beta;
  if (!custom_head_cols) out.schedule.head_columns = defaults.head_columns;
  out.schedule.validate(out.model.columns);
  out.model.head_columns = out.schedule.head_columns;
  out.model.validate();
  return out;
}

inline ParsedConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

// Builds a config from a preset name alone (CLI --preset flag).
inline ParsedConfig preset_config(const std::string& name) {
  return parse_config_text("preset = " + name + "\n");
}

}  // namespace revcol
