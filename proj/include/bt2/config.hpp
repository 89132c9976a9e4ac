#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bt2/binary.hpp"
#include "bt2/errors.hpp"
#include "bt2/model.hpp"
#include "bt2/train.hpp"

// Run configuration: "key = value" lines, '#' starts a comment. Keys may be
// spelled with '-' or '_'. Flags are applied after the file, so they win.
namespace bt2::config {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct RunConfig {
  std::optional<model::Method> method;
  std::string data;
  std::string out;
  std::string old_model;
  std::string new_independent;
  train::MethodConfig run;  // run.method mirrors `method` once set
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string canonical_key(std::string key) {
  for (char& c : key)
    if (c == '-') c = '_';
  return key;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("invalid value for '" + key + "': '" + v + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError("non-finite value for '" + key + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid boolean for '" + key + "': '" + v + "'");
}

}  // namespace detail

/// Parses config text. Duplicate keys and malformed lines are errors.
inline KeyValues parse_config_text(std::string_view text) {
  if (!binary::valid_utf8(text)) throw ConfigError("config is not valid UTF-8");
  KeyValues out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = detail::canonical_key(detail::trim(std::string_view(body).substr(0, eq)));
    std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    for (const auto& [k, v] : out)
      if (k == key) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Applies one key. Unknown keys are rejected.
inline void apply(RunConfig& cfg, const std::string& raw_key, const std::string& v) {
  using detail::parse_number;
  const std::string key = detail::canonical_key(raw_key);
  auto& r = cfg.run;
  if (key == "method") {
    cfg.method = model::parse_method(v);
    r.method = *cfg.method;
  } else if (key == "data") {
    cfg.data = v;
  } else if (key == "out") {
    cfg.out = v;
  } else if (key == "old_model") {
    cfg.old_model = v;
  } else if (key == "new_independent") {
    cfg.new_independent = v;
  } else if (key == "seed") {
    r.train.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "lr") {
    r.train.optimizer.learning_rate = parse_number<double>(key, v);
  } else if (key == "epochs") {
    r.train.epochs = parse_number<std::size_t>(key, v);
  } else if (key == "batch_size") {
    r.train.batch_size = parse_number<std::size_t>(key, v);
  } else if (key == "hidden") {
    r.train.hidden = parse_number<std::size_t>(key, v);
  } else if (key == "optimizer") {
    if (v == "adam") {
      r.train.optimizer.kind = grad::OptimizerKind::adaptive_moments;
    } else if (v == "sgd") {
      r.train.optimizer.kind = grad::OptimizerKind::sgd_momentum;
    } else {
      throw ConfigError("optimizer must be 'adam' or 'sgd', got '" + v + "'");
    }
  } else if (key == "momentum") {
    r.train.optimizer.momentum = parse_number<double>(key, v);
  } else if (key == "beta2") {
    r.train.optimizer.beta2 = parse_number<double>(key, v);
  } else if (key == "eps") {
    r.train.optimizer.eps = parse_number<double>(key, v);
  } else if (key == "lambda") {
    r.loss.lambda = parse_number<double>(key, v);
  } else if (key == "lambda1") {
    r.loss.lambda1 = parse_number<double>(key, v);
  } else if (key == "lambda2") {
    r.loss.lambda2 = parse_number<double>(key, v);
  } else if (key == "lambda3") {
    r.loss.lambda3 = parse_number<double>(key, v);
  } else if (key == "tau") {
    r.loss.tau = parse_number<double>(key, v);
  } else if (key == "m") {
    r.bt2.m = parse_number<std::size_t>(key, v);
  } else if (key == "n") {
    r.bt2.n = parse_number<std::size_t>(key, v);
  } else if (key == "d") {
    r.bt2.d = parse_number<std::size_t>(key, v);
  } else if (key == "c_scale") {
    r.bt2.c_scale = parse_number<double>(key, v);
  } else if (key == "cls_on_final") {
    r.bt2.cls_on_final = detail::parse_bool(key, v);
  } else if (key == "c") {
    r.upper_bound.c = parse_number<double>(key, v);
  } else {
    throw ConfigError("unknown config key '" + raw_key + "'");
  }
}

/// Method dependency rules: bct, bct-pad, contrast and bt2 need an old
/// checkpoint; bt2 and upper-bound also need a new-independent checkpoint.
inline void validate_dependencies(const RunConfig& cfg) {
  if (!cfg.method) throw ConfigError("no method given");
  const model::Method m = *cfg.method;
  const std::string name(model::to_string(m));
  if (train::requires_old(m) && cfg.old_model.empty()) {
    throw ConfigError("method " + name + " requires --old-model (rule: bct, bct-pad, contrast, bt2 and upper-bound " +
                      "train against a frozen old checkpoint)");
  }
  if (train::requires_new_independent(m) && cfg.new_independent.empty()) {
    throw ConfigError("method " + name +
                      " requires --new-independent (rule: bt2 and upper-bound need an independently trained new model)");
  }
}

/// File values first, then flags. Validates loss, training and dependency rules.
inline RunConfig resolve(const KeyValues& file, const KeyValues& flags) {
  RunConfig cfg;
  for (const auto& [k, v] : file) apply(cfg, k, v);
  for (const auto& [k, v] : flags) apply(cfg, k, v);
  validate_dependencies(cfg);
  cfg.run.train.validate();
  cfg.run.loss.validate();
  cfg.run.upper_bound.validate();
  return cfg;
}

/// Fully resolved configuration, in a fixed key order, for echoing into reports.
inline KeyValues to_key_values(const RunConfig& cfg) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  const auto& r = cfg.run;
  return {
      {"method", cfg.method ? std::string(model::to_string(*cfg.method)) : ""},
      {"data", cfg.data},
      {"out", cfg.out},
      {"old_model", cfg.old_model},
      {"new_independent", cfg.new_independent},
      {"seed", std::to_string(r.train.seed)},
      {"optimizer", r.train.optimizer.kind == grad::OptimizerKind::adaptive_moments ? "adam" : "sgd"},
      {"lr", num(r.train.optimizer.learning_rate)},
      {"momentum", num(r.train.optimizer.momentum)},
      {"beta2", num(r.train.optimizer.beta2)},
      {"eps", num(r.train.optimizer.eps)},
      {"epochs", std::to_string(r.train.epochs)},
      {"batch_size", std::to_string(r.train.batch_size)},
      {"hidden", std::to_string(r.train.hidden)},
      {"lambda", num(r.loss.lambda)},
      {"lambda1", num(r.loss.lambda1)},
      {"lambda2", num(r.loss.lambda2)},
      {"lambda3", num(r.loss.lambda3)},
      {"tau", num(r.loss.tau)},
      {"m", std::to_string(r.bt2.m)},
      {"n", std::to_string(r.bt2.n)},
      {"d", std::to_string(r.bt2.d)},
      {"c_scale", num(r.bt2.c_scale)},
      {"cls_on_final", r.bt2.cls_on_final ? "true" : "false"},
      {"c", num(r.upper_bound.c)},
  };
}

}  // namespace bt2::config
