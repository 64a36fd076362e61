#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qlns/checkpoint.hpp"
#include "qlns/data.hpp"
#include "qlns/train.hpp"

// Key-value experiment configuration: `key = value` lines, '#' comments.
// Declaration order is preserved so grid axes run in the order they were
// written. Every ExperimentSpec field maps to a key; command-line overrides
// replace file values.

namespace qlns {

class Config {
 public:
  static Config from_string(const std::string& text) {
    Config c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                    " is not 'key = value'");
      }
      c.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return c;
  }

  static Config from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_string(buf.str());
  }

  void set(const std::string& key, const std::string& value) {
    const auto it = index_.find(key);
    if (it == index_.end()) {
      index_[key] = entries_.size();
      entries_.emplace_back(key, value);
    } else {
      entries_[it->second].second = value;
    }
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = index_.find(key);
    return it == index_.end() ? fallback : entries_[it->second].second;
  }

  std::string require(const std::string& key) const {
    const auto it = index_.find(key);
    if (it == index_.end()) throw std::invalid_argument("config: missing key '" + key + "'");
    return entries_[it->second].second;
  }

  double get_double(const std::string& key, double fallback) const {
    return has(key) ? parse_double(key, require(key)) : fallback;
  }
  long get_long(const std::string& key, long fallback) const {
    return has(key) ? parse_long(key, require(key)) : fallback;
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? static_cast<std::uint64_t>(parse_long(key, require(key))) : fallback;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == sep) {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    out.push_back(trim(cur));
    return out;
  }

 private:
  static double parse_double(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return d;
    } catch (...) {
      throw std::invalid_argument("config: key '" + key + "' is not a number: '" + v + "'");
    }
  }
  static long parse_long(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const long d = std::stol(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return d;
    } catch (...) {
      throw std::invalid_argument("config: key '" + key + "' is not an integer: '" + v + "'");
    }
  }

  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline ArchSpec arch_from_config(const Config& c) {
  ArchSpec a;
  const std::string kind = c.get("arch.kind", "nin");
  if (kind == "mlp") {
    a.kind = ArchKind::kMlp;
  } else if (kind == "nin") {
    a.kind = ArchKind::kNin;
  } else if (kind == "linear") {
    a.kind = ArchKind::kLinear;
  } else {
    throw std::invalid_argument("config: arch.kind must be mlp, nin or linear, got '" + kind + "'");
  }
  a.depth_multiplier = static_cast<int>(c.get_long("arch.depth", 1));
  a.width_multiplier = static_cast<int>(c.get_long("arch.width", 1));
  a.base_width = static_cast<int>(c.get_long("arch.base_width", 8));
  a.classes = static_cast<std::size_t>(c.get_long("arch.classes", 2));
  const std::string input = c.get("arch.input", a.kind == ArchKind::kNin ? "1x16x16" : "2");
  a.input_shape.clear();
  for (const auto& part : Config::split(input, 'x')) {
    a.input_shape.push_back(static_cast<std::size_t>(std::stol(part)));
  }
  const std::string task = c.get("arch.task", "classification");
  if (task == "classification") {
    a.task = TaskKind::kClassification;
  } else if (task == "regression") {
    a.task = TaskKind::kRegression;
  } else {
    throw std::invalid_argument("config: arch.task must be classification or regression");
  }
  return a;
}

inline int bits_from_string(const std::string& s) {
  if (s == "fp" || s == "fp32" || s == "0") return 0;
  if (s == "2" || s == "4" || s == "8") return std::stoi(s);
  throw std::invalid_argument("config: bits must be one of fp,8,4,2; got '" + s + "'");
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::kSgdMomentum;
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "rmsprop") return OptimizerKind::kRmsprop;
  throw std::invalid_argument("config: optimizer must be sgd_momentum, adam or rmsprop");
}

inline std::vector<LrStep> schedule_from_string(const std::string& s) {
  std::vector<LrStep> steps;
  if (Config::trim(s).empty() || s == "none") return steps;
  for (const auto& part : Config::split(s, ',')) {
    const auto fields = Config::split(part, ':');
    if (fields.size() != 2) {
      throw std::invalid_argument("config: lr_schedule entries must be epoch:factor");
    }
    steps.push_back({std::stoi(fields[0]), std::stod(fields[1])});
  }
  return steps;
}

inline ExperimentSpec spec_from_config(const Config& c) {
  ExperimentSpec spec;
  spec.arch = arch_from_config(c);
  spec.bits = bits_from_string(c.get("bits", "fp"));
  spec.optimizer = optimizer_from_string(c.get("optimizer", "sgd_momentum"));
  spec.lr = c.get_double("lr", 0.1);
  spec.weight_decay = c.get_double("weight_decay", 0.0);
  spec.epochs = static_cast<int>(c.get_long("epochs", 30));
  spec.seed = c.get_u64("seed", 1);
  spec.batch_size = static_cast<std::size_t>(c.get_long("batch_size", 32));
  if (c.has("lr_schedule")) {
    spec.lr_schedule = schedule_from_string(c.require("lr_schedule"));
  } else if (spec.epochs >= 3) {
    // default keeps the shape of a 3-stage step schedule at any epoch budget
    spec.lr_schedule = {{spec.epochs / 3, 0.1}, {2 * spec.epochs / 3, 0.1}};
  }
  spec.validate();
  return spec;
}

inline Split datasets_from_config(const Config& c) {
  const std::string kind = c.get("data.kind", "blobs");
  const std::uint64_t seed = c.get_u64("data.seed", 1234);
  const std::size_t samples = static_cast<std::size_t>(c.get_long("data.samples", 512));
  const double noise = c.get_double("data.noise", 0.25);
  const double ratio = c.get_double("data.split", 0.5);
  if (kind == "container") {
    const auto [train, test] = load_dataset(c.require("data.path"));
    return {train, test};
  }
  Dataset full;
  if (kind == "blobs") {
    full = make_blobs(samples, static_cast<std::size_t>(c.get_long("data.image_size", 16)), noise,
                      seed, c.get_double("data.label_noise", 0.0));
  } else if (kind == "moons") {
    full = make_two_moons(samples, noise, seed);
  } else if (kind == "linreg") {
    full = make_linear_regression(samples, static_cast<std::size_t>(c.get_long("data.in_dim", 8)),
                                  static_cast<std::size_t>(c.get_long("data.out_dim", 1)), noise,
                                  seed);
  } else {
    throw std::invalid_argument("config: data.kind must be blobs, moons, linreg or container");
  }
  return split_dataset(full, ratio, derive_seed(seed, 0x73706c74ULL));
}

}  // namespace qlns
