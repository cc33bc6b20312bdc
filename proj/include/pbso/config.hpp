#pragma once

// Run configuration and its key/value file format:
//
//   # comment
//   gamma = 1.0
//   [verifier]
//   backend = "oracle"        -> key "verifier.backend"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pbso/common.hpp"
#include "pbso/credit.hpp"
#include "pbso/optimizer.hpp"
#include "pbso/synthenv.hpp"

namespace pbso {

struct VerifierConfig {
  std::string backend = "oracle";  // oracle | mock | remote
  std::string base_url;
  std::size_t max_in_flight = 8;
};

struct RunConfig {
  ReturnConfig returns;
  OptimStep optim;
  EpisodeConfig episode;
  EnvSpec env;
  VerifierConfig verifier;
  std::size_t steps = 400;
  std::size_t tasks_per_batch = 32;
  bool aux_rewards_on = true;
  bool clipping_on = true;
  std::uint64_t seed = 0;
  std::size_t eval_tasks = 512;
  std::size_t eval_samples = 4;
  std::size_t workers = 1;
  std::string output_dir = "pbso_run";
};

inline void validate(const RunConfig& c) {
  validate(c.returns);
  validate(c.optim);
  validate(c.episode);
  validate(c.env);
  if (c.tasks_per_batch < 1) throw InvalidConfig("tasks_per_batch must be at least 1");
  if (c.workers < 1) throw InvalidConfig("workers must be at least 1");
  if (c.verifier.backend != "oracle" && c.verifier.backend != "mock" &&
      c.verifier.backend != "remote")
    throw InvalidConfig("verifier.backend must be oracle, mock or remote");
}

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string strip(std::string_view s) { return std::string(trim(s)); }

inline std::string unquote(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\'')))
    return v.substr(1, v.size() - 2);
  return v;
}

}  // namespace detail

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    std::string s = detail::strip(line);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw InvalidConfig("line " + std::to_string(lineno) + ": bad section");
      section = detail::strip(std::string_view(s).substr(1, s.size() - 2));
      continue;
    }
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw InvalidConfig("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::strip(std::string_view(s).substr(0, eq));
    std::string value = detail::unquote(detail::strip(std::string_view(s).substr(eq + 1)));
    if (key.empty()) throw InvalidConfig("line " + std::to_string(lineno) + ": empty key");
    out[section.empty() ? key : section + "." + key] = value;
  }
  return out;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str());
}

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw InvalidConfig(key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw InvalidConfig(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidConfig(key + ": expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Applies `kv` on top of `cfg`. Unknown keys are rejected.
inline void apply(RunConfig& cfg, const KeyValues& kv) {
  using namespace detail;
  for (const auto& [key, v] : kv) {
    if (key == "gamma") cfg.returns.gamma = to_double(key, v);
    else if (key == "r_min") cfg.returns.r_min = to_double(key, v);
    else if (key == "r_max") cfg.returns.r_max = to_double(key, v);
    else if (key == "epsilon") cfg.returns.epsilon = to_double(key, v);
    else if (key == "clip_eps") cfg.optim.clip_eps = to_double(key, v);
    else if (key == "learning_rate") cfg.optim.learning_rate = to_double(key, v);
    else if (key == "kl_coefficient") cfg.optim.kl_coefficient = to_double(key, v);
    else if (key == "entropy_coefficient") cfg.optim.entropy_coefficient = to_double(key, v);
    else if (key == "group_size") cfg.optim.group_size = to_uint(key, v);
    else if (key == "temperature") cfg.optim.temperature = cfg.episode.temperature = to_double(key, v);
    else if (key == "top_p") cfg.optim.top_p = cfg.episode.top_p = to_double(key, v);
    else if (key == "optimizer") {
      if (v == "sgd") cfg.optim.optimizer = OptimizerKind::Sgd;
      else if (v == "adam") cfg.optim.optimizer = OptimizerKind::Adam;
      else throw InvalidConfig("optimizer must be sgd or adam");
    }
    else if (key == "max_iterations") cfg.episode.max_iterations = to_uint(key, v);
    else if (key == "alphabet_size") cfg.env.alphabet_size = to_uint(key, v);
    else if (key == "statement_length") cfg.env.length = to_uint(key, v);
    else if (key == "mask_prob") cfg.env.mask_prob = to_double(key, v);
    else if (key == "variant") {
      if (v == "revealing") cfg.env.variant = Variant::Revealing;
      else if (v == "blind") cfg.env.variant = Variant::Blind;
      else throw InvalidConfig("variant must be revealing or blind");
    }
    else if (key == "steps") cfg.steps = to_uint(key, v);
    else if (key == "tasks_per_batch") cfg.tasks_per_batch = to_uint(key, v);
    else if (key == "aux_rewards_on") cfg.aux_rewards_on = to_bool(key, v);
    else if (key == "clipping_on") cfg.clipping_on = to_bool(key, v);
    else if (key == "seed") cfg.seed = to_uint(key, v);
    else if (key == "eval_tasks") cfg.eval_tasks = to_uint(key, v);
    else if (key == "eval_samples") cfg.eval_samples = to_uint(key, v);
    else if (key == "workers") cfg.workers = to_uint(key, v);
    else if (key == "output_dir") cfg.output_dir = v;
    else if (key == "verifier.backend") cfg.verifier.backend = v;
    else if (key == "verifier.base_url") cfg.verifier.base_url = v;
    else if (key == "verifier.max_in_flight") cfg.verifier.max_in_flight = to_uint(key, v);
    else throw InvalidConfig("unknown config key '" + key + "'");
  }
}

}  // namespace pbso
