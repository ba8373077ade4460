#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "gradnet/data.hpp"
#include "gradnet/net.hpp"

namespace gradnet {

/// Flat `key = value` config file: one assignment per line, '#' comments,
/// keys namespaced by prefix (net.*, train.*, scene.*, track.*). Consumers
/// validate their prefix against an allow-list so typos fail loudly.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError(detail::cat("cannot read config ", path.string()));
    KvConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(detail::cat(path.string(), ":", lineno,
                                      ": expected 'key = value', got '", trimmed, "'"));
      std::string key = trim(trimmed.substr(0, eq));
      std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ConfigError(detail::cat(path.string(), ":", lineno, ": empty key"));
      cfg.kv_[key] = value;
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  const std::map<std::string, std::string>& entries() const { return kv_; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  int get_int(const std::string& key, int fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t used = 0;
      int v = std::stoi(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError(detail::cat("bad integer for key '", key, "': '", it->second, "'"));
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError(detail::cat("bad number for key '", key, "': '", it->second, "'"));
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError(detail::cat("bad boolean for key '", key, "': '", it->second, "'"));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (...) {
      throw ConfigError(detail::cat("bad integer for key '", key, "': '", it->second, "'"));
    }
  }

  /// Every key under `prefix.` must be in `allowed` (names given without the
  /// prefix); anything else is a config error naming the bad key.
  void check_known(const std::string& prefix, const std::set<std::string>& allowed) const {
    for (const auto& [k, v] : kv_) {
      if (k.rfind(prefix + ".", 0) != 0) continue;
      const std::string base = k.substr(prefix.size() + 1);
      if (!allowed.count(base))
        throw ConfigError(detail::cat("unknown config key '", k, "'"));
    }
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> kv_;
};

inline NetConfig net_config_from(const KvConfig& kv) {
  kv.check_known("net", {"preset", "channels", "u2_layers", "u2_kernel", "u2_standardize"});
  const std::string preset = kv.get_str("net.preset", "desk");
  NetConfig cfg;
  if (preset == "desk")
    cfg = NetConfig::desk();
  else if (preset == "paper")
    cfg = NetConfig::paper();
  else
    throw ConfigError(detail::cat("bad value for key 'net.preset': '", preset, "'"));
  if (kv.has("net.channels")) {
    const std::string spec = kv.get_str("net.channels", "");
    std::vector<int> ch;
    std::string tok;
    for (char c : spec + ",") {
      if (c == ',') {
        if (!tok.empty()) ch.push_back(std::stoi(tok));
        tok.clear();
      } else {
        tok += c;
      }
    }
    if (ch.size() != 5)
      throw ConfigError("bad value for key 'net.channels': expected 5 comma-separated widths");
    for (int i = 0; i < 5; ++i) cfg.conv[i].out_c = ch[static_cast<std::size_t>(i)];
  }
  cfg.u2_layers = kv.get_int("net.u2_layers", cfg.u2_layers);
  cfg.u2_kernel = kv.get_int("net.u2_kernel", cfg.u2_kernel);
  cfg.u2_standardize = kv.get_bool("net.u2_standardize", cfg.u2_standardize);
  cfg.validate();
  return cfg;
}

inline SceneConfig scene_config_from(const KvConfig& kv) {
  kv.check_known("scene", {"frame_w", "frame_h", "frames", "target_size", "vel_x", "vel_y",
                           "jitter", "distractors", "similarity", "drift", "clutter",
                           "occlusion", "start_x", "start_y", "seed"});
  SceneConfig c;
  c.frame_w = kv.get_int("scene.frame_w", c.frame_w);
  c.frame_h = kv.get_int("scene.frame_h", c.frame_h);
  c.frames = kv.get_int("scene.frames", c.frames);
  c.target_size = kv.get_double("scene.target_size", c.target_size);
  c.vel_x = kv.get_double("scene.vel_x", c.vel_x);
  c.vel_y = kv.get_double("scene.vel_y", c.vel_y);
  c.jitter = kv.get_double("scene.jitter", c.jitter);
  c.distractors = kv.get_int("scene.distractors", c.distractors);
  c.similarity = kv.get_double("scene.similarity", c.similarity);
  c.drift = kv.get_double("scene.drift", c.drift);
  c.clutter = kv.get_double("scene.clutter", c.clutter);
  c.start_x = kv.get_double("scene.start_x", c.start_x);
  c.start_y = kv.get_double("scene.start_y", c.start_y);
  c.seed = kv.get_u64("scene.seed", c.seed);
  const std::string occ = kv.get_str("scene.occlusion", "none");
  if (occ != "none" && !occ.empty()) {
    std::string tok;
    for (char ch : occ + ",") {
      if (ch == ',') {
        if (tok.empty()) continue;
        const auto colon = tok.find(':');
        if (colon == std::string::npos)
          throw ConfigError(detail::cat("bad value for key 'scene.occlusion': '", occ,
                                        "' (want start:end[,start:end])"));
        c.occlusions.emplace_back(std::stoi(tok.substr(0, colon)),
                                  std::stoi(tok.substr(colon + 1)));
        tok.clear();
      } else {
        tok += ch;
      }
    }
  }
  return c;
}

}  // namespace gradnet
