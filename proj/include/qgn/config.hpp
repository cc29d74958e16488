#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace qgn {

using Config = nlohmann::json;

inline Config load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config " + path);
  Config j;
  f >> j;
  return j;
}

inline void save_config(const std::string& path, const Config& cfg) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << cfg.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

// Dotted-path lookup: cfg_get(j, "train.lr", 1e-3) reads j["train"]["lr"],
// returning the fallback when any segment is absent.
template <typename T>
T cfg_get(const Config& cfg, const std::string& dotted, const T& fallback) {
  const Config* cur = &cfg;
  size_t start = 0;
  while (true) {
    size_t dot = dotted.find('.', start);
    std::string key = dotted.substr(start, dot == std::string::npos ? dotted.npos : dot - start);
    if (!cur->is_object() || !cur->contains(key)) return fallback;
    cur = &(*cur)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return cur->get<T>();
}

inline void cfg_set(Config& cfg, const std::string& dotted, const Config& value) {
  Config* cur = &cfg;
  size_t start = 0;
  while (true) {
    size_t dot = dotted.find('.', start);
    std::string key = dotted.substr(start, dot == std::string::npos ? dotted.npos : dot - start);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

}  // namespace qgn
