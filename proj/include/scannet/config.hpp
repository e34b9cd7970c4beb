#pragma once

// Flat `key = value` configuration files with dotted keys.
//
//   # comment
//   model.num_classes = 5
//   train.lr0 = 0.1
//
// Precedence is applied by merging: defaults < file < command-line overrides.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scannet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

class FlatConfig {
 public:
  static FlatConfig parse(std::istream& in, const std::string& origin = "<stream>") {
    FlatConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      cfg.set_assignment(t, origin + ":" + std::to_string(lineno));
    }
    return cfg;
  }

  static FlatConfig parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static FlatConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  /// Applies one `key=value` assignment (as given on the command line).
  void set_assignment(const std::string& text, const std::string& where = "override") {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + text + "'");
    const std::string key = detail::trim(std::string_view(text).substr(0, eq));
    const std::string value = detail::trim(std::string_view(text).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    entries_[key] = value;
  }

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }

  /// Later entries win.
  void merge(const FlatConfig& other) {
    for (const auto& [k, v] : other.entries_) entries_[k] = v;
  }

  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << " = " << v << '\n';
    return os.str();
  }

 private:
  std::map<std::string, std::string> entries_;
};

/// Typed, consumption-tracking access to a FlatConfig.
class ConfigReader {
 public:
  explicit ConfigReader(const FlatConfig& cfg) : cfg_(cfg) {}

  template <typename V>
  void read(const std::string& key, V& out) {
    const auto it = cfg_.entries().find(key);
    if (it == cfg_.entries().end()) return;
    used_.insert(key);
    out = convert<V>(key, it->second);
  }

  /// Marks every key under `prefix` as consumed (for sections handled elsewhere).
  void accept_prefix(const std::string& prefix) {
    for (const auto& [k, v] : cfg_.entries())
      if (k.rfind(prefix, 0) == 0) used_.insert(k);
  }

  std::vector<std::string> unknown_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : cfg_.entries())
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  void require_all_known() const {
    const auto unknown = unknown_keys();
    if (unknown.empty()) return;
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }

 private:
  template <typename V>
  static V convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<V, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
      if (text == "false" || text == "0" || text == "no" || text == "off") return false;
      throw ConfigError("key '" + key + "': expected boolean, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<V>) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(text, &pos);
        if (pos != text.size()) throw std::invalid_argument(text);
        return static_cast<V>(v);
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected number, got '" + text + "'");
      }
    } else {
      V v{};
      const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size())
        throw ConfigError("key '" + key + "': expected integer, got '" + text + "'");
      return v;
    }
  }

  const FlatConfig& cfg_;
  std::set<std::string> used_;
};

/// 64-bit FNV-1a, used for config hashes and checkpoint checksums.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace scannet
