#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace fedmae {

// Flat `key = value` text format. '#' starts a comment; blank lines are
// ignored; duplicate keys are an error.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;
  static KeyValueConfig parse(std::string_view text, const std::string& source = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void erase(const std::string& key) { values_.erase(key); }
  void reject_unknown(const std::set<std::string>& allowed) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  const std::string& source() const { return source_; }
  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
  std::string source_;
};

std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);
std::int64_t parse_int(const std::string& text, const std::string& what);
double parse_double(const std::string& text, const std::string& what);

}  // namespace fedmae
