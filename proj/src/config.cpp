#include "fedmae/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "fedmae/error.hpp"

namespace fedmae {

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = text.find(sep, start);
    out.push_back(trim(text.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string trim(std::string_view text) {
  const char* ws = " \t\r\n";
  auto b = text.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = text.find_last_not_of(ws);
  return std::string(text.substr(b, e - b + 1));
}

std::int64_t parse_int(const std::string& text, const std::string& what) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ValidationError(what + ": expected an integer, got '" + text + "'");
  return v;
}

double parse_double(const std::string& text, const std::string& what) {
  // from_chars for double is missing from older libstdc++; strtod with a
  // full-consumption check is equivalent here.
  if (text.empty()) throw ValidationError(what + ": expected a number, got ''");
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size())
    throw ValidationError(what + ": expected a number, got '" + text + "'");
  return v;
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& source) {
  KeyValueConfig cfg;
  cfg.source_ = source;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ValidationError(source + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty())
      throw ValidationError(source + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.values_.count(key))
      throw ValidationError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                            "'");
    cfg.values_.emplace(std::move(key), std::move(value));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

const std::string& KeyValueConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError(source_ + ": missing key '" + key + "'");
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
  return parse_int(get(key), source_ + ": " + key);
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) const {
  return parse_double(get(key), source_ + ": " + key);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = get(key);
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ValidationError(source_ + ": " + key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  for (auto& item : split(get(key), ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void KeyValueConfig::reject_unknown(const std::set<std::string>& allowed) const {
  for (const auto& [key, _] : values_)
    if (!allowed.count(key)) throw ValidationError(source_ + ": unknown key '" + key + "'");
}

std::string KeyValueConfig::to_string() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
  return os.str();
}

}  // namespace fedmae
