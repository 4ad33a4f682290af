#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ctdg {

/// Plain-text `key=value` settings, one per line; `#` starts a comment.
class KeyValue {
 public:
  static KeyValue parse(const std::string& text);
  static KeyValue load(const std::filesystem::path& path);

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, int64_t value);
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int64_t> get_ints(const std::string& key, const std::vector<int64_t>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string join_ints(const std::vector<int64_t>& values);

}  // namespace ctdg
