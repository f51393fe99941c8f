#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace poseadapt {

// Sectioned key-value text configuration:
//
//   [scene.source]
//   seed = 11
//   # comment
//
// flattens to "scene.source.seed". Later assignments and command-line
// overrides win over file values. Serialization is sorted by key, so a
// config snapshot is byte-stable.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  // "section.key=value"
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;  // throws when missing
  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated doubles / ints.
  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  std::string to_string() const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace poseadapt
