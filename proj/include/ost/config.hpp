#pragma once

#include "ost/data.hpp"
#include "ost/model.hpp"
#include "ost/tracker.hpp"
#include "ost/train.hpp"

#include <map>
#include <string>
#include <vector>

namespace ost {

// Flat key-value config in a TOML-like syntax: [section] headers, `key =
// value` lines, # comments. Values: integers, floats, booleans, quoted
// strings, and flat arrays of numbers. Keys are addressed as
// "section.key" ("key" alone before any section header).
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  Index get_index(const std::string& key, Index fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::vector<double> get_array(const std::string& key, std::vector<double> fallback) const;

  // All keys, for detecting unknown entries.
  std::vector<std::string> keys() const;

 private:
  struct Value {
    enum class Kind { Number, Bool, String, Array } kind = Kind::Number;
    double number = 0.0;
    bool boolean = false;
    std::string text;
    std::vector<double> array;
  };
  std::map<std::string, Value> values_;
  const Value* find(const std::string& key) const;
};

// Override structs from [model], [train], [tracker], [synth] sections.
// Unknown keys in those sections raise.
void apply_config(const ConfigFile& cfg, ModelConfig& model);
void apply_config(const ConfigFile& cfg, TrainConfig& train);
void apply_config(const ConfigFile& cfg, TrackerConfig& tracker);
void apply_config(const ConfigFile& cfg, SynthConfig& synth);

}  // namespace ost
