#include "ost/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ost {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// Strips a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

double parse_number(const std::string& text, const std::string& where) {
  size_t used = 0;
  double v;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw std::runtime_error(where + ": '" + text + "' is not a number");
  }
  if (used != text.size()) throw std::runtime_error(where + ": '" + text + "' is not a number");
  return v;
}

}  // namespace

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
  ConfigFile out;
  std::istringstream in(text);
  std::string line, section;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    line = trim(strip_comment(line));
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw std::runtime_error(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw std::runtime_error(where + ": empty section name");
      continue;
    }

    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error(where + ": empty key");
    if (raw.empty()) throw std::runtime_error(where + ": empty value for '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.values_.count(full)) throw std::runtime_error(where + ": duplicate key '" + full + "'");

    Value v;
    if (raw == "true" || raw == "false") {
      v.kind = Value::Kind::Bool;
      v.boolean = raw == "true";
    } else if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"') {
        throw std::runtime_error(where + ": unterminated string");
      }
      v.kind = Value::Kind::String;
      v.text = raw.substr(1, raw.size() - 2);
    } else if (raw.front() == '[') {
      if (raw.back() != ']') throw std::runtime_error(where + ": unterminated array");
      v.kind = Value::Kind::Array;
      std::string body = raw.substr(1, raw.size() - 2);
      std::istringstream items(body);
      std::string item;
      while (std::getline(items, item, ',')) {
        item = trim(item);
        if (item.empty()) throw std::runtime_error(where + ": empty array element");
        v.array.push_back(parse_number(item, where));
      }
    } else {
      v.kind = Value::Kind::Number;
      v.number = parse_number(raw, where);
    }
    out.values_.emplace(full, std::move(v));
  }
  return out;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

const ConfigFile::Value* ConfigFile::find(const std::string& key) const {
  auto it = values_.find(key);
  return it == values_.end() ? nullptr : &it->second;
}

bool ConfigFile::has(const std::string& key) const { return find(key) != nullptr; }

double ConfigFile::get_double(const std::string& key, double fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->kind != Value::Kind::Number) throw std::runtime_error("'" + key + "' is not a number");
  return v->number;
}

Index ConfigFile::get_index(const std::string& key, Index fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->kind != Value::Kind::Number || v->number != std::floor(v->number)) {
    throw std::runtime_error("'" + key + "' is not an integer");
  }
  return static_cast<Index>(v->number);
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->kind != Value::Kind::Bool) throw std::runtime_error("'" + key + "' is not a boolean");
  return v->boolean;
}

std::string ConfigFile::get_string(const std::string& key, const std::string& fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->kind != Value::Kind::String) throw std::runtime_error("'" + key + "' is not a string");
  return v->text;
}

std::vector<double> ConfigFile::get_array(const std::string& key,
                                          std::vector<double> fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->kind != Value::Kind::Array) throw std::runtime_error("'" + key + "' is not an array");
  return v->array;
}

std::vector<std::string> ConfigFile::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) out.push_back(k);
  return out;
}

namespace {

void reject_unknown(const ConfigFile& cfg, const std::string& section,
                    const std::vector<std::string>& known) {
  for (const std::string& key : cfg.keys()) {
    if (key.rfind(section + ".", 0) != 0) continue;
    const std::string leaf = key.substr(section.size() + 1);
    if (std::find(known.begin(), known.end(), leaf) == known.end()) {
      throw std::runtime_error("unknown config key '" + key + "'");
    }
  }
}

}  // namespace

void apply_config(const ConfigFile& cfg, ModelConfig& model) {
  reject_unknown(cfg, "model",
                 {"n_template", "n_search", "feature_dim", "n_heads", "n_ttm_layers", "mfa_taps",
                  "mfa_direction", "gcn_neighbors", "gcn_radius", "conv_channels", "bev_extent",
                  "bev_z_min", "bev_z_max", "bev_pixel"});
  model.n_template = cfg.get_index("model.n_template", model.n_template);
  model.n_search = cfg.get_index("model.n_search", model.n_search);
  model.feature_dim = cfg.get_index("model.feature_dim", model.feature_dim);
  model.n_heads = cfg.get_index("model.n_heads", model.n_heads);
  model.n_ttm_layers = cfg.get_index("model.n_ttm_layers", model.n_ttm_layers);
  if (cfg.has("model.mfa_taps")) {
    model.mfa_taps.clear();
    for (double v : cfg.get_array("model.mfa_taps", {})) {
      model.mfa_taps.push_back(static_cast<Index>(v));
    }
  }
  if (cfg.has("model.mfa_direction")) {
    const std::string dir = cfg.get_string("model.mfa_direction", "");
    if (dir == "shallow_to_deep") {
      model.mfa_direction = MfaDirection::ShallowToDeep;
    } else if (dir == "deep_to_shallow") {
      model.mfa_direction = MfaDirection::DeepToShallow;
    } else {
      throw std::runtime_error("model.mfa_direction must be shallow_to_deep or deep_to_shallow, got '" +
                               dir + "'");
    }
  }
  model.gcn_neighbors = cfg.get_index("model.gcn_neighbors", model.gcn_neighbors);
  model.gcn_radius = cfg.get_double("model.gcn_radius", model.gcn_radius);
  model.conv_channels = cfg.get_index("model.conv_channels", model.conv_channels);
  if (cfg.has("model.bev_extent")) {
    const double e = cfg.get_double("model.bev_extent", 0.0);
    model.bev_grid.x_min = model.bev_grid.y_min = -e;
    model.bev_grid.x_max = model.bev_grid.y_max = e;
  }
  model.bev_grid.z_min = cfg.get_double("model.bev_z_min", model.bev_grid.z_min);
  model.bev_grid.z_max = cfg.get_double("model.bev_z_max", model.bev_grid.z_max);
  model.bev_grid.pixel = cfg.get_double("model.bev_pixel", model.bev_grid.pixel);
  model.validate();
}

void apply_config(const ConfigFile& cfg, TrainConfig& train) {
  reject_unknown(cfg, "train",
                 {"steps", "batch", "lr", "adam_beta1", "adam_beta2", "adam_eps", "workers",
                  "log_every", "checkpoint_every", "bev_window_radius", "jitter_xy", "jitter_z",
                  "jitter_yaw", "search_margin_xy", "weight_seg", "weight_center", "weight_offset",
                  "weight_z"});
  train.steps = cfg.get_index("train.steps", train.steps);
  train.batch = cfg.get_index("train.batch", train.batch);
  train.lr = cfg.get_double("train.lr", train.lr);
  train.adam_beta1 = cfg.get_double("train.adam_beta1", train.adam_beta1);
  train.adam_beta2 = cfg.get_double("train.adam_beta2", train.adam_beta2);
  train.adam_eps = cfg.get_double("train.adam_eps", train.adam_eps);
  train.workers = cfg.get_index("train.workers", train.workers);
  train.log_every = cfg.get_index("train.log_every", train.log_every);
  train.checkpoint_every = cfg.get_index("train.checkpoint_every", train.checkpoint_every);
  train.bev_window_radius = cfg.get_index("train.bev_window_radius", train.bev_window_radius);
  train.sample.jitter_xy = cfg.get_double("train.jitter_xy", train.sample.jitter_xy);
  train.sample.jitter_z = cfg.get_double("train.jitter_z", train.sample.jitter_z);
  train.sample.jitter_yaw = cfg.get_double("train.jitter_yaw", train.sample.jitter_yaw);
  train.sample.search_margin_xy =
      cfg.get_double("train.search_margin_xy", train.sample.search_margin_xy);
  train.weights.seg = cfg.get_double("train.weight_seg", train.weights.seg);
  train.weights.center = cfg.get_double("train.weight_center", train.weights.center);
  train.weights.offset = cfg.get_double("train.weight_offset", train.weights.offset);
  train.weights.z = cfg.get_double("train.weight_z", train.weights.z);
}

void apply_config(const ConfigFile& cfg, TrackerConfig& tracker) {
  reject_unknown(cfg, "tracker", {"search_margin_xy", "template_mode"});
  tracker.search_margin_xy = cfg.get_double("tracker.search_margin_xy", tracker.search_margin_xy);
  if (cfg.has("tracker.template_mode")) {
    const std::string mode = cfg.get_string("tracker.template_mode", "");
    if (mode == "first") {
      tracker.template_mode = TrackerConfig::TemplateMode::First;
    } else if (mode == "previous") {
      tracker.template_mode = TrackerConfig::TemplateMode::Previous;
    } else {
      throw std::runtime_error("tracker.template_mode must be first or previous");
    }
  }
}

void apply_config(const ConfigFile& cfg, SynthConfig& synth) {
  reject_unknown(cfg, "synth",
                 {"n_frames", "target_size", "surface_density", "max_step_xy", "max_yaw_rate",
                  "n_distractors", "distractor_clearance", "distractor_drift", "noise_points",
                  "dropout", "half_extent", "ground_z"});
  synth.n_frames = cfg.get_index("synth.n_frames", synth.n_frames);
  if (cfg.has("synth.target_size")) {
    const auto v = cfg.get_array("synth.target_size", {});
    if (v.size() != 3) throw std::runtime_error("synth.target_size must be [l, w, h]");
    synth.target_size = {v[0], v[1], v[2]};
  }
  synth.surface_density = cfg.get_double("synth.surface_density", synth.surface_density);
  synth.max_step_xy = cfg.get_double("synth.max_step_xy", synth.max_step_xy);
  synth.max_yaw_rate = cfg.get_double("synth.max_yaw_rate", synth.max_yaw_rate);
  synth.n_distractors = cfg.get_index("synth.n_distractors", synth.n_distractors);
  synth.distractor_clearance =
      cfg.get_double("synth.distractor_clearance", synth.distractor_clearance);
  synth.distractor_drift = cfg.get_double("synth.distractor_drift", synth.distractor_drift);
  synth.noise_points = cfg.get_index("synth.noise_points", synth.noise_points);
  synth.dropout = cfg.get_double("synth.dropout", synth.dropout);
  synth.half_extent = cfg.get_double("synth.half_extent", synth.half_extent);
  synth.ground_z = cfg.get_double("synth.ground_z", synth.ground_z);
}

}  // namespace ost
