#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "ctsfda/adapt.hpp"
#include "ctsfda/losses.hpp"
#include "ctsfda/params.hpp"
#include "ctsfda/tta.hpp"

namespace ctsfda {

// Flat `key = value` configuration with dotted keys; '#' starts a comment.
class ConfigMap {
 public:
  static ConfigMap parse_string(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": expected key = value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string val = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " +
                                         std::to_string(lineno) + ": empty key");
      cfg.kv_[key] = val;
    }
    return cfg;
  }

  static ConfigMap parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
  }

  bool has(const std::string& key) const { return kv_.count(key); }

  std::string get_str(const std::string& key, const std::string& def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
  }
  std::string require_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key, double def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
      std::size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not a number: " + it->second);
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
      std::size_t pos = 0;
      std::int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key +
                        ": not an integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key " + key + ": not a bool: " + it->second);
  }

  void set(const std::string& key, const std::string& val) { kv_[key] = val; }

  // Canonical serialization (sorted keys) used for the config hash.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
  }

  std::uint64_t hash() const {
    const std::string c = canonical();
    return fnv1a(c.data(), c.size());
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> kv_;
};

// One fully-resolved run: data, shapes, schedules, adaptation and TTA
// settings. Identified across stages by the config hash.
template <typename T>
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";

  // data: either on-disk container paths or the synthetic generator
  bool synthetic = true;
  std::string source_path, target_path;
  std::int64_t synth_classes = 3;
  std::int64_t synth_n_per_class = 40;
  std::int64_t synth_d = 1;
  std::int64_t synth_length = 256;
  ShiftConfig shift;

  std::int64_t reshape_h = 16, reshape_w = 16;

  UNet<T> unet;        // in_ch filled from data
  WarpBlock<T> warp;
  Backbone<T> backbone;  // in_ch/length/num_classes filled from data

  StageSchedule sched;
  AdaptConfig<T> adapt;
  TTAConfig tta;
  StabilityWeighting weighting = StabilityWeighting::kCosine;

  double source_split = 0.75;  // train fraction of source

  std::uint64_t config_hash = 0;

  static RunConfig from(const ConfigMap& cfg) {
    RunConfig rc;
    rc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
    rc.out_dir = cfg.get_str("out", "runs/default");

    rc.synthetic = cfg.get_bool("data.synthetic", !cfg.has("data.source"));
    if (!rc.synthetic) {
      rc.source_path = cfg.require_str("data.source");
      rc.target_path = cfg.require_str("data.target");
    } else {
      rc.synth_classes = cfg.get_int("synth.classes", 3);
      rc.synth_n_per_class = cfg.get_int("synth.n_per_class", 40);
      rc.synth_d = cfg.get_int("synth.channels", 1);
      rc.synth_length = cfg.get_int("synth.length", 256);
      rc.shift.amplitude_scale = cfg.get_double("shift.amplitude", 1.6);
      rc.shift.time_warp_strength = cfg.get_double("shift.warp", 0.2);
      rc.shift.noise_sigma = cfg.get_double("shift.noise", 0.1);
      rc.shift.channel_offset = cfg.get_double("shift.offset", 0.4);
      rc.shift.seed = rc.seed;
    }

    rc.reshape_h = cfg.get_int("reshape.h", 16);
    rc.reshape_w = cfg.get_int("reshape.w", 16);

    rc.unet.base = cfg.get_int("model.unet.base", 16);
    rc.unet.depth = static_cast<int>(cfg.get_int("model.unet.depth", 3));
    rc.unet.skips = cfg.get_bool("model.unet.skips", true);
    rc.warp.hidden = cfg.get_int("model.warp.hidden", 16);
    rc.warp.code_dim = cfg.get_int("model.warp.code_dim", 8);
    rc.warp.codebook_size = cfg.get_int("model.warp.codebook", 32);
    rc.backbone.widths = {cfg.get_int("model.backbone.w1", 64),
                          cfg.get_int("model.backbone.w2", 128),
                          cfg.get_int("model.backbone.w3", 128)};
    rc.backbone.dropout_p = static_cast<T>(
        cfg.get_double("model.backbone.dropout", 0.2));

    rc.sched.s1 = {cfg.get_double("stages.s1.lr", 5e-3),
                   static_cast<int>(cfg.get_int("stages.s1.epochs", 8))};
    rc.sched.s2 = {cfg.get_double("stages.s2.lr", 2e-3),
                   static_cast<int>(cfg.get_int("stages.s2.epochs", 20))};
    rc.sched.s3 = {cfg.get_double("stages.s3.lr", 5e-3),
                   static_cast<int>(cfg.get_int("stages.s3.epochs", 8))};
    rc.sched.batch_size =
        static_cast<int>(cfg.get_int("train.batch_size", 32));
    rc.sched.validate();

    rc.adapt.lambda = static_cast<T>(cfg.get_double("adapt.lambda", 0.1));
    rc.adapt.q = static_cast<T>(cfg.get_double("adapt.q", 2.0));
    rc.adapt.codebook_coeff =
        static_cast<T>(cfg.get_double("adapt.codebook_coeff", 1.0));
    rc.adapt.commitment_coeff =
        static_cast<T>(cfg.get_double("adapt.commitment_coeff", 0.25));
    rc.adapt.learning_rate = static_cast<T>(rc.sched.s3.lr);
    rc.adapt.epochs = rc.sched.s3.epochs;
    rc.adapt.batch_size = rc.sched.batch_size;
    rc.adapt.validate();

    rc.tta.delta = cfg.get_double("tta.delta", 0.001);
    rc.tta.n = static_cast<int>(cfg.get_int("tta.n", 10));
    rc.tta.validate();
    rc.weighting = parse_weighting(cfg.get_str("tta.weighting", "cosine"));

    rc.source_split = cfg.get_double("eval.source_split", 0.75);
    rc.config_hash = cfg.hash();
    return rc;
  }
};

}  // namespace ctsfda
