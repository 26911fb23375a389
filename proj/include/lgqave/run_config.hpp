#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "lgqave/experiments.hpp"

namespace lgqave {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything one CLI run needs, merged from a config file and flag overrides.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  synth::SynthConfig synth;
  std::string data_dir;   // directory holding train/val/test.ndjson
  std::string out_dir;
  std::string model_dir;  // trained model to load
  std::string split = "test";

  /// Applies one key = value pair. Unknown keys and malformed values throw.
  void set(const std::string& key, const std::string& value) {
    auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second(*this, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("bad value for '" + key + "': " + e.what());
    }
  }

  void validate() const {
    try {
      model.validate();
      train.validate();
      synth.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (model.qdgt.c != synth.c) throw ConfigError("visual width c differs between model and generator");
  }

  static std::vector<std::string> keys() {
    std::vector<std::string> k;
    for (const auto& [name, fn] : setters()) k.push_back(name);
    return k;
  }

 private:
  using Setter = std::function<void(RunConfig&, const std::string&)>;

  static double to_double(const std::string& v) {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw ConfigError("'" + v + "' is not a number");
    return x;
  }
  static std::uint64_t to_uint(const std::string& v) {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + v + "' is not a nonnegative integer");
    return x;
  }
  static bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("'" + v + "' is not a boolean");
  }

  static const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> m = {
        // model
        {"d", [](RunConfig& r, const std::string& v) { r.model.qdgt.d = to_uint(v); }},
        {"heads", [](RunConfig& r, const std::string& v) { r.model.qdgt.heads = to_uint(v); }},
        {"layers", [](RunConfig& r, const std::string& v) { r.model.qdgt.layers = to_uint(v); }},
        {"pool", [](RunConfig& r, const std::string& v) { r.model.qdgt.pool = parse_pool_mode(v); }},
        {"beta", [](RunConfig& r, const std::string& v) { r.model.beta = to_double(v); }},
        {"gamma", [](RunConfig& r, const std::string& v) { r.model.gamma = to_double(v); }},
        {"temperature", [](RunConfig& r, const std::string& v) { r.model.temperature = to_double(v); }},
        {"sampling", [](RunConfig& r, const std::string& v) { r.model.sampling = to_bool(v); }},
        {"grounding", [](RunConfig& r, const std::string& v) { r.model.grounding = to_bool(v); }},
        {"local_repr", [](RunConfig& r, const std::string& v) { r.model.local_repr = to_bool(v); }},
        {"global_repr", [](RunConfig& r, const std::string& v) { r.model.global_repr = to_bool(v); }},
        {"selector_sharpness", [](RunConfig& r, const std::string& v) { r.model.selector_sharpness = to_double(v); }},
        // training
        {"seed", [](RunConfig& r, const std::string& v) { r.train.seed = to_uint(v); }},
        {"lambda", [](RunConfig& r, const std::string& v) { r.train.lambda = to_double(v); }},
        {"lr", [](RunConfig& r, const std::string& v) { r.train.lr = to_double(v); }},
        {"epochs", [](RunConfig& r, const std::string& v) { r.train.epochs = to_uint(v); }},
        {"batch_size", [](RunConfig& r, const std::string& v) { r.train.batch_size = to_uint(v); }},
        {"mask_keep_rate", [](RunConfig& r, const std::string& v) { r.train.mask_keep_rate = to_double(v); }},
        {"selector_weight", [](RunConfig& r, const std::string& v) { r.train.selector_weight = to_double(v); }},
        {"selector_negatives", [](RunConfig& r, const std::string& v) { r.train.selector_negatives = to_uint(v); }},
        {"hard_negatives", [](RunConfig& r, const std::string& v) { r.train.hard_negatives = to_uint(v); }},
        {"patience", [](RunConfig& r, const std::string& v) { r.train.patience = to_uint(v); }},
        {"threads", [](RunConfig& r, const std::string& v) { r.train.threads = to_uint(v); }},
        // generator
        {"synth_seed", [](RunConfig& r, const std::string& v) { r.synth.seed = to_uint(v); }},
        {"n_episodes", [](RunConfig& r, const std::string& v) { r.synth.n_episodes = to_uint(v); }},
        {"frames", [](RunConfig& r, const std::string& v) { r.synth.frames = to_uint(v); }},
        {"n_object_classes", [](RunConfig& r, const std::string& v) { r.synth.n_object_classes = to_uint(v); }},
        {"n_answer_options", [](RunConfig& r, const std::string& v) { r.synth.n_answer_options = to_uint(v); }},
        {"noise_std", [](RunConfig& r, const std::string& v) { r.synth.noise_std = to_double(v); }},
        {"qa_mode", [](RunConfig& r, const std::string& v) { r.synth.qa_mode = data::parse_qa_mode(v); }},
        {"patches", [](RunConfig& r, const std::string& v) { r.synth.patches = to_uint(v); }},
        {"span_min", [](RunConfig& r, const std::string& v) { r.synth.span_min = to_uint(v); }},
        {"span_max", [](RunConfig& r, const std::string& v) { r.synth.span_max = to_uint(v); }},
        {"p_true_box", [](RunConfig& r, const std::string& v) { r.synth.p_true_box = to_double(v); }},
        {"p_halluc_box", [](RunConfig& r, const std::string& v) { r.synth.p_halluc_box = to_double(v); }},
        // feature width is shared by generator and model
        {"c",
         [](RunConfig& r, const std::string& v) {
           r.synth.c = r.model.qdgt.c = r.model.qdgt.c_text = to_uint(v);
         }},
        // paths
        {"data", [](RunConfig& r, const std::string& v) { r.data_dir = v; }},
        {"out", [](RunConfig& r, const std::string& v) { r.out_dir = v; }},
        {"model", [](RunConfig& r, const std::string& v) { r.model_dir = v; }},
        {"split", [](RunConfig& r, const std::string& v) {
           if (v != "train" && v != "val" && v != "test") throw ConfigError("split must be train, val or test");
           r.split = v;
         }},
    };
    return m;
  }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Flat `key = value` text; `#` starts a comment; values may be double-quoted.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source = "<config>") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = line;
    bool quoted = false;
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (body[i] == '"') quoted = !quoted;
      if (body[i] == '#' && !quoted) {
        body.resize(i);
        break;
      }
    }
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path);
}

}  // namespace lgqave
