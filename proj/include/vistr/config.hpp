#pragma once

// Flat key-value configuration with dotted section prefixes:
//
//   # comment
//   model.d = 96
//   train.lr_transformer = 1e-4
//
// Serialization sorts keys, so parse -> serialize -> parse is the identity.
// The only environment override is the RNG seed (VISTR_SEED).

#include <cstdlib>
#include <fstream>
#include <map>

#include "vistr/losses.hpp"
#include "vistr/model.hpp"
#include "vistr/synthdata.hpp"

namespace vistr {

class Config {
 public:
  static Config parse(const std::string& text) {
    Config cfg;
    size_t line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
      size_t eol = text.find('\n', pos);
      std::string line = text.substr(pos, eol == std::string::npos ? eol : eol - pos);
      pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
      ++line_no;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw config_error("config line " + std::to_string(line_no) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw config_error("config line " + std::to_string(line_no) + ": empty key");
      cfg.kv_[key] = value;
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw config_error("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), {});
    return parse(text);
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw config_error("cannot write config: " + path);
    os << serialize();
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set(const std::string& key, const char* value) { kv_[key] = value; }
  void set(const std::string& key, int64_t v) { kv_[key] = std::to_string(v); }
  void set(const std::string& key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv_[key] = buf;
  }
  void set(const std::string& key, bool v) { kv_[key] = v ? "true" : "false"; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      size_t used = 0;
      int64_t v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw config_error("config key '" + key + "': not an integer: " + it->second);
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw config_error("config key '" + key + "': not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw config_error("config key '" + key + "': not a boolean: " + it->second);
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }
  bool operator==(const Config& o) const { return kv_ == o.kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

// VISTR_SEED overrides both training and data-generation seeds.
inline void apply_env_seed(Config& cfg) {
  const char* env = std::getenv("VISTR_SEED");
  if (!env) return;
  try {
    int64_t seed = std::stoll(env);
    cfg.set("train.seed", seed);
    cfg.set("synth.seed", seed);
  } catch (...) {
    throw config_error("VISTR_SEED is not an integer");
  }
}

inline ModelConfig model_config_from(const Config& c) {
  ModelConfig m;
  m.d = c.get_int("model.d", m.d);
  m.n = c.get_int("model.n", m.n);
  m.T = c.get_int("model.T", m.T);
  m.heads = c.get_int("model.heads", m.heads);
  m.encoder_layers = c.get_int("model.encoder_layers", m.encoder_layers);
  m.decoder_layers = c.get_int("model.decoder_layers", m.decoder_layers);
  m.ffn_dim = c.get_int("model.ffn_dim", 4 * m.d);
  m.K = c.get_int("model.num_classes", kCategoryCount);
  m.query_mode = parse_query_mode(c.get_string("model.query_mode", "instance"));
  m.use_positional = c.get_bool("model.use_positional", true);
  m.posenc_on_cross_keys = c.get_bool("model.posenc_on_cross_keys", true);
  std::string src = c.get_string("model.mask_feature_source", "encoder");
  if (src == "encoder")
    m.mask_feature_source = MaskFeatureSource::encoder;
  else if (src == "backbone")
    m.mask_feature_source = MaskFeatureSource::backbone;
  else
    throw config_error("unknown mask_feature_source: " + src);
  m.use_3d_head = c.get_bool("model.use_3d_head", true);
  m.mask_channels = c.get_int("model.mask_channels", m.mask_channels);
  m.backbone_channels = c.get_int("model.backbone_channels", m.backbone_channels);
  m.H0 = c.get_int("model.H0", m.H0);
  m.W0 = c.get_int("model.W0", m.W0);
  m.validate();
  return m;
}

inline SynthConfig synth_config_from(const Config& c) {
  SynthConfig s;
  s.seed = static_cast<uint64_t>(c.get_int("synth.seed", 7));
  s.clips = c.get_int("synth.clips", s.clips);
  s.T = c.get_int("synth.T", c.get_int("model.T", s.T));
  s.H0 = c.get_int("synth.height", c.get_int("model.H0", s.H0));
  s.W0 = c.get_int("synth.width", c.get_int("model.W0", s.W0));
  s.min_instances = c.get_int("synth.min_instances", s.min_instances);
  s.max_instances = c.get_int("synth.max_instances", s.max_instances);
  s.min_half = c.get_int("synth.min_half", s.min_half);
  s.max_half = c.get_int("synth.max_half", s.max_half);
  s.min_speed = c.get_int("synth.min_speed", s.min_speed);
  s.max_speed = c.get_int("synth.max_speed", s.max_speed);
  s.leave_enter = c.get_bool("synth.leave_enter", false);
  if (c.has("model.n")) s.capacity = c.get_int("model.n", 0);
  s.validate();
  return s;
}

inline LossWeights loss_weights_from(const Config& c) {
  LossWeights w;
  w.lambda_iou = c.get_double("loss.lambda_iou", w.lambda_iou);
  w.lambda_l1 = c.get_double("loss.lambda_l1", w.lambda_l1);
  w.lambda_mask = c.get_double("loss.lambda_mask", w.lambda_mask);
  w.background_class_weight = c.get_double("loss.background_weight", w.background_class_weight);
  w.focal_alpha = c.get_double("loss.focal_alpha", w.focal_alpha);
  w.focal_gamma = c.get_double("loss.focal_gamma", w.focal_gamma);
  w.dice_smooth = c.get_double("loss.dice_smooth", w.dice_smooth);
  std::string red = c.get_string("loss.class_reduction", "mean");
  if (red == "mean")
    w.class_reduction = ClassReduction::mean;
  else if (red == "sum")
    w.class_reduction = ClassReduction::sum;
  else
    throw config_error("unknown class_reduction: " + red);
  w.validate();
  return w;
}

enum class FrameOrder { in_order, random_order };

struct TrainConfig {
  double lr_transformer = 1e-4;
  double lr_backbone = 1e-5;
  double weight_decay = 1e-4;
  int64_t epochs = 18;
  int64_t lr_drop_epoch = 12;
  uint64_t seed = 42;
  bool deterministic = true;
  double clip_grad_norm = 0.1;
  FrameOrder frame_order = FrameOrder::in_order;
  int64_t eval_period = 0;  // epochs between training-set evaluations; 0 = off
  std::string data_dir = "data/synth";

  void validate() const {
    if (lr_backbone > lr_transformer)
      throw config_error("train: lr_backbone must not exceed lr_transformer");
    if (epochs < 0 || lr_drop_epoch < 0) throw config_error("train: negative epoch count");
    if (clip_grad_norm < 0) throw config_error("train: negative clip_grad_norm");
  }
};

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.lr_transformer = c.get_double("train.lr_transformer", t.lr_transformer);
  t.lr_backbone = c.get_double("train.lr_backbone", t.lr_backbone);
  t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
  t.epochs = c.get_int("train.epochs", t.epochs);
  t.lr_drop_epoch = c.get_int("train.lr_drop_epoch", t.lr_drop_epoch);
  t.seed = static_cast<uint64_t>(c.get_int("train.seed", 42));
  t.deterministic = c.get_bool("train.deterministic", true);
  t.clip_grad_norm = c.get_double("train.clip_grad_norm", t.clip_grad_norm);
  std::string fo = c.get_string("train.frame_order", "in_order");
  if (fo == "in_order")
    t.frame_order = FrameOrder::in_order;
  else if (fo == "random")
    t.frame_order = FrameOrder::random_order;
  else
    throw config_error("unknown frame_order: " + fo);
  t.eval_period = c.get_int("train.eval_period", t.eval_period);
  t.data_dir = c.get_string("data.dir", t.data_dir);
  t.validate();
  return t;
}

}  // namespace vistr
