// Copyright 2026 The Mulan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/errors.hpp"
#include "mulan/eval.hpp"
#include "mulan/model.hpp"

namespace mulan {

enum class DataSource { kSynth, kCifar };

struct DataConfig {
  DataSource source = DataSource::kSynth;
  std::string path;                  // cifar: directory with the binary batches
  std::size_t train_per_class = 500;  // synth
  std::size_t val_per_class = 125;    // synth
  std::size_t train_limit = 0;        // cifar: 0 keeps all
  std::size_t val_limit = 0;
  std::uint64_t data_seed = 7;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double base_lr = 0.4;  // at batch size 256
  double warmup_epochs = 2;
  double ema_base = 0.996;
  double momentum = 0.9;
  double weight_decay = 1.5e-6;
  bool constant_predictor_lr = false;
  double temperature = 0.2;
  double collapse_threshold = -1;  // < 0: 0.2 / sqrt(D)
  std::size_t checkpoint_every = 0;  // epochs; 0: only the final checkpoint
  std::string precision = "float";
  std::uint64_t seed = 0;
  bool deterministic = false;
};

struct RunConfig {
  DataConfig data;
  ViewRecipe views;
  HeadConfig model;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    views.validate();
    model.validate();
    if (train.batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
    if (train.epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (train.precision != "float" && train.precision != "double")
      throw ConfigError("train.precision must be float or double");
    if (train.ema_base < 0 || train.ema_base > 1) throw ConfigError("train.ema_base must lie in [0, 1]");
    if (train.temperature <= 0) throw ConfigError("train.temperature must be positive");
    if (data.source == DataSource::kCifar && data.path.empty())
      throw ConfigError("data.path is required for cifar");
    if (eval.knn_k < 1) throw ConfigError("eval.knn_k must be at least 1");
  }

  /// Predictor view types follow the recipe: one head per view type present.
  void sync_predictors() {
    model.view_types.clear();
    for (ViewType v : kAllViewTypes)
      if (views.count(v) > 0) model.view_types.push_back(v);
  }
};

// ---------------------------------------------------------------------------
// Field table

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

template <typename I>
I parse_int(const std::string& key, const std::string& s) {
  I v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigField {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;

  std::string name() const { return section + "." + key; }
};

inline std::vector<ConfigField> config_fields(RunConfig& c) {
  std::vector<ConfigField> f;
  auto add_double = [&](std::string sec, std::string key, double& ref, std::string doc) {
    const std::string full = sec + "." + key;
    f.push_back({sec, key, std::move(doc), [&ref] { return detail::fmt_double(ref); },
                 [&ref, full](const std::string& s) { ref = detail::parse_double(full, s); }});
  };
  auto add_size = [&](std::string sec, std::string key, std::size_t& ref, std::string doc) {
    const std::string full = sec + "." + key;
    f.push_back({sec, key, std::move(doc), [&ref] { return std::to_string(ref); },
                 [&ref, full](const std::string& s) { ref = detail::parse_int<std::size_t>(full, s); }});
  };
  auto add_int = [&](std::string sec, std::string key, int& ref, std::string doc) {
    const std::string full = sec + "." + key;
    f.push_back({sec, key, std::move(doc), [&ref] { return std::to_string(ref); },
                 [&ref, full](const std::string& s) { ref = detail::parse_int<int>(full, s); }});
  };
  auto add_u64 = [&](std::string sec, std::string key, std::uint64_t& ref, std::string doc) {
    const std::string full = sec + "." + key;
    f.push_back({sec, key, std::move(doc), [&ref] { return std::to_string(ref); },
                 [&ref, full](const std::string& s) { ref = detail::parse_int<std::uint64_t>(full, s); }});
  };
  auto add_bool = [&](std::string sec, std::string key, bool& ref, std::string doc) {
    const std::string full = sec + "." + key;
    f.push_back({sec, key, std::move(doc), [&ref] { return std::string(ref ? "true" : "false"); },
                 [&ref, full](const std::string& s) { ref = detail::parse_bool(full, s); }});
  };
  auto add_string = [&](std::string sec, std::string key, std::string& ref, std::string doc) {
    f.push_back({sec, key, std::move(doc), [&ref] { return ref; }, [&ref](const std::string& s) { ref = s; }});
  };
  auto add_range = [&](std::string sec, std::string key, Range& r, std::string doc) {
    add_double(sec, key + "_min", r.lo, doc + " (lower)");
    add_double(sec, key + "_max", r.hi, doc + " (upper)");
  };

  // data
  f.push_back({"data", "source", "synth | cifar",
               [&c] { return std::string(c.data.source == DataSource::kSynth ? "synth" : "cifar"); },
               [&c](const std::string& s) {
                 if (s == "synth") c.data.source = DataSource::kSynth;
                 else if (s == "cifar") c.data.source = DataSource::kCifar;
                 else throw ConfigError("data.source: expected synth or cifar, got '" + s + "'");
               }});
  add_string("data", "path", c.data.path, "cifar binary directory");
  add_size("data", "train_per_class", c.data.train_per_class, "synth training images per class");
  add_size("data", "val_per_class", c.data.val_per_class, "synth validation images per class");
  add_size("data", "train_limit", c.data.train_limit, "cifar: first N training images, 0 = all");
  add_size("data", "val_limit", c.data.val_limit, "cifar: first N test images, 0 = all");
  add_u64("data", "seed", c.data.data_seed, "synth generator seed");

  // views
  auto& v = c.views;
  add_int("views", "n_global", v.n_global, "global views per image");
  add_int("views", "n_local", v.n_local, "local views per image");
  add_int("views", "n_cutout", v.n_cutout, "cutout views per image");
  add_int("views", "global_size", v.global_size, "global/cutout view side in pixels");
  add_int("views", "local_size", v.local_size, "local view side in pixels");
  add_range("views", "global_area", v.global_area, "global crop area fraction");
  add_range("views", "local_area", v.local_area, "local crop area fraction");
  add_range("views", "cutout_crop_area", v.cutout_crop_area, "cutout view crop area fraction");
  add_range("views", "cutout_mask_area", v.cutout_mask_area, "masked area fraction");
  add_range("views", "ratio", v.ratio, "aspect ratio");
  add_bool("views", "crop", v.crop, "random resized crop");
  add_bool("views", "flip", v.flip, "horizontal flip");
  add_bool("views", "jitter", v.jitter, "color jitter");
  add_bool("views", "grayscale", v.grayscale, "random grayscale");
  add_bool("views", "blur", v.blur, "gaussian blur");
  add_bool("views", "solarize", v.solarize, "solarization");
  add_bool("views", "symmetric_cutout", v.symmetric_cutout, "mask the target views too");
  add_double("views", "jitter_brightness", v.jitter_strength.brightness, "jitter strength");
  add_double("views", "jitter_contrast", v.jitter_strength.contrast, "jitter strength");
  add_double("views", "jitter_saturation", v.jitter_strength.saturation, "jitter strength");
  add_double("views", "jitter_hue", v.jitter_strength.hue, "jitter strength");
  add_double("views", "jitter_prob", v.jitter_prob, "probability of color jitter");
  add_double("views", "grayscale_prob", v.grayscale_prob, "probability of grayscale");
  add_double("views", "solarize_threshold", v.solarize_threshold, "solarization threshold");
  add_double("views", "lambda_global", v.lambda[0], "loss weight of global views");
  add_double("views", "lambda_local", v.lambda[1], "loss weight of local views");
  add_double("views", "lambda_cutout", v.lambda[2], "loss weight of cutout views");

  // model
  f.push_back({"model", "method", "byol | simsiam | mocov3",
               [&c] { return std::string(to_string(c.model.method)); },
               [&c](const std::string& s) { c.model.method = parse_method(s); }});
  f.push_back({"model", "widths", "comma-separated conv block widths",
               [&c] {
                 std::string s;
                 for (std::size_t i = 0; i < c.model.widths.size(); ++i)
                   s += (i ? "," : "") + std::to_string(c.model.widths[i]);
                 return s;
               },
               [&c](const std::string& s) {
                 c.model.widths.clear();
                 std::stringstream ss(s);
                 std::string tok;
                 while (std::getline(ss, tok, ','))
                   c.model.widths.push_back(detail::parse_int<int>("model.widths", detail::trim(tok)));
               }});
  add_int("model", "proj_hidden", c.model.proj_hidden, "projector hidden width");
  add_int("model", "proj_out", c.model.proj_out, "projection dimension");
  add_int("model", "pred_hidden", c.model.pred_hidden, "predictor hidden width");
  add_bool("model", "shared_predictor", c.model.shared_predictor, "one predictor for all view types");

  // train
  auto& t = c.train;
  add_size("train", "epochs", t.epochs, "training epochs");
  add_size("train", "batch_size", t.batch_size, "images per step");
  add_double("train", "base_lr", t.base_lr, "learning rate at batch size 256");
  add_double("train", "warmup_epochs", t.warmup_epochs, "linear warmup length");
  add_double("train", "ema_base", t.ema_base, "initial EMA momentum");
  add_double("train", "momentum", t.momentum, "SGD momentum");
  add_double("train", "weight_decay", t.weight_decay, "weight decay (not on biases/norms)");
  add_bool("train", "constant_predictor_lr", t.constant_predictor_lr, "predictor skips the lr schedule");
  add_double("train", "temperature", t.temperature, "contrastive temperature");
  add_double("train", "collapse_threshold", t.collapse_threshold, "embedding std flag, <0 = 0.2/sqrt(D)");
  add_size("train", "checkpoint_every", t.checkpoint_every, "epochs between checkpoints, 0 = final only");
  add_string("train", "precision", t.precision, "float | double");
  add_u64("train", "seed", t.seed, "run seed");
  add_bool("train", "deterministic", t.deterministic, "reproducible metrics: time_ms written as 0");

  // eval
  f.push_back({"eval", "protocol", "knn | linear | both",
               [&c] {
                 return std::string(c.eval.protocol == Protocol::kKnn      ? "knn"
                                    : c.eval.protocol == Protocol::kLinear ? "linear"
                                                                           : "both");
               },
               [&c](const std::string& s) { c.eval.protocol = parse_protocol(s); }});
  add_size("eval", "knn_k", c.eval.knn_k, "neighbours");
  f.push_back({"eval", "probe_epochs", "linear probe epochs", [&c] { return std::to_string(c.eval.probe.epochs); },
               [&c](const std::string& s) { c.eval.probe.epochs = detail::parse_int<int>("eval.probe_epochs", s); }});
  add_double("eval", "probe_lr", c.eval.probe.lr, "linear probe learning rate");
  add_size("eval", "probe_batch", c.eval.probe.batch, "linear probe batch size");
  add_size("eval", "image_size", c.eval.image_size, "evaluation crop side, follows views.global_size");
  return f;
}

/// Applies one "section.key=value" assignment.
inline void set_config_value(RunConfig& c, const std::string& dotted, const std::string& value) {
  for (auto& field : config_fields(c)) {
    if (field.name() == dotted) {
      field.set(detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + dotted + "'");
}

inline std::string get_config_value(RunConfig& c, const std::string& dotted) {
  for (auto& field : config_fields(c))
    if (field.name() == dotted) return field.get();
  throw ConfigError("unknown config key '" + dotted + "'");
}

/// Parses sectioned key=value text on top of `base`. Keys outside a section
/// and unknown keys are errors.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : pt) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) set_config_value(base, section + "." + key, value.data());
  }
  return base;
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  return parse_config(is, std::move(base));
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(in, std::move(base));
}

/// Every field with its value, grouped by section, each preceded by its doc.
inline std::string render_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::ostringstream os;
  std::string section;
  for (const auto& field : config_fields(copy)) {
    if (field.section != section) {
      if (!section.empty()) os << "\n";
      section = field.section;
      os << "[" << section << "]\n";
    }
    os << "# " << field.doc << "\n" << field.key << " = " << field.get() << "\n";
  }
  return os.str();
}

}  // namespace mulan
