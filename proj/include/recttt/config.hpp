#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "recttt/baselines.hpp"
#include "recttt/common.hpp"
#include "recttt/data.hpp"
#include "recttt/model.hpp"

namespace recttt {

// Declarative run description: JSON file plus dotted-path command-line
// overrides. Every field has a default; unknown keys are rejected at any
// nesting level so typos fail loudly instead of silently running the wrong
// experiment.

struct ExperimentConfig {
  std::uint64_t seed = 1;

  struct Data {
    int train_n = 4000;
    int test_n = 1000;
    int classes = 4;
  } data;

  struct Backbone {
    int stem_channels = 16;
    std::vector<int> block_channels = {32, 64, 128};
  } backbone;

  struct Train {
    int pretrain_epochs = 20;  // source-only backbone stage
    int epochs = 40;           // joint stage
    int batch_size = 64;
    float lr = 0.05f;
    std::vector<int> lr_decay_epochs = {25, 35};
    float lr_decay_factor = 0.1f;
    float momentum = 0.9f;
    LossWeights loss_weights;
    bool kl_symmetric = true;
  } train;

  struct Adapt {
    int iterations = 20;
    float lr = 0.005f;
    float momentum = 0.0f;
    int depth = 3;
    int batch_size = 64;
  } adapt;

  struct Eval {
    std::vector<std::string> corruptions = {"gaussian_noise", "impulse_noise", "gaussian_blur",
                                            "brightness",     "contrast",      "pixelate"};
    int severity = 5;
  } eval;

  std::string method = "recttt";  // recttt | source | ptbn | simsiam_ttt

  struct Ablation {
    bool single_encoder_train = false;      // drop the second encoder entirely
    bool single_encoder_inference = false;  // keep both, predict with head1 only
    bool kl_off = false;
    bool aux_off = false;
    std::vector<int> iteration_sweep = {0, 1, 5, 10, 20, 50};
    std::vector<int> batch_size_sweep = {8, 32, 64, 128};
    std::vector<int> depth_sweep = {1, 2, 3};
  } ablation;

  // ---------------------------------------------------------------------

  nlohmann::json to_json() const {
    return {
        {"seed", seed},
        {"data", {{"train_n", data.train_n}, {"test_n", data.test_n}, {"classes", data.classes}}},
        {"backbone",
         {{"stem_channels", backbone.stem_channels}, {"block_channels", backbone.block_channels}}},
        {"train",
         {{"pretrain_epochs", train.pretrain_epochs},
          {"epochs", train.epochs},
          {"batch_size", train.batch_size},
          {"lr", train.lr},
          {"lr_decay_epochs", train.lr_decay_epochs},
          {"lr_decay_factor", train.lr_decay_factor},
          {"momentum", train.momentum},
          {"loss_weights",
           {{"ce", train.loss_weights.ce}, {"aux", train.loss_weights.aux}, {"kl", train.loss_weights.kl}}},
          {"kl_symmetric", train.kl_symmetric}}},
        {"adapt",
         {{"iterations", adapt.iterations},
          {"lr", adapt.lr},
          {"momentum", adapt.momentum},
          {"depth", adapt.depth},
          {"batch_size", adapt.batch_size}}},
        {"eval", {{"corruptions", eval.corruptions}, {"severity", eval.severity}}},
        {"method", method},
        {"ablation",
         {{"single_encoder_train", ablation.single_encoder_train},
          {"single_encoder_inference", ablation.single_encoder_inference},
          {"kl_off", ablation.kl_off},
          {"aux_off", ablation.aux_off},
          {"iteration_sweep", ablation.iteration_sweep},
          {"batch_size_sweep", ablation.batch_size_sweep},
          {"depth_sweep", ablation.depth_sweep}}},
    };
  }

  // Hash of the canonical dump (nlohmann objects keep sorted keys).
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

  // Hash of the fields that determine parameter shapes, recorded in
  // checkpoints so a loader can detect architecture mismatches early.
  std::uint64_t model_hash() const {
    nlohmann::json j = {{"backbone", to_json()["backbone"]},
                        {"classes", data.classes},
                        {"single_encoder_train", ablation.single_encoder_train},
                        {"method", method == "simsiam_ttt" ? "simsiam" : "recttt"}};
    return fnv1a64(j.dump());
  }

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path,
                               const std::vector<std::string>& overrides = {});

  ModelConfig model_config() const {
    ModelConfig m;
    m.dims.stem_channels = backbone.stem_channels;
    m.dims.block_channels = backbone.block_channels;
    m.classes = data.classes;
    m.input_hw = kImageHw;
    m.two_encoders = !ablation.single_encoder_train;
    m.adapt_depth = adapt.depth;
    m.kl_symmetric = train.kl_symmetric;
    m.aux_off = ablation.aux_off;
    m.kl_off = ablation.kl_off;
    m.loss_weights = train.loss_weights;
    return m;
  }

  SimSiamModel::Config simsiam_config() const {
    SimSiamModel::Config c;
    c.dims.stem_channels = backbone.stem_channels;
    c.dims.block_channels = backbone.block_channels;
    c.classes = data.classes;
    c.input_hw = kImageHw;
    c.adapt_depth = adapt.depth;
    return c;
  }

  void validate() const {
    if (data.train_n < 1 || data.test_n < 1) throw ConfigError("dataset sizes must be >= 1");
    if (data.classes != kNumClasses)
      throw ConfigError("data.classes must be " + std::to_string(kNumClasses) +
                        " for the shape dataset");
    if (backbone.block_channels.empty()) throw ConfigError("backbone needs at least one block");
    if (train.batch_size < 2 || adapt.batch_size < 2)
      throw ConfigError("batch sizes must be >= 2 (batch statistics)");
    if (train.epochs < 0 || train.pretrain_epochs < 0) throw ConfigError("negative epoch count");
    if (adapt.iterations < 0) throw ConfigError("adapt.iterations must be >= 0");
    if (adapt.depth < 1 || adapt.depth > static_cast<int>(backbone.block_channels.size()))
      throw ConfigError("adapt.depth must be in [1, " +
                        std::to_string(backbone.block_channels.size()) + "]");
    if (eval.severity < 1 || eval.severity > 5) throw ConfigError("eval.severity must be 1..5");
    if (method != "recttt" && method != "source" && method != "ptbn" && method != "simsiam_ttt")
      throw ConfigError("method must be one of recttt|source|ptbn|simsiam_ttt, got '" + method + "'");
    for (const auto& c : eval.corruptions) corruption_from_name(c);  // throws on unknown
    for (int t : ablation.iteration_sweep)
      if (t < 0) throw ConfigError("iteration_sweep entries must be >= 0");
    for (int b : ablation.batch_size_sweep)
      if (b < 2) throw ConfigError("batch_size_sweep entries must be >= 2");
    for (int d : ablation.depth_sweep)
      if (d < 1 || d > static_cast<int>(backbone.block_channels.size()))
        throw ConfigError("depth_sweep entry out of range");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& schema,
                                const std::string& where) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!schema.contains(it.key()))
      throw ConfigError("unknown config key '" + (where.empty() ? it.key() : where + "." + it.key()) +
                        "'");
    if (it.value().is_object())
      reject_unknown_keys(it.value(), schema.at(it.key()),
                          where.empty() ? it.key() : where + "." + it.key());
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    detail::reject_unknown_keys(j, cfg.to_json(), "");
    detail::maybe(j, "seed", cfg.seed);
    detail::maybe(j, "method", cfg.method);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::maybe(d, "train_n", cfg.data.train_n);
      detail::maybe(d, "test_n", cfg.data.test_n);
      detail::maybe(d, "classes", cfg.data.classes);
    }
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      detail::maybe(b, "stem_channels", cfg.backbone.stem_channels);
      detail::maybe(b, "block_channels", cfg.backbone.block_channels);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::maybe(t, "pretrain_epochs", cfg.train.pretrain_epochs);
      detail::maybe(t, "epochs", cfg.train.epochs);
      detail::maybe(t, "batch_size", cfg.train.batch_size);
      detail::maybe(t, "lr", cfg.train.lr);
      detail::maybe(t, "lr_decay_epochs", cfg.train.lr_decay_epochs);
      detail::maybe(t, "lr_decay_factor", cfg.train.lr_decay_factor);
      detail::maybe(t, "momentum", cfg.train.momentum);
      detail::maybe(t, "kl_symmetric", cfg.train.kl_symmetric);
      if (t.contains("loss_weights")) {
        const auto& w = t.at("loss_weights");
        detail::maybe(w, "ce", cfg.train.loss_weights.ce);
        detail::maybe(w, "aux", cfg.train.loss_weights.aux);
        detail::maybe(w, "kl", cfg.train.loss_weights.kl);
      }
    }
    if (j.contains("adapt")) {
      const auto& a = j.at("adapt");
      detail::maybe(a, "iterations", cfg.adapt.iterations);
      detail::maybe(a, "lr", cfg.adapt.lr);
      detail::maybe(a, "momentum", cfg.adapt.momentum);
      detail::maybe(a, "depth", cfg.adapt.depth);
      detail::maybe(a, "batch_size", cfg.adapt.batch_size);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      detail::maybe(e, "corruptions", cfg.eval.corruptions);
      detail::maybe(e, "severity", cfg.eval.severity);
    }
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      detail::maybe(a, "single_encoder_train", cfg.ablation.single_encoder_train);
      detail::maybe(a, "single_encoder_inference", cfg.ablation.single_encoder_inference);
      detail::maybe(a, "kl_off", cfg.ablation.kl_off);
      detail::maybe(a, "aux_off", cfg.ablation.aux_off);
      detail::maybe(a, "iteration_sweep", cfg.ablation.iteration_sweep);
      detail::maybe(a, "batch_size_sweep", cfg.ablation.batch_size_sweep);
      detail::maybe(a, "depth_sweep", cfg.ablation.depth_sweep);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config type error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// "a.b.c=value" with a JSON-parsed value (bare words become strings).
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like path.to.key=value, got '" + assignment + "'");
  std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // unquoted string

  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("override path has an empty segment: '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline ExperimentConfig ExperimentConfig::load(const std::string& path,
                                               const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  for (const auto& o : overrides) apply_override(j, o);
  return from_json(j);
}

}  // namespace recttt
