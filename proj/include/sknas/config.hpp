#pragma once

#include <json.hpp>

#include <initializer_list>
#include <stdexcept>
#include <string>

#include "sknas/blocks.hpp"
#include "sknas/data.hpp"
#include "sknas/training.hpp"

namespace sknas {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

using json = nlohmann::json;

inline void check_object(const json& j, const char* ctx) {
  if (!j.is_object())
    throw ConfigError(std::string(ctx) + " must be a JSON object, got " +
                      std::string(j.type_name()));
}

// Every recognized key is listed; anything else is a typo worth failing on.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const char* ctx) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError("unknown key '" + key + "' in " + ctx);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const char* ctx) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + ctx + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json model_spec_to_json(const ModelSpec& m) {
  nlohmann::json j;
  j["in_channels"] = m.in_channels;
  j["depth"] = m.depth;
  j["base_channels"] = m.base_channels;
  j["blocks_per_level"] = m.blocks_per_level;
  j["subnetworks"] = m.subnetworks;
  j["kernel_candidates"] = m.kernel_candidates;
  j["growth_rates"] = m.growth_rates;
  j["channel_rule"] = channel_rule_name(m.channel_rule);
  j["skip_init"] = m.skip_init;
  j["cab_reduction"] = m.cab_reduction;
  j["variant"] = variant_name(m.variant);
  j["mode"] = conv_mode_name(m.mode);
  j["tau"] = m.tau;
  return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  detail::check_object(j, "model");
  detail::check_keys(j,
                     {"in_channels", "depth", "base_channels", "blocks_per_level",
                      "subnetworks", "kernel_candidates", "growth_rates", "channel_rule",
                      "skip_init", "cab_reduction", "variant", "mode", "tau"},
                     "model");
  ModelSpec m;
  m.in_channels = detail::get_or(j, "in_channels", m.in_channels, "model");
  m.depth = detail::get_or(j, "depth", m.depth, "model");
  m.base_channels = detail::get_or(j, "base_channels", m.base_channels, "model");
  m.blocks_per_level = detail::get_or(j, "blocks_per_level", m.blocks_per_level, "model");
  m.subnetworks = detail::get_or(j, "subnetworks", m.subnetworks, "model");
  m.kernel_candidates = detail::get_or(j, "kernel_candidates", m.kernel_candidates, "model");
  m.growth_rates = detail::get_or(j, "growth_rates", m.growth_rates, "model");
  m.skip_init = detail::get_or(j, "skip_init", m.skip_init, "model");
  m.cab_reduction = detail::get_or(j, "cab_reduction", m.cab_reduction, "model");
  m.tau = detail::get_or(j, "tau", m.tau, "model");
  try {
    m.channel_rule = channel_rule_from_name(
        detail::get_or<std::string>(j, "channel_rule", channel_rule_name(m.channel_rule),
                                    "model"));
    m.variant =
        variant_from_name(detail::get_or<std::string>(j, "variant", variant_name(m.variant),
                                                      "model"));
    m.mode = conv_mode_from_name(detail::get_or<std::string>(j, "mode",
                                                             conv_mode_name(m.mode), "model"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return m;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
  nlohmann::json j;
  j["lr"] = t.lr;
  j["patch_size"] = t.patch_size;
  j["batch_size"] = t.batch_size;
  j["eval_interval"] = t.eval_interval;
  j["patience"] = t.patience;
  j["max_steps"] = t.max_steps;
  j["seed"] = t.seed;
  j["loss"] = loss_name(t.loss);
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::check_object(j, "train");
  detail::check_keys(j,
                     {"lr", "patch_size", "batch_size", "eval_interval", "patience",
                      "max_steps", "seed", "loss"},
                     "train");
  TrainConfig t;
  t.lr = detail::get_or(j, "lr", t.lr, "train");
  t.patch_size = detail::get_or(j, "patch_size", t.patch_size, "train");
  t.batch_size = detail::get_or(j, "batch_size", t.batch_size, "train");
  t.eval_interval = detail::get_or(j, "eval_interval", t.eval_interval, "train");
  t.patience = detail::get_or(j, "patience", t.patience, "train");
  t.max_steps = detail::get_or(j, "max_steps", t.max_steps, "train");
  t.seed = detail::get_or(j, "seed", t.seed, "train");
  try {
    t.loss = loss_from_name(detail::get_or<std::string>(j, "loss", loss_name(t.loss), "train"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  return t;
}

inline nlohmann::json data_config_to_json(const DataConfig& d) {
  nlohmann::json j;
  j["count"] = d.count;
  j["height"] = d.height;
  j["width"] = d.width;
  j["channels"] = d.channels;
  j["sigma"] = d.sigma;
  j["seed"] = d.seed;
  return j;
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  detail::check_object(j, "data");
  detail::check_keys(j, {"count", "height", "width", "channels", "sigma", "seed"}, "data");
  DataConfig d;
  d.count = detail::get_or(j, "count", d.count, "data");
  d.height = detail::get_or(j, "height", d.height, "data");
  d.width = detail::get_or(j, "width", d.width, "data");
  d.channels = detail::get_or(j, "channels", d.channels, "data");
  d.sigma = detail::get_or(j, "sigma", d.sigma, "data");
  d.seed = detail::get_or(j, "seed", d.seed, "data");
  return d;
}

// Everything one CLI invocation needs: what to build, how to train it, and
// what data to make or expect.
struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  DataConfig data;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::check_object(j, "config");
  detail::check_keys(j, {"model", "train", "data"}, "config");
  RunConfig c;
  if (j.contains("model")) c.model = model_spec_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

// nlohmann::json keeps object keys sorted, so this text is deterministic and
// parse -> serialize -> parse is the identity.
inline std::string serialize_run_config(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = model_spec_to_json(c.model);
  j["train"] = train_config_to_json(c.train);
  j["data"] = data_config_to_json(c.data);
  return j.dump(2) + "\n";
}

}  // namespace sknas
