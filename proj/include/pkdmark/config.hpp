#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkdmark/training.hpp"

namespace pkdmark::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The full run-config schema with default values; documented in the README.
nlohmann::json default_config_json();

// Loads a config file, checks every key against the schema (unknown keys are
// rejected), then applies dotted-key overrides like "train.steps=500".
nlohmann::json load_config(const std::string& path,
                           const std::vector<std::string>& overrides);

// Parses an already-merged config JSON. Throws ConfigError naming the
// offending key.
training::TrainRunConfig to_train_config(const nlohmann::json& j);

}  // namespace pkdmark::config
