#ifndef LOBESEG_CONFIG_HPP
#define LOBESEG_CONFIG_HPP

#include <string>
#include <vector>

#include <json.hpp>

#include "lobeseg/phantom.hpp"
#include "lobeseg/preprocess.hpp"
#include "lobeseg/trainer.hpp"
#include "lobeseg/vnet.hpp"

namespace lobeseg {

struct RunPaths {
  std::string train_data;
  std::string val_data;
  std::string out_dir;
};

// Union of every subsystem's configuration, loaded from a JSON file with
// dotted-path command-line overrides. Unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PreprocessConfig preprocess;
  PhantomSpec phantom;
  RunPaths paths;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const PreprocessConfig& c);
nlohmann::json to_json(const PhantomSpec& c);
nlohmann::json to_json(const RunConfig& c);

ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
PreprocessConfig preprocess_config_from_json(const nlohmann::json& j);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

// "a.b.c=value" with the value parsed as JSON (bare words become strings)
void apply_override(nlohmann::json& j, const std::string& spec);

// Parses the file (or defaults when path is empty), applies overrides, and
// rejects any key that does not exist in the schema.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace lobeseg

#endif  // LOBESEG_CONFIG_HPP
