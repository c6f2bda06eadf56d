#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rangevit/model.hpp"
#include "rangevit/projection.hpp"
#include "rangevit/scene.hpp"
#include "rangevit/trainer.hpp"

namespace rangevit {

struct SceneDatasetSpec {
  SceneSpec base;  // beams/width/fov are taken from the projection settings
  int train_scans = 8;
  int val_scans = 4;
};

struct FilePair {
  std::string cloud;
  std::string labels;
};

struct FileDatasetSpec {
  std::vector<FilePair> train;
  std::vector<FilePair> val;
  std::map<uint32_t, int> class_map;
};

// One JSON file drives a whole run; a single seed feeds every random stream.
struct RunConfig {
  uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;
  ProjectionSpec projection;
  InferOptions infer;
  std::optional<SceneDatasetSpec> scenes;
  std::optional<FileDatasetSpec> files;
  std::string out_dir;

  void validate() const;  // throws ConfigError with the offending key path
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::string& path);

// Materializes the configured dataset: generates the synthetic scenes (scan i
// reuses the run seed mixed with i) or reads the listed files.
TrainDataset load_dataset(const RunConfig& cfg);

}  // namespace rangevit
