#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "styleprobe/attribution.hpp"
#include "styleprobe/perturb.hpp"
#include "styleprobe/repair.hpp"
#include "styleprobe/sensitivity.hpp"
#include "styleprobe/serialization.hpp"

namespace styleprobe {

struct ScreeningConfig {
  SensitivityMethod method = SensitivityMethod::kSmoothGrad;
  SmoothGradParams smoothgrad;
  FdaParams fda;
};

struct AttributionConfig {
  // "ground_truth" or "vlm_http".
  std::string backend = "ground_truth";
  std::size_t vote_samples = 5;
  TieRule tie_rule = TieRule::kRelevant;
  double mask_threshold = kDefaultMaskThreshold;
  std::string task_attribute = "object";
  VlmConfig vlm;
  std::optional<std::string> templates_dir;
};

struct RepairStageConfig {
  RepairConfig mix;
  HeadTrainingConfig training;
  // Originals drawn from the scenario's training distribution.
  std::size_t originals = 400;
  // JSON-lines {"image", "label"} for non-scenario runs; paths relative to
  // the manifest's directory.
  std::optional<std::string> originals_manifest;
};

struct PipelineConfig {
  std::string preset = "synthetic";
  // Directory written by `styleprobe scenario`; supplies backends and the
  // ground truth when the specs below say "scenario".
  std::optional<std::string> scenario;
  // {"kind": "scenario"} | {"kind": "synthetic", "config": {...}} |
  // {"kind": "external", "command": [...]}
  Json generator = Json{{"kind", "scenario"}};
  // {"kind": "scenario"} | {"kind": "toy", "path": ...} |
  // {"kind": "external", "command": [...]}
  Json sut = Json{{"kind", "scenario"}};
  std::vector<std::uint64_t> seeds;
  double truncation = 0.7;
  std::size_t target = 0;
  ScreeningConfig screening;
  std::size_t k_coarse_mid = 15;
  std::size_t k_fine = 5;
  OracleSpec oracle;
  AttributionConfig attribution;
  RepairStageConfig repair;
  std::size_t report_top_n = 10;

  // Runtime settings; not part of the config hash.
  std::string output_dir = "styleprobe-out";
  std::size_t workers = 1;

  void validate() const;
};

// Replaces ${NAME} with the environment value. Unset variables are a config
// error; "$${" escapes a literal "${".
std::string interpolate_env(const std::string& text);
Json interpolate_env(const Json& value);

// Seeds: either an explicit list or {"count": n, "start": s}.
PipelineConfig pipeline_config_from_json(const Json& j);
// `with_runtime` adds output_dir and workers. Credentials are always
// redacted.
Json to_json(const PipelineConfig& config, bool with_runtime = false);

// Preset defaults, overridden by the file; keys the file omits keep the
// preset's values.
Json preset_json(const std::string& name);
std::vector<std::string> preset_names();
// `overrides` (command-line flags) are merged last.
PipelineConfig load_pipeline_config(const std::filesystem::path& path,
                                    const Json& overrides = Json::object());
PipelineConfig pipeline_config_from_preset(const std::string& name,
                                           const Json& overrides = Json::object());

// SHA-256 over the canonical (sorted-key) JSON of the hashed settings.
std::string config_hash(const PipelineConfig& config);

// Hash over the settings that a stage and everything upstream of it read.
// Later stages can be rerun with new settings without invalidating earlier
// artifacts.
std::string stage_hash(const PipelineConfig& config, std::string_view stage);

}  // namespace styleprobe
