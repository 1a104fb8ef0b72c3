#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "styleprobe/attribution.hpp"
#include "styleprobe/config.hpp"
#include "styleprobe/genbackend.hpp"
#include "styleprobe/metrics.hpp"
#include "styleprobe/scenario.hpp"
#include "styleprobe/sut.hpp"

namespace styleprobe {

// One generator + SUT pair. Workers never share a Backends instance.
struct Backends {
  std::unique_ptr<Generator> generator;
  std::unique_ptr<Sut> sut;
};

// Runs `fn(index, worker)` for index in [0, n) on `workers` threads; the
// first exception is rethrown after all threads join.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t, std::size_t)>& fn);

// Stage outputs live under the output directory:
//   config.json
//   screen/seed_<seed>.json, screen/summary.json
//   mine/probes.jsonl, mine/summary.json
//   attribute/verdicts.json (+ triptychs/, vlm_responses.jsonl)
//   explore/probes.jsonl, explore/summary.json
//   repair/manifest.jsonl, repair/summary.json, repair/originals/
//   report/metrics.json, report/metrics.csv, report/*.svg, report/*.png
//   images/<seed>_<layer>_<channel>_<phase>.png
// Every JSON artifact carries "stage" and "config_hash". Upstream artifacts
// are accepted when their "stage_hash" matches the current settings.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);
  ~Pipeline();

  const PipelineConfig& config() const { return config_; }
  const std::string& config_hash() const { return hash_; }
  std::filesystem::path output_dir() const { return config_.output_dir; }

  void screen();
  void mine();
  void attribute();
  void explore();
  // Returns false when the SUT cannot be fine-tuned (manifest-only mode).
  bool repair();
  void report();
  // All stages in order; returns repair()'s result.
  bool run_all();

  // Overrides the judgment backend (tests, custom backends).
  void set_judgment_backend(std::unique_ptr<JudgmentBackend> backend);

 private:
  Backends make_backends() const;
  JudgmentBackend& judgment();
  Json load_artifact(const std::string& stage, const std::string& file) const;
  std::vector<Json> load_jsonl_artifact(const std::string& stage, const std::string& file) const;
  // Adds "stage", "config_hash" and the stage-scoped "stage_hash".
  void stamp(Json& body, const std::string& stage) const;
  void write_json(const std::filesystem::path& relative, Json body,
                  const std::string& stage) const;

  PipelineConfig config_;
  std::string hash_;
  std::optional<Scenario> scenario_;
  std::unique_ptr<JudgmentBackend> judgment_;
};

// Text table, CSV row set and plots for a finished run.
std::string format_metrics_table(const MetricReport& report);
std::string metrics_csv(const std::string& method, const std::string& task,
                        const MetricReport& report);

struct LayerCounts {
  std::size_t layer = 0;
  LayerBand band = LayerBand::kCoarse;
  std::size_t relevant = 0;
  std::size_t spurious = 0;
};

// Grouped bar chart of relevant/spurious channel counts per layer.
std::string layer_histogram_svg(const std::vector<LayerCounts>& counts);

}  // namespace styleprobe
