#include <atomic>
#include <fstream>

#include "doctest.h"
#include "styleprobe/pipeline.hpp"
#include "styleprobe/util.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;
using testing::TempDir;

// A built scenario on disk, shared by the tests in this file.
const std::filesystem::path& scenario_dir() {
  static TempDir dir;
  static const bool saved = [] {
    save_scenario(build_scenario(ScenarioSpec{}), dir.path() / "scenario");
    return true;
  }();
  (void)saved;
  static const auto path = dir.path() / "scenario";
  return path;
}

PipelineConfig small_config(const std::filesystem::path& out) {
  return pipeline_config_from_preset(
      "synthetic", Json{{"scenario", scenario_dir().string()},
                        {"output_dir", out.string()},
                        {"seeds", {{"count", 6}}},
                        {"screening", {{"method", "grad"}}}});
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(hits.size(), 4, [&](std::size_t i, std::size_t) { hits[i]++; });
  for (auto& h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i, std::size_t) {
                                 if (i == 5) throw Error(ErrorCode::kBackend, "boom");
                               }),
                  Error);
}

TEST_CASE("stages need their upstream artifacts") {
  TempDir out;
  Pipeline p(small_config(out.path()));
  try {
    p.mine();
    FAIL("mine ran without screen output");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingArtifact);
    CHECK(std::string(e.what()).find("styleprobe screen") != std::string::npos);
  }
}

TEST_CASE("stale artifacts are rejected, unrelated changes are not") {
  TempDir out;
  Pipeline(small_config(out.path())).screen();

  PipelineConfig repair_changed = small_config(out.path());
  repair_changed.repair.training.learning_rate = 1e-3;
  Pipeline(repair_changed).mine();

  PipelineConfig truncation_changed = small_config(out.path());
  truncation_changed.truncation = 0.5;
  try {
    Pipeline(truncation_changed).mine();
    FAIL("mine accepted screen output from another truncation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingArtifact);
    CHECK(std::string(e.what()).find("different config") != std::string::npos);
  }
}

TEST_CASE("full run writes every artifact with provenance") {
  TempDir out;
  Pipeline p(small_config(out.path()));
  CHECK(p.run_all());
  const auto dir = out.path();
  for (const char* f :
       {"config.json", "screen/summary.json", "mine/probes.jsonl", "mine/summary.json",
        "attribute/verdicts.json", "explore/probes.jsonl", "explore/summary.json",
        "repair/manifest.jsonl", "repair/summary.json", "report/metrics.json",
        "report/metrics.csv", "report/metrics.txt", "report/layer_bands.svg"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  }
  const Json metrics = Json::parse(read_text_file(dir / "report/metrics.json"));
  CHECK(metrics["config_hash"] == p.config_hash());
  CHECK(metrics["stage"] == "report");
  CHECK(metrics["stage_hash"] == stage_hash(p.config(), "report"));
  CHECK(metrics["deterministic"] == true);

  const Json verdicts = Json::parse(read_text_file(dir / "attribute/verdicts.json"));
  for (const auto& v : verdicts["verdicts"]) {
    const ChannelRef ch = channel_ref_from_json(v["channel"]);
    CHECK((v["label"] == "RELEVANT") == (ch == kObjectPresence));
  }
}

TEST_CASE("metrics table and CSV") {
  MetricReport r;
  r.r_relevance = r_relevance(13, 7);
  r.counts = {13, 7, 25};
  r.ms_ssim = 0.8123;
  r.ms_ssim_std = 0.05;
  r.ms_ssim_scales = 3;
  const std::string table = format_metrics_table(r);
  CHECK(table.find("R_Relevance          0.65") != std::string::npos);
  CHECK(table.find("0.8123 +/- 0.0500") != std::string::npos);
  CHECK(table.find("d2-image             n/a") != std::string::npos);

  MetricReport none;
  CHECK(format_metrics_table(none).find("R_Relevance          undefined") != std::string::npos);

  const std::string csv = metrics_csv("smoothgrad", "synthetic", r);
  const auto nl = csv.find('\n');
  CHECK(csv.substr(0, nl).find("method,task,r_relevance") == 0);
  CHECK(csv.substr(nl + 1).find("smoothgrad,synthetic,0.65,13,7,25,0.812300,0.050000,3,,") == 0);
}

TEST_CASE("layer histogram") {
  const std::string svg = layer_histogram_svg(
      {{0, LayerBand::kCoarse, 4, 0}, {1, LayerBand::kMiddle, 0, 2}, {2, LayerBand::kFine, 1, 1}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("height=\"160\" fill=\"#3b6fb6\"") != std::string::npos);  // tallest bar
  CHECK(svg.find("height=\"80\" fill=\"#e08a2c\"") != std::string::npos);
  CHECK(svg.find(">L2<") != std::string::npos);
}

}  // namespace
}  // namespace styleprobe
