// Command-line front end: one subcommand per pipeline stage.

#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "styleprobe/adapter.hpp"
#include "styleprobe/config.hpp"
#include "styleprobe/pipeline.hpp"
#include "styleprobe/scenario.hpp"
#include "styleprobe/util.hpp"

namespace sp = styleprobe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;
constexpr int kExitMissingArtifact = 4;
constexpr int kExitManifestOnly = 5;

int exit_code_for(sp::ErrorCode code) {
  switch (code) {
    case sp::ErrorCode::kConfig:
    case sp::ErrorCode::kSchema:
    case sp::ErrorCode::kValidation:
      return kExitConfig;
    case sp::ErrorCode::kBackend:
    case sp::ErrorCode::kDecode:
    case sp::ErrorCode::kEncode:
      return kExitBackend;
    case sp::ErrorCode::kMissingArtifact:
      return kExitMissingArtifact;
    default:
      return kExitOther;
  }
}

// Flags shared by the stage commands. Unset flags leave the config alone.
struct StageFlags {
  std::string config;
  std::string preset = "synthetic";
  std::string scenario;
  std::string output;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> seeds;
  std::optional<std::uint64_t> seed_start;
  std::string method;
  std::optional<std::size_t> samples;
  std::optional<double> sigma_scale;
  std::optional<double> fda_step;
  std::optional<double> epsilon;
  std::optional<double> tau;
  std::string drop;
  std::optional<double> truncation;
  std::optional<std::size_t> k_coarse_mid;
  std::optional<std::size_t> k_fine;
  std::optional<std::size_t> votes;
  std::string backend;
  std::optional<std::size_t> top_n;
};

void add_stage_flags(CLI::App* cmd, StageFlags& f) {
  cmd->add_option("-c,--config", f.config, "Config file (JSON); flags override its values");
  cmd->add_option("--preset", f.preset, "Preset used when no config file is given")
      ->check(CLI::IsMember(sp::preset_names()));
  cmd->add_option("--scenario", f.scenario, "Scenario directory from `styleprobe scenario`");
  cmd->add_option("-o,--output", f.output, "Output directory (default styleprobe-out)");
  cmd->add_option("-j,--workers", f.workers, "Seed-level worker threads (default 1)");
  cmd->add_option("--seeds", f.seeds, "Number of seeds (default 50)");
  cmd->add_option("--seed-start", f.seed_start, "First seed (default 0)");
  cmd->add_option("--method", f.method, "Screening method: grad | smoothgrad | fda");
  cmd->add_option("--samples", f.samples, "SmoothGrad sample count N (default 10)");
  cmd->add_option("--sigma-scale", f.sigma_scale,
                  "SmoothGrad noise as a fraction of per-layer stddev (default 0.1)");
  cmd->add_option("--fda-step", f.fda_step, "FDA forward-difference step (default 0.1)");
  cmd->add_option("--epsilon", f.epsilon, "Perturbation magnitude epsilon (default 10)");
  cmd->add_option("--tau", f.tau, "Confidence threshold as a fraction of |y[t]| (default 0.4)");
  cmd->add_option("--drop", f.drop, "Drop convention: signed | absolute (default signed)");
  cmd->add_option("--truncation", f.truncation, "Truncation psi (default 0.7; cars 0.5)");
  cmd->add_option("--k-coarse-mid", f.k_coarse_mid,
                  "Candidates per coarse/middle layer (default 15)");
  cmd->add_option("--k-fine", f.k_fine, "Candidates per fine layer (default 5)");
  cmd->add_option("--votes", f.votes, "Judgment samples per channel (default 5)");
  cmd->add_option("--backend", f.backend, "Attribution backend: ground_truth | vlm_http");
  cmd->add_option("--top-n", f.top_n, "Rows in the report galleries (default 10)");
}

sp::Json overrides_from(const StageFlags& f) {
  sp::Json o = sp::Json::object();
  if (!f.scenario.empty()) o["scenario"] = f.scenario;
  if (!f.output.empty()) o["output_dir"] = f.output;
  if (f.workers) o["workers"] = *f.workers;
  if (f.seeds || f.seed_start) {
    o["seeds"] = sp::Json::object();
    if (f.seeds) o["seeds"]["count"] = *f.seeds;
    if (f.seed_start) o["seeds"]["start"] = *f.seed_start;
  }
  if (!f.method.empty()) o["screening"]["method"] = f.method;
  if (f.samples) o["screening"]["samples"] = *f.samples;
  if (f.sigma_scale) o["screening"]["sigma_scale"] = *f.sigma_scale;
  if (f.fda_step) o["screening"]["fda_step"] = *f.fda_step;
  if (f.epsilon) o["oracle"]["epsilon"] = *f.epsilon;
  if (f.tau) o["oracle"]["tau_fraction"] = *f.tau;
  if (!f.drop.empty()) o["oracle"]["drop_convention"] = f.drop;
  if (f.truncation) o["truncation"] = *f.truncation;
  if (f.k_coarse_mid) o["budgets"]["k_coarse_mid"] = *f.k_coarse_mid;
  if (f.k_fine) o["budgets"]["k_fine"] = *f.k_fine;
  if (f.votes) o["attribution"]["vote_samples"] = *f.votes;
  if (!f.backend.empty()) o["attribution"]["backend"] = f.backend;
  if (f.top_n) o["report"]["top_n"] = *f.top_n;
  return o;
}

sp::PipelineConfig resolve_config(const StageFlags& f) {
  const sp::Json overrides = overrides_from(f);
  if (!f.config.empty()) return sp::load_pipeline_config(f.config, overrides);
  return sp::pipeline_config_from_preset(f.preset, overrides);
}

struct ScenarioFlags {
  std::string out = "scenario";
  double strength = 1.0;
  std::size_t n_train = 400;
  std::uint64_t seed = 0;
};

struct ServeFlags {
  std::string scenario;
};

std::unique_ptr<sp::Generator> serve_generator(const ServeFlags& f) {
  if (f.scenario.empty()) return std::make_unique<sp::SyntheticGenerator>();
  return std::make_unique<sp::SyntheticGenerator>(
      sp::load_scenario(f.scenario).generator.config());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual probing of image classifiers through generator style channels"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  StageFlags flags;
  struct Stage {
    const char* name;
    const char* help;
  };
  const Stage stages[] = {
      {"screen", "Sensitivity screening and candidate selection per seed"},
      {"mine", "Influential channel mining with the confidence oracle"},
      {"attribute", "Relevant/spurious attribution of influential channels"},
      {"explore", "Decision-boundary search along relevant channels"},
      {"repair", "Assemble the repair set and fine-tune the SUT head"},
      {"report", "Metric tables, histograms and image grids"},
      {"run-all", "All stages in order"},
  };
  std::vector<CLI::App*> stage_cmds;
  for (const auto& s : stages) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_stage_flags(cmd, flags);
    stage_cmds.push_back(cmd);
  }

  ScenarioFlags scenario_flags;
  auto* scenario_cmd = app.add_subcommand("scenario", "Build and save the synthetic scenario");
  scenario_cmd->add_option("-o,--out", scenario_flags.out, "Output directory");
  scenario_cmd->add_option("--strength", scenario_flags.strength, "Spurious cue strength in [0,1]");
  scenario_cmd->add_option("--n-train", scenario_flags.n_train, "Training samples");
  scenario_cmd->add_option("--seed", scenario_flags.seed, "Scenario RNG seed");

  ServeFlags serve_flags;
  auto* serve_gen = app.add_subcommand(
      "serve-generator", "Serve the synthetic generator on stdin/stdout (adapter protocol)");
  serve_gen->add_option("--scenario", serve_flags.scenario, "Scenario directory");
  auto* serve_sut =
      app.add_subcommand("serve-sut", "Serve a scenario's toy SUT on stdin/stdout");
  serve_sut->add_option("--scenario", serve_flags.scenario, "Scenario directory")->required();

  CLI11_PARSE(app, argc, argv);
  if (verbose) sp::set_log_level(sp::LogLevel::kDebug);
  if (quiet) sp::set_log_level(sp::LogLevel::kWarning);

  try {
    if (scenario_cmd->parsed()) {
      sp::ScenarioSpec spec;
      spec.spurious_strength = scenario_flags.strength;
      spec.n_train = scenario_flags.n_train;
      spec.rng_seed = scenario_flags.seed;
      const sp::Scenario s = sp::build_scenario(spec);
      sp::save_scenario(s, scenario_flags.out);
      std::printf("scenario written to %s (train accuracy %.4f)\n", scenario_flags.out.c_str(),
                  s.train_accuracy);
      return kExitOk;
    }
    if (serve_gen->parsed() || serve_sut->parsed()) {
      sp::FrameChannel channel(0, 1);
      if (serve_gen->parsed()) {
        auto gen = serve_generator(serve_flags);
        sp::serve_adapter(channel, gen.get(), nullptr);
      } else {
        sp::ToyFeatureSut sut = sp::load_scenario(serve_flags.scenario).sut;
        sp::serve_adapter(channel, nullptr, &sut);
      }
      return kExitOk;
    }

    sp::Pipeline pipeline(resolve_config(flags));
    sp::log_info("config hash " + pipeline.config_hash());
    bool finetuned = true;
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "screen") pipeline.screen();
    if (name == "mine") pipeline.mine();
    if (name == "attribute") pipeline.attribute();
    if (name == "explore") pipeline.explore();
    if (name == "repair") finetuned = pipeline.repair();
    if (name == "report") pipeline.report();
    if (name == "run-all") finetuned = pipeline.run_all();
    if (name == "report" || name == "run-all") {
      std::fputs(sp::read_text_file(pipeline.output_dir() / "report" / "metrics.txt").c_str(),
                 stdout);
    }
    if (!finetuned) {
      sp::log_warning("SUT does not support fine-tuning; wrote the repair manifest only");
      return kExitManifestOnly;
    }
    return kExitOk;
  } catch (const sp::Error& e) {
    std::cerr << "error (" << sp::to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
