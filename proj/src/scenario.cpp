#include "styleprobe/scenario.hpp"

#include <random>

#include "styleprobe/util.hpp"

namespace styleprobe {

void ScenarioSpec::validate() const {
  if (!(spurious_strength >= 0.0 && spurious_strength <= 1.0)) {
    throw Error(ErrorCode::kConfig, "spurious_strength must lie in [0, 1]");
  }
  if (n_train < 2) throw Error(ErrorCode::kConfig, "n_train must be at least 2");
  if (!(margin_fraction > 0.0 && margin_fraction < 1.0)) {
    throw Error(ErrorCode::kConfig, "margin_fraction must lie in (0, 1)");
  }
  generator.validate();
}

Json to_json(const ScenarioSpec& spec) {
  return Json{{"spurious_strength", spec.spurious_strength},
              {"n_train", spec.n_train},
              {"rng_seed", spec.rng_seed},
              {"generator", to_json(spec.generator)},
              {"margin_fraction", spec.margin_fraction},
              {"min_train_accuracy", spec.min_train_accuracy}};
}

ScenarioSpec scenario_spec_from_json(const Json& j) {
  ScenarioSpec spec;
  spec.spurious_strength = j.value("spurious_strength", spec.spurious_strength);
  spec.n_train = j.value("n_train", spec.n_train);
  spec.rng_seed = j.value("rng_seed", spec.rng_seed);
  if (j.contains("generator")) spec.generator = synthetic_config_from_json(j["generator"]);
  spec.margin_fraction = j.value("margin_fraction", spec.margin_fraction);
  spec.min_train_accuracy = j.value("min_train_accuracy", spec.min_train_accuracy);
  spec.validate();
  return spec;
}

std::vector<FeatureProbe> scenario_probes() {
  // Colour weights sum to zero, so a uniform brightness shift cancels.
  return {
      {"object", 0.0, 0.0, 0.1, {1.0, -0.5, -0.5}},
      {"cue", 0.62, -0.6, 0.08, {-1.0, 0.5, 0.5}},
  };
}

std::vector<LabeledImage> sample_scenario_images(const ScenarioSpec& spec,
                                                 SyntheticGenerator& generator,
                                                 std::size_t count, std::uint64_t stream) {
  std::mt19937_64 rng(mix_seed(spec.rng_seed, stream));
  const double anchor = spec.generator.anchor;
  std::uniform_real_distribution<double> magnitude(spec.margin_fraction * anchor, anchor);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution copies_label(spec.spurious_strength);
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = rng();
    const bool positive = coin(rng);
    const bool cue_on = copies_label(rng) ? positive : coin(rng);
    StyleState s = generator.sample_style_state(seed, 1.0);
    s = s.with_value(kObjectPresence, (positive ? 1.0 : -1.0) * magnitude(rng));
    s = s.with_value(kCuePresence, (cue_on ? 1.0 : -1.0) * magnitude(rng));
    out.push_back({generator.synthesize(s), positive ? 1u : 0u});
  }
  return out;
}

Scenario build_scenario(const ScenarioSpec& spec) {
  spec.validate();
  SyntheticGenerator generator(spec.generator);
  auto train = sample_scenario_images(spec, generator, spec.n_train, 0);
  ToyFeatureSut sut(scenario_probes(), 1);
  sut.fit_normalization(train);
  sut.fit_head(train, 1.0, 400, 1e-3);
  const double acc = accuracy(sut, train);
  if (acc < spec.min_train_accuracy) {
    throw Error(ErrorCode::kValidation,
                "scenario: toy SUT reached train accuracy " + std::to_string(acc) +
                    " < " + std::to_string(spec.min_train_accuracy) +
                    "; try another rng_seed or a larger n_train");
  }
  return Scenario{spec, std::move(generator), std::move(sut),
                  GroundTruthMap::for_synthetic(spec.generator), acc};
}

namespace {

Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
}

}  // namespace

void save_scenario(const Scenario& scenario, const std::filesystem::path& directory) {
  Json spec = to_json(scenario.spec);
  spec["train_accuracy"] = scenario.train_accuracy;
  write_text_file(directory / "scenario.json", spec.dump(2) + "\n");
  write_text_file(directory / "generator.json",
                  Json{{"kind", "synthetic"}, {"config", to_json(scenario.spec.generator)}}
                          .dump(2) +
                      "\n");
  write_text_file(directory / "sut.json", scenario.sut.to_json().dump(2) + "\n");
  write_text_file(directory / "ground_truth.json",
                  to_json(scenario.ground_truth).dump(2) + "\n");
}

Scenario load_scenario(const std::filesystem::path& directory) {
  const Json spec_json = read_json(directory / "scenario.json");
  ScenarioSpec spec = scenario_spec_from_json(spec_json);
  const Json gen = read_json(directory / "generator.json");
  spec.generator = synthetic_config_from_json(gen.at("config"));
  ToyFeatureSut sut = ToyFeatureSut::from_json(read_json(directory / "sut.json"));
  GroundTruthMap truth = ground_truth_from_json(read_json(directory / "ground_truth.json"));
  return Scenario{spec, SyntheticGenerator(spec.generator), std::move(sut),
                  std::move(truth), spec_json.value("train_accuracy", 0.0)};
}

}  // namespace styleprobe
