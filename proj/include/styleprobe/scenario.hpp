#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "styleprobe/serialization.hpp"
#include "styleprobe/sut.hpp"
#include "styleprobe/synthetic.hpp"

namespace styleprobe {

// Object-presence classification on the synthetic renderer, with the
// secondary blob planted as a shortcut in the training distribution.
struct ScenarioSpec {
  // Probability that the cue sign copies the label in a training sample;
  // otherwise the cue is drawn independently.
  double spurious_strength = 1.0;
  std::size_t n_train = 400;
  std::uint64_t rng_seed = 0;
  SyntheticConfig generator;
  // Training samples keep |presence| and |cue| coordinates inside
  // [margin_fraction, 1] * anchor, away from the decision threshold.
  double margin_fraction = 1.0 / 3.0;
  double min_train_accuracy = 0.99;

  void validate() const;
};

Json to_json(const ScenarioSpec& spec);
ScenarioSpec scenario_spec_from_json(const Json& j);

struct Scenario {
  ScenarioSpec spec;
  SyntheticGenerator generator;
  ToyFeatureSut sut;
  GroundTruthMap ground_truth;
  double train_accuracy = 0.0;
};

// The toy SUT's probes: one on the object, one on the cue blob.
std::vector<FeatureProbe> scenario_probes();

// Labeled draw from the scenario's training distribution. `stream` selects
// an independent sample stream (0 is the training set itself).
std::vector<LabeledImage> sample_scenario_images(const ScenarioSpec& spec,
                                                 SyntheticGenerator& generator,
                                                 std::size_t count, std::uint64_t stream);

// Trains the toy SUT. Throws kValidation when the head cannot reach
// spec.min_train_accuracy.
Scenario build_scenario(const ScenarioSpec& spec);

// Directory layout: scenario.json, generator.json, sut.json, ground_truth.json.
void save_scenario(const Scenario& scenario, const std::filesystem::path& directory);
Scenario load_scenario(const std::filesystem::path& directory);

}  // namespace styleprobe
