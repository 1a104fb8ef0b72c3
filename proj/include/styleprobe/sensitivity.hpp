#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "styleprobe/core.hpp"
#include "styleprobe/genbackend.hpp"
#include "styleprobe/serialization.hpp"
#include "styleprobe/sut.hpp"

namespace styleprobe {

enum class SensitivityMethod { kGrad, kSmoothGrad, kFda };

std::string_view to_string(SensitivityMethod method);
// Throws kConfig listing the valid names.
SensitivityMethod sensitivity_method_from_string(std::string_view text);

struct SmoothGradParams {
  std::size_t samples = 10;
  // Isotropic noise scale. When unset, each layer uses
  // sigma_scale * generator.layer_stddev()[layer].
  std::optional<double> sigma;
  double sigma_scale = 0.1;
  std::uint64_t rng_seed = 0;
};

struct FdaParams {
  double step = 0.1;
};

// Signed per-channel scores with the shape of the style state.
struct SensitivityMap {
  std::vector<std::vector<double>> scores;
  SensitivityMethod method = SensitivityMethod::kGrad;
  std::size_t target = 0;
  Json params = Json::object();

  double at(const ChannelRef& ref) const { return scores.at(ref.layer).at(ref.channel); }
};

Json to_json(const SensitivityMap& map);
SensitivityMap sensitivity_map_from_json(const Json& j);

SensitivityMap grad_saliency(const StyleState& state, Generator& generator, Sut& sut,
                             std::size_t target);

SensitivityMap smoothgrad(const StyleState& state, Generator& generator, Sut& sut,
                          std::size_t target, const SmoothGradParams& params);

// One-sided differences: one SUT forward per channel plus one baseline.
SensitivityMap fda(const StyleState& state, Generator& generator, Sut& sut,
                   std::size_t target, const FdaParams& params);

struct Candidate {
  ChannelRef channel;
  double score = 0.0;
};

struct CandidateSet {
  // Layer ascending; within a layer by descending |score|, ties by channel.
  std::vector<Candidate> entries;
  std::size_t k_coarse_mid = 15;
  std::size_t k_fine = 5;

  bool empty() const { return entries.empty(); }
};

Json to_json(const CandidateSet& set);
CandidateSet candidate_set_from_json(const Json& j);

// Per-layer top-k by |score|; COARSE and MIDDLE layers use k_coarse_mid, FINE
// layers use k_fine. Zero scores are never selected.
CandidateSet select_candidates(const SensitivityMap& map, const GeneratorTopology& topology,
                               std::size_t k_coarse_mid, std::size_t k_fine);

}  // namespace styleprobe
