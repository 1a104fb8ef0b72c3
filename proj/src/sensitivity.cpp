#include "styleprobe/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "styleprobe/util.hpp"

namespace styleprobe {

std::string_view to_string(SensitivityMethod method) {
  switch (method) {
    case SensitivityMethod::kGrad: return "grad";
    case SensitivityMethod::kSmoothGrad: return "smoothgrad";
    case SensitivityMethod::kFda: return "fda";
  }
  return "grad";
}

SensitivityMethod sensitivity_method_from_string(std::string_view text) {
  for (auto m : {SensitivityMethod::kGrad, SensitivityMethod::kSmoothGrad,
                 SensitivityMethod::kFda}) {
    if (to_string(m) == text) return m;
  }
  throw Error(ErrorCode::kConfig, "unknown screening method '" + std::string(text) +
                                      "'; valid methods: grad, smoothgrad, fda");
}

Json to_json(const SensitivityMap& map) {
  return Json{{"method", to_string(map.method)},
              {"target", map.target},
              {"params", map.params},
              {"scores", map.scores}};
}

SensitivityMap sensitivity_map_from_json(const Json& j) {
  SensitivityMap map;
  map.method = sensitivity_method_from_string(j.at("method").get<std::string>());
  map.target = j.at("target").get<std::size_t>();
  map.params = j.value("params", Json::object());
  map.scores = j.at("scores").get<std::vector<std::vector<double>>>();
  return map;
}

namespace {

void check_finite(const SensitivityMap& map) {
  for (const auto& layer : map.scores) {
    for (double v : layer) {
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kBackend, "sensitivity produced a non-finite score");
      }
    }
  }
}

}  // namespace

SensitivityMap grad_saliency(const StyleState& state, Generator& generator, Sut& sut,
                             std::size_t target) {
  check_topology(generator.topology(), state);
  SensitivityMap map;
  map.method = SensitivityMethod::kGrad;
  map.target = target;
  map.scores = gradient_of_composite(state, generator, sut, target).layers();
  check_finite(map);
  return map;
}

SensitivityMap smoothgrad(const StyleState& state, Generator& generator, Sut& sut,
                          std::size_t target, const SmoothGradParams& params) {
  if (params.samples == 0) {
    throw Error(ErrorCode::kValidation, "SmoothGrad needs N >= 1");
  }
  if (params.sigma && !(*params.sigma > 0.0)) {
    throw Error(ErrorCode::kValidation, "SmoothGrad sigma must be > 0");
  }
  if (!params.sigma && !(params.sigma_scale > 0.0)) {
    throw Error(ErrorCode::kValidation, "SmoothGrad sigma_scale must be > 0");
  }
  check_topology(generator.topology(), state);

  std::vector<double> sigmas;
  if (params.sigma) {
    sigmas.assign(state.num_layers(), *params.sigma);
  } else {
    sigmas = generator.layer_stddev();
    for (double& s : sigmas) s *= params.sigma_scale;
  }

  // Noise stream depends on the configured seed and the style seed, so each
  // sample gets its own reproducible draws.
  std::mt19937_64 rng(mix_seed(params.rng_seed, state.seed()));
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<double>> sum;
  for (const auto& layer : state.layers()) sum.emplace_back(layer.size(), 0.0);

  for (std::size_t j = 0; j < params.samples; ++j) {
    auto noisy = state.layers();
    for (std::size_t l = 0; l < noisy.size(); ++l) {
      for (auto& v : noisy[l]) v += sigmas[l] * unit(rng);
    }
    StyleState sample(std::move(noisy), state.seed(), state.truncation());
    StyleState g = gradient_of_composite(sample, generator, sut, target);
    for (std::size_t l = 0; l < sum.size(); ++l) {
      auto gl = g.layer(l);
      for (std::size_t c = 0; c < sum[l].size(); ++c) sum[l][c] += gl[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(params.samples);
  for (auto& layer : sum) {
    for (auto& v : layer) v *= inv;
  }

  SensitivityMap map;
  map.method = SensitivityMethod::kSmoothGrad;
  map.target = target;
  map.scores = std::move(sum);
  map.params = Json{{"samples", params.samples},
                    {"sigma", sigmas},
                    {"rng_seed", params.rng_seed}};
  check_finite(map);
  return map;
}

SensitivityMap fda(const StyleState& state, Generator& generator, Sut& sut,
                   std::size_t target, const FdaParams& params) {
  if (!(params.step != 0.0 && std::isfinite(params.step))) {
    throw Error(ErrorCode::kValidation, "FDA step must be finite and non-zero");
  }
  check_topology(generator.topology(), state);
  const double baseline = sut.forward(generator.synthesize(state)).values()[target];

  SensitivityMap map;
  map.method = SensitivityMethod::kFda;
  map.target = target;
  map.params = Json{{"step", params.step}};
  for (std::size_t l = 0; l < state.num_layers(); ++l) {
    std::vector<double> layer(state.layer(l).size());
    for (std::size_t c = 0; c < layer.size(); ++c) {
      StyleState shifted = state.with_offset({l, c}, params.step);
      double y = sut.forward(generator.synthesize(shifted)).values()[target];
      layer[c] = (y - baseline) / params.step;
    }
    map.scores.push_back(std::move(layer));
  }
  check_finite(map);
  return map;
}

Json to_json(const CandidateSet& set) {
  Json entries = Json::array();
  for (const auto& e : set.entries) {
    entries.push_back({{"channel", to_json(e.channel)}, {"score", e.score}});
  }
  return Json{{"k_coarse_mid", set.k_coarse_mid}, {"k_fine", set.k_fine},
              {"entries", entries}};
}

CandidateSet candidate_set_from_json(const Json& j) {
  CandidateSet set;
  set.k_coarse_mid = j.at("k_coarse_mid").get<std::size_t>();
  set.k_fine = j.at("k_fine").get<std::size_t>();
  for (const auto& e : j.at("entries")) {
    set.entries.push_back({channel_ref_from_json(e.at("channel")),
                           e.at("score").get<double>()});
  }
  return set;
}

CandidateSet select_candidates(const SensitivityMap& map, const GeneratorTopology& topology,
                               std::size_t k_coarse_mid, std::size_t k_fine) {
  if (map.scores.size() != topology.layer_widths.size()) {
    throw Error(ErrorCode::kTopology, "sensitivity map does not match topology");
  }
  CandidateSet set;
  set.k_coarse_mid = k_coarse_mid;
  set.k_fine = k_fine;
  for (std::size_t l = 0; l < map.scores.size(); ++l) {
    const auto& scores = map.scores[l];
    if (scores.size() != topology.layer_widths[l]) {
      throw Error(ErrorCode::kTopology,
                  "sensitivity layer " + std::to_string(l) + " has wrong width");
    }
    const std::size_t budget =
        topology.layer_bands[l] == LayerBand::kFine ? k_fine : k_coarse_mid;
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < scores.size(); ++c) {
      if (scores[c] != 0.0) order.push_back(c);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(scores[a]) > std::abs(scores[b]);
    });
    order.resize(std::min(order.size(), budget));
    for (std::size_t c : order) set.entries.push_back({{l, c}, scores[c]});
  }
  return set;
}

}  // namespace styleprobe
