#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "doctest.h"
#include "styleprobe/scenario.hpp"
#include "styleprobe/sensitivity.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;

// y = w * mean(base + sum_i s_i p_i) + b, so dy/ds_i = w * mean(p_i).
struct LinearComposite {
  std::vector<std::size_t> widths{3, 2, 2};
  ImageShape shape{4, 4, 1};
  std::vector<ImageTensor> patterns;
  double w = 2.5, b = -0.4;

  LinearComposite() {
    for (std::size_t i = 0; i < 7; ++i) {
      patterns.push_back(testing::random_image(shape, 100 + i));
      for (auto& v : patterns.back().mutable_data()) v = 0.02 * (v - 0.3);
    }
  }
  AffineGenerator generator() const {
    return AffineGenerator(widths, ImageTensor::filled(shape, 0.5), patterns);
  }
  double analytic(std::size_t flat) const {
    double s = 0.0;
    for (double v : patterns[flat].data()) s += v;
    return w * s / static_cast<double>(shape.size());
  }
};

TEST_CASE("grad saliency on the linear composite equals the closed form") {
  LinearComposite lc;
  auto gen = lc.generator();
  LinearMeanSut sut(lc.w, lc.b);
  const StyleState s = gen.sample_style_state(1, 1.0);
  const SensitivityMap map = grad_saliency(s, gen, sut, 0);
  CHECK(map.method == SensitivityMethod::kGrad);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(map.at(s.ref_of_flat(i)) == doctest::Approx(lc.analytic(i)).epsilon(1e-9));
  }
}

TEST_CASE("smoothgrad and fda agree with grad on the linear composite") {
  LinearComposite lc;
  auto gen = lc.generator();
  LinearMeanSut sut(lc.w, lc.b);
  const StyleState s = gen.sample_style_state(2, 1.0);
  const SensitivityMap g = grad_saliency(s, gen, sut, 0);
  SmoothGradParams sg;
  sg.samples = 4;
  sg.sigma = 0.05;
  const SensitivityMap m = smoothgrad(s, gen, sut, 0, sg);
  const SensitivityMap f = fda(s, gen, sut, 0, FdaParams{0.1});
  for (std::size_t i = 0; i < 7; ++i) {
    const ChannelRef ref = s.ref_of_flat(i);
    CHECK(std::abs(m.at(ref) - g.at(ref)) < 1e-9);
    CHECK(std::abs(f.at(ref) - g.at(ref)) < 1e-9);
  }
}

TEST_CASE("fda uses one forward per channel plus a baseline") {
  Scenario sc = build_scenario(ScenarioSpec{});
  CountingSut counter(sc.sut);
  const StyleState s = sc.generator.sample_style_state(3, 0.7);
  fda(s, sc.generator, counter, 0, FdaParams{});
  CHECK(counter.forward_calls() == s.total_channels() + 1);
  CHECK(counter.gradient_calls() == 0);
}

TEST_CASE("smoothgrad is reproducible and scales noise per layer") {
  Scenario sc = build_scenario(ScenarioSpec{});
  const StyleState s = sc.generator.sample_style_state(4, 0.7);
  SmoothGradParams p;
  const auto a = smoothgrad(s, sc.generator, sc.sut, 0, p);
  const auto b = smoothgrad(s, sc.generator, sc.sut, 0, p);
  CHECK(a.scores == b.scores);
  CHECK(a.params.at("samples") == 10);
  p.rng_seed = 99;
  CHECK(smoothgrad(s, sc.generator, sc.sut, 0, p).scores != a.scores);
  SmoothGradParams zero;
  zero.sigma = 0.0;
  CHECK(error_code_of([&] { smoothgrad(s, sc.generator, sc.sut, 0, zero); }) ==
        ErrorCode::kValidation);
}

TEST_CASE("gradients need a differentiable SUT") {
  LinearComposite lc;
  auto gen = lc.generator();
  DetectionSut det([](const ImageTensor&) { return std::vector<Detection>{}; }, 0);
  const StyleState s = gen.sample_style_state(0, 1.0);
  CHECK(error_code_of([&] { grad_saliency(s, gen, det, 0); }) ==
        ErrorCode::kNotDifferentiable);
  // FDA only needs forwards.
  const auto f = fda(s, gen, det, 0, FdaParams{});
  CHECK(f.at({0, 0}) == 0.0);
}

TEST_CASE("unknown method names list the valid ones") {
  try {
    sensitivity_method_from_string("integrated");
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
    const std::string msg = e.what();
    CHECK(msg.find("grad") != std::string::npos);
    CHECK(msg.find("smoothgrad") != std::string::npos);
    CHECK(msg.find("fda") != std::string::npos);
  }
  CHECK(sensitivity_method_from_string("fda") == SensitivityMethod::kFda);
}

// Reference selection: sort each layer by |score| (ties to the lower channel),
// drop zeros, keep the band budget.
std::vector<ChannelRef> reference_selection(const SensitivityMap& map,
                                            const GeneratorTopology& topo, std::size_t kcm,
                                            std::size_t kf) {
  std::vector<ChannelRef> out;
  for (std::size_t l = 0; l < map.scores.size(); ++l) {
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < map.scores[l].size(); ++c) {
      if (map.scores[l][c] != 0.0) idx.push_back(c);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(map.scores[l][a]) > std::abs(map.scores[l][b]);
    });
    const std::size_t k = topo.layer_bands[l] == LayerBand::kFine ? kf : kcm;
    for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) out.push_back({l, idx[i]});
  }
  return out;
}

TEST_CASE("candidate selection matches the reference and obeys budgets") {
  GeneratorTopology topo;
  topo.layer_widths = {20, 20, 12};
  topo.layer_bands = {LayerBand::kCoarse, LayerBand::kMiddle, LayerBand::kFine};
  topo.image_shape = {8, 8, 3};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    SensitivityMap map;
    for (auto w : topo.layer_widths) {
      map.scores.emplace_back(w);
      for (auto& v : map.scores.back()) {
        v = n(rng);
        if (v > 1.2) v = 0.0;
        if (v < -1.5) v = -1.0;  // ties in |score|
      }
    }
    const auto set = select_candidates(map, topo, 15, 5);
    std::vector<ChannelRef> got;
    for (const auto& c : set.entries) got.push_back(c.channel);
    CHECK(got == reference_selection(map, topo, 15, 5));
    std::size_t per_layer[3] = {0, 0, 0};
    for (const auto& c : set.entries) {
      ++per_layer[c.channel.layer];
      CHECK(c.score == map.at(c.channel));
    }
    CHECK(per_layer[0] <= 15);
    CHECK(per_layer[1] <= 15);
    CHECK(per_layer[2] <= 5);
  }
}

TEST_CASE("all-zero sensitivity gives an empty candidate set") {
  GeneratorTopology topo;
  topo.layer_widths = {2};
  topo.layer_bands = {LayerBand::kCoarse};
  topo.image_shape = {4, 4, 1};
  SensitivityMap map;
  map.scores = {{0.0, 0.0}};
  CHECK(select_candidates(map, topo, 15, 5).empty());
}

TEST_CASE("sensitivity and candidate JSON round trip") {
  SensitivityMap map;
  map.scores = {{0.5, -1.0}, {2.0}};
  map.method = SensitivityMethod::kFda;
  map.params = {{"step", 0.1}};
  const auto back = sensitivity_map_from_json(to_json(map));
  CHECK(back.scores == map.scores);
  CHECK(back.method == SensitivityMethod::kFda);
  CandidateSet set;
  set.entries = {{{0, 1}, -1.0}, {{1, 0}, 2.0}};
  const auto cs = candidate_set_from_json(to_json(set));
  REQUIRE(cs.entries.size() == 2);
  CHECK(cs.entries[1].channel == ChannelRef{1, 0});
  CHECK(cs.k_coarse_mid == 15);
}

}  // namespace
}  // namespace styleprobe
