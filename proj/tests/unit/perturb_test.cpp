#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "styleprobe/perturb.hpp"
#include "styleprobe/scenario.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;

const Scenario& scenario() {
  static const Scenario s = build_scenario(ScenarioSpec{});
  return s;
}

CandidateSet all_channels(const SensitivityMap& map) {
  CandidateSet set;
  for (std::size_t l = 0; l < map.scores.size(); ++l) {
    for (std::size_t c = 0; c < map.scores[l].size(); ++c) {
      set.entries.push_back({{l, c}, map.scores[l][c]});
    }
  }
  return set;
}

std::set<ChannelRef> channels_of(const std::vector<ProbeResult>& probes) {
  std::set<ChannelRef> out;
  for (const auto& p : probes) out.insert(p.channel);
  return out;
}

TEST_CASE("perturbation direction rule") {
  CHECK(perturbation_delta(0.3, 2.0, 10.0, TaskKind::kBinary) == -10.0);
  CHECK(perturbation_delta(0.3, -2.0, 10.0, TaskKind::kBinary) == 10.0);
  CHECK(perturbation_delta(-0.3, -2.0, 10.0, TaskKind::kBinary) == -10.0);
  CHECK(perturbation_delta(-0.3, 5.0, 10.0, TaskKind::kMulticlass) == 10.0);
  CHECK(perturbation_delta(0.3, -5.0, 4.0, TaskKind::kDetection) == -4.0);
  CHECK(error_code_of([] { perturbation_delta(0.0, 1.0, 10.0, TaskKind::kBinary); }) ==
        ErrorCode::kPrecondition);
}

TEST_CASE("threshold is strict") {
  CHECK_FALSE(exceeds_threshold(0.4, 1.0, 0.4));
  CHECK(exceeds_threshold(0.4000001, 1.0, 0.4));
  CHECK(exceeds_threshold(0.9, -2.0, 0.4));
  CHECK_FALSE(exceeds_threshold(0.8, -2.0, 0.4));
}

TEST_CASE("confidence drop conventions") {
  const LogitVector pos({2.0}), neg({-2.0});
  CHECK(confidence_drop(pos, LogitVector({0.5}), TaskKind::kBinary, DropConvention::kSigned) ==
        1.5);
  // Negative logit moving up is movement toward the boundary.
  CHECK(confidence_drop(neg, LogitVector({-0.5}), TaskKind::kBinary,
                        DropConvention::kSigned) == 1.5);
  CHECK(confidence_drop(neg, LogitVector({-3.0}), TaskKind::kBinary,
                        DropConvention::kSigned) == -1.0);
  CHECK(confidence_drop(neg, LogitVector({-3.0}), TaskKind::kBinary,
                        DropConvention::kAbsolute) == 1.0);
  const LogitVector mc({1.0, 3.0}, 1);
  CHECK(confidence_drop(mc, LogitVector({1.0, 2.0}, 1), TaskKind::kMulticlass,
                        DropConvention::kSigned) == 1.0);
  CHECK(decision_margin(LogitVector({1.0, 3.0, 2.5})) == doctest::Approx(0.5));
  CHECK(decision_margin(LogitVector({-0.7})) == doctest::Approx(0.7));
}

TEST_CASE("confidence mining equals brute-force enumeration") {
  Scenario sc = scenario();
  OracleSpec oracle;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const StyleState s = sc.generator.sample_style_state(seed, 0.7);
    const SensitivityMap map = grad_saliency(s, sc.generator, sc.sut, 0);
    const auto mined =
        recorded(channel_perturb(s, sc.generator, sc.sut, all_channels(map), oracle, 0));

    const double y = sc.sut.forward(sc.generator.synthesize(s)).target_value();
    std::set<ChannelRef> brute;
    for (std::size_t i = 0; i < s.total_channels(); ++i) {
      const ChannelRef ref = s.ref_of_flat(i);
      const double alpha = map.at(ref);
      if (alpha == 0.0) continue;
      const double sa = alpha > 0 ? 1.0 : -1.0;
      const double sy = y > 0 ? 1.0 : -1.0;
      const double delta = -10.0 * sa * sy;
      const double y2 =
          sc.sut.forward(sc.generator.synthesize(s.with_offset(ref, delta))).target_value();
      if (sy * (y - y2) > 0.4 * std::abs(y)) brute.insert(ref);
    }
    CHECK(channels_of(mined) == brute);
    for (const auto& p : mined) CHECK(p.verdict == Verdict::kInfluential);
  }
}

TEST_CASE("a higher threshold records a subset") {
  Scenario sc = scenario();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const StyleState s = sc.generator.sample_style_state(seed, 0.7);
    const auto cands = all_channels(grad_saliency(s, sc.generator, sc.sut, 0));
    OracleSpec low, high;
    high.tau_fraction = 0.6;
    const auto a = channels_of(recorded(channel_perturb(s, sc.generator, sc.sut, cands, low, 0)));
    const auto b =
        channels_of(recorded(channel_perturb(s, sc.generator, sc.sut, cands, high, 0)));
    CHECK(std::includes(a.begin(), a.end(), b.begin(), b.end()));
  }
}

TEST_CASE("empty candidate set gives no probes") {
  Scenario sc = scenario();
  const StyleState s = sc.generator.sample_style_state(0, 0.7);
  CHECK(channel_perturb(s, sc.generator, sc.sut, CandidateSet{}, OracleSpec{}, 0).empty());
}

// Two one-channel layers, constant patterns: y(delta) = y0 + delta * w * p_c.
struct AnalyticRoots {
  ImageShape shape{3, 3, 1};
  AffineGenerator gen{{1, 1},
                      ImageTensor::filled(shape, 0.5),
                      {ImageTensor::filled(shape, 0.04), ImageTensor::filled(shape, -0.02)}};
  LinearMeanSut sut{10.0, -3.8};
  StyleState state{{{0.0}, {0.0}}};
};

TEST_CASE("boundary refinement lands on the closed-form root") {
  AnalyticRoots a;
  const double y0 = a.sut.forward(a.gen.synthesize(a.state)).target_value();
  REQUIRE(y0 == doctest::Approx(1.2));
  CandidateSet cands;
  cands.entries = {{{0, 0}, 0.4}, {{1, 0}, -0.2}};
  OracleSpec oracle;
  oracle.kind = OracleKind::kMisclassification;
  const auto probes = recorded(channel_perturb(a.state, a.gen, a.sut, cands, oracle, 0));
  REQUIRE(probes.size() == 2);
  const double roots[2] = {-y0 / (10.0 * 0.04), -y0 / (10.0 * -0.02)};
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& p = probes[i];
    CHECK(p.verdict == Verdict::kMisclassified);
    REQUIRE(p.refined_delta);
    CHECK(std::abs(*p.refined_delta - roots[i]) <= 0.01 * std::abs(roots[i]));
    CHECK(predicted_label(p.perturbed_logits) != predicted_label(p.original_logits));
    CHECK(p.refinement->exact);
    CHECK(p.refinement->margin_at_star <= 1e-2);
  }
}

TEST_CASE("margin 1 - 0.5 delta refines to 2") {
  const ImageShape shape{2, 2, 1};
  AffineGenerator gen({1}, ImageTensor::filled(shape, 0.5), {ImageTensor::filled(shape, -0.05)});
  LinearMeanSut sut(10.0, -4.0);  // y = 10 * (0.5 - 0.05 delta) - 4
  const StyleState s(std::vector<std::vector<double>>{{0.0}});
  OracleSpec oracle;
  const auto r = refine_boundary(s, gen, sut, {0, 0}, 10.0, oracle);
  CHECK(std::abs(r.delta_star - 2.0) <= 0.01);
  CHECK(sut.forward(gen.synthesize(s.with_offset({0, 0}, r.delta_star))).target_value() <= 0.0);
  const double shy = r.delta_star * (1.0 - 2.0 * oracle.bisection_tolerance);
  CHECK(sut.forward(gen.synthesize(s.with_offset({0, 0}, shy))).target_value() > 0.0);
}

TEST_CASE("refinement requires a flip") {
  AnalyticRoots a;
  OracleSpec oracle;
  CHECK(error_code_of([&] { refine_boundary(a.state, a.gen, a.sut, {0, 0}, 1.0, oracle); }) ==
        ErrorCode::kPrecondition);
  CHECK(error_code_of([&] { refine_boundary(a.state, a.gen, a.sut, {0, 0}, 0.0, oracle); }) ==
        ErrorCode::kPrecondition);
}

TEST_CASE("refinement reports inexact results when iterations run out") {
  AnalyticRoots a;
  OracleSpec oracle;
  oracle.max_iterations = 1;
  oracle.bisection_tolerance = 1e-9;
  const auto r = refine_boundary(a.state, a.gen, a.sut, {0, 0}, -10.0, oracle);
  CHECK_FALSE(r.exact);
  CHECK(r.iterations == 1);
  // The returned point still flips the label.
  CHECK(a.sut.forward(a.gen.synthesize(a.state.with_offset({0, 0}, r.delta_star)))
            .target_value() < 0.0);
}

TEST_CASE("misclassification oracle ignores channels that do not flip") {
  AnalyticRoots a;
  CandidateSet cands;
  cands.entries = {{{0, 0}, 0.4}};
  OracleSpec oracle;
  oracle.kind = OracleKind::kMisclassification;
  oracle.epsilon = 1.0;  // short of the root at -3
  const auto probes = channel_perturb(a.state, a.gen, a.sut, cands, oracle, 0);
  REQUIRE(probes.size() == 1);
  CHECK(probes[0].verdict == Verdict::kNoEffect);
  CHECK(recorded(probes).empty());
}

TEST_CASE("oracle validation") {
  OracleSpec o;
  o.tau_fraction = 0.0;
  CHECK(error_code_of([&] { o.validate(); }) == ErrorCode::kConfig);
  CHECK(drop_convention_from_string("absolute") == DropConvention::kAbsolute);
}

TEST_CASE("the planted cue moves the logit past tau without changing the label") {
  Scenario sc = scenario();
  bool found = false;
  for (std::uint64_t seed = 0; seed < 20 && !found; ++seed) {
    const StyleState s = sc.generator.sample_style_state(seed, 0.7);
    const double y = sc.sut.forward(sc.generator.synthesize(s)).target_value();
    for (double delta : {-10.0, 10.0}) {
      const StyleState t = s.with_offset(kCuePresence, delta);
      const double y2 = sc.sut.forward(sc.generator.synthesize(t)).target_value();
      const double drop = (y > 0 ? 1.0 : -1.0) * (y - y2);
      if (drop > 0.4 * std::abs(y) &&
          synthetic_object_present(t) == synthetic_object_present(s)) {
        found = true;
      }
    }
  }
  CHECK(found);
}

}  // namespace
}  // namespace styleprobe
