#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "styleprobe/repair.hpp"
#include "styleprobe/scenario.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;

std::vector<RepairCandidate> make(std::size_t n, RepairSource source, const std::string& tag,
                                  ImageLabel label = ImageLabel::kPositive) {
  std::vector<RepairCandidate> out;
  for (std::size_t i = 0; i < n; ++i) {
    RepairCandidate c;
    c.image = tag + std::to_string(i) + ".png";
    c.label = (i % 2 == 0) ? label : ImageLabel::kNegative;
    c.source = source;
    if (source != RepairSource::kOriginal) c.channel = ChannelRef{i % 3, i % 5};
    c.seed = i;
    out.push_back(c);
  }
  return out;
}

std::size_t count_generated(const RepairManifest& m) {
  return static_cast<std::size_t>(std::count_if(m.entries.begin(), m.entries.end(), [](auto& e) {
    return e.source != RepairSource::kOriginal;
  }));
}

TEST_CASE("80 originals and 20 generated form a 100-entry pool") {
  const auto m = assemble_repair_set(make(80, RepairSource::kOriginal, "o"),
                                     make(12, RepairSource::kBoundaryRelevant, "b"),
                                     make(8, RepairSource::kSpuriousInvariant, "s"), {});
  CHECK(m.entries.size() == 100);
  CHECK(count_generated(m) == 20);
  CHECK(m.select(Split::kHoldout, false).size() == 16);
  CHECK(m.select(Split::kHoldout, true).size() == 4);
  CHECK(m.select(Split::kTrain, false).size() == 64);
  CHECK(m.select(Split::kTrain, true).size() == 16);
}

TEST_CASE("mix ratio holds within one sample") {
  for (auto [n_orig, n_gen] : {std::pair{200, 10}, {10, 50}, {37, 9}, {5, 1}}) {
    const auto m = assemble_repair_set(make(n_orig, RepairSource::kOriginal, "o"),
                                       make(n_gen, RepairSource::kBoundaryRelevant, "b"), {},
                                       {});
    const double expected = 0.2 * static_cast<double>(m.entries.size());
    CHECK(std::abs(static_cast<double>(count_generated(m)) - expected) <= 1.0);
  }
  const auto only = assemble_repair_set(make(10, RepairSource::kOriginal, "o"), {}, {}, {});
  CHECK(only.entries.size() == 10);
  CHECK(only.warnings.size() == 1);
}

TEST_CASE("assembly is deterministic and splits are disjoint") {
  const auto o = make(60, RepairSource::kOriginal, "o");
  const auto b = make(15, RepairSource::kBoundaryRelevant, "b");
  RepairConfig cfg;
  cfg.rng_seed = 7;
  const auto m1 = assemble_repair_set(o, b, {}, cfg);
  const auto m2 = assemble_repair_set(o, b, {}, cfg);
  CHECK(manifest_to_jsonl(m1) == manifest_to_jsonl(m2));
  cfg.rng_seed = 8;
  CHECK(manifest_to_jsonl(assemble_repair_set(o, b, {}, cfg)) != manifest_to_jsonl(m1));

  std::set<std::string> train, holdout;
  for (const auto& e : m1.entries) (e.split == Split::kTrain ? train : holdout).insert(e.image);
  for (const auto& h : holdout) CHECK(train.count(h) == 0);
  CHECK(train.size() + holdout.size() == m1.entries.size());
  for (const auto& e : m1.entries) {
    if (e.source != RepairSource::kOriginal) CHECK(e.channel.has_value());
  }
}

TEST_CASE("ambiguous candidates are dropped") {
  auto b = make(10, RepairSource::kBoundaryRelevant, "b");
  for (auto& c : b) c.label = ImageLabel::kAmbiguous;
  b[0].label = ImageLabel::kPositive;
  const auto m = assemble_repair_set(make(40, RepairSource::kOriginal, "o"), b, {}, {});
  CHECK(count_generated(m) == 1);
  for (const auto& e : m.entries) {
    if (e.source != RepairSource::kOriginal) CHECK(e.image == "b0.png");
  }
}

TEST_CASE("labels map to class indices") {
  const auto m = assemble_repair_set(make(4, RepairSource::kOriginal, "o"), {}, {}, {});
  for (const auto& e : m.entries) {
    const std::size_t i = std::stoul(e.image.substr(1));
    CHECK(e.label == (i % 2 == 0 ? 1u : 0u));
  }
}

TEST_CASE("generated images need provenance") {
  auto b = make(3, RepairSource::kBoundaryRelevant, "b");
  b[1].channel.reset();
  CHECK(error_code_of([&] { assemble_repair_set(make(20, RepairSource::kOriginal, "o"), b, {},
                                                {}); }) == ErrorCode::kValidation);
  RepairConfig bad;
  bad.mix_ratio = 1.0;
  CHECK(error_code_of([&] { bad.validate(); }) == ErrorCode::kConfig);
}

TEST_CASE("manifest JSONL round trip") {
  const auto m = assemble_repair_set(make(20, RepairSource::kOriginal, "o"),
                                     make(5, RepairSource::kSpuriousInvariant, "s"), {}, {});
  const auto back = manifest_from_jsonl(manifest_to_jsonl(m));
  CHECK(manifest_to_jsonl(back) == manifest_to_jsonl(m));
  CHECK(back.mix_ratio == 0.2);
  CHECK(error_code_of([] { manifest_from_jsonl("{\"mix_ratio\": 0.2}\n"); }) ==
        ErrorCode::kSchema);
  CHECK(error_code_of([] { manifest_from_jsonl(""); }) == ErrorCode::kSchema);
}

struct RepairFixture {
  Scenario sc = build_scenario(ScenarioSpec{});
  std::map<std::string, ImageTensor> images;
  RepairManifest manifest;

  RepairFixture() {
    const auto draws = sample_scenario_images(sc.spec, sc.generator, 40, 3);
    std::vector<RepairCandidate> orig, gen;
    for (std::size_t i = 0; i < draws.size(); ++i) {
      const std::string name = "img" + std::to_string(i);
      images[name] = draws[i].image;
      RepairCandidate c;
      c.image = name;
      c.label = draws[i].label == 1 ? ImageLabel::kPositive : ImageLabel::kNegative;
      if (i >= 30) {
        c.channel = ChannelRef{0, 0};
        gen.push_back(c);
      } else {
        orig.push_back(c);
      }
    }
    manifest = assemble_repair_set(orig, gen, {}, {});
  }
  ImageLoader loader() {
    return [this](const std::string& p) { return images.at(p); };
  }
};

TEST_CASE("zero learning rate leaves the head unchanged") {
  RepairFixture f;
  HeadTrainingConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.max_epochs = 3;
  const auto r = run_repair(f.sc.sut, f.manifest, f.loader(), cfg);
  CHECK(r.mode == "finetuned");
  REQUIRE(r.after);
  CHECK(r.after->original_holdout == r.before.original_holdout);
  CHECK(r.after->generated_holdout == r.before.generated_holdout);
  CHECK(r.frozen_checksum_before == r.frozen_checksum_after);
  CHECK(to_json(r)["mode"] == "finetuned");
}

TEST_CASE("SUTs without fine-tuning get manifest-only reports") {
  RepairFixture f;
  LinearMeanSut sut(1.0, -0.5);
  const auto r = run_repair(sut, f.manifest, f.loader(), {});
  CHECK(r.mode == "manifest_only");
  CHECK_FALSE(r.after);
  CHECK_FALSE(r.training);
  CHECK(r.before.original_holdout.has_value());
  CHECK(to_json(r)["after"].is_null());
}

}  // namespace
}  // namespace styleprobe
