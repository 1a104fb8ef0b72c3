#include "styleprobe/repair.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "styleprobe/util.hpp"

namespace styleprobe {

std::string_view to_string(RepairSource source) {
  switch (source) {
    case RepairSource::kOriginal: return "ORIGINAL";
    case RepairSource::kBoundaryRelevant: return "BOUNDARY_RELEVANT";
    case RepairSource::kSpuriousInvariant: return "SPURIOUS_INVARIANT";
  }
  return "?";
}

RepairSource repair_source_from_string(std::string_view text) {
  if (text == "ORIGINAL") return RepairSource::kOriginal;
  if (text == "BOUNDARY_RELEVANT") return RepairSource::kBoundaryRelevant;
  if (text == "SPURIOUS_INVARIANT") return RepairSource::kSpuriousInvariant;
  throw Error(ErrorCode::kSchema, "unknown repair source: " + std::string(text));
}

std::string_view to_string(Split split) {
  return split == Split::kTrain ? "train" : "holdout";
}

Split split_from_string(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "holdout") return Split::kHoldout;
  throw Error(ErrorCode::kSchema, "unknown split: " + std::string(text));
}

Json to_json(const ManifestEntry& e) {
  return Json{{"image", e.image},
              {"label", e.label},
              {"source", to_string(e.source)},
              {"channel", e.channel ? to_json(*e.channel) : Json(nullptr)},
              {"seed", e.seed},
              {"split", to_string(e.split)}};
}

ManifestEntry manifest_entry_from_json(const Json& j) {
  ManifestEntry e;
  e.image = j.at("image").get<std::string>();
  e.label = j.at("label").get<std::size_t>();
  e.source = repair_source_from_string(j.at("source").get<std::string>());
  if (j.contains("channel") && !j["channel"].is_null()) {
    e.channel = channel_ref_from_json(j["channel"]);
  }
  e.seed = j.value("seed", std::uint64_t{0});
  e.split = split_from_string(j.at("split").get<std::string>());
  if (e.source != RepairSource::kOriginal && !e.channel) {
    throw Error(ErrorCode::kSchema, "generated manifest entry without channel: " + e.image);
  }
  return e;
}

void RepairConfig::validate() const {
  if (!(mix_ratio > 0.0 && mix_ratio < 1.0)) {
    throw Error(ErrorCode::kConfig, "mix_ratio must lie in (0, 1)");
  }
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw Error(ErrorCode::kConfig, "holdout_fraction must lie in [0, 1)");
  }
}

std::vector<ManifestEntry> RepairManifest::select(Split split, bool generated) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split && (e.source != RepairSource::kOriginal) == generated) {
      out.push_back(e);
    }
  }
  return out;
}

std::string manifest_to_jsonl(const RepairManifest& manifest) {
  std::string out = Json{{"mix_ratio", manifest.mix_ratio},
                         {"holdout_fraction", manifest.holdout_fraction},
                         {"rng_seed", manifest.rng_seed},
                         {"warnings", manifest.warnings}}
                        .dump();
  out += "\n";
  for (const auto& e : manifest.entries) out += to_json(e).dump() + "\n";
  return out;
}

RepairManifest manifest_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  RepairManifest m;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("manifest: ") + e.what());
    }
    try {
      if (header) {
        m.mix_ratio = j.at("mix_ratio").get<double>();
        m.holdout_fraction = j.at("holdout_fraction").get<double>();
        m.rng_seed = j.at("rng_seed").get<std::uint64_t>();
        m.warnings = j.value("warnings", std::vector<std::string>{});
        header = false;
      } else {
        m.entries.push_back(manifest_entry_from_json(j));
      }
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("manifest: ") + e.what());
    }
  }
  if (header) throw Error(ErrorCode::kSchema, "manifest: missing header line");
  return m;
}

namespace {

std::size_t class_index(ImageLabel label) { return label == ImageLabel::kPositive ? 1 : 0; }

std::vector<RepairCandidate> usable(const std::vector<RepairCandidate>& in,
                                    RepairSource source) {
  std::vector<RepairCandidate> out;
  for (auto c : in) {
    if (c.label == ImageLabel::kAmbiguous) continue;
    c.source = source;
    if (source != RepairSource::kOriginal && !c.channel) {
      throw Error(ErrorCode::kValidation, "generated image without channel: " + c.image);
    }
    out.push_back(std::move(c));
  }
  return out;
}

void shuffle(std::vector<RepairCandidate>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
}

// Appends `group`, marking the first round(fraction * n) entries as holdout.
void append_split(std::vector<ManifestEntry>& out, const std::vector<RepairCandidate>& group,
                  double fraction) {
  const auto n_holdout =
      static_cast<std::size_t>(std::lround(fraction * static_cast<double>(group.size())));
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& c = group[i];
    out.push_back({c.image, class_index(c.label), c.source, c.channel, c.seed,
                   i < n_holdout ? Split::kHoldout : Split::kTrain});
  }
}

}  // namespace

RepairManifest assemble_repair_set(const std::vector<RepairCandidate>& originals,
                                   const std::vector<RepairCandidate>& boundary,
                                   const std::vector<RepairCandidate>& spurious,
                                   const RepairConfig& config) {
  config.validate();
  RepairManifest manifest;
  manifest.mix_ratio = config.mix_ratio;
  manifest.holdout_fraction = config.holdout_fraction;
  manifest.rng_seed = config.rng_seed;

  auto orig = usable(originals, RepairSource::kOriginal);
  auto generated = usable(boundary, RepairSource::kBoundaryRelevant);
  auto spu = usable(spurious, RepairSource::kSpuriousInvariant);
  generated.insert(generated.end(), spu.begin(), spu.end());
  shuffle(orig, mix_seed(config.rng_seed, 1));
  shuffle(generated, mix_seed(config.rng_seed, 2));

  const double m = config.mix_ratio;
  if (generated.empty()) {
    manifest.warnings.push_back("no usable generated images; repair set holds originals only");
    log_warning(manifest.warnings.back());
  } else {
    const auto wanted = static_cast<std::size_t>(
        std::lround(static_cast<double>(generated.size()) * (1.0 - m) / m));
    if (wanted <= orig.size()) {
      orig.resize(wanted);
    } else {
      const auto n_gen = static_cast<std::size_t>(
          std::lround(static_cast<double>(orig.size()) * m / (1.0 - m)));
      generated.resize(std::min(n_gen, generated.size()));
    }
  }
  append_split(manifest.entries, orig, config.holdout_fraction);
  append_split(manifest.entries, generated, config.holdout_fraction);
  return manifest;
}

Json to_json(const RepairReport& r) {
  auto acc = [](const HoldoutAccuracy& a) {
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    return Json{{"original_holdout", opt(a.original_holdout)},
                {"generated_holdout", opt(a.generated_holdout)}};
  };
  Json j{{"mode", r.mode},
         {"before", acc(r.before)},
         {"after", r.after ? acc(*r.after) : Json(nullptr)}};
  if (r.training) {
    j["training"] = {{"epochs_run", r.training->epochs_run},
                     {"best_epoch", r.training->best_epoch},
                     {"monitor_accuracy", r.training->monitor_accuracy}};
  } else {
    j["training"] = nullptr;
  }
  j["frozen_checksum_before"] =
      r.frozen_checksum_before ? Json(*r.frozen_checksum_before) : Json(nullptr);
  j["frozen_checksum_after"] =
      r.frozen_checksum_after ? Json(*r.frozen_checksum_after) : Json(nullptr);
  return j;
}

namespace {

std::vector<LabeledImage> load_all(const std::vector<ManifestEntry>& entries,
                                   const ImageLoader& load) {
  std::vector<LabeledImage> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back({load(e.image), e.label});
  return out;
}

HoldoutAccuracy evaluate(Sut& sut, const std::vector<LabeledImage>& original,
                         const std::vector<LabeledImage>& generated) {
  HoldoutAccuracy a;
  if (!original.empty()) a.original_holdout = accuracy(sut, original);
  if (!generated.empty()) a.generated_holdout = accuracy(sut, generated);
  return a;
}

std::optional<std::string> frozen_checksum(const Sut& sut) {
  if (const auto* toy = dynamic_cast<const ToyFeatureSut*>(&sut)) {
    return toy->frozen_checksum();
  }
  return std::nullopt;
}

}  // namespace

RepairReport run_repair(Sut& sut, const RepairManifest& manifest, const ImageLoader& load,
                        const HeadTrainingConfig& training) {
  const auto original_holdout = load_all(manifest.select(Split::kHoldout, false), load);
  const auto generated_holdout = load_all(manifest.select(Split::kHoldout, true), load);

  RepairReport report;
  report.before = evaluate(sut, original_holdout, generated_holdout);
  if (!sut.supports_finetune()) {
    report.mode = "manifest_only";
    log_warning("SUT does not support head fine-tuning; exporting the manifest only");
    return report;
  }
  std::vector<ManifestEntry> train_entries;
  for (const auto& e : manifest.entries) {
    if (e.split == Split::kTrain) train_entries.push_back(e);
  }
  const auto train = load_all(train_entries, load);
  report.mode = "finetuned";
  report.frozen_checksum_before = frozen_checksum(sut);
  report.training = sut.finetune_head(train, generated_holdout, training);
  report.frozen_checksum_after = frozen_checksum(sut);
  report.after = evaluate(sut, original_holdout, generated_holdout);
  return report;
}

}  // namespace styleprobe
