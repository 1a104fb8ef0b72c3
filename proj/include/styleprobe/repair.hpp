#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "styleprobe/core.hpp"
#include "styleprobe/serialization.hpp"
#include "styleprobe/sut.hpp"

namespace styleprobe {

enum class RepairSource { kOriginal, kBoundaryRelevant, kSpuriousInvariant };

std::string_view to_string(RepairSource source);
RepairSource repair_source_from_string(std::string_view text);

enum class Split { kTrain, kHoldout };

std::string_view to_string(Split split);
Split split_from_string(std::string_view text);

// One labeled image offered to the repair set.
struct RepairCandidate {
  std::string image;
  ImageLabel label = ImageLabel::kAmbiguous;
  RepairSource source = RepairSource::kOriginal;
  // Required for generated sources.
  std::optional<ChannelRef> channel;
  std::uint64_t seed = 0;
};

struct ManifestEntry {
  std::string image;
  // Class index: POSITIVE = 1, NEGATIVE = 0.
  std::size_t label = 0;
  RepairSource source = RepairSource::kOriginal;
  std::optional<ChannelRef> channel;
  std::uint64_t seed = 0;
  Split split = Split::kTrain;
};

Json to_json(const ManifestEntry& entry);
ManifestEntry manifest_entry_from_json(const Json& j);

struct RepairConfig {
  double mix_ratio = 0.2;
  double holdout_fraction = 0.2;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct RepairManifest {
  std::vector<ManifestEntry> entries;
  double mix_ratio = 0.2;
  double holdout_fraction = 0.2;
  std::uint64_t rng_seed = 0;
  std::vector<std::string> warnings;

  std::vector<ManifestEntry> select(Split split, bool generated) const;
};

// One JSON object per line: a header line {"mix_ratio", ...} followed by the
// entries.
std::string manifest_to_jsonl(const RepairManifest& manifest);
RepairManifest manifest_from_jsonl(const std::string& text);

// Mixes originals and generated images so generated entries make up
// mix_ratio of the pool (+/- 1), then holds out holdout_fraction of each
// source group. AMBIGUOUS candidates are dropped. Deterministic in rng_seed.
RepairManifest assemble_repair_set(const std::vector<RepairCandidate>& originals,
                                   const std::vector<RepairCandidate>& boundary,
                                   const std::vector<RepairCandidate>& spurious,
                                   const RepairConfig& config);

struct HoldoutAccuracy {
  std::optional<double> original_holdout;
  std::optional<double> generated_holdout;
};

struct RepairReport {
  // "finetuned" or "manifest_only".
  std::string mode;
  HoldoutAccuracy before;
  std::optional<HoldoutAccuracy> after;
  std::optional<HeadTrainingReport> training;
  std::optional<std::string> frozen_checksum_before;
  std::optional<std::string> frozen_checksum_after;
};

Json to_json(const RepairReport& report);

using ImageLoader = std::function<ImageTensor(const std::string&)>;

// Fine-tunes the head on the manifest's train split, monitoring the
// generated holdout for early stopping. SUTs without head fine-tuning get
// before-only numbers and mode "manifest_only".
RepairReport run_repair(Sut& sut, const RepairManifest& manifest, const ImageLoader& load,
                        const HeadTrainingConfig& training);

}  // namespace styleprobe
