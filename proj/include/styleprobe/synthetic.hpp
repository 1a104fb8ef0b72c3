#pragma once

#include <map>
#include <string>
#include <vector>

#include "styleprobe/genbackend.hpp"
#include "styleprobe/serialization.hpp"

namespace styleprobe {

// Built-in renderer with known semantics per channel.
//
// Layer 0 (COARSE): object presence, size, eccentricity, horizontal position.
// Layer 1 (MIDDLE): secondary blob (the planted cue) presence, size, hue,
//                   vertical position.
// Layer 2 (FINE):   brightness, hue tint, contrast, vignette.
// Channels past index 3 in any layer drive faint sinusoidal textures.
//
// Every effect passes through sigmoid/tanh, so images are smooth in every
// coordinate; a final sigmoid keeps pixels inside (0, 1) without clamping.
// Sampling draws the two presence switches as +/- U(anchor/3, anchor) and all
// other coordinates from N(0, sample_stddev^2).
struct SyntheticConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::size_t> layer_widths{4, 4, 4};
  // Opacity multiplier of the planted cue blob.
  double cue_strength = 1.0;
  // Channel anchors sit at +/- anchor; the mean style is their midpoint.
  double anchor = 12.0;
  double sample_stddev = 6.0;

  void validate() const;
};

Json to_json(const SyntheticConfig& config);
SyntheticConfig synthetic_config_from_json(const Json& j);

class SyntheticGenerator : public Generator {
 public:
  explicit SyntheticGenerator(SyntheticConfig config = {});

  const SyntheticConfig& config() const { return config_; }
  const GeneratorTopology& topology() const override { return topology_; }
  StyleState mean_style() const override;
  std::vector<double> layer_stddev() const override;
  ImageTensor synthesize(const StyleState& state) override;
  bool differentiable() const override { return true; }
  ImageTensor jvp(const StyleState& state, const StyleState& tangent) override;

 protected:
  StyleState sample_untruncated(std::uint64_t seed) override;

 private:
  SyntheticConfig config_;
  GeneratorTopology topology_;
};

// Well-known channels of the synthetic renderer.
inline constexpr ChannelRef kObjectPresence{0, 0};
inline constexpr ChannelRef kObjectSize{0, 1};
inline constexpr ChannelRef kCuePresence{1, 0};
inline constexpr ChannelRef kBrightness{2, 0};

// Ground-truth label of a synthetic image: the object is present.
bool synthetic_object_present(const StyleState& state);

struct ChannelSemantics {
  std::string tag;
  bool task_relevant = false;
};

// Channel -> semantic tag for the object-presence task. Covers every channel
// of the synthetic topology exactly once.
class GroundTruthMap {
 public:
  GroundTruthMap() = default;
  explicit GroundTruthMap(std::map<ChannelRef, ChannelSemantics> entries);
  static GroundTruthMap for_synthetic(const SyntheticConfig& config);

  const ChannelSemantics& at(const ChannelRef& ref) const;
  bool contains(const ChannelRef& ref) const { return entries_.count(ref) > 0; }
  bool task_relevant(const ChannelRef& ref) const { return at(ref).task_relevant; }
  const std::map<ChannelRef, ChannelSemantics>& entries() const { return entries_; }

 private:
  std::map<ChannelRef, ChannelSemantics> entries_;
};

Json to_json(const GroundTruthMap& map);
GroundTruthMap ground_truth_from_json(const Json& j);

}  // namespace styleprobe
