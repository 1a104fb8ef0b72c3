#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "styleprobe/core.hpp"

namespace styleprobe {

using Json = nlohmann::json;

// Canonical JSON for the shared record types. Field names are snake_case and
// match the C++ member names.
Json to_json(const ChannelRef& ref);
ChannelRef channel_ref_from_json(const Json& j);
Json to_json(const LogitVector& logits);
LogitVector logits_from_json(const Json& j);
Json to_json(const BoundaryRefinement& refinement);
BoundaryRefinement refinement_from_json(const Json& j);
Json to_json(const ProbeRecord& record);
ProbeRecord probe_record_from_json(const Json& j);
Json to_json(const FeatureVerdict& verdict);
FeatureVerdict feature_verdict_from_json(const Json& j);
Json to_json(const StyleState& state);
StyleState style_state_from_json(const Json& j);

// Raw tensor interchange:
//   bytes 0..7   magic "SPTENSR1"
//   u32 LE       rank
//   rank x u32   dims (row-major, outermost first)
//   prod(dims) x float32 LE
struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

inline constexpr char kTensorMagic[8] = {'S', 'P', 'T', 'E', 'N', 'S', 'R', '1'};

std::vector<std::uint8_t> encode_tensor(const RawTensor& tensor);
void append_tensor(std::vector<std::uint8_t>& out, const RawTensor& tensor);
// Decodes one tensor starting at `offset`; advances `offset` past it.
RawTensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);

RawTensor to_raw(const ImageTensor& image);
ImageTensor image_from_raw(const RawTensor& tensor);
// Style states travel as one rank-1 tensor per layer.
std::vector<RawTensor> to_raw(const StyleState& state);
StyleState style_from_raw(std::span<const RawTensor> layers, std::uint64_t seed = 0,
                          double truncation = 1.0);

}  // namespace styleprobe
