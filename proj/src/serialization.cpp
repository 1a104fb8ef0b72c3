#include "styleprobe/serialization.hpp"

#include <cmath>
#include <cstring>

namespace styleprobe {

namespace {

const Json& require(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(ErrorCode::kSchema, std::string("missing field '") + key + "'");
  }
  return j.at(key);
}

}  // namespace

Json to_json(const ChannelRef& ref) {
  return Json{{"layer_id", ref.layer}, {"channel", ref.channel}};
}

ChannelRef channel_ref_from_json(const Json& j) {
  return {require(j, "layer_id").get<std::size_t>(),
          require(j, "channel").get<std::size_t>()};
}

Json to_json(const LogitVector& logits) {
  return Json{{"values", std::vector<double>(logits.values().begin(),
                                             logits.values().end())},
              {"target_index", logits.target_index()}};
}

LogitVector logits_from_json(const Json& j) {
  return LogitVector(require(j, "values").get<std::vector<double>>(),
                     require(j, "target_index").get<std::size_t>());
}

Json to_json(const BoundaryRefinement& r) {
  return Json{{"delta_star", r.delta_star},
              {"margin_at_star", r.margin_at_star},
              {"iterations", r.iterations},
              {"tolerance", r.tolerance},
              {"exact", r.exact}};
}

BoundaryRefinement refinement_from_json(const Json& j) {
  BoundaryRefinement r;
  r.delta_star = require(j, "delta_star").get<double>();
  r.margin_at_star = require(j, "margin_at_star").get<double>();
  r.iterations = require(j, "iterations").get<std::size_t>();
  r.tolerance = require(j, "tolerance").get<double>();
  r.exact = require(j, "exact").get<bool>();
  return r;
}

Json to_json(const ProbeRecord& p) {
  Json j{{"seed", p.seed},
         {"channel", to_json(p.channel)},
         {"alpha", p.alpha},
         {"delta", p.delta},
         {"original_image", p.original_image},
         {"perturbed_image", p.perturbed_image},
         {"original_logits", to_json(p.original_logits)},
         {"perturbed_logits", to_json(p.perturbed_logits)},
         {"drop", p.drop},
         {"verdict", to_string(p.verdict)},
         {"refined_delta", nullptr},
         {"refinement", nullptr}};
  if (p.refined_delta) j["refined_delta"] = *p.refined_delta;
  if (p.refinement) j["refinement"] = to_json(*p.refinement);
  return j;
}

ProbeRecord probe_record_from_json(const Json& j) {
  ProbeRecord p;
  p.seed = require(j, "seed").get<std::uint64_t>();
  p.channel = channel_ref_from_json(require(j, "channel"));
  p.alpha = require(j, "alpha").get<double>();
  p.delta = require(j, "delta").get<double>();
  p.original_image = require(j, "original_image").get<std::string>();
  p.perturbed_image = require(j, "perturbed_image").get<std::string>();
  p.original_logits = logits_from_json(require(j, "original_logits"));
  p.perturbed_logits = logits_from_json(require(j, "perturbed_logits"));
  p.drop = require(j, "drop").get<double>();
  p.verdict = verdict_from_string(require(j, "verdict").get<std::string>());
  if (j.contains("refined_delta") && !j["refined_delta"].is_null()) {
    p.refined_delta = j["refined_delta"].get<double>();
  }
  if (j.contains("refinement") && !j["refinement"].is_null()) {
    p.refinement = refinement_from_json(j["refinement"]);
  }
  return p;
}

Json to_json(const FeatureVerdict& v) {
  Json votes = Json::array();
  for (Vote vote : v.votes) votes.push_back(to_string(vote));
  return Json{{"channel", to_json(v.channel)},
              {"label", to_string(v.label)},
              {"votes", votes},
              {"n_samples", v.n_samples}};
}

FeatureVerdict feature_verdict_from_json(const Json& j) {
  FeatureVerdict v;
  v.channel = channel_ref_from_json(require(j, "channel"));
  v.label = feature_label_from_string(require(j, "label").get<std::string>());
  for (const auto& vote : require(j, "votes")) {
    v.votes.push_back(vote_from_string(vote.get<std::string>()));
  }
  v.n_samples = require(j, "n_samples").get<std::size_t>();
  if (v.n_samples != v.votes.size()) {
    throw Error(ErrorCode::kSchema, "n_samples does not match vote count");
  }
  return v;
}

Json to_json(const StyleState& state) {
  return Json{{"seed", state.seed()},
              {"truncation", state.truncation()},
              {"vectors", state.layers()}};
}

StyleState style_state_from_json(const Json& j) {
  return StyleState(require(j, "vectors").get<std::vector<std::vector<double>>>(),
                    require(j, "seed").get<std::uint64_t>(),
                    require(j, "truncation").get<double>());
}

// ---------------------------------------------------------------------------
// Raw tensors

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (bytes.size() < offset + 4) {
    throw Error(ErrorCode::kDecode, "tensor: truncated header");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  }
  offset += 4;
  return v;
}

}  // namespace

void append_tensor(std::vector<std::uint8_t>& out, const RawTensor& tensor) {
  std::size_t count = 1;
  for (auto d : tensor.dims) count *= d;
  if (count != tensor.values.size()) {
    throw Error(ErrorCode::kEncode, "tensor: dims do not match value count");
  }
  out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  put_u32(out, static_cast<std::uint32_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put_u32(out, d);
  for (float f : tensor.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

std::vector<std::uint8_t> encode_tensor(const RawTensor& tensor) {
  std::vector<std::uint8_t> out;
  append_tensor(out, tensor);
  return out;
}

RawTensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (bytes.size() < offset + 8 ||
      std::memcmp(bytes.data() + offset, kTensorMagic, 8) != 0) {
    throw Error(ErrorCode::kDecode, "tensor: bad magic");
  }
  offset += 8;
  RawTensor t;
  std::uint32_t rank = get_u32(bytes, offset);
  if (rank > 8) throw Error(ErrorCode::kDecode, "tensor: rank too large");
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.dims.push_back(get_u32(bytes, offset));
    count *= t.dims.back();
  }
  if (bytes.size() - offset < count * 4) {
    throw Error(ErrorCode::kDecode, "tensor: truncated payload");
  }
  t.values.resize(count);
  for (auto& f : t.values) {
    std::uint32_t bits = get_u32(bytes, offset);
    std::memcpy(&f, &bits, 4);
  }
  return t;
}

RawTensor to_raw(const ImageTensor& image) {
  RawTensor t;
  t.dims = {static_cast<std::uint32_t>(image.height()),
            static_cast<std::uint32_t>(image.width()),
            static_cast<std::uint32_t>(image.channels())};
  t.values.assign(image.data().begin(), image.data().end());
  return t;
}

ImageTensor image_from_raw(const RawTensor& tensor) {
  if (tensor.dims.size() != 3) {
    throw Error(ErrorCode::kDecode, "image tensor must have rank 3");
  }
  return ImageTensor({tensor.dims[0], tensor.dims[1], tensor.dims[2]},
                     std::vector<double>(tensor.values.begin(), tensor.values.end()));
}

std::vector<RawTensor> to_raw(const StyleState& state) {
  std::vector<RawTensor> out;
  for (const auto& layer : state.layers()) {
    RawTensor t;
    t.dims = {static_cast<std::uint32_t>(layer.size())};
    t.values.assign(layer.begin(), layer.end());
    out.push_back(std::move(t));
  }
  return out;
}

StyleState style_from_raw(std::span<const RawTensor> layers, std::uint64_t seed,
                          double truncation) {
  std::vector<std::vector<double>> vectors;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].dims.size() != 1) {
      throw Error(ErrorCode::kDecode,
                  "style layer " + std::to_string(l) + " must be rank 1");
    }
    vectors.emplace_back(layers[l].values.begin(), layers[l].values.end());
  }
  return StyleState(std::move(vectors), seed, truncation);
}

}  // namespace styleprobe
