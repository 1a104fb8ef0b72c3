#include "styleprobe/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace styleprobe {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchema: return "SCHEMA";
    case ErrorCode::kDecode: return "DECODE";
    case ErrorCode::kEncode: return "ENCODE";
    case ErrorCode::kValidation: return "VALIDATION";
    case ErrorCode::kTopology: return "TOPOLOGY";
    case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::kNotDifferentiable: return "NOT_DIFFERENTIABLE";
    case ErrorCode::kUnsupported: return "UNSUPPORTED";
    case ErrorCode::kPrecondition: return "PRECONDITION";
    case ErrorCode::kBackend: return "BACKEND";
    case ErrorCode::kConfig: return "CONFIG";
    case ErrorCode::kMissingArtifact: return "MISSING_ARTIFACT";
  }
  return "UNKNOWN";
}

std::string to_string(const ChannelRef& ref) {
  return "L" + std::to_string(ref.layer) + "C" + std::to_string(ref.channel);
}

std::string_view to_string(LayerBand band) {
  switch (band) {
    case LayerBand::kCoarse: return "COARSE";
    case LayerBand::kMiddle: return "MIDDLE";
    case LayerBand::kFine: return "FINE";
  }
  return "UNKNOWN";
}

// ---------------------------------------------------------------------------
// StyleState

StyleState::StyleState(std::vector<std::vector<double>> layers,
                       std::uint64_t seed, double truncation)
    : layers_(std::move(layers)), seed_(seed), truncation_(truncation) {
  if (layers_.empty()) {
    throw Error(ErrorCode::kSchema, "style state has no layers");
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].empty()) {
      throw Error(ErrorCode::kSchema,
                  "style layer " + std::to_string(i) + " is empty");
    }
  }
  if (!(truncation_ > 0.0 && truncation_ <= 1.0)) {
    throw Error(ErrorCode::kValidation, "truncation must lie in (0, 1]");
  }
}

std::span<const double> StyleState::layer(std::size_t index) const {
  if (index >= layers_.size()) {
    throw Error(ErrorCode::kTopology,
                "layer " + std::to_string(index) + " out of range");
  }
  return layers_[index];
}

double StyleState::at(const ChannelRef& ref) const {
  auto l = layer(ref.layer);
  if (ref.channel >= l.size()) {
    throw Error(ErrorCode::kTopology, "channel " + to_string(ref) + " out of range");
  }
  return l[ref.channel];
}

std::vector<std::size_t> StyleState::widths() const {
  std::vector<std::size_t> out;
  out.reserve(layers_.size());
  for (const auto& l : layers_) out.push_back(l.size());
  return out;
}

std::size_t StyleState::total_channels() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.size();
  return n;
}

bool StyleState::all_finite() const {
  for (const auto& l : layers_) {
    for (double v : l) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

StyleState StyleState::with_offset(const ChannelRef& ref, double delta) const {
  return with_value(ref, at(ref) + delta);
}

StyleState StyleState::with_value(const ChannelRef& ref, double value) const {
  (void)at(ref);
  StyleState copy = *this;
  copy.layers_[ref.layer][ref.channel] = value;
  return copy;
}

std::vector<double> StyleState::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_channels());
  for (const auto& l : layers_) flat.insert(flat.end(), l.begin(), l.end());
  return flat;
}

StyleState StyleState::unflatten(std::span<const std::size_t> widths,
                                 std::span<const double> flat,
                                 std::uint64_t seed, double truncation) {
  std::size_t total = 0;
  for (auto w : widths) total += w;
  if (total != flat.size()) {
    throw Error(ErrorCode::kTopology, "flat style has " +
                                          std::to_string(flat.size()) +
                                          " values, topology needs " +
                                          std::to_string(total));
  }
  std::vector<std::vector<double>> layers;
  layers.reserve(widths.size());
  std::size_t offset = 0;
  for (auto w : widths) {
    layers.emplace_back(flat.begin() + offset, flat.begin() + offset + w);
    offset += w;
  }
  return StyleState(std::move(layers), seed, truncation);
}

ChannelRef StyleState::ref_of_flat(std::size_t flat_index) const {
  std::size_t remaining = flat_index;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (remaining < layers_[l].size()) return {l, remaining};
    remaining -= layers_[l].size();
  }
  throw Error(ErrorCode::kTopology,
              "flat index " + std::to_string(flat_index) + " out of range");
}

std::size_t StyleState::flat_index(const ChannelRef& ref) const {
  (void)at(ref);
  std::size_t offset = 0;
  for (std::size_t l = 0; l < ref.layer; ++l) offset += layers_[l].size();
  return offset + ref.channel;
}

// ---------------------------------------------------------------------------
// ImageTensor

std::string to_string(const ImageShape& shape) {
  return std::to_string(shape.height) + "x" + std::to_string(shape.width) +
         "x" + std::to_string(shape.channels);
}

ImageTensor::ImageTensor(ImageShape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (shape_.height == 0 || shape_.width == 0) {
    throw Error(ErrorCode::kShapeMismatch, "image must have H, W > 0");
  }
  if (shape_.channels != 1 && shape_.channels != 3) {
    throw Error(ErrorCode::kShapeMismatch,
                "image must be grayscale or RGB, got " +
                    std::to_string(shape_.channels) + " channels");
  }
  if (data_.size() != shape_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "image data size " + std::to_string(data_.size()) +
                    " does not match shape " + to_string(shape_));
  }
}

ImageTensor ImageTensor::filled(ImageShape shape, double value) {
  return ImageTensor(shape, std::vector<double>(shape.size(), value));
}

ImageTensor ImageTensor::clamped(ImageShape shape, std::vector<double> data) {
  for (double& v : data) v = std::clamp(v, 0.0, 1.0);
  return ImageTensor(shape, std::move(data));
}

ImageTensor ImageTensor::to_gray() const {
  if (shape_.channels == 1) return *this;
  std::vector<double> gray(shape_.height * shape_.width);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double* px = &data_[i * 3];
    gray[i] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  }
  return ImageTensor({shape_.height, shape_.width, 1}, std::move(gray));
}

bool ImageTensor::in_unit_range() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

// ---------------------------------------------------------------------------
// Logits

LogitVector::LogitVector(std::vector<double> values, std::size_t target_index)
    : values_(std::move(values)), target_(target_index) {
  if (values_.empty()) {
    throw Error(ErrorCode::kValidation, "logit vector must have K >= 1");
  }
  if (target_ >= values_.size()) {
    throw Error(ErrorCode::kValidation, "target index out of range");
  }
  for (double v : values_) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kValidation, "logits must be finite");
    }
  }
}

LogitVector LogitVector::with_target(std::size_t target) const {
  return LogitVector(values_, target);
}

std::size_t predicted_label(const LogitVector& logits) {
  auto values = logits.values();
  if (values.size() == 1) return values[0] > 0.0 ? 1 : 0;
  // max_element returns the first maximum, i.e. the lowest tied index.
  return static_cast<std::size_t>(
      std::max_element(values.begin(), values.end()) - values.begin());
}

// ---------------------------------------------------------------------------
// Enum names

std::string_view to_string(FeatureLabel label) {
  switch (label) {
    case FeatureLabel::kRelevant: return "RELEVANT";
    case FeatureLabel::kSpurious: return "SPURIOUS";
    case FeatureLabel::kUndetermined: return "UNDETERMINED";
  }
  return "UNDETERMINED";
}

std::string_view to_string(Verdict verdict) {
  switch (verdict) {
    case Verdict::kInfluential: return "INFLUENTIAL";
    case Verdict::kMisclassified: return "MISCLASSIFIED";
    case Verdict::kNoEffect: return "NO_EFFECT";
  }
  return "NO_EFFECT";
}

std::string_view to_string(Vote vote) {
  switch (vote) {
    case Vote::kRelevantChange: return "RELEVANT_CHANGE";
    case Vote::kNoRelevantChange: return "NO_RELEVANT_CHANGE";
    case Vote::kAmbiguous: return "AMBIGUOUS";
  }
  return "AMBIGUOUS";
}

std::string_view to_string(ImageLabel label) {
  switch (label) {
    case ImageLabel::kPositive: return "POSITIVE";
    case ImageLabel::kNegative: return "NEGATIVE";
    case ImageLabel::kAmbiguous: return "AMBIGUOUS";
  }
  return "AMBIGUOUS";
}

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view text, const Enum (&values)[N],
                std::string_view what) {
  for (Enum v : values) {
    if (to_string(v) == text) return v;
  }
  throw Error(ErrorCode::kSchema,
              "unknown " + std::string(what) + " '" + std::string(text) + "'");
}

}  // namespace

FeatureLabel feature_label_from_string(std::string_view text) {
  static constexpr FeatureLabel kAll[] = {
      FeatureLabel::kRelevant, FeatureLabel::kSpurious, FeatureLabel::kUndetermined};
  return parse_enum(text, kAll, "feature label");
}

Verdict verdict_from_string(std::string_view text) {
  static constexpr Verdict kAll[] = {Verdict::kInfluential, Verdict::kMisclassified,
                                     Verdict::kNoEffect};
  return parse_enum(text, kAll, "verdict");
}

Vote vote_from_string(std::string_view text) {
  static constexpr Vote kAll[] = {Vote::kRelevantChange, Vote::kNoRelevantChange,
                                  Vote::kAmbiguous};
  return parse_enum(text, kAll, "vote");
}

ImageLabel image_label_from_string(std::string_view text) {
  static constexpr ImageLabel kAll[] = {ImageLabel::kPositive, ImageLabel::kNegative,
                                        ImageLabel::kAmbiguous};
  return parse_enum(text, kAll, "image label");
}

ProbeRecord make_record(const ProbeResult& probe, std::string original_path,
                        std::string perturbed_path) {
  ProbeRecord record;
  record.seed = probe.seed;
  record.channel = probe.channel;
  record.alpha = probe.alpha;
  record.delta = probe.delta;
  record.original_image = std::move(original_path);
  record.perturbed_image = std::move(perturbed_path);
  record.original_logits = probe.original_logits;
  record.perturbed_logits = probe.perturbed_logits;
  record.drop = probe.drop;
  record.verdict = probe.verdict;
  record.refined_delta = probe.refined_delta;
  record.refinement = probe.refinement;
  return record;
}

// ---------------------------------------------------------------------------
// StyleState binary payload
//
//   "STYS" | u32 version=1 | u64 seed | f64 truncation | u32 n_layers |
//   per layer: u32 width | width x f64

namespace {

constexpr std::uint8_t kStyleMagic[4] = {'S', 'T', 'Y', 'S'};
constexpr std::uint32_t kStyleVersion = 1;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  bool get(T& value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    if (bytes_.size() - pos_ < sizeof(T)) return false;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    std::memcpy(&value, &bits, sizeof(T));
    return true;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_style_state(const StyleState& state) {
  for (std::size_t l = 0; l < state.num_layers(); ++l) {
    for (double v : state.layer(l)) {
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kEncode,
                    "non-finite value in style layer " + std::to_string(l));
      }
    }
  }
  std::vector<std::uint8_t> out(std::begin(kStyleMagic), std::end(kStyleMagic));
  put_le(out, kStyleVersion);
  put_le(out, state.seed());
  put_le(out, state.truncation());
  put_le(out, static_cast<std::uint32_t>(state.num_layers()));
  for (const auto& layer : state.layers()) {
    put_le(out, static_cast<std::uint32_t>(layer.size()));
    for (double v : layer) put_le(out, v);
  }
  return out;
}

StyleState deserialize_style_state(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, kStyleMagic)) {
    throw Error(ErrorCode::kDecode, "style payload: bad magic");
  }
  Reader in(bytes.subspan(4));
  std::uint32_t version = 0;
  std::uint64_t seed = 0;
  double truncation = 0.0;
  std::uint32_t n_layers = 0;
  if (!in.get(version) || !in.get(seed) || !in.get(truncation) || !in.get(n_layers)) {
    throw Error(ErrorCode::kDecode, "style payload: truncated header");
  }
  if (version != kStyleVersion) {
    throw Error(ErrorCode::kDecode,
                "style payload: unsupported version " + std::to_string(version));
  }
  if (n_layers == 0) {
    throw Error(ErrorCode::kSchema, "style payload: no layers");
  }
  std::vector<std::vector<double>> layers(n_layers);
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    std::uint32_t width = 0;
    if (!in.get(width)) {
      throw Error(ErrorCode::kDecode,
                  "style payload: truncated at layer " + std::to_string(l));
    }
    if (width == 0) {
      throw Error(ErrorCode::kSchema,
                  "style payload: layer " + std::to_string(l) + " is empty");
    }
    layers[l].resize(width);
    for (auto& v : layers[l]) {
      if (!in.get(v)) {
        throw Error(ErrorCode::kDecode,
                    "style payload: truncated at layer " + std::to_string(l));
      }
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kDecode,
                    "style payload: non-finite value in layer " + std::to_string(l));
      }
    }
  }
  if (!in.at_end()) {
    throw Error(ErrorCode::kDecode, "style payload: trailing bytes");
  }
  try {
    return StyleState(std::move(layers), seed, truncation);
  } catch (const Error& e) {
    throw Error(ErrorCode::kDecode, std::string("style payload: ") + e.what());
  }
}

}  // namespace styleprobe
