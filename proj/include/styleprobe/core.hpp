#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace styleprobe {

enum class ErrorCode {
  kSchema,
  kDecode,
  kEncode,
  kValidation,
  kTopology,
  kShapeMismatch,
  kNotDifferentiable,
  kUnsupported,
  kPrecondition,
  kBackend,
  kConfig,
  kMissingArtifact,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Address of one style coordinate: synthesis layer (coarse to fine) and the
// channel index inside that layer's style vector.
struct ChannelRef {
  std::size_t layer = 0;
  std::size_t channel = 0;

  friend auto operator<=>(const ChannelRef&, const ChannelRef&) = default;
};

std::string to_string(const ChannelRef& ref);

enum class LayerBand { kCoarse, kMiddle, kFine };

std::string_view to_string(LayerBand band);

// Per-layer style vectors for one seed. Immutable; edits produce new states.
// Structure (non-empty layers) is checked on construction. Finiteness is
// checked at the boundaries that consume a state (encode, synthesize).
class StyleState {
 public:
  StyleState(std::vector<std::vector<double>> layers, std::uint64_t seed = 0,
             double truncation = 1.0);

  std::size_t num_layers() const { return layers_.size(); }
  std::span<const double> layer(std::size_t index) const;
  const std::vector<std::vector<double>>& layers() const { return layers_; }
  double at(const ChannelRef& ref) const;

  std::uint64_t seed() const { return seed_; }
  double truncation() const { return truncation_; }

  std::vector<std::size_t> widths() const;
  std::size_t total_channels() const;
  bool all_finite() const;

  StyleState with_offset(const ChannelRef& ref, double delta) const;
  StyleState with_value(const ChannelRef& ref, double value) const;

  // Flat coarse-to-fine view, used by samplers and the gradient code.
  std::vector<double> flatten() const;
  static StyleState unflatten(std::span<const std::size_t> widths,
                              std::span<const double> flat,
                              std::uint64_t seed = 0, double truncation = 1.0);
  ChannelRef ref_of_flat(std::size_t flat_index) const;
  std::size_t flat_index(const ChannelRef& ref) const;

  friend bool operator==(const StyleState&, const StyleState&) = default;

 private:
  std::vector<std::vector<double>> layers_;
  std::uint64_t seed_;
  double truncation_;
};

enum class ColorSpace { kRgb, kGray };

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const { return height * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

std::string to_string(const ImageShape& shape);

// H x W x C, row-major, channel-interleaved. Images live in [0, 1]; the same
// container also carries image-shaped gradients, which are unbounded.
class ImageTensor {
 public:
  ImageTensor() : ImageTensor(ImageShape{1, 1, 1}, {0.0}) {}
  ImageTensor(ImageShape shape, std::vector<double> data);
  static ImageTensor filled(ImageShape shape, double value);
  // Clamps every value into [0, 1].
  static ImageTensor clamped(ImageShape shape, std::vector<double> data);

  const ImageShape& shape() const { return shape_; }
  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t channels() const { return shape_.channels; }
  ColorSpace colorspace() const {
    return shape_.channels == 1 ? ColorSpace::kGray : ColorSpace::kRgb;
  }

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * shape_.width + x) * shape_.channels + c];
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * shape_.width + x) * shape_.channels + c];
  }

  // ITU-R BT.601 luma; identity for single-channel images.
  ImageTensor to_gray() const;
  bool in_unit_range() const;

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  ImageShape shape_;
  std::vector<double> data_;
};

// Unnormalized class scores. Binary tasks carry a single logit.
class LogitVector {
 public:
  LogitVector() : LogitVector(std::vector<double>{0.0}) {}
  explicit LogitVector(std::vector<double> values, std::size_t target_index = 0);

  std::size_t num_classes() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::size_t target_index() const { return target_; }
  double target_value() const { return values_[target_]; }
  LogitVector with_target(std::size_t target) const;

  friend bool operator==(const LogitVector&, const LogitVector&) = default;

 private:
  std::vector<double> values_;
  std::size_t target_;
};

// Binary: 1 when the logit is strictly positive. Multiclass: argmax with
// ties going to the lowest index.
std::size_t predicted_label(const LogitVector& logits);

enum class FeatureLabel { kRelevant, kSpurious, kUndetermined };
enum class Verdict { kInfluential, kMisclassified, kNoEffect };
enum class Vote { kRelevantChange, kNoRelevantChange, kAmbiguous };
enum class ImageLabel { kPositive, kNegative, kAmbiguous };

std::string_view to_string(FeatureLabel label);
std::string_view to_string(Verdict verdict);
std::string_view to_string(Vote vote);
std::string_view to_string(ImageLabel label);
FeatureLabel feature_label_from_string(std::string_view text);
Verdict verdict_from_string(std::string_view text);
Vote vote_from_string(std::string_view text);
ImageLabel image_label_from_string(std::string_view text);

struct BoundaryRefinement {
  double delta_star = 0.0;
  double margin_at_star = 0.0;
  std::size_t iterations = 0;
  double tolerance = 0.0;
  // False when max_iterations ran out before the margin met the tolerance.
  bool exact = true;
};

struct ProbeResult {
  std::uint64_t seed = 0;
  ChannelRef channel;
  double alpha = 0.0;
  double delta = 0.0;
  ImageTensor original_image;
  ImageTensor perturbed_image;
  LogitVector original_logits;
  LogitVector perturbed_logits;
  double drop = 0.0;
  Verdict verdict = Verdict::kNoEffect;
  std::optional<double> refined_delta;
  std::optional<BoundaryRefinement> refinement;
};

// Serialized form of a ProbeResult: images are referenced by path.
struct ProbeRecord {
  std::uint64_t seed = 0;
  ChannelRef channel;
  double alpha = 0.0;
  double delta = 0.0;
  std::string original_image;
  std::string perturbed_image;
  LogitVector original_logits;
  LogitVector perturbed_logits;
  double drop = 0.0;
  Verdict verdict = Verdict::kNoEffect;
  std::optional<double> refined_delta;
  std::optional<BoundaryRefinement> refinement;
};

ProbeRecord make_record(const ProbeResult& probe, std::string original_path,
                        std::string perturbed_path);

struct FeatureVerdict {
  ChannelRef channel;
  FeatureLabel label = FeatureLabel::kUndetermined;
  std::vector<Vote> votes;
  std::size_t n_samples = 0;
};

// Binary StyleState payload (little-endian, float64 coordinates).
std::vector<std::uint8_t> serialize_style_state(const StyleState& state);
StyleState deserialize_style_state(std::span<const std::uint8_t> bytes);

}  // namespace styleprobe
