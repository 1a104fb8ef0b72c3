#pragma once

#include <array>
#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "styleprobe/core.hpp"
#include "styleprobe/serialization.hpp"

namespace styleprobe {

enum class TaskKind { kBinary, kMulticlass, kDetection };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view text);

struct SutCapabilities {
  bool differentiable = false;
  TaskKind task_kind = TaskKind::kBinary;
  // Width of the logit vector. BINARY and DETECTION expose one logit.
  std::size_t num_classes = 1;
  std::optional<std::size_t> detection_target;
  bool concurrent_safe = false;

  void validate() const;
};

struct LabeledImage {
  ImageTensor image;
  std::size_t label = 0;
};

// Per-sample updates. Adam uses beta1 0.9, beta2 0.999, eps 1e-8.
enum class HeadOptimizer { kAdam, kSgd };

std::string_view to_string(HeadOptimizer optimizer);
HeadOptimizer head_optimizer_from_string(std::string_view text);

struct HeadTrainingConfig {
  HeadOptimizer optimizer = HeadOptimizer::kAdam;
  double learning_rate = 2e-5;
  std::size_t max_epochs = 20;
  bool early_stop = true;
  // Epochs without improvement of the monitored accuracy before stopping.
  std::size_t patience = 3;
  std::uint64_t shuffle_seed = 0;
};

struct HeadTrainingReport {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::vector<double> monitor_accuracy;
};

// System under test: image -> logits.
class Sut {
 public:
  virtual ~Sut() = default;

  virtual SutCapabilities capabilities() const = 0;
  virtual LogitVector forward(const ImageTensor& image) = 0;
  // d logits[target] / d image. Throws kNotDifferentiable unless overridden.
  virtual ImageTensor input_gradient(const ImageTensor& image, std::size_t target);

  virtual bool supports_finetune() const { return false; }
  // Updates the classification head only. Throws kUnsupported unless
  // overridden.
  virtual HeadTrainingReport finetune_head(std::span<const LabeledImage> train,
                                           std::span<const LabeledImage> monitor,
                                           const HeadTrainingConfig& config);
};

double accuracy(Sut& sut, std::span<const LabeledImage> samples);

// logit = weight * mean(x) + bias.
class LinearMeanSut : public Sut {
 public:
  LinearMeanSut(double weight, double bias) : weight_(weight), bias_(bias) {}

  SutCapabilities capabilities() const override;
  LogitVector forward(const ImageTensor& image) override;
  ImageTensor input_gradient(const ImageTensor& image, std::size_t target) override;

 private:
  double weight_;
  double bias_;
};

// A Gaussian-weighted colour probe over the image plane. Coordinates are
// normalized to [-1, 1] so the probe is resolution independent.
struct FeatureProbe {
  std::string name;
  double center_x = 0.0;
  double center_y = 0.0;
  double sigma = 0.3;
  std::array<double, 3> color{1.0, 1.0, 1.0};
};

// Frozen probe backbone feeding a linear head:
//   z_k = tanh((probe_k(x) - mean_k) / scale_k),  logits = W z + b.
class ToyFeatureSut : public Sut {
 public:
  ToyFeatureSut(std::vector<FeatureProbe> probes, std::size_t num_classes);

  SutCapabilities capabilities() const override;
  LogitVector forward(const ImageTensor& image) override;
  ImageTensor input_gradient(const ImageTensor& image, std::size_t target) override;

  bool supports_finetune() const override { return true; }
  HeadTrainingReport finetune_head(std::span<const LabeledImage> train,
                                   std::span<const LabeledImage> monitor,
                                   const HeadTrainingConfig& config) override;

  std::vector<double> raw_features(const ImageTensor& image) const;
  std::vector<double> features(const ImageTensor& image) const;

  // Backbone calibration: per-probe mean and scale over a sample.
  void fit_normalization(std::span<const LabeledImage> samples);
  // Full-batch gradient descent on the head with L2 penalty (scenario
  // construction, not repair).
  void fit_head(std::span<const LabeledImage> samples, double learning_rate,
                std::size_t epochs, double l2);

  const std::vector<FeatureProbe>& probes() const { return probes_; }
  const std::vector<double>& head_weights() const { return weights_; }
  const std::vector<double>& head_bias() const { return bias_; }
  void set_head(std::vector<double> weights, std::vector<double> bias);
  void set_normalization(std::vector<double> mean, std::vector<double> scale);

  // Hex digest over everything except the head.
  std::string frozen_checksum() const;

  Json to_json() const;
  static ToyFeatureSut from_json(const Json& j);

 private:
  std::vector<double> head_logits(std::span<const double> z) const;
  // Loss gradient for one sample; weights first, then bias.
  std::vector<double> head_gradient(std::span<const double> z, std::size_t label) const;
  void apply_step(std::span<const double> step);
  void sgd_step(std::span<const double> z, std::size_t label, double learning_rate);

  std::vector<FeatureProbe> probes_;
  std::size_t num_classes_;
  std::vector<double> mean_;
  std::vector<double> scale_;
  // Row-major num_classes x num_probes.
  std::vector<double> weights_;
  std::vector<double> bias_;
};

struct Detection {
  std::size_t class_id = 0;
  double confidence = 0.0;
  std::array<double, 4> box{};
};

inline constexpr double kDetectionFloor = -10.0;

// Logit of the best target-class confidence; `floor` when there is none.
double detection_target_score(std::span<const Detection> detections,
                              std::size_t target_class,
                              double floor = kDetectionFloor);

// Wraps a detector (post-NMS detections) as a single-logit SUT.
class DetectionSut : public Sut {
 public:
  using Detector = std::function<std::vector<Detection>(const ImageTensor&)>;

  DetectionSut(Detector detector, std::size_t target_class,
               double floor = kDetectionFloor);

  SutCapabilities capabilities() const override;
  LogitVector forward(const ImageTensor& image) override;

 private:
  Detector detector_;
  std::size_t target_class_;
  double floor_;
};

// Forwards to an inner SUT and counts forward passes.
class CountingSut : public Sut {
 public:
  explicit CountingSut(Sut& inner) : inner_(inner) {}

  SutCapabilities capabilities() const override { return inner_.capabilities(); }
  LogitVector forward(const ImageTensor& image) override;
  ImageTensor input_gradient(const ImageTensor& image, std::size_t target) override;

  std::size_t forward_calls() const { return forward_calls_.load(); }
  std::size_t gradient_calls() const { return gradient_calls_.load(); }
  void reset() {
    forward_calls_ = 0;
    gradient_calls_ = 0;
  }

 private:
  Sut& inner_;
  std::atomic<std::size_t> forward_calls_{0};
  std::atomic<std::size_t> gradient_calls_{0};
};

}  // namespace styleprobe
