#include "styleprobe/sut.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "styleprobe/util.hpp"

namespace styleprobe {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kBinary: return "BINARY";
    case TaskKind::kMulticlass: return "MULTICLASS";
    case TaskKind::kDetection: return "DETECTION";
  }
  return "BINARY";
}

TaskKind task_kind_from_string(std::string_view text) {
  for (TaskKind k : {TaskKind::kBinary, TaskKind::kMulticlass, TaskKind::kDetection}) {
    if (to_string(k) == text) return k;
  }
  throw Error(ErrorCode::kSchema, "unknown task kind '" + std::string(text) + "'");
}

void SutCapabilities::validate() const {
  if (num_classes == 0) {
    throw Error(ErrorCode::kValidation, "SUT must expose at least one logit");
  }
  if (task_kind == TaskKind::kBinary && num_classes != 1) {
    throw Error(ErrorCode::kValidation, "binary SUTs expose exactly one logit");
  }
  if (task_kind == TaskKind::kMulticlass && num_classes < 2) {
    throw Error(ErrorCode::kValidation, "multiclass SUTs need K >= 2");
  }
  if (task_kind == TaskKind::kDetection && !detection_target) {
    throw Error(ErrorCode::kValidation, "detection SUTs must declare a target class");
  }
}

ImageTensor Sut::input_gradient(const ImageTensor&, std::size_t) {
  throw Error(ErrorCode::kNotDifferentiable, "SUT does not provide input gradients");
}

HeadTrainingReport Sut::finetune_head(std::span<const LabeledImage>,
                                      std::span<const LabeledImage>,
                                      const HeadTrainingConfig&) {
  throw Error(ErrorCode::kUnsupported, "SUT does not support head fine-tuning");
}

std::string_view to_string(HeadOptimizer optimizer) {
  return optimizer == HeadOptimizer::kAdam ? "adam" : "sgd";
}

HeadOptimizer head_optimizer_from_string(std::string_view text) {
  if (text == "adam") return HeadOptimizer::kAdam;
  if (text == "sgd") return HeadOptimizer::kSgd;
  throw Error(ErrorCode::kValidation,
              "unknown optimizer \"" + std::string(text) + "\"; valid: adam, sgd");
}

double accuracy(Sut& sut, std::span<const LabeledImage> samples) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (predicted_label(sut.forward(s.image)) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// LinearMeanSut

SutCapabilities LinearMeanSut::capabilities() const {
  SutCapabilities caps;
  caps.differentiable = true;
  caps.task_kind = TaskKind::kBinary;
  caps.num_classes = 1;
  caps.concurrent_safe = true;
  return caps;
}

LogitVector LinearMeanSut::forward(const ImageTensor& image) {
  auto data = image.data();
  double mean = std::accumulate(data.begin(), data.end(), 0.0) /
                static_cast<double>(data.size());
  return LogitVector({weight_ * mean + bias_});
}

ImageTensor LinearMeanSut::input_gradient(const ImageTensor& image, std::size_t target) {
  if (target != 0) throw Error(ErrorCode::kValidation, "binary SUT has one logit");
  return ImageTensor::filled(image.shape(),
                             weight_ / static_cast<double>(image.shape().size()));
}

// ---------------------------------------------------------------------------
// ToyFeatureSut

namespace {

// Normalized Gaussian weights of one probe at the given resolution.
std::vector<double> probe_weights(const FeatureProbe& probe, std::size_t height,
                                  std::size_t width) {
  std::vector<double> w(height * width);
  double total = 0.0;
  const double inv = 1.0 / (2.0 * probe.sigma * probe.sigma);
  for (std::size_t y = 0; y < height; ++y) {
    const double v = (2.0 * y + 1.0) / height - 1.0 - probe.center_y;
    for (std::size_t x = 0; x < width; ++x) {
      const double u = (2.0 * x + 1.0) / width - 1.0 - probe.center_x;
      w[y * width + x] = std::exp(-(u * u + v * v) * inv);
      total += w[y * width + x];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

// Colour weights for an image with `channels` channels.
std::array<double, 3> probe_color(const FeatureProbe& probe, std::size_t channels) {
  if (channels == 3) return probe.color;
  // Grayscale input: the probe sees luma with the summed colour weight.
  return {probe.color[0] + probe.color[1] + probe.color[2], 0.0, 0.0};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ToyFeatureSut::ToyFeatureSut(std::vector<FeatureProbe> probes, std::size_t num_classes)
    : probes_(std::move(probes)), num_classes_(num_classes),
      mean_(probes_.size(), 0.0), scale_(probes_.size(), 1.0),
      weights_(num_classes * probes_.size(), 0.0), bias_(num_classes, 0.0) {
  if (probes_.empty()) throw Error(ErrorCode::kValidation, "toy SUT needs probes");
  if (num_classes_ == 0) throw Error(ErrorCode::kValidation, "toy SUT needs K >= 1");
  for (const auto& p : probes_) {
    if (!(p.sigma > 0.0)) throw Error(ErrorCode::kValidation, "probe sigma must be > 0");
  }
}

SutCapabilities ToyFeatureSut::capabilities() const {
  SutCapabilities caps;
  caps.differentiable = true;
  caps.task_kind = num_classes_ == 1 ? TaskKind::kBinary : TaskKind::kMulticlass;
  caps.num_classes = num_classes_;
  caps.concurrent_safe = true;
  return caps;
}

std::vector<double> ToyFeatureSut::raw_features(const ImageTensor& image) const {
  const std::size_t H = image.height();
  const std::size_t W = image.width();
  const std::size_t C = image.channels();
  auto data = image.data();
  std::vector<double> out;
  out.reserve(probes_.size());
  for (const auto& probe : probes_) {
    const auto w = probe_weights(probe, H, W);
    const auto color = probe_color(probe, C);
    double acc = 0.0;
    for (std::size_t p = 0; p < H * W; ++p) {
      double px = 0.0;
      for (std::size_t c = 0; c < C; ++c) px += color[c] * data[p * C + c];
      acc += w[p] * px;
    }
    out.push_back(acc);
  }
  return out;
}

std::vector<double> ToyFeatureSut::features(const ImageTensor& image) const {
  auto raw = raw_features(image);
  for (std::size_t k = 0; k < raw.size(); ++k) {
    raw[k] = std::tanh((raw[k] - mean_[k]) / scale_[k]);
  }
  return raw;
}

std::vector<double> ToyFeatureSut::head_logits(std::span<const double> z) const {
  std::vector<double> logits(bias_);
  const std::size_t F = probes_.size();
  for (std::size_t k = 0; k < num_classes_; ++k) {
    for (std::size_t f = 0; f < F; ++f) logits[k] += weights_[k * F + f] * z[f];
  }
  return logits;
}

LogitVector ToyFeatureSut::forward(const ImageTensor& image) {
  return LogitVector(head_logits(features(image)));
}

ImageTensor ToyFeatureSut::input_gradient(const ImageTensor& image, std::size_t target) {
  if (target >= num_classes_) {
    throw Error(ErrorCode::kValidation, "target index out of range");
  }
  const std::size_t H = image.height();
  const std::size_t W = image.width();
  const std::size_t C = image.channels();
  const std::size_t F = probes_.size();
  const auto z = features(image);
  std::vector<double> grad(image.shape().size(), 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    // d logit / d raw_f through the tanh normalization.
    const double coeff = weights_[target * F + f] * (1.0 - z[f] * z[f]) / scale_[f];
    if (coeff == 0.0) continue;
    const auto w = probe_weights(probes_[f], H, W);
    const auto color = probe_color(probes_[f], C);
    for (std::size_t p = 0; p < H * W; ++p) {
      for (std::size_t c = 0; c < C; ++c) grad[p * C + c] += coeff * w[p] * color[c];
    }
  }
  return ImageTensor(image.shape(), std::move(grad));
}

void ToyFeatureSut::fit_normalization(std::span<const LabeledImage> samples) {
  if (samples.size() < 2) {
    throw Error(ErrorCode::kValidation, "normalization needs at least two samples");
  }
  const std::size_t F = probes_.size();
  std::vector<double> sum(F, 0.0), sq(F, 0.0);
  for (const auto& s : samples) {
    auto raw = raw_features(s.image);
    for (std::size_t f = 0; f < F; ++f) {
      sum[f] += raw[f];
      sq[f] += raw[f] * raw[f];
    }
  }
  const double n = static_cast<double>(samples.size());
  for (std::size_t f = 0; f < F; ++f) {
    mean_[f] = sum[f] / n;
    double var = std::max(sq[f] / n - mean_[f] * mean_[f], 0.0);
    scale_[f] = std::max(std::sqrt(var), 1e-6);
  }
}

void ToyFeatureSut::fit_head(std::span<const LabeledImage> samples, double learning_rate,
                             std::size_t epochs, double l2) {
  if (samples.empty()) throw Error(ErrorCode::kValidation, "empty training set");
  const std::size_t F = probes_.size();
  std::vector<std::vector<double>> zs;
  zs.reserve(samples.size());
  for (const auto& s : samples) zs.push_back(features(s.image));
  const double n = static_cast<double>(samples.size());
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<double> gw(weights_.size(), 0.0), gb(bias_.size(), 0.0);
    for (std::size_t i = 0; i < zs.size(); ++i) {
      auto logits = head_logits(zs[i]);
      std::vector<double> err(num_classes_);
      if (num_classes_ == 1) {
        err[0] = sigmoid(logits[0]) - static_cast<double>(samples[i].label);
      } else {
        double mx = *std::max_element(logits.begin(), logits.end());
        double denom = 0.0;
        for (double& l : logits) denom += (l = std::exp(l - mx));
        for (std::size_t k = 0; k < num_classes_; ++k) {
          err[k] = logits[k] / denom - (samples[i].label == k ? 1.0 : 0.0);
        }
      }
      for (std::size_t k = 0; k < num_classes_; ++k) {
        gb[k] += err[k];
        for (std::size_t f = 0; f < F; ++f) gw[k * F + f] += err[k] * zs[i][f];
      }
    }
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      weights_[i] -= learning_rate * (gw[i] / n + l2 * weights_[i]);
    }
    for (std::size_t k = 0; k < bias_.size(); ++k) bias_[k] -= learning_rate * gb[k] / n;
  }
}

std::vector<double> ToyFeatureSut::head_gradient(std::span<const double> z,
                                                 std::size_t label) const {
  const std::size_t F = probes_.size();
  auto logits = head_logits(z);
  std::vector<double> err(num_classes_);
  if (num_classes_ == 1) {
    err[0] = sigmoid(logits[0]) - static_cast<double>(label);
  } else {
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double& l : logits) denom += (l = std::exp(l - mx));
    for (std::size_t k = 0; k < num_classes_; ++k) {
      err[k] = logits[k] / denom - (label == k ? 1.0 : 0.0);
    }
  }
  std::vector<double> grad(weights_.size() + bias_.size());
  for (std::size_t k = 0; k < num_classes_; ++k) {
    for (std::size_t f = 0; f < F; ++f) grad[k * F + f] = err[k] * z[f];
    grad[weights_.size() + k] = err[k];
  }
  return grad;
}

void ToyFeatureSut::apply_step(std::span<const double> step) {
  for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] -= step[i];
  for (std::size_t k = 0; k < bias_.size(); ++k) bias_[k] -= step[weights_.size() + k];
}

void ToyFeatureSut::sgd_step(std::span<const double> z, std::size_t label,
                             double learning_rate) {
  auto grad = head_gradient(z, label);
  for (double& g : grad) g *= learning_rate;
  apply_step(grad);
}

HeadTrainingReport ToyFeatureSut::finetune_head(std::span<const LabeledImage> train,
                                                std::span<const LabeledImage> monitor,
                                                const HeadTrainingConfig& config) {
  if (train.empty()) throw Error(ErrorCode::kValidation, "empty fine-tuning set");
  if (config.learning_rate < 0.0) {
    throw Error(ErrorCode::kValidation, "learning rate must be >= 0");
  }
  for (const auto& s : train) {
    if (s.label >= std::max<std::size_t>(num_classes_, 2)) {
      throw Error(ErrorCode::kValidation, "training label out of range");
    }
  }
  std::vector<std::vector<double>> zs;
  zs.reserve(train.size());
  for (const auto& s : train) zs.push_back(features(s.image));

  HeadTrainingReport report;
  auto best_w = weights_;
  auto best_b = bias_;
  double best_acc = monitor.empty() ? 0.0 : accuracy(*this, monitor);
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.shuffle_seed);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;
  std::vector<double> m(weights_.size() + bias_.size()), v(m.size());
  std::size_t t = 0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      if (config.optimizer == HeadOptimizer::kSgd) {
        sgd_step(zs[i], train[i].label, config.learning_rate);
        continue;
      }
      auto g = head_gradient(zs[i], train[i].label);
      ++t;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
      for (std::size_t p = 0; p < g.size(); ++p) {
        m[p] = kBeta1 * m[p] + (1.0 - kBeta1) * g[p];
        v[p] = kBeta2 * v[p] + (1.0 - kBeta2) * g[p] * g[p];
        g[p] = config.learning_rate * (m[p] / c1) / (std::sqrt(v[p] / c2) + kAdamEps);
      }
      apply_step(g);
    }
    report.epochs_run = epoch;
    if (monitor.empty()) {
      report.best_epoch = epoch;
      best_w = weights_;
      best_b = bias_;
      continue;
    }
    double acc = accuracy(*this, monitor);
    report.monitor_accuracy.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      best_w = weights_;
      best_b = bias_;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (config.early_stop && ++since_best >= config.patience) {
      break;
    }
  }
  weights_ = std::move(best_w);
  bias_ = std::move(best_b);
  return report;
}

void ToyFeatureSut::set_head(std::vector<double> weights, std::vector<double> bias) {
  if (weights.size() != weights_.size() || bias.size() != bias_.size()) {
    throw Error(ErrorCode::kValidation, "head shape mismatch");
  }
  weights_ = std::move(weights);
  bias_ = std::move(bias);
}

void ToyFeatureSut::set_normalization(std::vector<double> mean, std::vector<double> scale) {
  if (mean.size() != probes_.size() || scale.size() != probes_.size()) {
    throw Error(ErrorCode::kValidation, "normalization shape mismatch");
  }
  for (double s : scale) {
    if (!(s > 0.0)) throw Error(ErrorCode::kValidation, "normalization scale must be > 0");
  }
  mean_ = std::move(mean);
  scale_ = std::move(scale);
}

Json ToyFeatureSut::to_json() const {
  Json probes = Json::array();
  for (const auto& p : probes_) {
    probes.push_back({{"name", p.name},
                      {"center_x", p.center_x},
                      {"center_y", p.center_y},
                      {"sigma", p.sigma},
                      {"color", p.color}});
  }
  return Json{{"kind", "toy_feature"},
              {"num_classes", num_classes_},
              {"probes", probes},
              {"feature_mean", mean_},
              {"feature_scale", scale_},
              {"head_weights", weights_},
              {"head_bias", bias_}};
}

ToyFeatureSut ToyFeatureSut::from_json(const Json& j) {
  std::vector<FeatureProbe> probes;
  for (const auto& p : j.at("probes")) {
    probes.push_back({p.at("name").get<std::string>(), p.at("center_x").get<double>(),
                      p.at("center_y").get<double>(), p.at("sigma").get<double>(),
                      p.at("color").get<std::array<double, 3>>()});
  }
  ToyFeatureSut sut(std::move(probes), j.at("num_classes").get<std::size_t>());
  sut.set_normalization(j.at("feature_mean").get<std::vector<double>>(),
                        j.at("feature_scale").get<std::vector<double>>());
  sut.set_head(j.at("head_weights").get<std::vector<double>>(),
               j.at("head_bias").get<std::vector<double>>());
  return sut;
}

std::string ToyFeatureSut::frozen_checksum() const {
  Json frozen = to_json();
  frozen.erase("head_weights");
  frozen.erase("head_bias");
  return sha256_hex(frozen.dump());
}

// ---------------------------------------------------------------------------
// Detection

double detection_target_score(std::span<const Detection> detections,
                              std::size_t target_class, double floor) {
  double best = -1.0;
  for (const auto& d : detections) {
    if (!(d.confidence > 0.0 && d.confidence < 1.0)) {
      throw Error(ErrorCode::kValidation, "detection confidence must lie in (0, 1)");
    }
    if (d.class_id == target_class) best = std::max(best, d.confidence);
  }
  if (best < 0.0) return floor;
  return std::log(best / (1.0 - best));
}

DetectionSut::DetectionSut(Detector detector, std::size_t target_class, double floor)
    : detector_(std::move(detector)), target_class_(target_class), floor_(floor) {}

SutCapabilities DetectionSut::capabilities() const {
  SutCapabilities caps;
  caps.differentiable = false;
  caps.task_kind = TaskKind::kDetection;
  caps.num_classes = 1;
  caps.detection_target = target_class_;
  return caps;
}

LogitVector DetectionSut::forward(const ImageTensor& image) {
  auto detections = detector_(image);
  return LogitVector({detection_target_score(detections, target_class_, floor_)});
}

// ---------------------------------------------------------------------------
// CountingSut

LogitVector CountingSut::forward(const ImageTensor& image) {
  ++forward_calls_;
  return inner_.forward(image);
}

ImageTensor CountingSut::input_gradient(const ImageTensor& image, std::size_t target) {
  ++gradient_calls_;
  return inner_.input_gradient(image, target);
}

}  // namespace styleprobe
