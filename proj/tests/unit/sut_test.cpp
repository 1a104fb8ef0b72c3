#include <cmath>

#include "doctest.h"
#include "styleprobe/sut.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;

ImageTensor solid(double r, double g, double b, std::size_t size = 8) {
  std::vector<double> data;
  for (std::size_t i = 0; i < size * size; ++i) {
    data.insert(data.end(), {r, g, b});
  }
  return ImageTensor({size, size, 3}, std::move(data));
}

// Redness detector: one probe, colour weights (1, -0.5, -0.5).
ToyFeatureSut redness_sut() {
  FeatureProbe p{"red", 0.0, 0.0, 0.5, {1.0, -0.5, -0.5}};
  return ToyFeatureSut({p}, 1);
}

std::vector<LabeledImage> red_vs_gray(std::size_t n) {
  std::vector<LabeledImage> set;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n);
    set.push_back({solid(0.8 + 0.1 * t, 0.2, 0.2), 1});
    set.push_back({solid(0.3, 0.3 + 0.1 * t, 0.3 + 0.1 * t), 0});
  }
  return set;
}

TEST_CASE("linear mean SUT arithmetic") {
  LinearMeanSut sut(3.0, -1.0);
  CHECK(sut.forward(ImageTensor::filled({4, 4, 3}, 0.5)).target_value() ==
        doctest::Approx(0.5));
  CHECK(sut.forward(ImageTensor::filled({4, 4, 3}, 0.0)).target_value() ==
        doctest::Approx(-1.0));
  const ImageTensor g = sut.input_gradient(ImageTensor::filled({2, 2, 1}, 0.3), 0);
  CHECK(g.at(1, 1, 0) == doctest::Approx(3.0 / 4.0));
}

TEST_CASE("detection target score") {
  const std::vector<Detection> dets{{2, 0.9, {}}, {2, 0.6, {}}, {1, 0.99, {}}};
  CHECK(detection_target_score(dets, 2) == doctest::Approx(std::log(0.9 / 0.1)));
  CHECK(detection_target_score(dets, 2) == doctest::Approx(2.1972).epsilon(1e-4));
  CHECK(detection_target_score(dets, 7) == -10.0);
  const std::vector<Detection> half{{2, 0.5, {}}};
  CHECK(detection_target_score(half, 2) == doctest::Approx(0.0));
  const std::vector<Detection> bad{{2, 1.0, {}}};
  CHECK(error_code_of([&] { detection_target_score(bad, 2); }) == ErrorCode::kValidation);

  DetectionSut sut([](const ImageTensor&) { return std::vector<Detection>{}; }, 2);
  CHECK(sut.forward(solid(0, 0, 0)).target_value() == -10.0);
  CHECK(sut.capabilities().task_kind == TaskKind::kDetection);
  CHECK(error_code_of([&] { sut.input_gradient(solid(0, 0, 0), 0); }) ==
        ErrorCode::kNotDifferentiable);
  CHECK(error_code_of([&] {
          sut.finetune_head(std::span<const LabeledImage>{}, {}, {});
        }) == ErrorCode::kUnsupported);
}

TEST_CASE("toy probe reads the colour-weighted mean of a solid image") {
  ToyFeatureSut sut = redness_sut();
  const auto raw = sut.raw_features(solid(0.7, 0.2, 0.4));
  CHECK(raw[0] == doctest::Approx(0.7 - 0.5 * 0.2 - 0.5 * 0.4));
}

TEST_CASE("toy input gradient matches central differences") {
  FeatureProbe a{"a", -0.3, 0.2, 0.4, {1.0, -0.5, -0.5}};
  FeatureProbe b{"b", 0.5, -0.4, 0.2, {-1.0, 0.5, 0.5}};
  ToyFeatureSut sut({a, b}, 1);
  sut.set_normalization({0.1, -0.1}, {0.05, 0.08});
  sut.set_head({2.0, -1.5}, {0.3});
  const ImageTensor x = testing::random_image({6, 6, 3}, 2);
  const ImageTensor g = sut.input_gradient(x, 0);
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.data().size(); i += 7) {
    ImageTensor p = x, m = x;
    p.mutable_data()[i] += h;
    m.mutable_data()[i] -= h;
    const double fd =
        (sut.forward(p).target_value() - sut.forward(m).target_value()) / (2 * h);
    CHECK(g.data()[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("head fine-tuning reaches full accuracy on a separable set within 20 epochs") {
  ToyFeatureSut sut = redness_sut();
  const auto train = red_vs_gray(20);
  sut.fit_normalization(train);
  sut.set_head({0.0}, {0.0});
  CHECK(accuracy(sut, train) == doctest::Approx(0.5));
  HeadTrainingConfig cfg;
  cfg.early_stop = false;
  const auto report = sut.finetune_head(train, {}, cfg);
  CHECK(report.epochs_run <= 20);
  CHECK(accuracy(sut, train) == 1.0);
}

TEST_CASE("head fine-tuning with plain SGD also converges at a larger step") {
  ToyFeatureSut sut = redness_sut();
  const auto train = red_vs_gray(20);
  sut.fit_normalization(train);
  sut.set_head({0.0}, {0.0});
  HeadTrainingConfig cfg;
  cfg.optimizer = HeadOptimizer::kSgd;
  cfg.learning_rate = 0.1;
  cfg.early_stop = false;
  sut.finetune_head(train, {}, cfg);
  CHECK(accuracy(sut, train) == 1.0);
}

TEST_CASE("zero learning rate leaves the head unchanged") {
  ToyFeatureSut sut = redness_sut();
  const auto train = red_vs_gray(5);
  sut.fit_normalization(train);
  sut.set_head({0.7}, {-0.2});
  HeadTrainingConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.early_stop = false;
  for (auto opt : {HeadOptimizer::kAdam, HeadOptimizer::kSgd}) {
    cfg.optimizer = opt;
    sut.finetune_head(train, train, cfg);
    CHECK(sut.head_weights() == std::vector<double>{0.7});
    CHECK(sut.head_bias() == std::vector<double>{-0.2});
  }
}

TEST_CASE("fine-tuning never touches the frozen backbone") {
  ToyFeatureSut sut = redness_sut();
  const auto train = red_vs_gray(5);
  sut.fit_normalization(train);
  const std::string before = sut.frozen_checksum();
  HeadTrainingConfig cfg;
  cfg.learning_rate = 0.05;
  sut.finetune_head(train, train, cfg);
  CHECK(sut.frozen_checksum() == before);
  sut.set_head({1.0}, {1.0});
  CHECK(sut.frozen_checksum() == before);
  sut.set_normalization({0.0}, {2.0});
  CHECK(sut.frozen_checksum() != before);
}

TEST_CASE("fine-tuning input validation") {
  ToyFeatureSut sut = redness_sut();
  CHECK(error_code_of([&] {
          sut.finetune_head(std::span<const LabeledImage>{}, {}, {});
        }) == ErrorCode::kValidation);
  const std::vector<LabeledImage> bad{{solid(1, 0, 0), 2}};
  CHECK(error_code_of([&] { sut.finetune_head(bad, {}, {}); }) == ErrorCode::kValidation);
  HeadTrainingConfig neg;
  neg.learning_rate = -1.0;
  const auto ok = red_vs_gray(2);
  CHECK(error_code_of([&] { sut.finetune_head(ok, {}, neg); }) == ErrorCode::kValidation);
  CHECK(error_code_of([] { head_optimizer_from_string("rmsprop"); }) ==
        ErrorCode::kValidation);
}

TEST_CASE("early stopping restores the best monitored head") {
  ToyFeatureSut sut = redness_sut();
  const auto train = red_vs_gray(10);
  sut.fit_normalization(train);
  sut.set_head({4.0}, {0.0});
  // Monitor with flipped labels: training only makes it worse.
  std::vector<LabeledImage> monitor = train;
  for (auto& s : monitor) s.label = 1 - s.label;
  const double before = accuracy(sut, monitor);
  HeadTrainingConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.optimizer = HeadOptimizer::kSgd;
  cfg.patience = 2;
  const auto report = sut.finetune_head(train, monitor, cfg);
  CHECK(report.epochs_run == 2);
  CHECK(report.best_epoch == 0);
  CHECK(accuracy(sut, monitor) == before);
  CHECK(sut.head_weights() == std::vector<double>{4.0});
}

TEST_CASE("toy SUT JSON round trip keeps logits") {
  FeatureProbe a{"a", -0.3, 0.2, 0.4, {1.0, -0.5, -0.5}};
  ToyFeatureSut sut({a}, 1);
  sut.set_normalization({0.1}, {0.2});
  sut.set_head({1.5}, {-0.1});
  const ToyFeatureSut back = ToyFeatureSut::from_json(sut.to_json());
  ToyFeatureSut copy = back;
  const ImageTensor x = testing::random_image({5, 5, 3}, 8);
  CHECK(copy.forward(x).target_value() == sut.forward(x).target_value());
  CHECK(copy.frozen_checksum() == sut.frozen_checksum());
}

TEST_CASE("counting SUT counts forwards and gradients") {
  LinearMeanSut inner(1.0, 0.0);
  CountingSut counter(inner);
  const ImageTensor x = ImageTensor::filled({2, 2, 1}, 0.5);
  counter.forward(x);
  counter.forward(x);
  counter.input_gradient(x, 0);
  CHECK(counter.forward_calls() == 2);
  CHECK(counter.gradient_calls() == 1);
  counter.reset();
  CHECK(counter.forward_calls() == 0);
}

TEST_CASE("capabilities validation") {
  SutCapabilities caps;
  caps.num_classes = 2;
  CHECK(error_code_of([&] { caps.validate(); }) == ErrorCode::kValidation);
  caps.task_kind = TaskKind::kMulticlass;
  caps.validate();
  caps.task_kind = TaskKind::kDetection;
  caps.num_classes = 1;
  CHECK(error_code_of([&] { caps.validate(); }) == ErrorCode::kValidation);
  CHECK(error_code_of([] { task_kind_from_string("REGRESSION"); }) == ErrorCode::kSchema);
}

}  // namespace
}  // namespace styleprobe
