#include "styleprobe/genbackend.hpp"

#include <cmath>
#include <random>

#include "styleprobe/sut.hpp"

namespace styleprobe {

std::size_t GeneratorTopology::total_channels() const {
  std::size_t n = 0;
  for (auto w : layer_widths) n += w;
  return n;
}

void GeneratorTopology::validate() const {
  if (layer_widths.empty()) {
    throw Error(ErrorCode::kTopology, "generator declares no style layers");
  }
  if (layer_bands.size() != layer_widths.size()) {
    throw Error(ErrorCode::kTopology, "one band tag per layer required");
  }
  for (std::size_t l = 0; l < layer_widths.size(); ++l) {
    if (layer_widths[l] == 0) {
      throw Error(ErrorCode::kTopology, "layer " + std::to_string(l) + " has width 0");
    }
    if (l > 0 && layer_bands[l] < layer_bands[l - 1]) {
      throw Error(ErrorCode::kTopology,
                  "band tags must run coarse to fine (layer " + std::to_string(l) + ")");
    }
  }
  if (image_shape.height == 0 || image_shape.width == 0 ||
      (image_shape.channels != 1 && image_shape.channels != 3)) {
    throw Error(ErrorCode::kTopology, "invalid image shape " + to_string(image_shape));
  }
}

std::vector<LayerBand> bands_from_resolutions(std::span<const std::size_t> resolutions) {
  std::vector<LayerBand> bands;
  bands.reserve(resolutions.size());
  for (auto r : resolutions) {
    bands.push_back(r <= 8 ? LayerBand::kCoarse
                           : (r <= 32 ? LayerBand::kMiddle : LayerBand::kFine));
  }
  return bands;
}

void check_topology(const GeneratorTopology& topology, const StyleState& state) {
  if (state.num_layers() != topology.layer_widths.size()) {
    throw Error(ErrorCode::kTopology,
                "style state has " + std::to_string(state.num_layers()) +
                    " layers, generator expects " +
                    std::to_string(topology.layer_widths.size()));
  }
  for (std::size_t l = 0; l < state.num_layers(); ++l) {
    if (state.layer(l).size() != topology.layer_widths[l]) {
      throw Error(ErrorCode::kTopology,
                  "layer " + std::to_string(l) + " has width " +
                      std::to_string(state.layer(l).size()) + ", expected " +
                      std::to_string(topology.layer_widths[l]));
    }
  }
}

StyleState Generator::sample_style_state(std::uint64_t seed, double truncation) {
  if (!(truncation > 0.0 && truncation <= 1.0)) {
    throw Error(ErrorCode::kValidation, "truncation psi must lie in (0, 1]");
  }
  StyleState raw = sample_untruncated(seed);
  if (truncation == 1.0) return StyleState(raw.layers(), seed, 1.0);
  StyleState mean = mean_style();
  check_topology(topology(), mean);
  auto layers = raw.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto m = mean.layer(l);
    for (std::size_t c = 0; c < layers[l].size(); ++c) {
      layers[l][c] = m[c] + truncation * (layers[l][c] - m[c]);
    }
  }
  return StyleState(std::move(layers), seed, truncation);
}

ImageTensor Generator::jvp(const StyleState&, const StyleState&) {
  throw Error(ErrorCode::kNotDifferentiable, "generator does not provide gradients");
}

StyleState Generator::vjp(const StyleState& state, const ImageTensor& cotangent) {
  if (!differentiable()) {
    throw Error(ErrorCode::kNotDifferentiable, "generator does not provide gradients");
  }
  const auto widths = state.widths();
  std::vector<double> grad(state.total_channels(), 0.0);
  std::vector<double> tangent(grad.size(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    tangent[i] = 1.0;
    ImageTensor column = jvp(state, StyleState::unflatten(widths, tangent));
    tangent[i] = 0.0;
    if (column.shape() != cotangent.shape()) {
      throw Error(ErrorCode::kShapeMismatch, "cotangent shape " +
                                                 to_string(cotangent.shape()) +
                                                 " != image shape " +
                                                 to_string(column.shape()));
    }
    double acc = 0.0;
    auto a = column.data();
    auto b = cotangent.data();
    for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
    grad[i] = acc;
  }
  return StyleState::unflatten(widths, grad, state.seed(), state.truncation());
}

StyleState gradient_of_composite(const StyleState& state, Generator& generator,
                                 Sut& sut, std::size_t target) {
  if (!generator.differentiable()) {
    throw Error(ErrorCode::kNotDifferentiable, "generator is not differentiable");
  }
  if (!sut.capabilities().differentiable) {
    throw Error(ErrorCode::kNotDifferentiable, "SUT is not differentiable");
  }
  ImageTensor image = generator.synthesize(state);
  ImageTensor upstream = sut.input_gradient(image, target);
  return generator.vjp(state, upstream);
}

// ---------------------------------------------------------------------------
// AffineGenerator

AffineGenerator::AffineGenerator(std::vector<std::size_t> layer_widths,
                                 ImageTensor base, std::vector<ImageTensor> patterns,
                                 double sample_stddev)
    : base_(std::move(base)), patterns_(std::move(patterns)),
      sample_stddev_(sample_stddev) {
  topology_.layer_widths = std::move(layer_widths);
  const std::size_t n = topology_.layer_widths.size();
  for (std::size_t l = 0; l < n; ++l) {
    // Split layers into thirds for band tags.
    topology_.layer_bands.push_back(
        3 * l < n ? LayerBand::kCoarse
                  : (3 * l < 2 * n ? LayerBand::kMiddle : LayerBand::kFine));
  }
  topology_.image_shape = base_.shape();
  topology_.validate();
  if (patterns_.size() != topology_.total_channels()) {
    throw Error(ErrorCode::kTopology, "one pattern per channel required");
  }
  for (const auto& p : patterns_) {
    if (p.shape() != base_.shape()) {
      throw Error(ErrorCode::kShapeMismatch, "pattern shape differs from base");
    }
  }
}

StyleState AffineGenerator::mean_style() const {
  std::vector<std::vector<double>> layers;
  for (auto w : topology_.layer_widths) layers.emplace_back(w, 0.0);
  return StyleState(std::move(layers));
}

std::vector<double> AffineGenerator::layer_stddev() const {
  return std::vector<double>(topology_.layer_widths.size(), sample_stddev_);
}

ImageTensor AffineGenerator::synthesize(const StyleState& state) {
  check_topology(topology_, state);
  if (!state.all_finite()) {
    throw Error(ErrorCode::kValidation, "style state has non-finite entries");
  }
  std::vector<double> out(base_.data().begin(), base_.data().end());
  auto flat = state.flatten();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    auto p = patterns_[i].data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += flat[i] * p[k];
  }
  return ImageTensor::clamped(base_.shape(), std::move(out));
}

ImageTensor AffineGenerator::jvp(const StyleState& state, const StyleState& tangent) {
  check_topology(topology_, state);
  check_topology(topology_, tangent);
  std::vector<double> out(base_.shape().size(), 0.0);
  auto flat = tangent.flatten();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    auto p = patterns_[i].data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += flat[i] * p[k];
  }
  return ImageTensor(base_.shape(), std::move(out));
}

StyleState AffineGenerator::sample_untruncated(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sample_stddev_);
  std::vector<std::vector<double>> layers;
  for (auto w : topology_.layer_widths) {
    std::vector<double> layer(w);
    for (auto& v : layer) v = noise(rng);
    layers.push_back(std::move(layer));
  }
  return StyleState(std::move(layers), seed);
}

}  // namespace styleprobe
