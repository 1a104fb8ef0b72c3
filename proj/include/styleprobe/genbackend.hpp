#pragma once

#include <cstdint>
#include <vector>

#include "styleprobe/core.hpp"

namespace styleprobe {

class Sut;

struct GeneratorTopology {
  std::vector<std::size_t> layer_widths;
  std::vector<LayerBand> layer_bands;
  ImageShape image_shape;

  std::size_t total_channels() const;
  // Throws kTopology when bands are not monotone coarse -> fine or sizes
  // disagree.
  void validate() const;
};

// StyleGAN convention: <= 8 px coarse, <= 32 px middle, finer beyond.
std::vector<LayerBand> bands_from_resolutions(std::span<const std::size_t> resolutions);

// Throws kTopology naming the first offending layer.
void check_topology(const GeneratorTopology& topology, const StyleState& state);

// Seed -> style state -> image. Instances are single-threaded.
class Generator {
 public:
  virtual ~Generator() = default;

  virtual const GeneratorTopology& topology() const = 0;
  virtual StyleState mean_style() const = 0;
  // Per-layer standard deviation of sampled style coordinates.
  virtual std::vector<double> layer_stddev() const = 0;

  // Deterministic for fixed (seed, truncation); truncation pulls the raw
  // sample toward mean_style() linearly.
  StyleState sample_style_state(std::uint64_t seed, double truncation);

  virtual ImageTensor synthesize(const StyleState& state) = 0;

  virtual bool differentiable() const { return false; }
  // Directional derivative dG(s)[tangent]. Throws kNotDifferentiable unless
  // overridden.
  virtual ImageTensor jvp(const StyleState& state, const StyleState& tangent);
  // Gradient of <cotangent, G(s)> with respect to s. The default assembles it
  // from one JVP per channel.
  virtual StyleState vjp(const StyleState& state, const ImageTensor& cotangent);

 protected:
  virtual StyleState sample_untruncated(std::uint64_t seed) = 0;
};

// d y[target] / d s for the composite sut(generator(s)), all layers jointly.
// Throws kNotDifferentiable when either side lacks gradients.
StyleState gradient_of_composite(const StyleState& state, Generator& generator,
                                 Sut& sut, std::size_t target);

// Image = clamp(base + sum_i s_i * pattern_i). Linear inside the unit range;
// used for closed-form checks of the gradient code.
class AffineGenerator : public Generator {
 public:
  AffineGenerator(std::vector<std::size_t> layer_widths, ImageTensor base,
                  std::vector<ImageTensor> patterns, double sample_stddev = 0.1);

  const GeneratorTopology& topology() const override { return topology_; }
  StyleState mean_style() const override;
  std::vector<double> layer_stddev() const override;
  ImageTensor synthesize(const StyleState& state) override;
  bool differentiable() const override { return true; }
  ImageTensor jvp(const StyleState& state, const StyleState& tangent) override;

 protected:
  StyleState sample_untruncated(std::uint64_t seed) override;

 private:
  GeneratorTopology topology_;
  ImageTensor base_;
  std::vector<ImageTensor> patterns_;
  double sample_stddev_;
};

}  // namespace styleprobe
