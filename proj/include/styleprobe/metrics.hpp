#pragma once

#include <array>
#include <optional>
#include <string>

#include "styleprobe/core.hpp"
#include "styleprobe/serialization.hpp"
#include "styleprobe/sut.hpp"

namespace styleprobe {

// Relevant share of influential channels; nullopt when both counts are zero.
std::optional<double> r_relevance(std::size_t n_relevant, std::size_t n_spurious);

// ||a - b||_2 / ||1||_2, i.e. RMS pixel difference.
double d2_image(const ImageTensor& a, const ImageTensor& b);

// Logit margin: |y| for BINARY and DETECTION, top-1 minus top-2 for
// MULTICLASS.
double d2_boundary(const LogitVector& logits, TaskKind task_kind);

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363,
                                                      0.1333};
inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

struct MsSsimResult {
  double value = 0.0;
  std::size_t scales_used = 0;
  // Set when the image was too small for the requested scale count.
  std::optional<std::string> warning;
};

// Multi-scale SSIM on luma with an 11-tap Gaussian window (sigma 1.5), valid
// filtering, 2x2 average-pool downsampling, dynamic range 1. Coarser scales
// contribute mean contrast-structure, the last scale mean SSIM; both are
// clipped at 0 before exponentiation. Images too small for `scales` use
// the largest feasible count with the leading weights renormalized.
MsSsimResult ms_ssim(const ImageTensor& a, const ImageTensor& b, std::size_t scales = 5);

struct MetricCounts {
  std::size_t relevant_channels = 0;
  std::size_t spurious_channels = 0;
  std::size_t influential_inputs = 0;
};

struct MetricReport {
  std::optional<double> r_relevance;
  // Means over boundary pairs; nullopt when no boundary images exist.
  std::optional<double> ms_ssim;
  std::optional<double> d2_image;
  std::optional<double> d2_boundary;
  std::optional<double> ms_ssim_std;
  std::optional<double> d2_image_std;
  std::optional<double> d2_boundary_std;
  std::size_t ms_ssim_scales = 5;
  MetricCounts counts;
};

Json to_json(const MetricReport& report);

// Formats to two decimals, or "undefined".
std::string format_ratio(const std::optional<double>& value);

}  // namespace styleprobe
