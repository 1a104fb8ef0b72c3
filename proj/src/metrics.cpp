#include "styleprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "styleprobe/perturb.hpp"

namespace styleprobe {

std::optional<double> r_relevance(std::size_t n_relevant, std::size_t n_spurious) {
  if (n_relevant + n_spurious == 0) return std::nullopt;
  return static_cast<double>(n_relevant) / static_cast<double>(n_relevant + n_spurious);
}

double d2_image(const ImageTensor& a, const ImageTensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "d2_image: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double sum = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) sum += (da[i] - db[i]) * (da[i] - db[i]);
  return std::sqrt(sum) / std::sqrt(static_cast<double>(da.size()));
}

double d2_boundary(const LogitVector& logits, TaskKind task_kind) {
  if (task_kind == TaskKind::kMulticlass) return decision_margin(logits);
  return std::abs(logits.target_value());
}

namespace {

// Plain 2-D grid of doubles.
struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

Plane luma(const ImageTensor& image) {
  ImageTensor gray = image.to_gray();
  auto d = gray.data();
  return {gray.height(), gray.width(), std::vector<double>(d.begin(), d.end())};
}

std::vector<double> gaussian_window() {
  std::vector<double> g(kSsimWindow);
  const double c = (static_cast<double>(kSsimWindow) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += g[i];
  }
  for (double& x : g) x /= total;
  return g;
}

// Separable valid-mode filtering.
Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const std::size_t k = g.size();
  Plane rows{p.h, p.w - k + 1, {}};
  rows.v.resize(rows.h * rows.w);
  for (std::size_t y = 0; y < rows.h; ++y) {
    for (std::size_t x = 0; x < rows.w; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * p.at(y, x + i);
      rows.v[y * rows.w + x] = s;
    }
  }
  Plane out{p.h - k + 1, rows.w, {}};
  out.v.resize(out.h * out.w);
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * rows.at(y + i, x);
      out.v[y * out.w + x] = s;
    }
  }
  return out;
}

Plane multiply(const Plane& a, const Plane& b) {
  Plane out{a.h, a.w, a.v};
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

Plane downsample(const Plane& p) {
  Plane out{p.h / 2, p.w / 2, {}};
  out.v.resize(out.h * out.w);
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      out.v[y * out.w + x] = 0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) +
                                     p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1));
    }
  }
  return out;
}

struct SsimTerms {
  double contrast_structure = 0.0;
  // Mean of the per-pixel luminance * contrast-structure product.
  double ssim = 0.0;
};

SsimTerms ssim_terms(const Plane& a, const Plane& b, const std::vector<double>& g) {
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  const Plane mu_a = filter_valid(a, g);
  const Plane mu_b = filter_valid(b, g);
  const Plane aa = filter_valid(multiply(a, a), g);
  const Plane bb = filter_valid(multiply(b, b), g);
  const Plane ab = filter_valid(multiply(a, b), g);
  double ssim_sum = 0.0, cs_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double var_a = aa.v[i] - ma * ma;
    const double var_b = bb.v[i] - mb * mb;
    const double cov = ab.v[i] - ma * mb;
    const double l = (2.0 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
    const double cs = (2.0 * cov + kC2) / (var_a + var_b + kC2);
    ssim_sum += l * cs;
    cs_sum += cs;
  }
  const double n = static_cast<double>(mu_a.v.size());
  return {cs_sum / n, ssim_sum / n};
}

}  // namespace

MsSsimResult ms_ssim(const ImageTensor& a, const ImageTensor& b, std::size_t scales) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorCode::kShapeMismatch,
                "ms_ssim: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (scales < 1 || scales > kMsSsimWeights.size()) {
    throw Error(ErrorCode::kValidation, "ms_ssim: scales must be in [1, 5]");
  }
  const std::size_t side = std::min(a.height(), a.width());
  if (side < kSsimWindow) {
    throw Error(ErrorCode::kValidation, "ms_ssim: image smaller than the SSIM window");
  }
  std::size_t usable = 1;
  while (usable < scales && (side >> usable) >= kSsimWindow) ++usable;

  MsSsimResult result;
  result.scales_used = usable;
  if (usable < scales) {
    result.warning = "ms_ssim: " + to_string(a.shape()) + " supports " +
                     std::to_string(usable) + " of " + std::to_string(scales) +
                     " scales; weights renormalized";
  }
  double weight_total = 0.0;
  for (std::size_t i = 0; i < usable; ++i) weight_total += kMsSsimWeights[i];

  const auto g = gaussian_window();
  Plane pa = luma(a);
  Plane pb = luma(b);
  double value = 1.0;
  for (std::size_t i = 0; i < usable; ++i) {
    const SsimTerms t = ssim_terms(pa, pb, g);
    const double w = kMsSsimWeights[i] / weight_total;
    if (i + 1 == usable) {
      value *= std::pow(std::max(t.ssim, 0.0), w);
    } else {
      value *= std::pow(std::max(t.contrast_structure, 0.0), w);
      pa = downsample(pa);
      pb = downsample(pb);
    }
  }
  result.value = value;
  return result;
}

Json to_json(const MetricReport& report) {
  auto opt = [](const std::optional<double>& v) -> Json {
    return v ? Json(*v) : Json(nullptr);
  };
  return Json{{"r_relevance", opt(report.r_relevance)},
              {"ms_ssim", opt(report.ms_ssim)},
              {"ms_ssim_std", opt(report.ms_ssim_std)},
              {"ms_ssim_scales", report.ms_ssim_scales},
              {"d2_image", opt(report.d2_image)},
              {"d2_image_std", opt(report.d2_image_std)},
              {"d2_boundary", opt(report.d2_boundary)},
              {"d2_boundary_std", opt(report.d2_boundary_std)},
              {"counts",
               {{"relevant_channels", report.counts.relevant_channels},
                {"spurious_channels", report.counts.spurious_channels},
                {"influential_inputs", report.counts.influential_inputs}}}};
}

std::string format_ratio(const std::optional<double>& value) {
  if (!value) return "undefined";
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.2f", *value);
  return buffer;
}

}  // namespace styleprobe
