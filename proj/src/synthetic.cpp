#include "styleprobe/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace styleprobe {

namespace {

// Forward-mode dual number: value plus one directional derivative.
struct Dual {
  double v = 0.0;
  double d = 0.0;
};

Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
Dual operator/(Dual a, Dual b) {
  return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)};
}
Dual operator+(double a, Dual b) { return {a + b.v, b.d}; }
Dual operator-(Dual a, double b) { return {a.v - b, a.d}; }
Dual operator-(double a, Dual b) { return {a - b.v, -b.d}; }
Dual operator*(Dual a, double b) { return {a.v * b, a.d * b}; }
Dual operator*(double a, Dual b) { return {a * b.v, a * b.d}; }
Dual operator/(Dual a, double b) { return {a.v / b, a.d / b}; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
Dual sigmoid(Dual x) {
  double s = sigmoid(x.v);
  return {s, s * (1.0 - s) * x.d};
}
using std::tanh;
Dual tanh(Dual x) {
  double t = std::tanh(x.v);
  return {t, (1.0 - t * t) * x.d};
}

template <typename T>
T constant(double v) {
  if constexpr (std::is_same_v<T, double>) {
    return v;
  } else {
    return T{v, 0.0};
  }
}

constexpr double kObjectColor[3] = {0.85, 0.15, 0.15};
constexpr double kBackground[3] = {0.45, 0.45, 0.50};
constexpr double kCueCenterX = 0.62;
constexpr double kEdgeSharpness = 6.0;

// Renders into `out` (H x W x 3). `style` is the flat coarse-to-fine vector.
template <typename T>
void render(const SyntheticConfig& cfg, const std::vector<T>& style,
            std::vector<T>& out) {
  const auto& w = cfg.layer_widths;
  const std::size_t base1 = w[0];
  const std::size_t base2 = w[0] + w[1];
  auto s = [&](std::size_t layer, std::size_t c) -> const T& {
    return style[(layer == 0 ? 0 : (layer == 1 ? base1 : base2)) + c];
  };

  // Coarse: the object.
  const T presence = sigmoid(s(0, 0) / 2.0);
  const T radius = 0.32 + 0.12 * tanh(s(0, 1) / 8.0);
  const T eccentricity = 0.25 * tanh(s(0, 2) / 8.0);
  const T obj_x = 0.2 * tanh(s(0, 3) / 8.0);
  const T rx = radius * (1.0 + eccentricity);
  const T ry = radius * (1.0 - eccentricity);

  // Middle: the secondary blob.
  const T cue = cfg.cue_strength * sigmoid(s(1, 0) / 2.0);
  const T cue_radius = 0.16 + 0.06 * tanh(s(1, 1) / 8.0);
  const T cue_hue = sigmoid(s(1, 2) / 4.0);
  const T cue_y = -0.6 + 0.12 * tanh(s(1, 3) / 8.0);
  const T cue_color[3] = {constant<T>(0.1), 0.55 + 0.35 * cue_hue,
                          0.75 - 0.45 * cue_hue};

  // Fine: global appearance.
  const T brightness = 0.12 * tanh(s(2, 0) / 8.0);
  const T tint = 0.1 * tanh(s(2, 1) / 8.0);
  const T contrast = 1.0 + 0.35 * tanh(s(2, 2) / 8.0);
  const T vignette = 0.35 * sigmoid(s(2, 3) / 4.0);

  // Texture channels beyond the four semantic ones per layer.
  struct Texture {
    T amplitude;
    double fu, fv, phase;
  };
  std::vector<Texture> textures;
  for (std::size_t layer = 0; layer < 3; ++layer) {
    for (std::size_t c = 4; c < w[layer]; ++c) {
      const double k = static_cast<double>(c - 3);
      textures.push_back({0.03 * tanh(s(layer, c) / 8.0),
                          (1.0 + layer) * (1.0 + 0.5 * k), 0.7 * k + 0.3 * layer,
                          0.9 * k});
    }
  }

  const std::size_t H = cfg.height;
  const std::size_t W = cfg.width;
  out.assign(H * W * 3, constant<T>(0.0));
  for (std::size_t y = 0; y < H; ++y) {
    const double v = (2.0 * y + 1.0) / H - 1.0;
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (2.0 * x + 1.0) / W - 1.0;
      const T du = (u - obj_x) / rx;
      const T dv = constant<T>(v) / ry;
      const T obj = presence * sigmoid(kEdgeSharpness * (1.0 - du * du - dv * dv));
      const double cu = u - kCueCenterX;
      const T cv = v - cue_y;
      const T blob = cue * sigmoid(kEdgeSharpness *
                                   (1.0 - (cu * cu + cv * cv) / (cue_radius * cue_radius)));
      T texture = constant<T>(0.0);
      for (const auto& t : textures) {
        texture = texture + t.amplitude * std::sin(std::numbers::pi * (t.fu * u + t.fv * v) + t.phase);
      }
      const double falloff = 1.0 - 0.5 * (u * u + v * v);
      for (std::size_t c = 0; c < 3; ++c) {
        T px = kBackground[c] * (1.0 - obj) + kObjectColor[c] * obj;
        px = px * (1.0 - blob) + cue_color[c] * blob;
        px = px + texture;
        px = 0.5 + contrast * (px - 0.5) + brightness;
        if (c == 0) px = px + tint;
        if (c == 2) px = px - tint;
        px = px * (1.0 - vignette * (1.0 - falloff));
        out[(y * W + x) * 3 + c] = sigmoid(5.0 * (px - 0.5));
      }
    }
  }
}

}  // namespace

void SyntheticConfig::validate() const {
  if (height < 8 || width < 8) {
    throw Error(ErrorCode::kConfig, "synthetic image must be at least 8x8");
  }
  if (layer_widths.size() != 3) {
    throw Error(ErrorCode::kConfig, "synthetic renderer has exactly 3 style layers");
  }
  for (auto w : layer_widths) {
    if (w < 4) {
      throw Error(ErrorCode::kConfig, "synthetic layers need at least 4 channels");
    }
  }
  if (!(cue_strength >= 0.0 && cue_strength <= 1.0)) {
    throw Error(ErrorCode::kConfig, "cue_strength must lie in [0, 1]");
  }
  if (!(anchor > 0.0) || !(sample_stddev > 0.0)) {
    throw Error(ErrorCode::kConfig, "anchor and sample_stddev must be positive");
  }
}

Json to_json(const SyntheticConfig& c) {
  return Json{{"height", c.height},           {"width", c.width},
              {"layer_widths", c.layer_widths}, {"cue_strength", c.cue_strength},
              {"anchor", c.anchor},           {"sample_stddev", c.sample_stddev}};
}

SyntheticConfig synthetic_config_from_json(const Json& j) {
  SyntheticConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.layer_widths = j.value("layer_widths", c.layer_widths);
  c.cue_strength = j.value("cue_strength", c.cue_strength);
  c.anchor = j.value("anchor", c.anchor);
  c.sample_stddev = j.value("sample_stddev", c.sample_stddev);
  c.validate();
  return c;
}

SyntheticGenerator::SyntheticGenerator(SyntheticConfig config)
    : config_(std::move(config)) {
  config_.validate();
  topology_.layer_widths = config_.layer_widths;
  topology_.layer_bands = {LayerBand::kCoarse, LayerBand::kMiddle, LayerBand::kFine};
  topology_.image_shape = {config_.height, config_.width, 3};
  topology_.validate();
}

StyleState SyntheticGenerator::mean_style() const {
  // Midpoint of the symmetric anchor range [-anchor, anchor].
  std::vector<std::vector<double>> layers;
  for (auto w : config_.layer_widths) layers.emplace_back(w, 0.0);
  return StyleState(std::move(layers));
}

std::vector<double> SyntheticGenerator::layer_stddev() const {
  return std::vector<double>(config_.layer_widths.size(), config_.sample_stddev);
}

ImageTensor SyntheticGenerator::synthesize(const StyleState& state) {
  check_topology(topology_, state);
  if (!state.all_finite()) {
    throw Error(ErrorCode::kValidation, "style state has non-finite entries");
  }
  std::vector<double> out;
  render(config_, state.flatten(), out);
  return ImageTensor::clamped(topology_.image_shape, std::move(out));
}

ImageTensor SyntheticGenerator::jvp(const StyleState& state, const StyleState& tangent) {
  check_topology(topology_, state);
  check_topology(topology_, tangent);
  const auto values = state.flatten();
  const auto directions = tangent.flatten();
  std::vector<Dual> style(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) style[i] = {values[i], directions[i]};
  std::vector<Dual> out;
  render(config_, style, out);
  std::vector<double> derivative(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) derivative[i] = out[i].d;
  return ImageTensor(topology_.image_shape, std::move(derivative));
}

StyleState SyntheticGenerator::sample_untruncated(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, config_.sample_stddev);
  std::uniform_real_distribution<double> magnitude(config_.anchor / 3.0, config_.anchor);
  std::bernoulli_distribution coin(0.5);
  StyleState mean = mean_style();
  auto layers = mean.layers();
  for (auto& layer : layers) {
    for (auto& v : layer) v += noise(rng);
  }
  // Presence switches sit near one of their anchors.
  for (const ChannelRef& ref : {kObjectPresence, kCuePresence}) {
    const double sign = coin(rng) ? 1.0 : -1.0;
    layers[ref.layer][ref.channel] = sign * magnitude(rng);
  }
  return StyleState(std::move(layers), seed);
}

bool synthetic_object_present(const StyleState& state) {
  return state.at(kObjectPresence) > 0.0;
}

// ---------------------------------------------------------------------------
// GroundTruthMap

GroundTruthMap::GroundTruthMap(std::map<ChannelRef, ChannelSemantics> entries)
    : entries_(std::move(entries)) {}

GroundTruthMap GroundTruthMap::for_synthetic(const SyntheticConfig& config) {
  static const char* kTags[3][4] = {
      {"object_presence", "object_size", "object_eccentricity", "object_position"},
      {"cue_presence", "cue_size", "cue_hue", "cue_position"},
      {"brightness", "hue_tint", "contrast", "vignette"},
  };
  std::map<ChannelRef, ChannelSemantics> entries;
  for (std::size_t l = 0; l < config.layer_widths.size(); ++l) {
    for (std::size_t c = 0; c < config.layer_widths[l]; ++c) {
      ChannelSemantics sem;
      sem.tag = c < 4 ? kTags[l][c] : "texture_" + std::to_string(l) + "_" + std::to_string(c);
      // Only presence decides the label of the object-presence task.
      sem.task_relevant = (ChannelRef{l, c} == kObjectPresence);
      entries.emplace(ChannelRef{l, c}, std::move(sem));
    }
  }
  return GroundTruthMap(std::move(entries));
}

const ChannelSemantics& GroundTruthMap::at(const ChannelRef& ref) const {
  auto it = entries_.find(ref);
  if (it == entries_.end()) {
    throw Error(ErrorCode::kValidation, "ground truth has no entry for " + to_string(ref));
  }
  return it->second;
}

Json to_json(const GroundTruthMap& map) {
  Json entries = Json::array();
  for (const auto& [ref, sem] : map.entries()) {
    entries.push_back({{"channel", to_json(ref)},
                       {"tag", sem.tag},
                       {"task_relevant", sem.task_relevant}});
  }
  return Json{{"task", "object_presence"}, {"entries", entries}};
}

GroundTruthMap ground_truth_from_json(const Json& j) {
  std::map<ChannelRef, ChannelSemantics> entries;
  for (const auto& e : j.at("entries")) {
    ChannelRef ref = channel_ref_from_json(e.at("channel"));
    ChannelSemantics sem{e.at("tag").get<std::string>(),
                         e.at("task_relevant").get<bool>()};
    if (!entries.emplace(ref, std::move(sem)).second) {
      throw Error(ErrorCode::kSchema, "duplicate ground-truth entry " + to_string(ref));
    }
  }
  return GroundTruthMap(std::move(entries));
}

}  // namespace styleprobe
