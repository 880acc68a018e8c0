#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "fsl/dataset.hpp"
#include "fsl/errors.hpp"
#include "fsl/random.hpp"

namespace fsl {

namespace {

constexpr double kPi = std::numbers::pi;

struct ClassStyle {
  double grating_angle;   // radians in [0, pi)
  double frequency;       // cycles per image width
  double wedge_direction; // radians from "up" (towards row 0), in [-50, 50] degrees
  double wedge_opening;   // half-angle, radians
  double wedge_length;    // fraction of the image size
};

// Normalized coordinates so the rejection threshold is scale free.
std::array<double, 5> style_coords(const ClassStyle& s) {
  return {std::cos(2 * s.grating_angle), std::sin(2 * s.grating_angle), (s.frequency - 1.5) / 3.0,
          s.wedge_direction / (kPi * 50.0 / 180.0), (s.wedge_opening - 0.2) / 0.4 + (s.wedge_length - 0.25) / 0.2};
}

double style_distance(const ClassStyle& a, const ClassStyle& b) {
  const auto ca = style_coords(a), cb = style_coords(b);
  double acc = 0.0;
  for (std::size_t i = 0; i < ca.size(); ++i) acc += (ca[i] - cb[i]) * (ca[i] - cb[i]);
  return std::sqrt(acc);
}

std::vector<ClassStyle> draw_styles(std::size_t classes, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, kPi);
  std::uniform_real_distribution<double> freq(1.5, 4.5);
  std::uniform_real_distribution<double> dir(-50.0, 50.0);
  std::uniform_real_distribution<double> opening(12.0, 35.0);
  std::uniform_real_distribution<double> length(0.25, 0.45);
  std::vector<ClassStyle> styles;
  double threshold = 0.9;
  std::size_t attempts = 0;
  while (styles.size() < classes) {
    ClassStyle s{angle(rng), freq(rng), dir(rng) * kPi / 180.0, opening(rng) * kPi / 180.0, length(rng)};
    bool ok = true;
    for (const auto& t : styles) ok = ok && style_distance(s, t) >= threshold;
    if (ok) {
      styles.push_back(s);
    } else if (++attempts % 2000 == 0) {
      threshold *= 0.9;
    }
  }
  return styles;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Image render(const ClassStyle& style, std::size_t size, Rng& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  std::normal_distribution<double> noise(0.0, 0.03);

  const double jitter = 8.0 * kPi / 180.0;
  const double theta = style.grating_angle + jitter * unit(rng);
  const double freq = style.frequency * (1.0 + 0.08 * unit(rng));
  const double ph = phase(rng);
  const double amplitude = 0.18 * (1.0 + 0.15 * unit(rng));
  const double dir = style.wedge_direction + jitter * unit(rng);
  const double opening = style.wedge_opening + 4.0 * kPi / 180.0 * unit(rng);
  const double length = style.wedge_length * (1.0 + 0.1 * unit(rng));
  const double cy = 0.5 + 0.05 * unit(rng);
  const double cx = 0.5 + 0.05 * unit(rng);

  // Wedge axis in (y, x) image coordinates; y grows downwards.
  const double uy = -std::cos(dir), ux = std::sin(dir);
  const double ct = std::cos(theta), st = std::sin(theta);
  const auto n = static_cast<double>(size);

  Image img = blank_image(1, size, size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double y = (static_cast<double>(r) + 0.5) / n - cy;
      const double x = (static_cast<double>(c) + 0.5) / n - cx;
      double v = 0.45 + amplitude * std::cos(2.0 * kPi * freq * (x * ct + y * st) + ph);
      const double radius = std::sqrt(x * x + y * y);
      const double cosang = radius > 0.0 ? (y * uy + x * ux) / radius : 1.0;
      const double off_axis = std::acos(std::clamp(cosang, -1.0, 1.0));
      const double mask = sigmoid((opening - off_axis) / 0.06) * sigmoid((length - radius) / 0.02);
      v = v * (1.0 - mask) + 0.95 * mask;
      img.at(0, r, c) = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace

ImageDataset generate_synthetic(const SyntheticConfig& config) {
  if (config.size < 16) throw ConfigError("synthetic: image size must be at least 16, got " + std::to_string(config.size));
  if (config.classes < 8) throw ConfigError("synthetic: need at least 8 classes, got " + std::to_string(config.classes));
  if (config.per_class < 20) {
    throw ConfigError("synthetic: need at least 20 images per class, got " + std::to_string(config.per_class));
  }
  auto style_rng = make_rng(config.seed, Stream::synth, 0);
  const auto styles = draw_styles(config.classes, style_rng);

  ImageDataset d;
  d.channels = 1;
  d.height = config.size;
  d.width = config.size;
  d.class_count = config.classes;
  d.pixels.reserve(config.classes * config.per_class * config.size * config.size);
  for (std::size_t c = 0; c < config.classes; ++c) {
    auto rng = make_rng(config.seed, Stream::synth, c + 1);
    for (std::size_t i = 0; i < config.per_class; ++i) {
      d.push_back(render(styles[c], config.size, rng), static_cast<std::uint32_t>(c));
    }
  }
  return d;
}

}  // namespace fsl
