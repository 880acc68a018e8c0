#include "fsl/image_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fsl/errors.hpp"

namespace fsl {

namespace {

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void require_square(const char* op, const Image& x) {
  if (x.height != x.width) {
    throw DimensionError(std::string(op) + ": image must be square, got " + std::to_string(x.height) + "x" +
                         std::to_string(x.width));
  }
}

}  // namespace

Image blank_image(std::size_t channels, std::size_t height, std::size_t width, float value) {
  return Image{channels, height, width, std::vector<float>(channels * height * width, value)};
}

RotationConfig::RotationConfig() : angles_{0, 90, 180, 270} {}

RotationConfig::RotationConfig(std::vector<int> angles) : angles_(std::move(angles)) {
  std::sort(angles_.begin(), angles_.end());
  if (angles_.empty() || angles_.front() != 0) throw ValidationError("rotation set must contain 0 degrees");
  if (std::adjacent_find(angles_.begin(), angles_.end()) != angles_.end()) {
    throw ValidationError("rotation set has a repeated angle");
  }
  for (int a : angles_) {
    if (a < 0 || a >= 360 || a % 45 != 0) {
      throw ValidationError("rotation angle " + std::to_string(a) + " is not a multiple of 45 in [0, 360)");
    }
  }
}

RotationConfig RotationConfig::with_count(std::size_t count) {
  switch (count) {
    case 1: return RotationConfig({0});
    case 2: return RotationConfig({0, 180});
    case 4: return RotationConfig({0, 90, 180, 270});
    case 8: return RotationConfig({0, 45, 90, 135, 180, 225, 270, 315});
    default: throw ValidationError("rotation count must be 1, 2, 4 or 8, got " + std::to_string(count));
  }
}

int RotationConfig::angle_of(std::size_t label) const {
  if (label >= angles_.size()) throw ValidationError("rotation label out of range");
  return angles_[label];
}

std::size_t RotationConfig::label_of(int angle) const {
  auto it = std::find(angles_.begin(), angles_.end(), angle);
  if (it == angles_.end()) throw ValidationError("angle " + std::to_string(angle) + " not in rotation set");
  return static_cast<std::size_t>(it - angles_.begin());
}

Image rotate90(const Image& x, int k) {
  require_square("rotate90", x);
  k = ((k % 4) + 4) % 4;
  Image cur = x;
  const std::size_t n = x.height;
  for (int step = 0; step < k; ++step) {
    Image next = blank_image(x.channels, n, n);
    for (std::size_t c = 0; c < x.channels; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) next.at(c, j, n - 1 - i) = cur.at(c, i, j);
      }
    }
    cur = std::move(next);
  }
  return cur;
}

Image rotate45(const Image& x, int angle_degrees) {
  require_square("rotate45", x);
  if (angle_degrees % 45 != 0) {
    throw ValidationError("rotate45: angle " + std::to_string(angle_degrees) + " is not a multiple of 45");
  }
  const int norm = ((angle_degrees % 360) + 360) % 360;
  if (norm % 90 == 0) return rotate90(x, norm / 90);

  const double theta = norm * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const std::size_t n = x.height;
  const double centre = (static_cast<double>(n) - 1.0) / 2.0;
  Image out = blank_image(x.channels, n, n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t col = 0; col < n; ++col) {
      const double yo = static_cast<double>(r) - centre;
      const double xo = static_cast<double>(col) - centre;
      // Inverse of (y, x) -> (y cos + x sin, x cos - y sin).
      const double ys = yo * cs - xo * sn;
      const double xs = xo * cs + yo * sn;
      const long si = std::lround(ys + centre);
      const long sj = std::lround(xs + centre);
      if (si < 0 || sj < 0 || si >= static_cast<long>(n) || sj >= static_cast<long>(n)) continue;
      for (std::size_t c = 0; c < x.channels; ++c) {
        out.at(c, r, col) = x.at(c, static_cast<std::size_t>(si), static_cast<std::size_t>(sj));
      }
    }
  }
  return out;
}

Image flip_horizontal(const Image& x) {
  Image out = x;
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t i = 0; i < x.height; ++i) {
      for (std::size_t j = 0; j < x.width; ++j) out.at(c, i, j) = x.at(c, i, x.width - 1 - j);
    }
  }
  return out;
}

Image flip_vertical(const Image& x) {
  Image out = x;
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t i = 0; i < x.height; ++i) {
      for (std::size_t j = 0; j < x.width; ++j) out.at(c, i, j) = x.at(c, x.height - 1 - i, j);
    }
  }
  return out;
}

Image augment_exemplar(const Image& x, Rng& rng, const ExemplarAugmentConfig& config) {
  const std::size_t pad = config.crop_pad;
  std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> bright(config.brightness_min, config.brightness_max);
  std::uniform_real_distribution<double> shift(-config.shift_max, config.shift_max);

  const std::size_t oy = offset(rng);
  const std::size_t ox = offset(rng);
  const bool hflip = coin(rng);
  const bool vflip = coin(rng);
  const double gain = bright(rng);
  const double bias = shift(rng);

  Image out = blank_image(x.channels, x.height, x.width);
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t i = 0; i < x.height; ++i) {
      for (std::size_t j = 0; j < x.width; ++j) {
        // Position (i, j) in the crop is (i + oy - pad, j + ox - pad) in the source.
        const auto si = static_cast<std::ptrdiff_t>(i + oy) - static_cast<std::ptrdiff_t>(pad);
        const auto sj = static_cast<std::ptrdiff_t>(j + ox) - static_cast<std::ptrdiff_t>(pad);
        if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(x.height) ||
            sj >= static_cast<std::ptrdiff_t>(x.width)) {
          continue;
        }
        out.at(c, i, j) = x.at(c, static_cast<std::size_t>(si), static_cast<std::size_t>(sj));
      }
    }
  }
  if (hflip) out = flip_horizontal(out);
  if (vflip) out = flip_vertical(out);
  for (auto& p : out.pixels) p = clip01(gain * p + bias);
  return out;
}

PerturbKind parse_perturb_kind(const std::string& name) {
  if (name == "brightness") return PerturbKind::brightness;
  if (name == "contrast") return PerturbKind::contrast;
  if (name == "pixelate") return PerturbKind::pixelate;
  throw ValidationError("unknown perturbation kind '" + name + "'");
}

std::string to_string(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::brightness: return "brightness";
    case PerturbKind::contrast: return "contrast";
    case PerturbKind::pixelate: return "pixelate";
  }
  return "?";
}

namespace {
void check_severity(int severity) {
  if (severity < 0 || severity > 5) throw ValidationError("severity must be in 0..5, got " + std::to_string(severity));
}
}  // namespace

double brightness_delta(int severity) {
  check_severity(severity);
  return 0.05 * severity;
}

double contrast_factor(int severity) {
  check_severity(severity);
  return severity == 0 ? 1.0 : 0.85 - 0.1 * severity;
}

std::size_t pixelate_factor(int severity) {
  check_severity(severity);
  return static_cast<std::size_t>(severity) + 1;
}

Image pixelate(const Image& x, std::size_t factor) {
  if (factor == 0) throw ValidationError("pixelate: factor must be positive");
  if (factor == 1) return x;
  Image out = x;
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t bi = 0; bi < x.height; bi += factor) {
      for (std::size_t bj = 0; bj < x.width; bj += factor) {
        const std::size_t ei = std::min(bi + factor, x.height), ej = std::min(bj + factor, x.width);
        double acc = 0.0;
        for (std::size_t i = bi; i < ei; ++i) {
          for (std::size_t j = bj; j < ej; ++j) acc += x.at(c, i, j);
        }
        const float avg = clip01(acc / static_cast<double>((ei - bi) * (ej - bj)));
        for (std::size_t i = bi; i < ei; ++i) {
          for (std::size_t j = bj; j < ej; ++j) out.at(c, i, j) = avg;
        }
      }
    }
  }
  return out;
}

Image perturb(const Image& x, PerturbKind kind, int severity) {
  check_severity(severity);
  if (severity == 0) return x;
  Image out = x;
  switch (kind) {
    case PerturbKind::brightness: {
      const double delta = brightness_delta(severity);
      for (auto& p : out.pixels) p = clip01(p + delta);
      break;
    }
    case PerturbKind::contrast: {
      double m = 0.0;
      for (float p : x.pixels) m += p;
      m /= static_cast<double>(x.pixels.size());
      const double f = contrast_factor(severity);
      for (auto& p : out.pixels) p = clip01(m + f * (p - m));
      break;
    }
    case PerturbKind::pixelate: out = pixelate(x, pixelate_factor(severity)); break;
  }
  return out;
}

}  // namespace fsl
