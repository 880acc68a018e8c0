#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fsl/random.hpp"

namespace fsl {

// One CHW float image with pixels in [0,1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t c, std::size_t row, std::size_t col) const {
    return pixels[(c * height + row) * width + col];
  }
  float& at(std::size_t c, std::size_t row, std::size_t col) { return pixels[(c * height + row) * width + col]; }
  bool operator==(const Image&) const = default;
};

Image blank_image(std::size_t channels, std::size_t height, std::size_t width, float value = 0.0f);

// Rotation angle set for the rotation pretext task. Angles are degrees,
// multiples of 45 in [0, 315], sorted ascending, always containing 0; the
// label of an angle is its position in the list.
class RotationConfig {
 public:
  RotationConfig();  // {0, 90, 180, 270}
  explicit RotationConfig(std::vector<int> angles);
  // 1 -> {0}, 2 -> {0,180}, 4 -> {0,90,180,270}, 8 -> every 45 degrees.
  static RotationConfig with_count(std::size_t count);

  std::size_t size() const { return angles_.size(); }
  const std::vector<int>& angles() const { return angles_; }
  int angle_of(std::size_t label) const;
  std::size_t label_of(int angle) const;

 private:
  std::vector<int> angles_;
};

// Exact pixel permutation: one step maps (row i, col j) to (row j, col H-1-i).
Image rotate90(const Image& x, int k);
// Nearest-neighbour rotation about the centre in the rotate90 direction,
// zero fill outside the frame; multiples of 90 delegate to rotate90.
Image rotate45(const Image& x, int angle_degrees);
Image flip_horizontal(const Image& x);
Image flip_vertical(const Image& x);

struct ExemplarAugmentConfig {
  std::size_t crop_pad = 4;
  double brightness_min = 0.8;
  double brightness_max = 1.2;
  double shift_max = 0.1;
};

// Random crop (zero pad then crop back), random horizontal and vertical
// flips, brightness scale and additive shift, clipped to [0,1].
Image augment_exemplar(const Image& x, Rng& rng, const ExemplarAugmentConfig& config = {});

enum class PerturbKind { brightness, contrast, pixelate };

PerturbKind parse_perturb_kind(const std::string& name);
std::string to_string(PerturbKind kind);

// Severity tables (severity 0 is the identity):
//   brightness: +0.05 * s
//   contrast:   scale about the image mean by 0.85 - 0.1 * s
//   pixelate:   block-average with factor s + 1
double brightness_delta(int severity);
double contrast_factor(int severity);
std::size_t pixelate_factor(int severity);

Image perturb(const Image& x, PerturbKind kind, int severity);
Image pixelate(const Image& x, std::size_t factor);

}  // namespace fsl
