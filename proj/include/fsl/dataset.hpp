#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fsl/image_ops.hpp"
#include "fsl/tensor.hpp"

namespace fsl {

// Labeled CHW image collection. Pixels are stored as float32, matching the
// on-disk container.
struct ImageDataset {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t class_count = 0;
  std::vector<float> pixels;  // image_count * image_size()
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> pixels_of(std::size_t index) const;
  Image image(std::size_t index) const;
  void push_back(const Image& image, std::uint32_t label);

  // Image indices of every class, in dataset order.
  std::vector<std::vector<std::size_t>> indices_by_class() const;

  // Throws ValidationError on: pixel outside [0,1], label >= class_count,
  // a class with fewer than 2 images.
  void validate() const;

  bool operator==(const ImageDataset&) const = default;
};

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t classes = 16;
  std::size_t per_class = 60;
  std::size_t size = 32;
};

// Procedural orientation-bearing classes: an oriented grating with class
// frequency and angle plus a bright wedge whose direction, opening and
// length are class properties. Per-sample jitter and pixel noise.
ImageDataset generate_synthetic(const SyntheticConfig& config);

// Container "FSL1", little-endian; see README for the layout.
void save_dataset(const ImageDataset& dataset, const std::filesystem::path& path);
ImageDataset load_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_dataset(const ImageDataset& dataset);
ImageDataset decode_dataset(std::span<const std::uint8_t> bytes);

struct SplitSpec {
  std::vector<std::size_t> base;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> novel;

  std::size_t base_count() const { return base.size(); }
  std::size_t novel_count() const { return novel.size(); }
  bool operator==(const SplitSpec&) const = default;
};

struct SplitRatios {
  std::size_t base = 8;
  std::size_t validation = 3;
  std::size_t novel = 5;
};

// Seeded random partition of [0, class_count) with the given set sizes.
// min_novel guards the largest N-way the split must support.
SplitSpec make_splits(std::size_t class_count, const SplitRatios& ratios, std::uint64_t seed,
                      std::size_t min_novel = 1);
// Explicit lists: validated as a disjoint, exhaustive partition.
SplitSpec make_splits(std::size_t class_count, std::vector<std::size_t> base, std::vector<std::size_t> validation,
                      std::vector<std::size_t> novel, std::size_t min_novel = 1);
// Validation classes folded into the base set.
SplitSpec merge_validation(const SplitSpec& split);

std::string format_split(const SplitSpec& split);
SplitSpec parse_split(const std::string& text, std::size_t class_count);
void save_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec load_split(const std::filesystem::path& path, std::size_t class_count);

// Image indices whose label is in `classes`, in dataset order.
std::vector<std::size_t> images_of_classes(const ImageDataset& dataset, std::span<const std::size_t> classes);

// [B x C x H x W] float64 constant built from dataset rows or images.
Tensor to_batch(const ImageDataset& dataset, std::span<const std::size_t> indices);
Tensor to_batch(std::span<const Image> images);

// Every image of `indices` under every angle of `rotations`, ordered
// angle-major: entry r * B + i is image i rotated by angle r, rotation
// label r.
struct RotatedBatch {
  std::vector<Image> images;
  std::vector<std::size_t> rotation_labels;
  std::vector<std::size_t> source;  // position in the input list
};
RotatedBatch make_rotated_batch(std::span<const Image> images, const RotationConfig& rotations);
Image rotate_image(const Image& x, int angle_degrees);

}  // namespace fsl
