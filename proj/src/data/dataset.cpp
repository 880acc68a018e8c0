#include "fsl/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "fsl/errors.hpp"
#include "fsl/random.hpp"

namespace fsl {

std::span<const float> ImageDataset::pixels_of(std::size_t index) const {
  return std::span<const float>(pixels).subspan(index * image_size(), image_size());
}

Image ImageDataset::image(std::size_t index) const {
  auto p = pixels_of(index);
  return Image{channels, height, width, std::vector<float>(p.begin(), p.end())};
}

void ImageDataset::push_back(const Image& image, std::uint32_t label) {
  if (image.channels != channels || image.height != height || image.width != width) {
    throw DimensionError("dataset: image extents do not match dataset");
  }
  pixels.insert(pixels.end(), image.pixels.begin(), image.pixels.end());
  labels.push_back(label);
}

std::vector<std::vector<std::size_t>> ImageDataset::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < class_count) out[labels[i]].push_back(i);
  }
  return out;
}

void ImageDataset::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw ValidationError("dataset: zero image extent");
  if (pixels.size() != labels.size() * image_size()) throw ValidationError("dataset: pixel count mismatch");
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(pixels[i] >= 0.0f && pixels[i] <= 1.0f)) {
      throw ValidationError("dataset: pixel " + std::to_string(i) + " outside [0,1]");
    }
  }
  std::vector<std::size_t> counts(class_count, 0);
  for (auto l : labels) {
    if (l >= class_count) throw ValidationError("dataset: label " + std::to_string(l) + " >= class count");
    ++counts[l];
  }
  for (std::size_t c = 0; c < class_count; ++c) {
    if (counts[c] < 2) throw ValidationError("dataset: class " + std::to_string(c) + " has fewer than 2 images");
  }
  if (class_count == 0) throw ValidationError("dataset: no classes");
}

// ---------------------------------------------------------------------------
// Container I/O

namespace {

constexpr char kMagic[4] = {'F', 'S', 'L', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 6 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  std::uint32_t u32(const char* what) {
    if (pos_ + 4 > bytes_.size()) {
      throw FormatError("dataset: truncated file reading " + std::string(what) + " at offset " +
                        std::to_string(pos_));
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_dataset(const ImageDataset& dataset) {
  dataset.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + dataset.size() * (4 + 4 * dataset.image_size()));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(dataset.class_count));
  put_u32(out, static_cast<std::uint32_t>(dataset.size()));
  put_u32(out, static_cast<std::uint32_t>(dataset.channels));
  put_u32(out, static_cast<std::uint32_t>(dataset.height));
  put_u32(out, static_cast<std::uint32_t>(dataset.width));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    put_u32(out, dataset.labels[i]);
    for (float p : dataset.pixels_of(i)) put_f32(out, p);
  }
  return out;
}

ImageDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("dataset: bad magic at offset 0 (expected FSL1)");
  }
  Reader in(bytes.subspan(4));
  auto at = [&] { return std::to_string(4 + in.offset()); };
  const auto version_offset = at();
  if (in.u32("version") != kVersion) throw FormatError("dataset: unsupported version at offset " + version_offset);
  ImageDataset d;
  d.class_count = in.u32("class_count");
  const std::size_t count = in.u32("image_count");
  d.channels = in.u32("channels");
  d.height = in.u32("height");
  d.width = in.u32("width");
  if (d.channels == 0 || d.height == 0 || d.width == 0) {
    throw FormatError("dataset: zero image extent in header at offset 16");
  }
  if (count == 0) throw FormatError("dataset: empty image list at offset 12");
  const std::size_t record = 4 + 4 * d.image_size();
  if (bytes.size() - kHeaderBytes < count * record) {
    throw FormatError("dataset: truncated file, record " + std::to_string((bytes.size() - kHeaderBytes) / record) +
                      " ends past offset " + std::to_string(bytes.size()));
  }
  d.labels.reserve(count);
  d.pixels.reserve(count * d.image_size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto label_offset = at();
    const std::uint32_t label = in.u32("class_id");
    if (label >= d.class_count) {
      throw FormatError("dataset: class id " + std::to_string(label) + " >= class count at offset " + label_offset);
    }
    d.labels.push_back(label);
    for (std::size_t j = 0; j < d.image_size(); ++j) {
      const auto pixel_offset = at();
      const float p = in.f32("pixel");
      if (!(p >= 0.0f && p <= 1.0f)) {
        throw FormatError("dataset: pixel value " + std::to_string(p) + " outside [0,1] at offset " + pixel_offset);
      }
      d.pixels.push_back(p);
    }
  }
  if (4 + in.offset() != bytes.size()) {
    throw FormatError("dataset: trailing bytes after offset " + at());
  }
  std::vector<std::size_t> counts(d.class_count, 0);
  for (auto l : d.labels) ++counts[l];
  for (std::size_t c = 0; c < d.class_count; ++c) {
    if (counts[c] < 2) {
      throw FormatError("dataset: class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                        " images (need 2) declared at offset 8");
    }
  }
  return d;
}

void save_dataset(const ImageDataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

ImageDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

// ---------------------------------------------------------------------------
// Splits

namespace {

void check_partition(std::size_t class_count, const SplitSpec& s, std::size_t min_novel, bool allow_empty_val) {
  std::vector<int> owner(class_count, -1);
  const std::vector<std::size_t>* sets[3] = {&s.base, &s.validation, &s.novel};
  const char* names[3] = {"base", "val", "novel"};
  for (int k = 0; k < 3; ++k) {
    for (auto c : *sets[k]) {
      if (c >= class_count) throw ValidationError("split: class id " + std::to_string(c) + " out of range");
      if (owner[c] != -1) {
        throw ValidationError("split: class " + std::to_string(c) + " listed in both " + names[owner[c]] + " and " +
                              names[k]);
      }
      owner[c] = k;
    }
  }
  for (std::size_t c = 0; c < class_count; ++c) {
    if (owner[c] == -1) throw ValidationError("split: class " + std::to_string(c) + " not assigned");
  }
  if (s.base.empty() || s.novel.empty() || (!allow_empty_val && s.validation.empty())) {
    throw ValidationError("split: every set must be nonempty");
  }
  if (s.novel.size() < min_novel) {
    throw ValidationError("split: " + std::to_string(s.novel.size()) + " novel classes, need at least " +
                          std::to_string(min_novel));
  }
}

}  // namespace

SplitSpec make_splits(std::size_t class_count, const SplitRatios& ratios, std::uint64_t seed, std::size_t min_novel) {
  if (ratios.base + ratios.validation + ratios.novel != class_count) {
    throw ValidationError("split: sizes " + std::to_string(ratios.base) + "/" + std::to_string(ratios.validation) +
                          "/" + std::to_string(ratios.novel) + " do not sum to " + std::to_string(class_count));
  }
  std::vector<std::size_t> ids(class_count);
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_rng(seed, Stream::split);
  std::shuffle(ids.begin(), ids.end(), rng);
  SplitSpec s;
  s.base.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(ratios.base));
  s.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(ratios.base),
                      ids.begin() + static_cast<std::ptrdiff_t>(ratios.base + ratios.validation));
  s.novel.assign(ids.begin() + static_cast<std::ptrdiff_t>(ratios.base + ratios.validation), ids.end());
  for (auto* v : {&s.base, &s.validation, &s.novel}) std::sort(v->begin(), v->end());
  check_partition(class_count, s, min_novel, false);
  return s;
}

SplitSpec make_splits(std::size_t class_count, std::vector<std::size_t> base, std::vector<std::size_t> validation,
                      std::vector<std::size_t> novel, std::size_t min_novel) {
  SplitSpec s{std::move(base), std::move(validation), std::move(novel)};
  check_partition(class_count, s, min_novel, true);
  for (auto* v : {&s.base, &s.validation, &s.novel}) std::sort(v->begin(), v->end());
  return s;
}

SplitSpec merge_validation(const SplitSpec& split) {
  SplitSpec s = split;
  s.base.insert(s.base.end(), s.validation.begin(), s.validation.end());
  std::sort(s.base.begin(), s.base.end());
  s.validation.clear();
  return s;
}

std::string format_split(const SplitSpec& split) {
  std::ostringstream out;
  auto line = [&](const char* name, const std::vector<std::size_t>& ids) {
    out << name;
    for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? "," : "") << ids[i];
    out << '\n';
  };
  line("base:", split.base);
  line("val:", split.validation);
  line("novel:", split.novel);
  return out.str();
}

SplitSpec parse_split(const std::string& text, std::size_t class_count) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::size_t> sets[3];
  bool seen[3] = {false, false, false};
  const char* names[3] = {"base:", "val:", "novel:"};
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    int which = -1;
    for (int k = 0; k < 3; ++k) {
      if (line.rfind(names[k], 0) == 0) which = k;
    }
    if (which < 0) throw FormatError("split: unexpected line " + std::to_string(line_no) + ": " + line);
    seen[which] = true;
    std::istringstream items(line.substr(std::strlen(names[which])));
    std::string item;
    while (std::getline(items, item, ',')) {
      const auto first = item.find_first_not_of(" \t");
      if (first == std::string::npos) continue;
      try {
        sets[which].push_back(static_cast<std::size_t>(std::stoul(item.substr(first))));
      } catch (const std::exception&) {
        throw FormatError("split: bad class id '" + item + "' on line " + std::to_string(line_no));
      }
    }
  }
  for (int k = 0; k < 3; ++k) {
    if (!seen[k]) throw FormatError(std::string("split: missing line ") + names[k]);
  }
  return make_splits(class_count, sets[0], sets[1], sets[2]);
}

void save_split(const SplitSpec& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << format_split(split);
}

SplitSpec load_split(const std::filesystem::path& path, std::size_t class_count) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_split(buf.str(), class_count);
}

std::vector<std::size_t> images_of_classes(const ImageDataset& dataset, std::span<const std::size_t> classes) {
  std::set<std::size_t> wanted(classes.begin(), classes.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (wanted.count(dataset.labels[i])) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

Tensor to_batch(const ImageDataset& dataset, std::span<const std::size_t> indices) {
  std::vector<double> values;
  values.reserve(indices.size() * dataset.image_size());
  for (auto i : indices) {
    auto p = dataset.pixels_of(i);
    values.insert(values.end(), p.begin(), p.end());
  }
  return Tensor::constant({indices.size(), dataset.channels, dataset.height, dataset.width}, std::move(values));
}

Tensor to_batch(std::span<const Image> images) {
  if (images.empty()) throw DimensionError("to_batch: empty image list");
  const auto& first = images.front();
  std::vector<double> values;
  values.reserve(images.size() * first.pixels.size());
  for (const auto& im : images) {
    if (im.channels != first.channels || im.height != first.height || im.width != first.width) {
      throw DimensionError("to_batch: images differ in extent");
    }
    values.insert(values.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor::constant({images.size(), first.channels, first.height, first.width}, std::move(values));
}

Image rotate_image(const Image& x, int angle_degrees) {
  return angle_degrees % 90 == 0 ? rotate90(x, angle_degrees / 90) : rotate45(x, angle_degrees);
}

RotatedBatch make_rotated_batch(std::span<const Image> images, const RotationConfig& rotations) {
  RotatedBatch out;
  const std::size_t n = images.size();
  out.images.reserve(n * rotations.size());
  for (std::size_t r = 0; r < rotations.size(); ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      out.images.push_back(rotate_image(images[i], rotations.angle_of(r)));
      out.rotation_labels.push_back(r);
      out.source.push_back(i);
    }
  }
  return out;
}

}  // namespace fsl
