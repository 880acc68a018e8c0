#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "fsl/dataset.hpp"
#include "fsl/errors.hpp"
#include "fsl/random.hpp"
#include "support.hpp"

using namespace fsl;
using fsl::test::random_image;

namespace {

const ImageDataset& default_dataset() {
  static const ImageDataset ds = generate_synthetic({});
  return ds;
}

double l2(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return std::sqrt(s);
}

bool in_unit_range(const Image& im) {
  return std::all_of(im.pixels.begin(), im.pixels.end(), [](float p) { return p >= 0.0f && p <= 1.0f; });
}

void check_partition(const SplitSpec& s, std::size_t classes) {
  std::multiset<std::size_t> all;
  all.insert(s.base.begin(), s.base.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.novel.begin(), s.novel.end());
  CHECK(all.size() == classes);
  for (std::size_t c = 0; c < classes; ++c) CHECK(all.count(c) == 1);
}

std::string message_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_dataset(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("synthetic defaults and determinism") {
    const auto& ds = default_dataset();
    CHECK(ds.class_count == 16);
    CHECK(ds.size() == 16 * 60);
    CHECK(ds.channels == 1);
    CHECK(ds.height == 32);
    CHECK(ds.width == 32);
    CHECK_NOTHROW(ds.validate());
    for (const auto& idx : ds.indices_by_class()) CHECK(idx.size() == 60);
    CHECK(generate_synthetic({}) == ds);
    CHECK(encode_dataset(generate_synthetic({})) == encode_dataset(ds));
    CHECK_FALSE(generate_synthetic({1}) == ds);
  }

  TEST_CASE("synthetic configuration errors") {
    CHECK_THROWS_AS(generate_synthetic({0, 16, 60, 15}), ConfigError);
    CHECK_THROWS_AS(generate_synthetic({0, 7, 60, 32}), ConfigError);
    CHECK_THROWS_AS(generate_synthetic({0, 16, 19, 32}), ConfigError);
  }

  TEST_CASE("synthetic images are rotation-asymmetric") {
    const auto& ds = default_dataset();
    std::size_t differ = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Image im = ds.image(i);
      differ += l2(im, rotate90(im, 1)) > 1e-3;
    }
    CHECK(static_cast<double>(differ) >= 0.99 * static_cast<double>(ds.size()));
  }

  TEST_CASE("synthetic classes are separable by nearest class mean") {
    const auto& ds = default_dataset();
    const auto by_class = ds.indices_by_class();
    std::vector<std::vector<double>> means(ds.class_count, std::vector<double>(ds.image_size(), 0.0));
    for (std::size_t c = 0; c < ds.class_count; ++c) {
      for (std::size_t k = 0; k < 30; ++k) {
        auto px = ds.pixels_of(by_class[c][k]);
        for (std::size_t p = 0; p < px.size(); ++p) means[c][p] += px[p] / 30.0;
      }
    }
    std::size_t hit = 0, total = 0;
    for (std::size_t c = 0; c < ds.class_count; ++c) {
      for (std::size_t k = 30; k < 60; ++k) {
        auto px = ds.pixels_of(by_class[c][k]);
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t m = 0; m < ds.class_count; ++m) {
          double d = 0.0;
          for (std::size_t p = 0; p < px.size(); ++p) d += (px[p] - means[m][p]) * (px[p] - means[m][p]);
          if (d < best_d) best_d = d, best = m;
        }
        hit += best == c;
        ++total;
      }
    }
    CHECK(static_cast<double>(hit) / static_cast<double>(total) > 0.5);
  }

  TEST_CASE("container round trip") {
    auto ds = fsl::test::random_dataset(3, 4, 5, 9);
    auto bytes = encode_dataset(ds);
    CHECK(decode_dataset(bytes) == ds);
    CHECK(encode_dataset(decode_dataset(bytes)) == bytes);
    CHECK(bytes.size() == 28 + ds.size() * (4 + 4 * ds.image_size()));

    const auto path = std::filesystem::temp_directory_path() / "fsl_test_roundtrip.fsl";
    save_dataset(ds, path);
    CHECK(load_dataset(path) == ds);
    std::filesystem::remove(path);
  }

  TEST_CASE("container header layout") {
    auto ds = fsl::test::random_dataset(2, 2, 4, 1);
    auto bytes = encode_dataset(ds);
    CHECK(std::memcmp(bytes.data(), "FSL1", 4) == 0);
    auto u32 = [&](std::size_t at) {
      return bytes[at] | (bytes[at + 1] << 8) | (bytes[at + 2] << 16) | (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
    };
    CHECK(u32(4) == 1);
    CHECK(u32(8) == 2);
    CHECK(u32(12) == 4);
    CHECK(u32(16) == 1);
    CHECK(u32(20) == 4);
    CHECK(u32(24) == 4);
    CHECK(u32(28) == 0);
    float first;
    std::memcpy(&first, bytes.data() + 32, 4);
    CHECK(first == ds.pixels[0]);
  }

  TEST_CASE("container errors name the offset") {
    auto ds = fsl::test::random_dataset(2, 3, 4, 2);
    auto good = encode_dataset(ds);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK(message_of(bad_magic).find("offset 0") != std::string::npos);

    auto truncated = good;
    truncated.resize(good.size() - 3);
    CHECK(message_of(truncated).find("offset") != std::string::npos);

    auto out_of_range = good;
    const float bad = 1.5f;
    std::memcpy(out_of_range.data() + 32, &bad, 4);
    const auto msg = message_of(out_of_range);
    CHECK(msg.find("offset 32") != std::string::npos);

    auto empty = good;
    empty.resize(28);
    empty[16] = empty[17] = empty[18] = empty[19] = 0;
    CHECK_FALSE(message_of(empty).empty());

    auto bad_label = good;
    bad_label[28] = 7;
    CHECK(message_of(bad_label).find("offset 28") != std::string::npos);

    auto trailing = good;
    trailing.push_back(0);
    CHECK_FALSE(message_of(trailing).empty());

    auto lonely = encode_dataset(fsl::test::random_dataset(2, 2, 4, 3));
    lonely[28 + 3 * (4 + 16 * 4)] = 0;
    CHECK(message_of(lonely).find("class 1") != std::string::npos);
  }

  TEST_CASE("splits by ratio") {
    auto s = make_splits(16, SplitRatios{10, 3, 3}, 4);
    CHECK(s.base.size() == 10);
    CHECK(s.validation.size() == 3);
    CHECK(s.novel.size() == 3);
    check_partition(s, 16);

    auto merged = merge_validation(s);
    CHECK(merged.base.size() == 13);
    CHECK(merged.validation.empty());
    CHECK(merged.novel == s.novel);
    check_partition(merged, 16);

    auto d = make_splits(16, SplitRatios{}, 0);
    CHECK(d.base.size() == 8);
    CHECK(d.validation.size() == 3);
    CHECK(d.novel.size() == 5);
    CHECK(make_splits(16, SplitRatios{}, 0) == d);
    CHECK_THROWS(make_splits(16, SplitRatios{10, 3, 3}, 0, 5));
    CHECK_THROWS(make_splits(16, SplitRatios{10, 3, 4}, 0));
  }

  TEST_CASE("split partition holds for random ratios") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t classes = 8 + rng() % 30;
      const std::size_t base = 1 + rng() % (classes - 3);
      const std::size_t val = 1 + rng() % (classes - base - 1);
      const std::size_t novel = classes - base - val;
      auto s = make_splits(classes, SplitRatios{base, val, novel}, rng());
      check_partition(s, classes);
      check_partition(merge_validation(s), classes);
      check_partition(parse_split(format_split(s), classes), classes);
      CHECK(parse_split(format_split(s), classes) == s);
    }
  }

  TEST_CASE("explicit split lists") {
    auto s = make_splits(6, {0, 1, 2}, {3}, {4, 5});
    check_partition(s, 6);
    CHECK_THROWS_AS(make_splits(6, {0, 1, 2}, {2, 3}, {4, 5}), ValidationError);
    CHECK_THROWS_AS(make_splits(6, {0, 1}, {3}, {4, 5}), ValidationError);
  }

  TEST_CASE("split text format") {
    auto s = make_splits(6, {0, 1, 2}, {3}, {4, 5});
    CHECK(format_split(s) == "base:0,1,2\nval:3\nnovel:4,5\n");
    CHECK(parse_split("base: 0, 1,2\nval:3\nnovel: 4,5\n", 6) == s);
    CHECK_THROWS(parse_split("base: 0,1\nval: 3\nnovel: 4,5\n", 6));
  }

  TEST_CASE("rotate90 group structure") {
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 50; ++trial) {
      const Image x = random_image(3 + rng() % 9, rng, 1 + rng() % 3);
      Image y = x;
      for (int i = 0; i < 4; ++i) y = rotate90(y, 1);
      CHECK(y == x);
      CHECK(rotate90(x, 2) == flip_vertical(flip_horizontal(x)));
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) CHECK(rotate90(rotate90(x, a), b) == rotate90(x, (a + b) % 4));
    }
    const Image flat = blank_image(1, 5, 5, 0.4f);
    for (int k = 0; k < 4; ++k) CHECK(rotate90(flat, k) == flat);
    CHECK_THROWS_AS(rotate90(blank_image(1, 3, 4), 1), DimensionError);
  }

  TEST_CASE("rotate90 pixel convention") {
    Image x = blank_image(1, 3, 3);
    for (std::size_t i = 0; i < 9; ++i) x.pixels[i] = static_cast<float>(i) / 10.0f;
    const Image y = rotate90(x, 1);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(y.at(0, j, 2 - i) == x.at(0, i, j));
  }

  TEST_CASE("rotate45") {
    std::mt19937_64 rng(41);
    const Image x = random_image(9, rng);
    CHECK(rotate45(x, 90) == rotate90(x, 1));
    CHECK(rotate45(x, 270) == rotate90(x, 3));
    for (int angle : {45, 135, 225, 315}) CHECK(in_unit_range(rotate45(x, angle)));
    CHECK_THROWS_AS(rotate45(x, 30), ValidationError);

    Image disk = blank_image(1, 15, 15);
    for (std::size_t i = 0; i < 15; ++i)
      for (std::size_t j = 0; j < 15; ++j) {
        const double di = static_cast<double>(i) - 7.0, dj = static_cast<double>(j) - 7.0;
        if (di * di + dj * dj <= 25.0) disk.at(0, i, j) = 1.0f;
      }
    const Image r = rotate45(disk, 45);
    for (std::size_t i = 0; i < 15; ++i)
      for (std::size_t j = 0; j < 15; ++j) {
        const double di = static_cast<double>(i) - 7.0, dj = static_cast<double>(j) - 7.0;
        const double rr = di * di + dj * dj;
        if (rr <= 16.0) CHECK(r.at(0, i, j) == 1.0f);
        if (rr >= 36.0) CHECK(r.at(0, i, j) == 0.0f);
      }
  }

  TEST_CASE("rotation config") {
    RotationConfig def;
    CHECK(def.angles() == std::vector<int>{0, 90, 180, 270});
    for (std::size_t l = 0; l < def.size(); ++l) CHECK(def.label_of(def.angle_of(l)) == l);
    CHECK(RotationConfig::with_count(1).angles() == std::vector<int>{0});
    CHECK(RotationConfig::with_count(2).angles() == std::vector<int>{0, 180});
    CHECK(RotationConfig::with_count(8).size() == 8);
    CHECK_THROWS_AS(RotationConfig({90, 180}), ValidationError);
    CHECK_THROWS_AS(RotationConfig({0, 30}), ValidationError);
    CHECK_THROWS_AS(RotationConfig({0, 90, 90}), ValidationError);
    CHECK_THROWS(RotationConfig::with_count(3));
  }

  TEST_CASE("rotated batches round-trip their labels") {
    const auto& ds = default_dataset();
    std::vector<Image> images;
    for (std::size_t i = 0; i < 5; ++i) images.push_back(ds.image(i * 97));
    for (std::size_t count : {1, 2, 4, 8}) {
      const auto rot = RotationConfig::with_count(count);
      const auto batch = make_rotated_batch(images, rot);
      REQUIRE(batch.images.size() == images.size() * count);
      for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t i = 0; i < images.size(); ++i) {
          const std::size_t at = r * images.size() + i;
          CHECK(batch.rotation_labels[at] == r);
          CHECK(batch.source[at] == i);
          CHECK(batch.images[at] == rotate_image(images[i], rot.angle_of(r)));
          const int back = (360 - rot.angle_of(batch.rotation_labels[at])) % 360;
          if (rot.angle_of(r) % 90 == 0) CHECK(rotate_image(batch.images[at], back) == images[i]);
        }
      }
    }
  }

  TEST_CASE("exemplar augmentation") {
    std::mt19937_64 src(43);
    const Image x = random_image(16, src);
    for (int trial = 0; trial < 100; ++trial) {
      auto rng = make_rng(5, Stream::exemplar, trial);
      CHECK(in_unit_range(augment_exemplar(x, rng)));
    }
    auto r1 = make_rng(9, Stream::exemplar, 0);
    auto r2 = make_rng(9, Stream::exemplar, 0);
    CHECK(augment_exemplar(x, r1) == augment_exemplar(x, r2));

    std::size_t distinct = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      auto rng = make_rng(11, Stream::exemplar, trial);
      std::vector<Image> draws;
      for (int k = 0; k < 4; ++k) draws.push_back(augment_exemplar(x, rng));
      bool ok = true;
      for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) ok = ok && !(draws[a] == draws[b]);
      distinct += ok;
    }
    CHECK(distinct > 990);
  }

  TEST_CASE("perturbations") {
    const Image zero = blank_image(1, 8, 8);
    for (int s = 1; s <= 5; ++s) {
      const Image b = perturb(zero, PerturbKind::brightness, s);
      for (float p : b.pixels) CHECK(p == doctest::Approx(0.05 * s).epsilon(1e-6));
    }
    CHECK(brightness_delta(1) == doctest::Approx(0.05));
    CHECK(brightness_delta(5) == doctest::Approx(0.25));
    CHECK(contrast_factor(1) == doctest::Approx(0.75));
    CHECK(contrast_factor(5) == doctest::Approx(0.35));
    CHECK(pixelate_factor(1) == 2);
    CHECK(pixelate_factor(5) == 6);

    const Image flat = blank_image(1, 8, 8, 0.3f);
    for (int s = 0; s <= 5; ++s) CHECK(perturb(flat, PerturbKind::contrast, s) == flat);

    std::mt19937_64 rng(47);
    const Image x = random_image(12, rng);
    CHECK(pixelate(x, 1) == x);
    for (auto kind : {PerturbKind::brightness, PerturbKind::contrast, PerturbKind::pixelate}) {
      CHECK(perturb(x, kind, 0) == x);
      for (int s = 1; s <= 5; ++s) CHECK(in_unit_range(perturb(x, kind, s)));
    }
    const Image p = pixelate(x, 2);
    double block = 0.0;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) block += x.at(0, i, j);
    CHECK(p.at(0, 0, 0) == doctest::Approx(block / 4).epsilon(1e-6));
    CHECK(p.at(0, 1, 1) == p.at(0, 0, 0));

    CHECK_THROWS_AS(parse_perturb_kind("fog"), ValidationError);
    CHECK(parse_perturb_kind("pixelate") == PerturbKind::pixelate);
    CHECK_THROWS(perturb(x, PerturbKind::brightness, 6));
  }

  TEST_CASE("batches and class selection") {
    auto ds = fsl::test::random_dataset(3, 4, 5, 4);
    const std::size_t classes[] = {2, 0};
    const auto idx = images_of_classes(ds, classes);
    CHECK(idx.size() == 8);
    for (auto i : idx) CHECK((ds.labels[i] == 0 || ds.labels[i] == 2));
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    auto batch = to_batch(ds, idx);
    CHECK(batch.shape() == Shape{8, 1, 5, 5});
    CHECK(batch.data()[ds.image_size()] == static_cast<double>(ds.pixels_of(idx[1])[0]));
  }
}
