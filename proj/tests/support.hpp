#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/tensor.hpp"

namespace fsl::test {

inline Tensor random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor constant_of(Shape shape, std::vector<double> values) {
  return Tensor::constant(std::move(shape), std::move(values));
}

// Central differences computed directly on the parameter storage; kept
// separate from the library's gradcheck so the two can be compared.
inline double max_fd_error(const std::function<Tensor()>& loss, std::vector<Tensor> wrt, double h = 1e-5) {
  for (auto& p : wrt) p.zero_grad();
  backward(loss());
  double worst = 0.0;
  for (auto& p : wrt) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = loss().item();
      data[i] = keep - h;
      const double down = loss().item();
      data[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

inline Image random_image(std::size_t size, std::mt19937_64& rng, std::size_t channels = 1) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image im = blank_image(channels, size, size);
  for (auto& p : im.pixels) p = u(rng);
  return im;
}

// Small labeled dataset of random images, `per_class` per class.
inline ImageDataset random_dataset(std::size_t classes, std::size_t per_class, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ImageDataset ds;
  ds.channels = 1;
  ds.height = size;
  ds.width = size;
  ds.class_count = classes;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) ds.push_back(random_image(size, rng), static_cast<std::uint32_t>(c));
  }
  return ds;
}

}  // namespace fsl::test
