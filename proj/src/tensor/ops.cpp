#include "fsl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "fsl/errors.hpp"

namespace fsl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return Tensor::from_op(op, a.shape(), std::move(out), {a}, [deriv](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::from_op("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& in = input(self, k);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::from_op("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& in = input(self, k);
      if (!in.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::from_op("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw ValidationError("log: non-positive input " + std::to_string(x));
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a,
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Tensor sqrt(const Tensor& a) {
  for (double x : a.data()) {
    if (x < 0.0) throw ValidationError("sqrt: negative input " + std::to_string(x));
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double x : a.data()) total += x;
  return Tensor::from_op("sum", {1}, {total}, {a}, [](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::from_op("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> flat_indices) {
  std::vector<double> out(flat_indices.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (flat_indices[i] >= a.numel()) {
      throw DimensionError("gather: index " + std::to_string(flat_indices[i]) + " out of range");
    }
    out[i] = a.data()[flat_indices[i]];
  }
  const Shape shape{out.size()};
  return Tensor::from_op("gather", shape, std::move(out), {a},
                         [idx = std::move(flat_indices)](Node& self) {
                           Node& in = input(self, 0);
                           if (!in.requires_grad) return;
                           auto& g = in.grad_buffer();
                           for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
                         });
}

Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() < 1) throw DimensionError("index_rows: scalar input");
  const std::size_t row_size = a.numel() / a.dim(0);
  std::vector<double> out(rows.size() * row_size);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) throw DimensionError("index_rows: row out of range");
    std::copy_n(a.data().begin() + rows[r] * row_size, row_size, out.begin() + r * row_size);
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  return Tensor::from_op(
      "index_rows", std::move(shape), std::move(out), {a},
      [idx = std::vector<std::size_t>(rows.begin(), rows.end()), row_size](Node& self) {
        Node& in = input(self, 0);
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          for (std::size_t j = 0; j < row_size; ++j) g[idx[r] * row_size + j] += self.grad[r * row_size + j];
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto ei = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k),
             en = static_cast<Eigen::Index>(n);
  MapMat(out.data(), ei, en).noalias() = ConstMapMat(a.data().data(), ei, ek) * ConstMapMat(b.data().data(), ek, en);
  return Tensor::from_op("matmul", {m, n}, std::move(out), {a, b}, [ei, ek, en](Node& self) {
    Node& x = input(self, 0);
    Node& y = input(self, 1);
    ConstMapMat g(self.grad.data(), ei, en);
    if (x.requires_grad) {
      MapMat(x.grad_buffer().data(), ei, ek).noalias() += g * ConstMapMat(y.value.data(), ek, en).transpose();
    }
    if (y.requires_grad) {
      MapMat(y.grad_buffer().data(), ek, en).noalias() += ConstMapMat(x.value.data(), ei, ek).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  }
  return Tensor::from_op("transpose", {n, m}, std::move(out), {a}, [m, n](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_row_bias", x, 2);
  require_rank("add_row_bias", bias, 1);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols) throw DimensionError("add_row_bias: bias length mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bias.data()[j];
  }
  return Tensor::from_op("add_row_bias", x.shape(), std::move(out), {x, bias}, [rows, cols](Node& self) {
    Node& in = input(self, 0);
    Node& b = input(self, 1);
    if (in.requires_grad) {
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[i * cols + j];
      }
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", x, 4);
  require_rank("add_channel_bias", bias, 1);
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (bias.dim(0) != channels) throw DimensionError("add_channel_bias: bias length mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = out.data() + (b * channels + c) * plane;
      const double v = bias.data()[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
  }
  return Tensor::from_op("add_channel_bias", x.shape(), std::move(out), {x, bias},
                         [batch, channels, plane](Node& self) {
                           Node& in = input(self, 0);
                           Node& bn = input(self, 1);
                           if (in.requires_grad) {
                             auto& g = in.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (bn.requires_grad) {
                             auto& g = bn.grad_buffer();
                             for (std::size_t b = 0; b < batch; ++b) {
                               for (std::size_t c = 0; c < channels; ++c) {
                                 const double* p = self.grad.data() + (b * channels + c) * plane;
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                                 g[c] += acc;
                               }
                             }
                           }
                         });
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad_h, pad_w;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// cols is [C_in*kh*kw x B*P], column index b*P + oy*out_w + ox.
void im2col(const ConvGeometry& g, const double* x, std::vector<double>& cols) {
  const std::size_t bp = g.batch * g.pixels();
  cols.assign(g.patch() * bp, 0.0);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols.data() + ((c * g.kh + ky) * g.kw + kx) * bp;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x + (b * g.in_ch + c) * g.height * g.width;
          double* dst = row + b * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            const double* src = plane + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[oy * g.out_w + ox] = src[ix];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const std::vector<double>& cols, double* dx) {
  const std::size_t bp = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols.data() + ((c * g.kh + ky) * g.kw + kx) * bp;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = dx + (b * g.in_ch + c) * g.height * g.width;
          const double* src = row + b * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            double* dst = plane + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[ix] += src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, Conv2dOptions options) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) {
    throw DimensionError("conv2d: input must be [C x H x W] or [B x C x H x W], got " + shape_string(x.shape()));
  }
  require_rank("conv2d", k, 4);
  if (options.stride == 0) throw ValidationError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.batch = batched ? x.dim(0) : 1;
  g.in_ch = x.dim(batched ? 1 : 0);
  g.height = x.dim(batched ? 2 : 1);
  g.width = x.dim(batched ? 3 : 2);
  g.out_ch = k.dim(0);
  g.kh = k.dim(2);
  g.kw = k.dim(3);
  g.stride = options.stride;
  if (k.dim(1) != g.in_ch) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, got " +
                         std::to_string(g.in_ch));
  }
  g.pad_h = options.padding == Padding::same ? g.kh / 2 : 0;
  g.pad_w = options.padding == Padding::same ? g.kw / 2 : 0;
  if (g.kh > g.height + 2 * g.pad_h || g.kw > g.width + 2 * g.pad_w) {
    throw DimensionError("conv2d: kernel " + shape_string(k.shape()) + " larger than padded input " +
                         shape_string(x.shape()));
  }
  g.out_h = (g.height + 2 * g.pad_h - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad_w - g.kw) / g.stride + 1;

  const auto co = static_cast<Eigen::Index>(g.out_ch);
  const auto pk = static_cast<Eigen::Index>(g.patch());
  const auto bp = static_cast<Eigen::Index>(g.batch * g.pixels());

  std::vector<double> cols;
  im2col(g, x.data().data(), cols);
  RowMat y = ConstMapMat(k.data().data(), co, pk) * ConstMapMat(cols.data(), pk, bp);

  std::vector<double> out(g.batch * g.out_ch * g.pixels());
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < g.out_ch; ++c) {
      std::copy_n(y.data() + c * g.batch * g.pixels() + b * g.pixels(), g.pixels(),
                  out.data() + (b * g.out_ch + c) * g.pixels());
    }
  }
  Shape shape = batched ? Shape{g.batch, g.out_ch, g.out_h, g.out_w} : Shape{g.out_ch, g.out_h, g.out_w};
  return Tensor::from_op("conv2d", std::move(shape), std::move(out), {x, k}, [g, co, pk, bp](Node& self) {
    Node& in = input(self, 0);
    Node& kern = input(self, 1);
    RowMat gy(co, bp);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t c = 0; c < g.out_ch; ++c) {
        std::copy_n(self.grad.data() + (b * g.out_ch + c) * g.pixels(), g.pixels(),
                    gy.data() + c * g.batch * g.pixels() + b * g.pixels());
      }
    }
    if (kern.requires_grad) {
      std::vector<double> cols;
      im2col(g, in.value.data(), cols);
      MapMat(kern.grad_buffer().data(), co, pk).noalias() += gy * ConstMapMat(cols.data(), pk, bp).transpose();
    }
    if (in.requires_grad) {
      std::vector<double> dcols(g.patch() * g.batch * g.pixels());
      MapMat(dcols.data(), pk, bp).noalias() = ConstMapMat(kern.value.data(), co, pk).transpose() * gy;
      col2im_add(g, dcols, in.grad_buffer().data());
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> out(batch * channels);
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t i = 0; i < batch * channels; ++i) {
    double acc = 0.0;
    const double* p = x.data().data() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    out[i] = acc * inv;
  }
  return Tensor::from_op("global_avg_pool", {batch, channels}, std::move(out), {x}, [plane, inv](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = self.grad[i] * inv;
      for (std::size_t j = 0; j < plane; ++j) g[i * plane + j] += v;
    }
  });
}

Tensor l2_normalize(const Tensor& v, double eps) {
  if (v.rank() != 1 && v.rank() != 2) {
    throw DimensionError("l2_normalize: expected rank 1 or 2, got " + shape_string(v.shape()));
  }
  const std::size_t rows = v.rank() == 1 ? 1 : v.dim(0);
  const std::size_t cols = v.rank() == 1 ? v.dim(0) : v.dim(1);
  std::vector<double> out(v.numel());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = v.data().data() + r * cols;
    double sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sq += p[j] * p[j];
    norms[r] = std::sqrt(sq);
    const double denom = std::max(norms[r], eps);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = p[j] / denom;
  }
  return Tensor::from_op("l2_normalize", v.shape(), std::move(out), {v},
                         [rows, cols, eps, norms = std::move(norms)](Node& self) {
                           Node& in = input(self, 0);
                           if (!in.requires_grad) return;
                           auto& g = in.grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* y = self.value.data() + r * cols;
                             const double* gy = self.grad.data() + r * cols;
                             if (norms[r] > eps) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < cols; ++j) dot += y[j] * gy[j];
                               for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += (gy[j] - y[j] * dot) / norms[r];
                             } else {
                               for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += gy[j] / eps;
                             }
                           }
                         });
}

Tensor pairwise_sq_distances(const Tensor& z) {
  require_rank("pairwise_sq_distances", z, 2);
  const std::size_t n = z.dim(0), d = z.dim(1);
  if (n < 2) throw DimensionError("pairwise_sq_distances: need at least 2 rows");
  std::vector<double> out(n * n, 0.0);
  const double* p = z.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = p[i * d + k] - p[j * d + k];
        acc += diff * diff;
      }
      out[i * n + j] = acc;
      out[j * n + i] = acc;
    }
  }
  return Tensor::from_op("pairwise_sq_distances", {n, n}, std::move(out), {z}, [n, d](Node& self) {
    Node& in = input(self, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const double* p = in.value.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = 2.0 * (self.grad[i * n + j] + self.grad[j * n + i]);
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) g[i * d + k] += w * (p[i * d + k] - p[j * d + k]);
      }
    }
  });
}

namespace {

struct SoftmaxRows {
  std::vector<double> probs;
  std::vector<double> lse;
};

SoftmaxRows softmax_with_lse(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  SoftmaxRows out{std::vector<double>(rows * cols), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = logits.data().data() + r * cols;
    const double m = *std::max_element(l, l + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out.probs[r * cols + j] = std::exp(l[j] - m);
      s += out.probs[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out.probs[r * cols + j] /= s;
    out.lse[r] = m + std::log(s);
  }
  return out;
}

void check_logits(const char* op, const Tensor& logits, std::size_t rows) {
  require_rank(op, logits, 2);
  if (logits.dim(1) < 2) throw ValidationError(std::string(op) + ": need at least 2 classes");
  if (logits.dim(0) != rows) throw DimensionError(std::string(op) + ": target count does not match batch");
  if (rows == 0) throw DimensionError(std::string(op) + ": empty batch");
}

Tensor cross_entropy_node(const Tensor& logits, std::vector<double> targets) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto sm = softmax_with_lse(logits);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = logits.data().data() + r * cols;
    double row = 0.0;
    for (std::size_t j = 0; j < cols; ++j) row += targets[r * cols + j] * (sm.lse[r] - l[j]);
    total += row;
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return Tensor::from_op("softmax_cross_entropy", {1}, {total * inv}, {logits},
                         [probs = std::move(sm.probs), t = std::move(targets), rows, cols, inv](Node& self) {
                           Node& in = input(self, 0);
                           if (!in.requires_grad) return;
                           auto& g = in.grad_buffer();
                           const double s = self.grad[0] * inv;
                           for (std::size_t r = 0; r < rows; ++r) {
                             double mass = 0.0;
                             for (std::size_t j = 0; j < cols; ++j) mass += t[r * cols + j];
                             for (std::size_t j = 0; j < cols; ++j) {
                               const std::size_t i = r * cols + j;
                               g[i] += s * (probs[i] * mass - t[i]);
                             }
                           }
                         });
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  check_logits("softmax_cross_entropy", logits, targets.size());
  const std::size_t cols = logits.dim(1);
  std::vector<double> onehot(targets.size() * cols, 0.0);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= cols) {
      throw ValidationError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " >= class count " +
                            std::to_string(cols));
    }
    onehot[r * cols + targets[r]] = 1.0;
  }
  return cross_entropy_node(logits, std::move(onehot));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<double>& target_probs) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t cols = logits.dim(1);
  if (cols == 0 || target_probs.size() % cols != 0) {
    throw DimensionError("softmax_cross_entropy: soft target size does not match logits");
  }
  check_logits("softmax_cross_entropy", logits, target_probs.size() / cols);
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double t = target_probs[r * cols + j];
      if (t < 0.0) throw ValidationError("softmax_cross_entropy: negative target probability");
      s += t;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ValidationError("softmax_cross_entropy: soft target row " + std::to_string(r) + " sums to " +
                            std::to_string(s));
    }
  }
  return cross_entropy_node(logits, target_probs);
}

std::vector<double> softmax_rows(const Tensor& logits) {
  require_rank("softmax_rows", logits, 2);
  return softmax_with_lse(logits).probs;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  require_rank("argmax_rows", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = logits.data().data() + r * cols;
    out[r] = static_cast<std::size_t>(std::max_element(l, l + cols) - l);
  }
  return out;
}

}  // namespace fsl
