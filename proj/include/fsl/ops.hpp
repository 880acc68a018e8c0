#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fsl/tensor.hpp"

namespace fsl {

// Elementwise arithmetic on identically shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// log(1 + exp(x)), evaluated without overflow.
Tensor softplus(const Tensor& a);
// Subgradient 0 at the origin.
Tensor sqrt(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
// Flat-index gather into a 1-D tensor; backward scatter-adds.
Tensor gather(const Tensor& a, std::vector<std::size_t> flat_indices);
// Rows of the leading axis picked (with repetition allowed) by index.
Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows);

// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x[B x n] + bias[n] broadcast across rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// x[B x C x H x W] + bias[C] broadcast across batch and space.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

enum class Padding { valid, same };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::valid;
};

// Cross-correlation (no kernel flip). x is [C_in x H x W] or
// [B x C_in x H x W]; k is [C_out x C_in x kh x kw]. "same" pads by
// floor(k/2) on each side, so odd kernels at stride 1 keep H and W.
Tensor conv2d(const Tensor& x, const Tensor& k, Conv2dOptions options = {});

// [B x C x H x W] -> [B x C]
Tensor global_avg_pool(const Tensor& x);

// 1-D: v / max(|v|, eps). 2-D: applied to every row.
Tensor l2_normalize(const Tensor& v, double eps = 1e-12);

// Z[B x d] -> D[B x B] with D(i,j) = |z_i - z_j|^2, exact zero diagonal.
Tensor pairwise_sq_distances(const Tensor& z);

// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
// Soft targets: one probability row per logit row, each summing to 1 within 1e-9.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<double>& target_probs);

// Non-differentiable helpers.
std::vector<double> softmax_rows(const Tensor& logits);
std::vector<std::size_t> argmax_rows(const Tensor& logits);

}  // namespace fsl
