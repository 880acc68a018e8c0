#include "fsl/losses.hpp"

#include <algorithm>
#include <numeric>

#include "fsl/errors.hpp"
#include "fsl/ops.hpp"

namespace fsl {

SelfSupVariant parse_selfsup(const std::string& name) {
  if (name == "none") return SelfSupVariant::none;
  if (name == "rotation") return SelfSupVariant::rotation;
  if (name == "exemplar") return SelfSupVariant::exemplar;
  throw ValidationError("unknown self-supervision variant '" + name + "' (none, rotation, exemplar)");
}

std::string to_string(SelfSupVariant variant) {
  switch (variant) {
    case SelfSupVariant::none: return "none";
    case SelfSupVariant::rotation: return "rotation";
    case SelfSupVariant::exemplar: return "exemplar";
  }
  return "?";
}

Tensor mix(const Tensor& a, const Tensor& b, double lambda) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mix: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("mix: lambda outside [0,1]");
  std::vector<double> out(a.numel());
  auto pa = a.data();
  auto pb = b.data();
  if (lambda == 1.0) {
    std::copy(pa.begin(), pa.end(), out.begin());
  } else if (lambda == 0.0) {
    std::copy(pb.begin(), pb.end(), out.begin());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * pa[i] + (1.0 - lambda) * pb[i];
  }
  return Tensor::from_op("mix", a.shape(), std::move(out), {a, b}, [lambda](Node& self) {
    const double w[2] = {lambda, 1.0 - lambda};
    for (std::size_t k = 0; k < 2; ++k) {
      Node& in = *self.inputs[k];
      if (!in.requires_grad || w[k] == 0.0) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[k] * self.grad[i];
    }
  });
}

double sample_mix_coefficient(const MixupSpec& spec, Rng& rng) {
  if (!(spec.alpha > 0.0)) throw ValidationError("mixup: alpha must be positive");
  std::gamma_distribution<double> gamma(spec.alpha, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  const double s = x + y;
  return s > 0.0 ? std::clamp(x / s, 0.0, 1.0) : 0.5;
}

MixDraw draw_mix(const MixupSpec& spec, const Backbone& backbone, std::size_t batch, Rng& rng) {
  const auto& layers = spec.layers.empty() ? backbone.mixup_layers() : spec.layers;
  if (layers.empty()) throw ConfigError("mixup: no eligible layers");
  std::uniform_int_distribution<std::size_t> pick(0, layers.size() - 1);
  MixDraw draw;
  draw.layer = layers[pick(rng)];
  draw.lambda = sample_mix_coefficient(spec, rng);
  draw.permutation.resize(batch);
  std::iota(draw.permutation.begin(), draw.permutation.end(), 0);
  std::shuffle(draw.permutation.begin(), draw.permutation.end(), rng);
  return draw;
}

Tensor manifold_mixup_loss(const Backbone& backbone, const CosineClassifier& classifier, const Tensor& x,
                           std::span<const std::size_t> labels, const MixDraw& draw) {
  const std::size_t batch = labels.size();
  if (batch < 2) throw UsageError("manifold mixup: batch size must be at least 2");
  if (x.dim(0) != batch || draw.permutation.size() != batch) {
    throw DimensionError("manifold mixup: batch, labels and permutation sizes differ");
  }
  const Tensor hidden = backbone.forward_to_layer(x, draw.layer);
  const Tensor partner = index_rows(hidden, draw.permutation);
  const Tensor mixed = mix(hidden, partner, draw.lambda);
  const Tensor logits = cosine_logits(classifier, backbone.forward_from_layer(mixed, draw.layer));

  std::vector<std::size_t> partner_labels(batch);
  for (std::size_t i = 0; i < batch; ++i) partner_labels[i] = labels[draw.permutation[i]];
  return add(scale(softmax_cross_entropy(logits, labels), draw.lambda),
             scale(softmax_cross_entropy(logits, partner_labels), 1.0 - draw.lambda));
}

namespace {

struct RotatedFeatures {
  Tensor features;
  RotatedBatch batch;
};

RotatedFeatures rotated_features(const Backbone& backbone, std::span<const Image> images,
                                 const RotationConfig& rotations) {
  if (images.empty()) throw UsageError("rotation loss: empty batch");
  if (rotations.size() == 0) throw UsageError("rotation loss: empty rotation set");
  RotatedBatch batch = make_rotated_batch(images, rotations);
  Tensor features = backbone.features(to_batch(batch.images));
  return {std::move(features), std::move(batch)};
}

// Cross-entropy that tolerates the degenerate one-class head: a single
// logit column always has zero loss.
Tensor class_ce(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.dim(1) == 1) return scale(sum(logits), 0.0);
  return softmax_cross_entropy(logits, targets);
}

}  // namespace

RotationTerms rotation_terms(const Backbone& backbone, const CosineClassifier& classifier, const RotationHead& head,
                             std::span<const Image> images, std::span<const std::size_t> labels,
                             const RotationConfig& rotations) {
  if (labels.size() != images.size()) throw DimensionError("rotation terms: label count differs from batch");
  if (head.outputs() != rotations.size()) throw DimensionError("rotation terms: head arity differs from angle count");
  auto rf = rotated_features(backbone, images, rotations);
  std::vector<std::size_t> class_labels(rf.batch.source.size());
  for (std::size_t i = 0; i < class_labels.size(); ++i) class_labels[i] = labels[rf.batch.source[i]];
  return {class_ce(cosine_logits(classifier, rf.features), class_labels),
          class_ce(linear_logits(head, rf.features), rf.batch.rotation_labels)};
}

Tensor rotation_loss(const Backbone& backbone, const RotationHead& head, std::span<const Image> images,
                     const RotationConfig& rotations) {
  if (head.outputs() != rotations.size()) throw DimensionError("rotation loss: head arity differs from angle count");
  auto rf = rotated_features(backbone, images, rotations);
  return class_ce(linear_logits(head, rf.features), rf.batch.rotation_labels);
}

Tensor rotated_class_loss(const Backbone& backbone, const CosineClassifier& classifier, std::span<const Image> images,
                          std::span<const std::size_t> labels, const RotationConfig& rotations) {
  if (labels.size() != images.size()) throw DimensionError("rotated class loss: label count differs from batch");
  auto rf = rotated_features(backbone, images, rotations);
  std::vector<std::size_t> class_labels(rf.batch.source.size());
  for (std::size_t i = 0; i < class_labels.size(); ++i) class_labels[i] = labels[rf.batch.source[i]];
  return class_ce(cosine_logits(classifier, rf.features), class_labels);
}

Tensor exemplar_loss_from_embeddings(const Tensor& embeddings, std::size_t copies) {
  if (embeddings.rank() != 2) throw DimensionError("exemplar loss: embeddings must be [rows x d]");
  if (copies == 0 || embeddings.dim(0) % copies != 0) {
    throw DimensionError("exemplar loss: row count is not a multiple of the copy count");
  }
  const std::size_t rows = embeddings.dim(0);
  if (rows / copies < 2) throw UsageError("exemplar loss: need at least 2 distinct source images");

  const Tensor dist = sqrt(pairwise_sq_distances(embeddings));
  auto d = dist.data();
  std::vector<std::size_t> hardest_pos(rows), hardest_neg(rows);
  for (std::size_t a = 0; a < rows; ++a) {
    const std::size_t source = a / copies;
    std::size_t pos = a * rows + a;  // own entry, distance 0
    std::size_t neg = rows * rows;
    for (std::size_t b = 0; b < rows; ++b) {
      const std::size_t idx = a * rows + b;
      if (b / copies == source) {
        if (b != a && d[idx] > d[pos]) pos = idx;
      } else if (neg == rows * rows || d[idx] < d[neg]) {
        neg = idx;
      }
    }
    hardest_pos[a] = pos;
    hardest_neg[a] = neg;
  }
  const Tensor margin = sub(gather(dist, std::move(hardest_pos)), gather(dist, std::move(hardest_neg)));
  return mean(softplus(margin));
}

Tensor exemplar_loss(const Backbone& backbone, std::span<const Image> copies_source_major, std::size_t copies) {
  if (copies_source_major.empty()) throw UsageError("exemplar loss: empty batch");
  return exemplar_loss_from_embeddings(backbone.features(to_batch(copies_source_major)), copies);
}

std::vector<Image> make_exemplar_copies(std::span<const Image> images, std::size_t copies, Rng& rng,
                                        const ExemplarAugmentConfig& augment) {
  std::vector<Image> out;
  out.reserve(images.size() * copies);
  for (const auto& im : images) {
    for (std::size_t k = 0; k < copies; ++k) out.push_back(augment_exemplar(im, rng, augment));
  }
  return out;
}

Tensor phase_loss(int phase, const PhaseTerms& terms) {
  if (!terms.classification || !terms.selfsup) {
    throw UsageError("phase loss: L_class and L_ss are required (pass a zero scalar to disable L_ss)");
  }
  const Tensor base = add(*terms.classification, *terms.selfsup);
  if (phase == 1) return base;
  if (phase == 2) {
    if (!terms.mixup) throw UsageError("phase loss: phase 2 requires L_mm");
    return add(*terms.mixup, scale(base, 0.5));
  }
  throw UsageError("phase loss: phase must be 1 or 2, got " + std::to_string(phase));
}

}  // namespace fsl
