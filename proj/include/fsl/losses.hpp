#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/image_ops.hpp"
#include "fsl/model.hpp"
#include "fsl/random.hpp"
#include "fsl/tensor.hpp"

namespace fsl {

struct MixupSpec {
  double alpha = 2.0;
  // Empty means "use the backbone's eligible layers".
  std::vector<std::size_t> layers;
};

enum class SelfSupVariant { none, rotation, exemplar };

SelfSupVariant parse_selfsup(const std::string& name);
std::string to_string(SelfSupVariant variant);

struct SelfSupSpec {
  SelfSupVariant variant = SelfSupVariant::rotation;
  RotationConfig rotation;
  std::size_t exemplar_copies = 4;
  ExemplarAugmentConfig augment;
};

// lambda * a + (1 - lambda) * b. The endpoints return exact copies.
Tensor mix(const Tensor& a, const Tensor& b, double lambda);

// One Beta(alpha, alpha) draw via two gamma draws.
double sample_mix_coefficient(const MixupSpec& spec, Rng& rng);

// Everything random about one mixup step, fixed up front so the loss is a
// deterministic function of the parameters.
struct MixDraw {
  std::size_t layer = 0;
  double lambda = 1.0;
  std::vector<std::size_t> permutation;
};

MixDraw draw_mix(const MixupSpec& spec, const Backbone& backbone, std::size_t batch, Rng& rng);

// lambda * CE(p, y) + (1 - lambda) * CE(p, y[perm]) where p are cosine
// logits of the features continued from the mixed activation at draw.layer.
Tensor manifold_mixup_loss(const Backbone& backbone, const CosineClassifier& classifier, const Tensor& x,
                           std::span<const std::size_t> labels, const MixDraw& draw);

// Mean CE of the rotation head over every (image, angle) pair.
Tensor rotation_loss(const Backbone& backbone, const RotationHead& head, std::span<const Image> images,
                     const RotationConfig& rotations);

// Mean classification CE over every (image, angle) pair; the class label is
// kept under rotation.
Tensor rotated_class_loss(const Backbone& backbone, const CosineClassifier& classifier, std::span<const Image> images,
                          std::span<const std::size_t> labels, const RotationConfig& rotations);

// Both rotation terms from one pass over the rotated batch.
struct RotationTerms {
  Tensor classification;
  Tensor rotation;
};
RotationTerms rotation_terms(const Backbone& backbone, const CosineClassifier& classifier, const RotationHead& head,
                             std::span<const Image> images, std::span<const std::size_t> labels,
                             const RotationConfig& rotations);

// Hard-batch soft-margin triplet loss over embeddings laid out source-major
// (row s * copies + k is copy k of source s): mean over anchors of
// log(1 + exp(max positive distance - min negative distance)), Euclidean.
Tensor exemplar_loss_from_embeddings(const Tensor& embeddings, std::size_t copies);

// Embeds the copies through the backbone, then as above.
Tensor exemplar_loss(const Backbone& backbone, std::span<const Image> copies_source_major, std::size_t copies);

// Source-major augmented copies of every image.
std::vector<Image> make_exemplar_copies(std::span<const Image> images, std::size_t copies, Rng& rng,
                                        const ExemplarAugmentConfig& augment = {});

struct PhaseTerms {
  std::optional<Tensor> classification;
  std::optional<Tensor> selfsup;
  std::optional<Tensor> mixup;
};

// Phase 1: L_class + L_ss. Phase 2: L_mm + 0.5 (L_class + L_ss).
// Runs without self-supervision pass a zero scalar for L_ss.
Tensor phase_loss(int phase, const PhaseTerms& terms);

}  // namespace fsl
