#include <cmath>

#include "fsl/cli.hpp"
#include "fsl/losses.hpp"
#include "fsl/ops.hpp"
#include "fsl/random.hpp"

namespace fsl {

namespace {

Tensor uniform_param(Shape shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

// Values in [lo, hi] with random sign, bounded away from zero.
Tensor signed_param(Shape shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

// Fixed, shape-dependent weights so every output entry reaches the loss
// with a distinct coefficient.
Tensor probe(const Tensor& t) {
  std::vector<double> w(t.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.3 * static_cast<double>(i) + 0.7);
  return sum(mul(t, Tensor::constant(t.shape(), std::move(w))));
}

std::vector<Image> random_images(std::size_t n, std::size_t size, Rng& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image im = blank_image(1, size, size);
    for (auto& p : im.pixels) p = u(rng);
    out.push_back(std::move(im));
  }
  return out;
}

std::vector<Tensor> concat(std::vector<Tensor> a, const std::vector<Tensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
  auto rng = make_rng(seed, Stream::probe, 0);
  std::vector<GradcheckResult> out;
  auto check = [&](std::string name, const std::function<Tensor()>& f, std::vector<Tensor> wrt) {
    out.push_back(check_gradients(std::move(name), f, std::move(wrt)));
  };

  const Tensor a = signed_param({3, 4}, rng, 0.2, 1.5);
  const Tensor b = signed_param({3, 4}, rng, 0.2, 1.5);
  const Tensor pos = uniform_param({3, 4}, rng, 0.3, 2.0);
  check("add", [&] { return probe(add(a, b)); }, {a, b});
  check("sub", [&] { return probe(sub(a, b)); }, {a, b});
  check("mul", [&] { return probe(mul(a, b)); }, {a, b});
  check("scale", [&] { return probe(scale(a, -1.7)); }, {a});
  check("add_scalar", [&] { return probe(add_scalar(a, 0.3)); }, {a});
  check("relu", [&] { return probe(relu(a)); }, {a});
  check("exp", [&] { return probe(exp(a)); }, {a});
  check("log", [&] { return probe(log(pos)); }, {pos});
  check("softplus", [&] { return probe(softplus(a)); }, {a});
  check("sqrt", [&] { return probe(sqrt(pos)); }, {pos});
  check("sum", [&] { return mul(sum(a), sum(b)); }, {a, b});
  check("mean", [&] { return mul(mean(a), mean(a)); }, {a});
  check("reshape", [&] { return probe(reshape(a, {4, 3})); }, {a});
  check("gather", [&] { return probe(gather(a, {0, 5, 5, 11, 2})); }, {a});
  const std::size_t rows[] = {2, 0, 2, 1};
  check("index_rows", [&] { return probe(index_rows(a, rows)); }, {a});

  const Tensor m = signed_param({4, 5}, rng, 0.1, 1.0);
  check("matmul", [&] { return probe(matmul(a, m)); }, {a, m});
  check("transpose", [&] { return probe(transpose(a)); }, {a});
  const Tensor row_bias = signed_param({4}, rng, 0.1, 1.0);
  check("add_row_bias", [&] { return probe(add_row_bias(a, row_bias)); }, {a, row_bias});

  const Tensor x3 = uniform_param({2, 6, 6}, rng, 0.0, 1.0);
  const Tensor x4 = uniform_param({2, 2, 7, 7}, rng, 0.0, 1.0);
  const Tensor k3 = signed_param({3, 2, 3, 3}, rng, 0.05, 0.8);
  const Tensor ch_bias = signed_param({3}, rng, 0.1, 1.0);
  check("conv2d_valid", [&] { return probe(conv2d(x3, k3, {1, Padding::valid})); }, {x3, k3});
  check("conv2d_same_stride2", [&] { return probe(conv2d(x4, k3, {2, Padding::same})); }, {x4, k3});
  check("add_channel_bias",
        [&] { return probe(add_channel_bias(conv2d(x4, k3, {1, Padding::same}), ch_bias)); }, {ch_bias});
  check("global_avg_pool", [&] { return probe(global_avg_pool(x4)); }, {x4});

  const Tensor v = signed_param({5}, rng, 0.2, 1.0);
  check("l2_normalize_vector", [&] { return probe(l2_normalize(v)); }, {v});
  check("l2_normalize_rows", [&] { return probe(l2_normalize(a)); }, {a});
  check("pairwise_sq_distances", [&] { return probe(pairwise_sq_distances(a)); }, {a});

  const Tensor logits = signed_param({4, 5}, rng, 0.1, 2.0);
  const std::size_t targets[] = {0, 3, 4, 1};
  check("cross_entropy_hard", [&] { return softmax_cross_entropy(logits, targets); }, {logits});
  std::vector<double> soft(20);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += soft[i * 5 + j] = 1.0 + static_cast<double>((i + 2 * j) % 5);
    for (std::size_t j = 0; j < 5; ++j) soft[i * 5 + j] /= s;
  }
  check("cross_entropy_soft", [&] { return softmax_cross_entropy(logits, soft); }, {logits});
  check("mix", [&] { return probe(mix(a, b, 0.37)); }, {a, b});

  const Tensor z = signed_param({4, 6}, rng, 0.1, 1.0);
  CosineClassifier cosine(5, 6, 10.0, seed);
  check("cosine_logits", [&] { return probe(cosine_logits(cosine, z)); }, {z, cosine.weight()});
  RotationHead head(4, 6, seed);
  check("linear_logits", [&] { return probe(linear_logits(head, z)); }, {z, head.weight(), head.bias()});

  BackboneConfig tiny;
  tiny.image_size = 8;
  tiny.channels = {3, 4};
  tiny.strides = {2, 1};
  tiny.mixup_layers = {0, 1, 2};
  Backbone backbone(tiny, seed);
  // Shift biases off zero so activations sit away from the ReLU kink.
  for (std::size_t i = 1; i < backbone.parameters().size(); i += 2) {
    for (auto& x : backbone.parameters()[i].mutable_data()) x = 0.05;
  }
  CosineClassifier classifier(3, backbone.feature_dim(), 10.0, seed);
  RotationHead rotation_head(4, backbone.feature_dim(), seed);
  const auto images = random_images(3, 8, rng);
  const Tensor batch = to_batch(images);
  const std::size_t labels[] = {0, 2, 1};
  const auto params = backbone.parameters();
  const auto with_head = concat(params, {classifier.weight()});

  check("backbone_features", [&] { return probe(backbone.features(batch)); }, params);
  const Tensor mixed_in = uniform_param({3, 1, 8, 8}, rng, 0.0, 1.0);
  check("backbone_input", [&] { return probe(backbone.features(mixed_in)); }, {mixed_in});
  for (std::size_t layer : tiny.mixup_layers) {
    MixDraw draw{layer, 0.63, {2, 0, 1}};
    check("manifold_mixup_layer" + std::to_string(layer),
          [&] { return manifold_mixup_loss(backbone, classifier, batch, labels, draw); }, with_head);
  }
  const RotationConfig rotations;
  check("rotation_loss", [&] { return rotation_loss(backbone, rotation_head, images, rotations); },
        concat(params, rotation_head.parameters()));
  check("rotated_class_loss",
        [&] { return rotated_class_loss(backbone, classifier, images, labels, rotations); }, with_head);

  const Tensor emb = signed_param({6, 4}, rng, 0.1, 1.0);
  check("exemplar_embeddings", [&] { return exemplar_loss_from_embeddings(emb, 2); }, {emb});
  auto copy_rng = make_rng(seed, Stream::exemplar, 0);
  const auto copies = make_exemplar_copies(images, 2, copy_rng);
  check("exemplar_backbone", [&] { return exemplar_loss(backbone, copies, 2); }, params);

  const auto all = concat(with_head, rotation_head.parameters());
  auto phase_terms = [&](bool with_mixup) {
    PhaseTerms terms;
    auto rt = rotation_terms(backbone, classifier, rotation_head, images, labels, rotations);
    terms.classification = rt.classification;
    terms.selfsup = rt.rotation;
    if (with_mixup) terms.mixup = manifold_mixup_loss(backbone, classifier, batch, labels, {1, 0.41, {1, 2, 0}});
    return terms;
  };
  check("phase1_loss", [&] { return phase_loss(1, phase_terms(false)); }, all);
  check("phase2_loss", [&] { return phase_loss(2, phase_terms(true)); }, all);
  return out;
}

}  // namespace fsl
