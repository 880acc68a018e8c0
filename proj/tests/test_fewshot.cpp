#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "fsl/errors.hpp"
#include "fsl/fewshot.hpp"
#include "fsl/ops.hpp"
#include "support.hpp"

using namespace fsl;
using fsl::test::constant_of;
using fsl::test::random_dataset;
using fsl::test::random_image;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.image_size = 16;
  c.channels = {4, 8, 8};
  c.strides = {2, 2, 1};
  c.mixup_layers = {0, 1, 2};
  return c;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

TEST_SUITE("fewshot") {
  TEST_CASE("episode shape") {
    const auto ds = random_dataset(8, 20, 8, 1);
    const auto classes = iota(8);
    const Episode e = sample_episode(ds, classes, {5, 1, 15, 1, 3}, 0);
    CHECK(e.support.size() == 5);
    CHECK(e.query.size() == 75);
    CHECK(e.classes.size() == 5);
    const Episode again = sample_episode(ds, classes, {5, 1, 15, 1, 3}, 0);
    CHECK(again.support == e.support);
    CHECK(again.query == e.query);
    CHECK(again.classes == e.classes);
    const Episode other = sample_episode(ds, classes, {5, 1, 15, 1, 3}, 1);
    CHECK((other.support != e.support || other.classes != e.classes));
  }

  TEST_CASE("episode fuzz") {
    const auto ds = random_dataset(12, 12, 4, 2);
    const std::vector<std::size_t> pool{0, 2, 3, 5, 6, 7, 9, 11};
    std::mt19937_64 rng(3);
    for (std::size_t t = 0; t < 10000; ++t) {
      EpisodeSpec spec;
      spec.n_way = 2 + rng() % 7;
      spec.k_shot = 1 + rng() % 5;
      spec.q = 1 + rng() % (12 - spec.k_shot);
      spec.seed = rng();
      const Episode e = sample_episode(ds, pool, spec, t);
      REQUIRE(e.classes.size() == spec.n_way);
      REQUIRE(std::set<std::size_t>(e.classes.begin(), e.classes.end()).size() == spec.n_way);
      for (std::size_t c : e.classes) REQUIRE(std::find(pool.begin(), pool.end(), c) != pool.end());
      REQUIRE(e.support.size() == spec.n_way * spec.k_shot);
      REQUIRE(e.query.size() == spec.n_way * spec.q);
      std::vector<std::size_t> support_count(spec.n_way), query_count(spec.n_way);
      for (std::size_t i = 0; i < e.support.size(); ++i) {
        REQUIRE(ds.labels[e.support[i]] == e.classes[e.support_labels[i]]);
        ++support_count[e.support_labels[i]];
      }
      for (std::size_t i = 0; i < e.query.size(); ++i) {
        REQUIRE(ds.labels[e.query[i]] == e.classes[e.query_labels[i]]);
        ++query_count[e.query_labels[i]];
      }
      for (std::size_t c = 0; c < spec.n_way; ++c) {
        REQUIRE(support_count[c] == spec.k_shot);
        REQUIRE(query_count[c] == spec.q);
      }
      std::set<std::size_t> all(e.support.begin(), e.support.end());
      all.insert(e.query.begin(), e.query.end());
      REQUIRE(all.size() == e.support.size() + e.query.size());
    }
  }

  TEST_CASE("episode errors") {
    auto ds = random_dataset(6, 10, 4, 4);
    const auto classes = iota(6);
    CHECK_THROWS_AS(sample_episode(ds, classes, {7, 1, 5, 1, 0}, 0), ValidationError);
    CHECK_THROWS_AS(sample_episode(ds, classes, {5, 0, 5, 1, 0}, 0), ValidationError);
    CHECK_THROWS_AS(sample_episode(ds, classes, {5, 1, 0, 1, 0}, 0), ValidationError);
    std::mt19937_64 rng(1);
    ds = random_dataset(6, 16, 4, 4);
    ds.push_back(random_image(4, rng), 0);
    ds.class_count = 7;
    ds.push_back(random_image(4, rng), 6);
    const auto seven = iota(7);
    try {
      sample_episode(ds, seven, {5, 1, 15, 1, 0}, 0);
      FAIL("expected a ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("class 6") != std::string::npos);
    }
  }

  TEST_CASE("confidence interval") {
    const std::vector<double> two{0.5, 0.7};
    CHECK(ci95_half_width(two) == doctest::Approx(1.96 * std::sqrt(0.02) / std::sqrt(2.0)).epsilon(1e-14));
    CHECK(std::abs(ci95_half_width(two) - 0.196) < 1e-12);
    const std::vector<double> one{0.4};
    CHECK(ci95_half_width(one) == 0.0);
  }

  TEST_CASE("adaptation") {
    // Five well separated clusters around the coordinate axes.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> noise(0.0, 0.1);
    std::vector<double> f;
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < 5; ++c)
      for (int k = 0; k < 3; ++k) {
        for (std::size_t j = 0; j < 8; ++j) f.push_back((j == c ? 1.0 : 0.0) + noise(rng));
        labels.push_back(c);
      }
    const Tensor support = constant_of({15, 8}, f);
    const CosineClassifier head = adapt_classifier(support, labels, 5, AdaptConfig{}, 9);
    CHECK(head.classes() == 5);
    CHECK(head.weight().dim(0) == 5);
    CHECK(accuracy(cosine_logits(head, support), labels) == 1.0);

    const auto ds = random_dataset(6, 20, 16, 6);
    Backbone bb(small_config(), 7);
    const auto before = parameter_digest(bb.parameters());
    const Episode e = sample_episode(ds, iota(6), {5, 2, 3, 1, 1}, 0);
    const CosineClassifier novel = adapt(bb, ds, e, AdaptConfig{}, 11);
    CHECK(novel.classes() == 5);
    CHECK(parameter_digest(bb.parameters()) == before);
  }

  TEST_CASE("evaluation report") {
    const auto ds = random_dataset(6, 20, 16, 8);
    Backbone bb(small_config(), 9);
    EvalOptions opts;
    opts.adapt.steps = 20;
    opts.dataset_name = "data.fsd";
    const auto before = parameter_digest(bb.parameters());
    const EvalReport r = evaluate(bb, ds, iota(6), {5, 1, 5, 30, 4}, opts);
    CHECK(parameter_digest(bb.parameters()) == before);
    REQUIRE(r.accuracies.size() == 30);
    double mean = 0.0;
    for (double a : r.accuracies) mean += a;
    mean /= 30.0;
    double ss = 0.0;
    for (double a : r.accuracies) ss += (a - mean) * (a - mean);
    CHECK(std::abs(r.mean - mean) < 1e-12);
    CHECK(std::abs(r.ci95 - 1.96 * std::sqrt(ss / 29.0) / std::sqrt(30.0)) < 1e-12);
    CHECK(r.mean >= 0.0);
    CHECK(r.mean <= 1.0);

    const auto json = eval_report_json(r);
    CHECK(json.find("\"n_way\":5") != std::string::npos);
    CHECK(json.find("\"dataset\":\"data.fsd\"") != std::string::npos);
    const auto lines = eval_tasks_jsonl(r);
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 30);
    CHECK(lines.rfind("{\"task\":0,", 0) == 0);
  }

  TEST_CASE("parallel evaluation matches serial") {
    const auto ds = random_dataset(8, 20, 16, 10);
    Backbone bb(small_config(), 11);
    EvalOptions serial;
    serial.adapt.steps = 15;
    EvalOptions parallel = serial;
    parallel.threads = 4;
    const EvalReport a = evaluate(bb, ds, iota(8), {5, 1, 5, 24, 2}, serial);
    const EvalReport b = evaluate(bb, ds, iota(8), {5, 1, 5, 24, 2}, parallel);
    CHECK(a.accuracies == b.accuracies);
    CHECK(a.mean == b.mean);
    CHECK(a.ci95 == b.ci95);
    EvalReport a2 = a, b2 = b;
    a2.wall_ms = b2.wall_ms = 0.0;
    CHECK(eval_report_json(a2) == eval_report_json(b2));
  }

  TEST_CASE("untrained backbone is at chance") {
    const auto ds = random_dataset(20, 16, 16, 12);
    Backbone bb(small_config(), 13);
    EvalOptions opts;
    opts.adapt.steps = 30;
    opts.threads = 4;
    const EvalReport five = evaluate(bb, ds, iota(20), {5, 1, 15, 200, 14}, opts);
    CHECK(std::abs(five.mean - 0.2) <= 0.03);
    for (std::size_t n : {5, 10, 15, 20}) {
      const EvalReport r = evaluate(bb, ds, iota(20), {n, 1, 15, 60, 15}, opts);
      const double sigma = r.ci95 / 1.96;
      INFO("N = " << n << " mean " << r.mean << " sigma " << sigma);
      CHECK(std::abs(r.mean - 1.0 / static_cast<double>(n)) <= 3.0 * sigma);
    }
  }

  TEST_CASE("fgsm") {
    Backbone bb(small_config(), 15);
    CosineClassifier head(4, bb.feature_dim(), 10.0, 15);
    const auto model = classifier_logits(bb, head);
    std::mt19937_64 rng(16);
    std::vector<Image> ims;
    for (int i = 0; i < 6; ++i) ims.push_back(random_image(16, rng));
    const Tensor x = to_batch(ims);
    const std::vector<std::size_t> y{0, 1, 2, 3, 0, 1};
    const Tensor same = fgsm_attack(model, x, y, 0.0);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == x.data()[i]);
    for (double eps : {1.0 / 255.0, 0.05, 0.5}) {
      const Tensor adv = fgsm_attack(model, x, y, eps);
      double worst = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        worst = std::max(worst, std::abs(adv.data()[i] - x.data()[i]));
        CHECK(adv.data()[i] >= 0.0);
        CHECK(adv.data()[i] <= 1.0);
      }
      CHECK(worst <= eps + 1e-15);
      CHECK(worst > 0.0);
    }
    CHECK_THROWS_AS(fgsm_attack(model, x, y, -0.1), ValidationError);
  }

  TEST_CASE("robustness table layout") {
    Backbone bb(small_config(), 17);
    CosineClassifier head(3, bb.feature_dim(), 10.0, 17);
    std::mt19937_64 rng(18);
    std::vector<Image> ims;
    std::vector<std::size_t> y;
    for (int i = 0; i < 12; ++i) {
      ims.push_back(random_image(16, rng));
      y.push_back(i % 3);
    }
    const std::vector<PerturbKind> kinds{PerturbKind::brightness, PerturbKind::contrast, PerturbKind::pixelate};
    const RobustnessTable t = robustness_eval(bb, head, ims, y, kinds, 3);
    REQUIRE(t.rows.size() == kinds.size() + 2);
    CHECK(t.rows.front().name == "clean");
    CHECK(t.rows.back().name == "fgsm");
    CHECK(t.images == 12);
    for (std::size_t k = 1; k <= kinds.size(); ++k) {
      CHECK(t.rows[k].name == to_string(kinds[k - 1]));
      REQUIRE(t.rows[k].accuracies.size() == 4);
      CHECK(t.rows[k].accuracies[0] == t.rows[0].accuracies[0]);
    }
    const auto text = format_robustness_table(t);
    CHECK(text.find("pixelate") != std::string::npos);
  }

  TEST_CASE("saliency mask") {
    Backbone bb(small_config(), 19);
    CosineClassifier head(3, bb.feature_dim(), 10.0, 19);
    std::mt19937_64 rng(20);
    const Image im = random_image(16, rng);
    const auto model = classifier_logits(bb, head);
    const auto m1 = saliency_mask(model, im, 1, 1.0);
    CHECK(m1.size() == 256);
    CHECK(std::count(m1.begin(), m1.end(), 1) == 3);
    const auto all = saliency_mask(model, im, 1, 100.0);
    CHECK(std::count(all.begin(), all.end(), 1) == 256);
    const auto ten = saliency_mask(model, im, 2, 10.0);
    CHECK(std::count(ten.begin(), ten.end(), 1) == 26);

    // A linear model that only looks at pixel 137.
    std::vector<double> w(256 * 2, 0.0);
    w[137 * 2] = 5.0;
    const Tensor weight = constant_of({256, 2}, w);
    const LogitsFn linear = [weight](const Tensor& x) { return matmul(reshape(x, {x.dim(0), 256}), weight); };
    const auto mask = saliency_mask(linear, im, 1, 1.0);
    CHECK(mask[137] == 1);
    CHECK(mask[0] == 1);
    CHECK(mask[1] == 1);
    CHECK(std::count(mask.begin(), mask.end(), 1) == 3);
  }

  TEST_CASE("feature export") {
    const auto ds = random_dataset(5, 7, 16, 21);
    Backbone bb(small_config(), 22);
    const std::vector<std::size_t> filter{1, 3};
    const FeatureDump d = export_features(bb, ds, filter);
    CHECK(d.size() == 14);
    CHECK(d.dim == bb.feature_dim());
    CHECK(d.features.size() == 14 * bb.feature_dim());
    for (auto c : d.class_ids) CHECK((c == 1 || c == 3));
    const auto bytes = encode_features(d);
    CHECK(bytes == encode_features(export_features(bb, ds, filter)));
    CHECK(bytes.size() == 12 + 14 * (4 + 4 * bb.feature_dim()));
    CHECK(decode_features(bytes) == d);
    CHECK(export_features(bb, ds, {}).size() == 35);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_features(bad), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_features(extra), FormatError);
    CHECK_THROWS_AS(decode_features(std::span(bytes).first(bytes.size() - 1)), FormatError);
  }
}
