#include "fsl/fewshot.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"

#include "fsl/errors.hpp"
#include "fsl/ops.hpp"
#include "fsl/optim.hpp"
#include "fsl/random.hpp"

namespace fsl {

EpisodeSampler::EpisodeSampler(const ImageDataset& dataset, std::span<const std::size_t> classes,
                               const EpisodeSpec& spec)
    : spec_(spec), classes_(classes.begin(), classes.end()) {
  if (spec.n_way < 2) throw ValidationError("episode: N must be at least 2");
  if (spec.k_shot < 1 || spec.q < 1) throw ValidationError("episode: K and Q must be positive");
  if (classes_.size() < spec.n_way) {
    throw ValidationError("episode: " + std::to_string(spec.n_way) + "-way needs at least " +
                          std::to_string(spec.n_way) + " classes, pool has " + std::to_string(classes_.size()));
  }
  auto all = dataset.indices_by_class();
  for (auto c : classes_) {
    if (c >= all.size()) throw ValidationError("episode: class " + std::to_string(c) + " not in dataset");
    if (all[c].size() < spec.k_shot + spec.q) {
      throw ValidationError("episode: class " + std::to_string(c) + " has " + std::to_string(all[c].size()) +
                            " images, K+Q = " + std::to_string(spec.k_shot + spec.q));
    }
    by_class_.push_back(all[c]);
  }
}

Episode EpisodeSampler::sample(std::size_t task) const {
  auto rng = make_rng(spec_.seed, Stream::episode, task);
  std::vector<std::size_t> order(classes_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Episode ep;
  for (std::size_t n = 0; n < spec_.n_way; ++n) {
    const std::size_t slot = order[n];
    ep.classes.push_back(classes_[slot]);
    auto pool = by_class_[slot];
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t k = 0; k < spec_.k_shot; ++k) {
      ep.support.push_back(pool[k]);
      ep.support_labels.push_back(n);
    }
    for (std::size_t j = 0; j < spec_.q; ++j) {
      ep.query.push_back(pool[spec_.k_shot + j]);
      ep.query_labels.push_back(n);
    }
  }
  return ep;
}

Episode sample_episode(const ImageDataset& dataset, std::span<const std::size_t> classes, const EpisodeSpec& spec,
                       std::size_t task) {
  return EpisodeSampler(dataset, classes, spec).sample(task);
}

CosineClassifier adapt_classifier(const Tensor& support_features, std::span<const std::size_t> labels,
                                  std::size_t n_way, const AdaptConfig& config, std::uint64_t seed) {
  if (support_features.rank() != 2 || support_features.dim(0) != labels.size()) {
    throw DimensionError("adapt: support features must be [N*K x d] with one label per row");
  }
  const Tensor z = support_features.detach();
  CosineClassifier head(n_way, z.dim(1), config.scale, seed);
  std::vector<Tensor> params = head.parameters();
  OptimizerConfig opt;
  opt.kind = OptimizerKind::adam;
  opt.learning_rate = config.learning_rate;
  OptimizerState state;
  for (std::size_t s = 0; s < config.steps; ++s) {
    zero_grads(params);
    backward(softmax_cross_entropy(cosine_logits(head, z), labels));
    optimizer_step(params, state, opt);
  }
  return CosineClassifier(head.weight().detach(), config.scale);
}

double accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) throw DimensionError("accuracy: label count differs from rows");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace {

Tensor embed_batches(const Backbone& backbone, std::size_t count, std::size_t chunk,
                     const std::function<Tensor(std::size_t, std::size_t)>& batch_of) {
  NoGradGuard guard;
  const std::size_t d = backbone.feature_dim();
  std::vector<double> out(count * d);
  if (chunk == 0) chunk = 256;
  for (std::size_t lo = 0; lo < count; lo += chunk) {
    const std::size_t hi = std::min(count, lo + chunk);
    auto f = backbone.features(batch_of(lo, hi));
    std::copy(f.data().begin(), f.data().end(), out.begin() + static_cast<std::ptrdiff_t>(lo * d));
  }
  return Tensor::constant({count, d}, std::move(out));
}

}  // namespace

Tensor embed(const Backbone& backbone, const ImageDataset& dataset, std::span<const std::size_t> indices,
             std::size_t chunk) {
  return embed_batches(backbone, indices.size(), chunk, [&](std::size_t lo, std::size_t hi) {
    return to_batch(dataset, indices.subspan(lo, hi - lo));
  });
}

Tensor embed(const Backbone& backbone, std::span<const Image> images, std::size_t chunk) {
  return embed_batches(backbone, images.size(), chunk,
                       [&](std::size_t lo, std::size_t hi) { return to_batch(images.subspan(lo, hi - lo)); });
}

CosineClassifier adapt(const Backbone& backbone, const ImageDataset& dataset, const Episode& episode,
                       const AdaptConfig& config, std::uint64_t seed) {
  return adapt_classifier(embed(backbone, dataset, episode.support), episode.support_labels,
                          episode.classes.size(), config, seed);
}

double ci95_half_width(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(n));
}

EvalReport evaluate(const Backbone& backbone, const ImageDataset& dataset, std::span<const std::size_t> classes,
                    const EpisodeSpec& spec, const EvalOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  EpisodeSampler sampler(dataset, classes, spec);

  const auto pool = images_of_classes(dataset, classes);
  const Tensor bank = embed(backbone, dataset, pool);
  std::unordered_map<std::size_t, std::size_t> row_of;
  for (std::size_t r = 0; r < pool.size(); ++r) row_of[pool[r]] = r;
  auto rows = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> r(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) r[i] = row_of.at(idx[i]);
    return r;
  };

  std::vector<double> acc(spec.tasks, 0.0);
  std::atomic<std::size_t> next{0};
  auto run_task = [&](std::size_t t) {
    const Episode ep = sampler.sample(t);
    Tensor support, query;
    {
      NoGradGuard guard;
      support = index_rows(bank, rows(ep.support));
      query = index_rows(bank, rows(ep.query));
    }
    const auto head = adapt_classifier(support, ep.support_labels, ep.classes.size(), options.adapt,
                                       derive_seed(spec.seed, static_cast<std::uint64_t>(Stream::adapt), t));
    NoGradGuard guard;
    acc[t] = accuracy(cosine_logits(head, query), ep.query_labels);
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, spec.tasks));
  if (threads == 1) {
    for (std::size_t t = 0; t < spec.tasks; ++t) run_task(t);
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t w = 0; w < threads; ++w) {
      pool_threads.emplace_back([&] {
        for (std::size_t t = next++; t < spec.tasks; t = next++) run_task(t);
      });
    }
    for (auto& th : pool_threads) th.join();
  }

  EvalReport report;
  report.spec = spec;
  report.accuracies = std::move(acc);
  report.mean = report.accuracies.empty()
                    ? 0.0
                    : std::accumulate(report.accuracies.begin(), report.accuracies.end(), 0.0) /
                          static_cast<double>(report.accuracies.size());
  report.ci95 = ci95_half_width(report.accuracies);
  report.dataset = options.dataset_name;
  report.backbone_checkpoint = options.checkpoint_name;
  report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["n_way"] = report.spec.n_way;
  j["k_shot"] = report.spec.k_shot;
  j["q"] = report.spec.q;
  j["tasks"] = report.spec.tasks;
  j["mean"] = report.mean;
  j["ci95"] = report.ci95;
  j["seed"] = report.spec.seed;
  j["dataset"] = report.dataset;
  j["backbone_checkpoint"] = report.backbone_checkpoint;
  j["wall_ms"] = report.wall_ms;
  return j.dump();
}

std::string eval_tasks_jsonl(const EvalReport& report) {
  std::string out;
  for (std::size_t t = 0; t < report.accuracies.size(); ++t) {
    nlohmann::ordered_json j;
    j["task"] = t;
    j["accuracy"] = report.accuracies[t];
    out += j.dump() + "\n";
  }
  return out;
}

LogitsFn classifier_logits(const Backbone& backbone, const CosineClassifier& classifier) {
  return [bb = backbone.frozen(), head = classifier.frozen()](const Tensor& x) {
    return cosine_logits(head, bb.features(x));
  };
}

namespace {

std::vector<double> input_gradient(const LogitsFn& model, const Tensor& x, std::span<const std::size_t> labels) {
  Tensor input = Tensor::parameter(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  backward(softmax_cross_entropy(model(input), labels));
  return std::vector<double>(input.grad().begin(), input.grad().end());
}

}  // namespace

Tensor fgsm_attack(const LogitsFn& model, const Tensor& x, std::span<const std::size_t> labels, double epsilon) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) throw DimensionError("fgsm: x must be [B x C x H x W]");
  if (!(epsilon >= 0.0)) throw ValidationError("fgsm: epsilon must be non-negative");
  const auto g = input_gradient(model, x, labels);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    out[i] = std::clamp(out[i] + epsilon * s, 0.0, 1.0);
  }
  return Tensor::constant(x.shape(), std::move(out));
}

namespace {

double batch_accuracy(const LogitsFn& model, const Tensor& x, std::span<const std::size_t> labels) {
  NoGradGuard guard;
  return accuracy(model(x), labels);
}

}  // namespace

RobustnessTable robustness_eval(const Backbone& backbone, const CosineClassifier& classifier,
                                std::span<const Image> images, std::span<const std::size_t> labels,
                                std::span<const PerturbKind> kinds, int max_severity, double fgsm_epsilon) {
  if (images.size() != labels.size()) throw DimensionError("robustness: label count differs from images");
  if (images.empty()) throw ValidationError("robustness: no images");
  if (max_severity < 0 || max_severity > 5) throw ValidationError("robustness: severity must be in 0..5");
  const LogitsFn model = classifier_logits(backbone, classifier);
  const Tensor clean = to_batch(images);

  RobustnessTable table;
  table.images = images.size();
  table.fgsm_epsilon = fgsm_epsilon;
  table.rows.push_back({"clean", {batch_accuracy(model, clean, labels)}});
  for (auto kind : kinds) {
    RobustnessRow row{to_string(kind), {}};
    for (int s = 0; s <= max_severity; ++s) {
      std::vector<Image> perturbed;
      perturbed.reserve(images.size());
      for (const auto& im : images) perturbed.push_back(perturb(im, kind, s));
      row.accuracies.push_back(batch_accuracy(model, to_batch(perturbed), labels));
    }
    table.rows.push_back(std::move(row));
  }
  const Tensor adv = fgsm_attack(model, clean, labels, fgsm_epsilon);
  table.rows.push_back({"fgsm", {batch_accuracy(model, adv, labels)}});
  return table;
}

std::string format_robustness_table(const RobustnessTable& table) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "images: " << table.images << "\n";
  for (const auto& row : table.rows) {
    os << std::left << std::setw(12) << row.name;
    if (row.name == "fgsm") {
      os << " eps=" << std::setprecision(5) << table.fgsm_epsilon << std::setprecision(2);
    }
    for (double a : row.accuracies) os << " " << std::right << std::setw(6) << 100.0 * a;
    os << "\n";
  }
  return os.str();
}

std::vector<std::uint8_t> saliency_mask(const LogitsFn& model, const Image& image, std::size_t label,
                                        double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0)) throw ValidationError("saliency: percentile must be in (0, 100]");
  const Image single[1] = {image};
  const std::size_t labels[1] = {label};
  const auto g = input_gradient(model, to_batch(single), labels);
  const std::size_t hw = image.height * image.width;
  std::vector<double> mag(hw, 0.0);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t p = 0; p < hw; ++p) mag[p] = std::max(mag[p], std::abs(g[c * hw + p]));
  }
  const auto keep = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(hw) - 1e-9));
  std::vector<std::size_t> order(hw);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mag[a] > mag[b]; });
  std::vector<std::uint8_t> mask(hw, 0);
  for (std::size_t i = 0; i < std::min(keep, hw); ++i) mask[order[i]] = 1;
  return mask;
}

FeatureDump export_features(const Backbone& backbone, const ImageDataset& dataset,
                            std::span<const std::size_t> class_filter) {
  std::vector<std::size_t> indices;
  if (class_filter.empty()) {
    indices.resize(dataset.size());
    std::iota(indices.begin(), indices.end(), 0);
  } else {
    indices = images_of_classes(dataset, class_filter);
  }
  const Tensor f = embed(backbone, dataset, indices);
  FeatureDump dump;
  dump.dim = backbone.feature_dim();
  for (auto i : indices) dump.class_ids.push_back(dataset.labels[i]);
  dump.features.assign(f.data().begin(), f.data().end());
  return dump;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& at) {
  if (at + 4 > bytes.size()) throw FormatError("features: truncated at offset " + std::to_string(at));
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  at += 4;
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_features(const FeatureDump& dump) {
  if (dump.features.size() != dump.size() * dump.dim) throw DimensionError("features: size mismatch");
  std::vector<std::uint8_t> out{'F', 'S', 'F', '1'};
  put_u32(out, static_cast<std::uint32_t>(dump.size()));
  put_u32(out, static_cast<std::uint32_t>(dump.dim));
  for (std::size_t i = 0; i < dump.size(); ++i) {
    put_u32(out, dump.class_ids[i]);
    for (std::size_t k = 0; k < dump.dim; ++k) {
      std::uint32_t bits;
      std::memcpy(&bits, &dump.features[i * dump.dim + k], 4);
      put_u32(out, bits);
    }
  }
  return out;
}

FeatureDump decode_features(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "FSF1", 4) != 0) throw FormatError("features: bad magic at offset 0");
  std::size_t at = 4;
  const std::size_t count = get_u32(bytes, at);
  FeatureDump dump;
  dump.dim = get_u32(bytes, at);
  for (std::size_t i = 0; i < count; ++i) {
    dump.class_ids.push_back(get_u32(bytes, at));
    for (std::size_t k = 0; k < dump.dim; ++k) {
      const std::uint32_t bits = get_u32(bytes, at);
      float f;
      std::memcpy(&f, &bits, 4);
      dump.features.push_back(f);
    }
  }
  if (at != bytes.size()) throw FormatError("features: trailing bytes at offset " + std::to_string(at));
  return dump;
}

}  // namespace fsl
