#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/image_ops.hpp"
#include "fsl/model.hpp"
#include "fsl/tensor.hpp"

namespace fsl {

struct EpisodeSpec {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q = 15;
  std::size_t tasks = 600;
  std::uint64_t seed = 0;
};

// Indices refer to dataset images; labels are episode-local (0..N-1, in
// the order of `classes`).
struct Episode {
  std::vector<std::size_t> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query;
  std::vector<std::size_t> query_labels;
};

// Draws episodes from a fixed class pool. Task t uses its own RNG stream
// derived from (seed, t), so adding tasks never changes earlier ones.
class EpisodeSampler {
 public:
  EpisodeSampler(const ImageDataset& dataset, std::span<const std::size_t> classes, const EpisodeSpec& spec);
  Episode sample(std::size_t task) const;
  const EpisodeSpec& spec() const { return spec_; }

 private:
  EpisodeSpec spec_;
  std::vector<std::size_t> classes_;
  std::vector<std::vector<std::size_t>> by_class_;
};

Episode sample_episode(const ImageDataset& dataset, std::span<const std::size_t> classes, const EpisodeSpec& spec,
                       std::size_t task);

struct AdaptConfig {
  std::size_t steps = 100;
  double learning_rate = 1e-2;
  double scale = 10.0;
};

// Trains a fresh N-way cosine classifier on fixed support features with
// full-batch cross-entropy and Adam.
CosineClassifier adapt_classifier(const Tensor& support_features, std::span<const std::size_t> labels,
                                  std::size_t n_way, const AdaptConfig& config, std::uint64_t seed);

// Embeds the support set through the frozen backbone, then adapt_classifier.
CosineClassifier adapt(const Backbone& backbone, const ImageDataset& dataset, const Episode& episode,
                       const AdaptConfig& config, std::uint64_t seed);

double accuracy(const Tensor& logits, std::span<const std::size_t> labels);

// Features of dataset images, computed without recording a graph.
Tensor embed(const Backbone& backbone, const ImageDataset& dataset, std::span<const std::size_t> indices,
             std::size_t chunk = 256);
Tensor embed(const Backbone& backbone, std::span<const Image> images, std::size_t chunk = 256);

struct EvalReport {
  EpisodeSpec spec;
  std::vector<double> accuracies;
  double mean = 0.0;
  double ci95 = 0.0;
  std::string dataset;
  std::string backbone_checkpoint;
  double wall_ms = 0.0;
};

// 1.96 * sample standard deviation / sqrt(T); 0 when T < 2.
double ci95_half_width(std::span<const double> values);

struct EvalOptions {
  AdaptConfig adapt;
  std::size_t threads = 1;
  std::string dataset_name;
  std::string checkpoint_name;
};

// T episodes: sample, adapt on the support set, score the query set.
// Results are reduced in task order, so the thread count never changes them.
EvalReport evaluate(const Backbone& backbone, const ImageDataset& dataset, std::span<const std::size_t> classes,
                    const EpisodeSpec& spec, const EvalOptions& options = {});

// One JSON object; wall_ms is the only non-deterministic field.
std::string eval_report_json(const EvalReport& report);
// One JSON object per task: {"task":t,"accuracy":a}.
std::string eval_tasks_jsonl(const EvalReport& report);

// ---------------------------------------------------------------------------
// Probes on a trained classifier

using LogitsFn = std::function<Tensor(const Tensor& x)>;

LogitsFn classifier_logits(const Backbone& backbone, const CosineClassifier& classifier);

// x + eps * sign(grad_x CE), clipped to [0,1]. The model is not modified.
Tensor fgsm_attack(const LogitsFn& model, const Tensor& x, std::span<const std::size_t> labels, double epsilon);

struct RobustnessRow {
  std::string name;
  std::vector<double> accuracies;  // per severity for perturbations, one entry otherwise
};

struct RobustnessTable {
  std::vector<RobustnessRow> rows;  // clean, one per kind, fgsm
  std::size_t images = 0;
  double fgsm_epsilon = 0.0;
};

RobustnessTable robustness_eval(const Backbone& backbone, const CosineClassifier& classifier,
                                std::span<const Image> images, std::span<const std::size_t> labels,
                                std::span<const PerturbKind> kinds, int max_severity = 5,
                                double fgsm_epsilon = 1.0 / 255.0);

std::string format_robustness_table(const RobustnessTable& table);

// Row-major H x W mask marking the top `percentile` percent of pixels by
// gradient magnitude (max over channels), exactly ceil(p/100 * H * W) set;
// ties are resolved in (row, col) order.
std::vector<std::uint8_t> saliency_mask(const LogitsFn& model, const Image& image, std::size_t label,
                                        double percentile = 1.0);

// ---------------------------------------------------------------------------
// Feature export: "FSF1" | u32 count | u32 dim | (u32 class_id | dim x f32)*

struct FeatureDump {
  std::size_t dim = 0;
  std::vector<std::uint32_t> class_ids;
  std::vector<float> features;  // count * dim

  std::size_t size() const { return class_ids.size(); }
  bool operator==(const FeatureDump&) const = default;
};

FeatureDump export_features(const Backbone& backbone, const ImageDataset& dataset,
                            std::span<const std::size_t> class_filter);
std::vector<std::uint8_t> encode_features(const FeatureDump& dump);
FeatureDump decode_features(std::span<const std::uint8_t> bytes);

}  // namespace fsl
