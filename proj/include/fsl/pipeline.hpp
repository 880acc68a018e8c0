#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/fewshot.hpp"
#include "fsl/losses.hpp"
#include "fsl/model.hpp"
#include "fsl/optim.hpp"

namespace fsl {

inline constexpr std::size_t kMaxEpochs = 400;

struct TrainConfig {
  BackboneConfig backbone;
  double cosine_scale = 10.0;
  std::size_t epochs_phase1 = 30;
  bool phase2 = true;
  std::size_t max_phase2_epochs = 10;
  // Phase-2 epoch count when there are no validation classes to stop on.
  std::size_t phase2_fixed_epochs = 0;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  SelfSupSpec selfsup;
  MixupSpec mixup;
  EpisodeSpec validation{5, 5, 15, 100, 0};
  AdaptConfig adapt;
  // Last images of every base class, kept out of training for probes.
  std::size_t holdout_per_class = 10;
  std::size_t threads = 1;

  // Throws ConfigError on B < 2, lr <= 0, E < 1 or an epoch count above 400.
  void validate() const;
};

// Method presets: baseline++, rotation, exemplar, mixup, s2m2_r, s2m2_e.
void apply_method(TrainConfig& config, const std::string& method);
std::vector<std::string> method_names();

struct EpochRecord {
  int phase = 1;
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double mean_loss = 0.0;
  double mean_class = 0.0;
  double mean_selfsup = 0.0;
  double mean_mixup = 0.0;
  std::optional<double> val_acc;
  double wall_ms = 0.0;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  OptimizerState optimizer;
  double val_acc_prev = 0.0;
  std::vector<double> val_acc_list;
  std::vector<EpochRecord> history;
};

// Training images of the base classes with base-local labels (position of
// the class in the base list).
struct TrainingSet {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
};

TrainingSet make_training_set(const ImageDataset& dataset, std::span<const std::size_t> base_classes,
                              std::size_t holdout_per_class);
TrainingSet make_holdout_set(const ImageDataset& dataset, std::span<const std::size_t> base_classes,
                             std::size_t holdout_per_class);

TrainedModel init_model(const TrainConfig& config, std::size_t base_classes);
TrainedModel clone_model(const TrainedModel& model);
std::vector<Tensor> trainable_parameters(TrainedModel& model);

void train_phase1(TrainedModel& model, const ImageDataset& dataset, const TrainingSet& train,
                  const TrainConfig& config, TrainState& state);

// Mean query accuracy over seeded episodes from the validation classes.
// N is capped at the number of validation classes.
double validation_accuracy(const Backbone& backbone, const ImageDataset& dataset,
                           std::span<const std::size_t> validation_classes, const TrainConfig& config);

using Validator = std::function<double(const Backbone& backbone, std::size_t epoch)>;

// Manifold Mixup fine-tuning. Runs while each epoch's validation accuracy
// strictly exceeds the previous one and keeps the last improving model.
// Without a validator, runs phase2_fixed_epochs epochs and keeps the last.
void finetune_phase2(TrainedModel& model, const ImageDataset& dataset, const TrainingSet& train,
                     const TrainConfig& config, TrainState& state, const Validator& validator);

struct RunResult {
  TrainedModel model;
  TrainState state;
  Checkpoint checkpoint;
};

RunResult run_s2m2(const ImageDataset& dataset, const SplitSpec& split, const TrainConfig& config);

// Top-1 accuracy of the base classifier on dataset images.
double classification_accuracy(const TrainedModel& model, const ImageDataset& dataset, const TrainingSet& set);

// One JSON object per epoch.
std::string training_report_jsonl(const TrainState& state);

}  // namespace fsl
