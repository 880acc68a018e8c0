#include "fsl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "fsl/errors.hpp"
#include "fsl/ops.hpp"
#include "fsl/random.hpp"

namespace fsl {

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (validation.tasks < 1) throw ConfigError("val_episodes must be at least 1");
  if (epochs_phase1 > kMaxEpochs) throw ConfigError("epochs_phase1 exceeds 400");
  if (max_phase2_epochs > kMaxEpochs || phase2_fixed_epochs > kMaxEpochs) {
    throw ConfigError("phase-2 epoch count exceeds 400");
  }
  if (!(cosine_scale > 0.0)) throw ConfigError("cosine_scale must be positive");
  if (!(mixup.alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (selfsup.variant == SelfSupVariant::exemplar && selfsup.exemplar_copies < 2) {
    throw ConfigError("exemplar_copies must be at least 2");
  }
}

void apply_method(TrainConfig& config, const std::string& method) {
  if (method == "baseline++") {
    config.selfsup.variant = SelfSupVariant::none;
    config.phase2 = false;
  } else if (method == "rotation") {
    config.selfsup.variant = SelfSupVariant::rotation;
    config.phase2 = false;
  } else if (method == "exemplar") {
    config.selfsup.variant = SelfSupVariant::exemplar;
    config.phase2 = false;
  } else if (method == "mixup") {
    config.selfsup.variant = SelfSupVariant::none;
    config.phase2 = true;
  } else if (method == "s2m2_r") {
    config.selfsup.variant = SelfSupVariant::rotation;
    config.phase2 = true;
  } else if (method == "s2m2_e") {
    config.selfsup.variant = SelfSupVariant::exemplar;
    config.phase2 = true;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
}

std::vector<std::string> method_names() { return {"baseline++", "rotation", "exemplar", "mixup", "s2m2_r", "s2m2_e"}; }

namespace {

std::pair<TrainingSet, TrainingSet> partition(const ImageDataset& dataset, std::span<const std::size_t> base,
                                              std::size_t holdout) {
  if (base.empty()) throw ConfigError("base split is empty");
  const auto by_class = dataset.indices_by_class();
  TrainingSet train, held;
  for (std::size_t local = 0; local < base.size(); ++local) {
    const std::size_t c = base[local];
    if (c >= by_class.size()) throw ConfigError("base class " + std::to_string(c) + " not in dataset");
    const auto& idx = by_class[c];
    if (idx.size() < holdout + 2) {
      throw ConfigError("base class " + std::to_string(c) + " has too few images for holdout " +
                        std::to_string(holdout));
    }
    const std::size_t cut = idx.size() - holdout;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto& dst = i < cut ? train : held;
      dst.indices.push_back(idx[i]);
      dst.labels.push_back(local);
    }
  }
  return {std::move(train), std::move(held)};
}

}  // namespace

TrainingSet make_training_set(const ImageDataset& dataset, std::span<const std::size_t> base_classes,
                              std::size_t holdout_per_class) {
  return partition(dataset, base_classes, holdout_per_class).first;
}

TrainingSet make_holdout_set(const ImageDataset& dataset, std::span<const std::size_t> base_classes,
                             std::size_t holdout_per_class) {
  return partition(dataset, base_classes, holdout_per_class).second;
}

TrainedModel init_model(const TrainConfig& config, std::size_t base_classes) {
  Backbone backbone(config.backbone, config.seed);
  CosineClassifier classifier(base_classes, backbone.feature_dim(), config.cosine_scale, config.seed);
  std::optional<RotationHead> rotation;
  if (config.selfsup.variant == SelfSupVariant::rotation) {
    rotation.emplace(config.selfsup.rotation.size(), backbone.feature_dim(), config.seed);
  }
  return {std::move(backbone), std::move(classifier), std::move(rotation)};
}

TrainedModel clone_model(const TrainedModel& model) {
  std::optional<RotationHead> rotation;
  if (model.rotation) rotation = model.rotation->clone();
  return {model.backbone.clone(), model.classifier.clone(), std::move(rotation)};
}

std::vector<Tensor> trainable_parameters(TrainedModel& model) {
  std::vector<Tensor> params = model.backbone.parameters();
  params.push_back(model.classifier.weight());
  if (model.rotation) {
    params.push_back(model.rotation->weight());
    params.push_back(model.rotation->bias());
  }
  return params;
}

namespace {

struct StepTerms {
  Tensor loss;
  double classification = 0.0;
  double selfsup = 0.0;
  double mixup = 0.0;
};

StepTerms step_terms(int phase, const TrainedModel& model, const ImageDataset& dataset,
                     std::span<const std::size_t> indices, std::span<const std::size_t> labels,
                     const TrainConfig& config, std::size_t step) {
  PhaseTerms terms;
  std::vector<Image> images;
  images.reserve(indices.size());
  for (auto i : indices) images.push_back(dataset.image(i));

  switch (config.selfsup.variant) {
    case SelfSupVariant::none:
      terms.classification = softmax_cross_entropy(cosine_logits(model.classifier, model.backbone.features(to_batch(images))), labels);
      terms.selfsup = Tensor::scalar(0.0);
      break;
    case SelfSupVariant::rotation: {
      if (!model.rotation) throw UsageError("rotation self-supervision needs a rotation head");
      auto rt = rotation_terms(model.backbone, model.classifier, *model.rotation, images, labels,
                               config.selfsup.rotation);
      terms.classification = rt.classification;
      terms.selfsup = rt.rotation;
      break;
    }
    case SelfSupVariant::exemplar: {
      terms.classification = softmax_cross_entropy(cosine_logits(model.classifier, model.backbone.features(to_batch(images))), labels);
      auto rng = make_rng(config.seed, Stream::exemplar, step);
      auto copies = make_exemplar_copies(images, config.selfsup.exemplar_copies, rng, config.selfsup.augment);
      terms.selfsup = exemplar_loss(model.backbone, copies, config.selfsup.exemplar_copies);
      break;
    }
  }
  if (phase == 2) {
    auto rng = make_rng(config.seed, Stream::mixup, step);
    const MixDraw draw = draw_mix(config.mixup, model.backbone, indices.size(), rng);
    terms.mixup = manifold_mixup_loss(model.backbone, model.classifier, to_batch(images), labels, draw);
  }
  StepTerms out;
  out.classification = terms.classification->item();
  out.selfsup = terms.selfsup->item();
  out.mixup = terms.mixup ? terms.mixup->item() : 0.0;
  out.loss = phase_loss(phase, terms);
  return out;
}

EpochRecord run_epoch(int phase, TrainedModel& model, const ImageDataset& dataset, const TrainingSet& train,
                      const TrainConfig& config, TrainState& state) {
  const auto start = std::chrono::steady_clock::now();
  ++state.epoch;
  std::vector<std::size_t> order(train.indices.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(config.seed, Stream::shuffle, state.epoch);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Tensor> params = trainable_parameters(model);
  EpochRecord rec;
  rec.phase = phase;
  rec.epoch = state.epoch;
  for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
    const std::size_t hi = std::min(order.size(), lo + config.batch_size);
    if (hi - lo < 2) break;
    std::vector<std::size_t> idx, lab;
    for (std::size_t j = lo; j < hi; ++j) {
      idx.push_back(train.indices[order[j]]);
      lab.push_back(train.labels[order[j]]);
    }
    ++state.step;
    zero_grads(params);
    const StepTerms t = step_terms(phase, model, dataset, idx, lab, config, state.step);
    const double value = t.loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at phase " + std::to_string(phase) + " epoch " +
                         std::to_string(state.epoch) + " step " + std::to_string(state.step));
    }
    backward(t.loss);
    try {
      optimizer_step(params, state.optimizer, config.optimizer);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step));
    }
    rec.mean_loss += value;
    rec.mean_class += t.classification;
    rec.mean_selfsup += t.selfsup;
    rec.mean_mixup += t.mixup;
    ++rec.steps;
  }
  if (rec.steps > 0) {
    const double n = static_cast<double>(rec.steps);
    rec.mean_loss /= n;
    rec.mean_class /= n;
    rec.mean_selfsup /= n;
    rec.mean_mixup /= n;
  }
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

}  // namespace

void train_phase1(TrainedModel& model, const ImageDataset& dataset, const TrainingSet& train,
                  const TrainConfig& config, TrainState& state) {
  if (train.indices.size() < 2) throw ConfigError("training set needs at least 2 images");
  for (std::size_t e = 0; e < config.epochs_phase1; ++e) {
    state.history.push_back(run_epoch(1, model, dataset, train, config, state));
  }
}

double validation_accuracy(const Backbone& backbone, const ImageDataset& dataset,
                           std::span<const std::size_t> validation_classes, const TrainConfig& config) {
  if (validation_classes.empty()) throw ConfigError("validation split is empty");
  EpisodeSpec spec = config.validation;
  spec.n_way = std::min(spec.n_way, validation_classes.size());
  if (spec.n_way < 2) throw ConfigError("validation needs at least 2 classes");
  spec.seed = derive_seed(config.seed, static_cast<std::uint64_t>(Stream::validation));
  EvalOptions options;
  options.adapt = config.adapt;
  options.threads = config.threads;
  return evaluate(backbone, dataset, validation_classes, spec, options).mean;
}

void finetune_phase2(TrainedModel& model, const ImageDataset& dataset, const TrainingSet& train,
                     const TrainConfig& config, TrainState& state, const Validator& validator) {
  if (train.indices.size() < 2) throw ConfigError("training set needs at least 2 images");
  state.optimizer = OptimizerState{};
  state.val_acc_prev = 0.0;
  if (!validator) {
    for (std::size_t e = 0; e < config.phase2_fixed_epochs; ++e) {
      state.history.push_back(run_epoch(2, model, dataset, train, config, state));
    }
    return;
  }
  TrainedModel kept = clone_model(model);
  for (std::size_t e = 1; e <= config.max_phase2_epochs; ++e) {
    EpochRecord rec = run_epoch(2, model, dataset, train, config, state);
    const double acc = validator(model.backbone, e);
    rec.val_acc = acc;
    state.val_acc_list.push_back(acc);
    state.history.push_back(rec);
    if (!(acc > state.val_acc_prev)) break;
    state.val_acc_prev = acc;
    kept = clone_model(model);
  }
  model = std::move(kept);
}

RunResult run_s2m2(const ImageDataset& dataset, const SplitSpec& split, const TrainConfig& config) {
  config.validate();
  const TrainingSet train = make_training_set(dataset, split.base, config.holdout_per_class);
  RunResult result{init_model(config, split.base.size()), TrainState{}, Checkpoint{}};
  train_phase1(result.model, dataset, train, config, result.state);

  std::size_t phase2_epochs = 0;
  if (config.phase2) {
    Validator validator;
    if (!split.validation.empty()) {
      validator = [&](const Backbone& backbone, std::size_t) {
        return validation_accuracy(backbone, dataset, split.validation, config);
      };
    } else if (config.phase2_fixed_epochs == 0) {
      throw ConfigError("phase 2 needs validation classes or phase2_fixed_epochs > 0");
    }
    const std::size_t before = result.state.history.size();
    finetune_phase2(result.model, dataset, train, config, result.state, validator);
    phase2_epochs = result.state.history.size() - before;
  }

  std::map<std::string, std::string> extra;
  extra["seed"] = std::to_string(config.seed);
  extra["selfsup"] = to_string(config.selfsup.variant);
  extra["epochs_phase1"] = std::to_string(config.epochs_phase1);
  extra["phase2_epochs"] = std::to_string(phase2_epochs);
  extra["base_split"] = join_sizes(split.base);
  result.checkpoint = make_checkpoint(result.model, std::move(extra));
  return result;
}

double classification_accuracy(const TrainedModel& model, const ImageDataset& dataset, const TrainingSet& set) {
  NoGradGuard guard;
  return accuracy(cosine_logits(model.classifier, embed(model.backbone, dataset, set.indices)), set.labels);
}

std::string training_report_jsonl(const TrainState& state) {
  std::string out;
  for (const auto& r : state.history) {
    nlohmann::ordered_json j;
    j["phase"] = r.phase;
    j["epoch"] = r.epoch;
    j["steps"] = r.steps;
    j["mean_loss"] = r.mean_loss;
    j["mean_class"] = r.mean_class;
    j["mean_selfsup"] = r.mean_selfsup;
    if (r.phase == 2) j["mean_mixup"] = r.mean_mixup;
    if (r.val_acc) j["val_acc"] = *r.val_acc;
    j["wall_ms"] = r.wall_ms;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace fsl
