#include <cmath>
#include <set>

#include "doctest.h"
#include "fsl/errors.hpp"
#include "fsl/pipeline.hpp"
#include "support.hpp"

using namespace fsl;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig c;
  c.image_size = 16;
  c.channels = {4, 8, 8};
  c.strides = {2, 2, 1};
  c.mixup_layers = {0, 1, 2};
  return c;
}

const ImageDataset& toy_data() {
  static const ImageDataset ds = generate_synthetic({3, 8, 20, 16});
  return ds;
}

SplitSpec toy_split() { return make_splits(8, {0, 1, 2, 3}, {4, 5, 6}, {7}); }

TrainConfig toy_config(const std::string& method = "s2m2_r") {
  TrainConfig c;
  apply_method(c, method);
  c.backbone = small_backbone();
  c.epochs_phase1 = 2;
  c.max_phase2_epochs = 2;
  c.batch_size = 8;
  c.holdout_per_class = 4;
  c.validation = {3, 1, 3, 4, 0};
  c.adapt.steps = 10;
  c.seed = 5;
  return c;
}

// Replays a fixed validation-accuracy sequence.
Validator scripted(std::vector<double> values) {
  return [values](const Backbone&, std::size_t epoch) { return values.at(epoch - 1); };
}

struct Phase2Run {
  TrainedModel model;
  TrainState state;
};

Phase2Run run_phase2(const TrainConfig& config, const Validator& validator) {
  const auto train = make_training_set(toy_data(), toy_split().base, config.holdout_per_class);
  Phase2Run r{init_model(config, 4), TrainState{}};
  train_phase1(r.model, toy_data(), train, config, r.state);
  finetune_phase2(r.model, toy_data(), train, config, r.state, validator);
  return r;
}

std::string digest(const TrainedModel& m) {
  auto copy = clone_model(m);
  return parameter_digest(trainable_parameters(copy));
}

std::string strip_wall(std::string s) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto at = s.find("\"wall_ms\":", pos);
    if (at == std::string::npos) break;
    out += s.substr(pos, at - pos);
    pos = s.find_first_of(",}", at);
  }
  return out + s.substr(pos);
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.optimizer.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.validation.tasks = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.epochs_phase1 = kMaxEpochs + 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.epochs_phase1 = kMaxEpochs;
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("method presets") {
    TrainConfig c;
    apply_method(c, "baseline++");
    CHECK(c.selfsup.variant == SelfSupVariant::none);
    CHECK_FALSE(c.phase2);
    apply_method(c, "rotation");
    CHECK(c.selfsup.variant == SelfSupVariant::rotation);
    CHECK_FALSE(c.phase2);
    apply_method(c, "s2m2_r");
    CHECK(c.selfsup.variant == SelfSupVariant::rotation);
    CHECK(c.phase2);
    apply_method(c, "s2m2_e");
    CHECK(c.selfsup.variant == SelfSupVariant::exemplar);
    CHECK(c.phase2);
    apply_method(c, "mixup");
    CHECK(c.selfsup.variant == SelfSupVariant::none);
    CHECK(c.phase2);
    CHECK(method_names().size() == 6);
    CHECK_THROWS_AS(apply_method(c, "protonet"), ConfigError);
  }

  TEST_CASE("training and holdout sets") {
    const auto split = toy_split();
    const auto train = make_training_set(toy_data(), split.base, 4);
    const auto hold = make_holdout_set(toy_data(), split.base, 4);
    CHECK(train.indices.size() == 4 * 16);
    CHECK(hold.indices.size() == 4 * 4);
    std::set<std::size_t> all(train.indices.begin(), train.indices.end());
    all.insert(hold.indices.begin(), hold.indices.end());
    CHECK(all.size() == 80);
    for (std::size_t i = 0; i < train.indices.size(); ++i)
      CHECK(split.base[train.labels[i]] == toy_data().labels[train.indices[i]]);
    CHECK_THROWS_AS(make_training_set(toy_data(), split.base, 19), ConfigError);
  }

  TEST_CASE("early stopping traces") {
    const TrainConfig c = [] {
      auto c = toy_config();
      c.max_phase2_epochs = 5;
      return c;
    }();

    auto one = toy_config();
    one.max_phase2_epochs = 1;
    const Phase2Run first = run_phase2(one, scripted({0.5}));
    CHECK(first.state.val_acc_list.size() == 1);

    const Phase2Run down = run_phase2(c, scripted({0.5, 0.4, 0.9}));
    CHECK(down.state.val_acc_list == std::vector<double>{0.5, 0.4});
    CHECK(down.state.history.size() == c.epochs_phase1 + 2);
    CHECK(digest(down.model) == digest(first.model));

    const Phase2Run up = run_phase2(c, scripted({0.3, 0.5, 0.7, 0.6, 0.8}));
    CHECK(up.state.val_acc_list.size() == 4);
    auto three = c;
    three.max_phase2_epochs = 3;
    CHECK(digest(up.model) == digest(run_phase2(three, scripted({0.3, 0.5, 0.7})).model));

    // A tie is not an improvement.
    CHECK(run_phase2(c, scripted({0.5, 0.5, 0.9})).state.val_acc_list.size() == 2);

    // Nothing improves on zero: the phase-1 model is kept.
    const Phase2Run flat = run_phase2(c, scripted({0.0, 1.0}));
    CHECK(flat.state.val_acc_list.size() == 1);
    const auto train = make_training_set(toy_data(), toy_split().base, c.holdout_per_class);
    TrainedModel p1 = init_model(c, 4);
    TrainState s;
    train_phase1(p1, toy_data(), train, c, s);
    CHECK(digest(flat.model) == digest(p1));

    // Epochs run equal 1 + the strictly increasing prefix, capped by the budget.
    for (const auto& seq : std::vector<std::vector<double>>{{0.2, 0.1}, {0.2, 0.3, 0.1}, {0.1, 0.2, 0.3, 0.4, 0.5}}) {
      const Phase2Run r = run_phase2(c, scripted(seq));
      std::size_t prefix = 0;
      double prev = 0.0;
      while (prefix < seq.size() && seq[prefix] > prev) prev = seq[prefix++];
      CHECK(r.state.val_acc_list.size() == std::min(prefix + 1, c.max_phase2_epochs));
    }
  }

  TEST_CASE("loss decomposition in records") {
    auto c = toy_config("s2m2_r");
    const Phase2Run r = run_phase2(c, scripted({0.5, 0.6}));
    REQUIRE(r.state.history.size() == 4);
    for (const auto& rec : r.state.history) {
      CHECK(rec.steps == 8);
      if (rec.phase == 1) {
        CHECK(std::abs(rec.mean_loss - (rec.mean_class + rec.mean_selfsup)) < 1e-12);
      } else {
        CHECK(std::abs(rec.mean_loss - (rec.mean_mixup + 0.5 * (rec.mean_class + rec.mean_selfsup))) < 1e-12);
        CHECK(rec.val_acc.has_value());
      }
    }
    c = toy_config("baseline++");
    TrainedModel m = init_model(c, 4);
    TrainState s;
    train_phase1(m, toy_data(), make_training_set(toy_data(), toy_split().base, 4), c, s);
    for (const auto& rec : s.history) {
      CHECK(rec.mean_selfsup == 0.0);
      CHECK(rec.mean_loss == rec.mean_class);
    }
  }

  TEST_CASE("runs are deterministic") {
    for (const char* method : {"s2m2_r", "s2m2_e", "baseline++"}) {
      const auto c = toy_config(method);
      const RunResult a = run_s2m2(toy_data(), toy_split(), c);
      const RunResult b = run_s2m2(toy_data(), toy_split(), c);
      CHECK(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
      CHECK(strip_wall(training_report_jsonl(a.state)) == strip_wall(training_report_jsonl(b.state)));
      CHECK(a.checkpoint.header.at("seed") == "5");
      auto other = c;
      other.seed = 6;
      CHECK(encode_checkpoint(run_s2m2(toy_data(), toy_split(), other).checkpoint) !=
            encode_checkpoint(a.checkpoint));
    }
  }

  TEST_CASE("parameter count is preserved") {
    const auto c = toy_config();
    const std::size_t before = init_model(c, 4).backbone.parameter_count();
    const RunResult r = run_s2m2(toy_data(), toy_split(), c);
    CHECK(r.model.backbone.parameter_count() == before);
    CHECK(r.model.rotation.has_value());
    CHECK_FALSE(run_s2m2(toy_data(), toy_split(), toy_config("baseline++")).model.rotation.has_value());
  }

  TEST_CASE("training report") {
    const RunResult r = run_s2m2(toy_data(), toy_split(), toy_config());
    const auto text = training_report_jsonl(r.state);
    CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == r.state.history.size());
    CHECK(text.rfind("{\"phase\":1,\"epoch\":1,", 0) == 0);
    CHECK(text.find("\"val_acc\"") != std::string::npos);
    CHECK(text.find("\"wall_ms\"") != std::string::npos);
  }

  TEST_CASE("validation requirements") {
    auto c = toy_config();
    Backbone bb(small_backbone(), 1);
    CHECK_THROWS_AS(validation_accuracy(bb, toy_data(), {}, c), ConfigError);
    const std::vector<std::size_t> val{4, 5, 6};
    const double a = validation_accuracy(bb, toy_data(), val, c);
    CHECK(a == validation_accuracy(bb, toy_data(), val, c));
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);

    const SplitSpec no_val{{0, 1, 2, 3, 4, 5}, {}, {6, 7}};
    CHECK_THROWS_AS(run_s2m2(toy_data(), no_val, c), ConfigError);
    c.phase2_fixed_epochs = 1;
    const RunResult fixed = run_s2m2(toy_data(), no_val, c);
    CHECK(fixed.state.history.size() == 3);
    CHECK(fixed.state.val_acc_list.empty());
  }

  TEST_CASE("untrained validation accuracy is at chance") {
    const auto ds = fsl::test::random_dataset(8, 20, 16, 30);
    auto c = toy_config();
    c.validation = {5, 5, 15, 100, 0};
    c.adapt.steps = 30;
    c.threads = 4;
    Backbone bb(small_backbone(), 31);
    const std::vector<std::size_t> val{0, 1, 2, 3, 4, 5, 6, 7};
    CHECK(std::abs(validation_accuracy(bb, ds, val, c) - 0.2) <= 0.05);
  }

  TEST_CASE("loss decreases") {
    auto c = toy_config("rotation");
    c.epochs_phase1 = 6;
    TrainedModel m = init_model(c, 4);
    TrainState s;
    const auto train = make_training_set(toy_data(), toy_split().base, 4);
    train_phase1(m, toy_data(), train, c, s);
    CHECK(s.history.back().mean_loss < s.history.front().mean_loss);
    CHECK(s.step == 6 * 8);
    CHECK(s.epoch == 6);
  }
}
