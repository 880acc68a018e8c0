#include "fsl/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsl/errors.hpp"

namespace fsl {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "master seed (FSL_SEED when unset)"},
      {"method", "", "preset: baseline++, rotation, exemplar, mixup, s2m2_r, s2m2_e"},
      {"selfsup", "rotation", "none, rotation or exemplar"},
      {"phase2", "true", "run Manifold Mixup fine-tuning"},
      {"epochs_phase1", "30", "phase-1 epochs"},
      {"max_phase2_epochs", "10", "cap on phase-2 epochs"},
      {"phase2_fixed_epochs", "0", "phase-2 epochs when there are no validation classes"},
      {"batch_size", "32", "training batch size"},
      {"optimizer", "adam", "adam or sgd"},
      {"learning_rate", "", "step size (adam 1e-3, sgd 0.05)"},
      {"momentum", "0.9", "sgd momentum"},
      {"alpha", "2", "mixup Beta(alpha, alpha)"},
      {"mixup_layers", "0,1,2,3", "eligible mixup taps"},
      {"rotations", "4", "rotation angle count: 1, 2, 4 or 8"},
      {"exemplar_copies", "4", "augmented copies per image"},
      {"cosine_scale", "10", "cosine classifier scale"},
      {"channels", "16,32,64,64", "backbone block widths"},
      {"strides", "2,2,2,2", "backbone block strides"},
      {"val_n_way", "5", "validation episode ways"},
      {"val_k_shot", "5", "validation episode shots"},
      {"val_q", "15", "validation queries per class"},
      {"val_episodes", "100", "validation episodes per evaluation"},
      {"adapt_steps", "100", "novel classifier steps"},
      {"adapt_lr", "0.01", "novel classifier step size"},
      {"holdout_per_class", "10", "base images per class kept out of training"},
      {"threads", "1", "worker cap for episode evaluation"},
      {"n_way", "5", "episode ways"},
      {"k_shot", "1", "episode shots"},
      {"q", "15", "queries per class"},
      {"tasks", "600", "episode count"},
      {"eval_split", "novel", "classes to evaluate on: novel, validation, base or all"},
      {"export_split", "novel", "classes to export: novel, validation, base or all"},
      {"classes", "16", "synthetic class count"},
      {"per_class", "60", "synthetic images per class"},
      {"image_size", "32", "synthetic image side"},
      {"split_base", "8", "base class count"},
      {"split_val", "3", "validation class count"},
      {"split_novel", "5", "novel class count"},
      {"merge_val", "false", "fold validation classes into base"},
      {"perturb", "brightness,contrast,pixelate", "perturbation kinds"},
      {"max_severity", "5", "highest perturbation severity"},
      {"fgsm_epsilon", "1/255", "FGSM step"},
      {"percentile", "1", "saliency percentile"},
      {"image_index", "0", "dataset image for saliency"},
      {"dataset", "", "dataset file"},
      {"splits", "", "split file"},
      {"checkpoint", "", "checkpoint file"},
      {"report_dir", "runs", "output directory"},
  };
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string canonical_key(std::string key) {
  for (auto& c : key) {
    if (c == '-') c = '_';
  }
  return key;
}

bool known_key(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.name == key) return true;
  }
  return false;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& what) {
  throw ConfigError("key '" + key + "': cannot parse '" + value + "' as " + what);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "a non-negative integer");
  }
  if (pos != v.size()) bad_value(key, v, "a non-negative integer");
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
  const auto slash = v.find('/');
  if (slash != std::string::npos) {
    const double den = to_double(key, v.substr(slash + 1));
    if (den == 0.0) bad_value(key, v, "a number");
    return to_double(key, v.substr(0, slash)) / den;
  }
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
  if (pos != v.size() || !std::isfinite(x)) bad_value(key, v, "a number");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : to_list(v)) out.push_back(to_size(key, s));
  return out;
}

template <typename F>
auto parse_as(const std::string& key, const std::string& v, F&& f) {
  try {
    return f(v);
  } catch (const ValidationError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

}  // namespace

RawConfig parse_config_text(const std::string& text, std::vector<std::string>& warnings) {
  RawConfig raw;
  std::map<std::string, std::size_t> seen;
  std::stringstream ss(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(ss, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = canonical_key(trim(line.substr(0, eq)));
    if (!known_key(key)) throw ConfigError("unknown config key '" + key + "' at line " + std::to_string(number));
    if (auto it = seen.find(key); it != seen.end()) {
      warnings.push_back("duplicate key '" + key + "' at lines " + std::to_string(it->second) + " and " +
                         std::to_string(number) + "; last occurrence wins");
    }
    seen[key] = number;
    raw[key] = trim(line.substr(eq + 1));
  }
  return raw;
}

RawConfig parse_config_file(const std::filesystem::path& path, std::vector<std::string>& warnings) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), warnings);
}

RunConfig build_config(const RawConfig& file, const RawConfig& overrides) {
  RawConfig raw;
  std::set<std::string> explicit_keys;
  for (const auto& k : config_keys()) {
    if (auto it = overrides.find(k.name); it != overrides.end()) {
      raw[k.name] = it->second;
      explicit_keys.insert(k.name);
    } else if (auto jt = file.find(k.name); jt != file.end()) {
      raw[k.name] = jt->second;
      explicit_keys.insert(k.name);
    } else if (const char* env = std::getenv("FSL_SEED"); k.name == "seed" && env != nullptr && *env != '\0') {
      raw[k.name] = env;
    } else {
      raw[k.name] = k.fallback;
    }
  }
  for (const auto& [key, value] : overrides) {
    if (!known_key(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  auto get = [&](const std::string& key) -> const std::string& { return raw.at(key); };

  RunConfig rc;
  const std::uint64_t seed = to_size("seed", get("seed"));
  TrainConfig& t = rc.train;
  t.seed = seed;
  rc.method = get("method");
  if (!rc.method.empty()) {
    try {
      apply_method(t, rc.method);
    } catch (const ConfigError& e) {
      throw ConfigError("key 'method': " + std::string(e.what()));
    }
  }
  if (rc.method.empty() || explicit_keys.count("selfsup")) {
    t.selfsup.variant = parse_as("selfsup", get("selfsup"), parse_selfsup);
  }
  if (rc.method.empty() || explicit_keys.count("phase2")) t.phase2 = to_bool("phase2", get("phase2"));
  t.epochs_phase1 = to_size("epochs_phase1", get("epochs_phase1"));
  t.max_phase2_epochs = to_size("max_phase2_epochs", get("max_phase2_epochs"));
  t.phase2_fixed_epochs = to_size("phase2_fixed_epochs", get("phase2_fixed_epochs"));
  t.batch_size = to_size("batch_size", get("batch_size"));
  t.optimizer.kind = parse_as("optimizer", get("optimizer"), parse_optimizer);
  t.optimizer.learning_rate = get("learning_rate").empty()
                                  ? (t.optimizer.kind == OptimizerKind::adam ? 1e-3 : 0.05)
                                  : to_double("learning_rate", get("learning_rate"));
  t.optimizer.momentum = to_double("momentum", get("momentum"));
  t.mixup.alpha = to_double("alpha", get("alpha"));
  t.backbone.mixup_layers = to_sizes("mixup_layers", get("mixup_layers"));
  t.selfsup.rotation = parse_as("rotations", get("rotations"), [&](const std::string& v) {
    return RotationConfig::with_count(to_size("rotations", v));
  });
  t.selfsup.exemplar_copies = to_size("exemplar_copies", get("exemplar_copies"));
  t.cosine_scale = to_double("cosine_scale", get("cosine_scale"));
  t.backbone.channels = to_sizes("channels", get("channels"));
  t.backbone.strides = to_sizes("strides", get("strides"));
  t.validation.n_way = to_size("val_n_way", get("val_n_way"));
  t.validation.k_shot = to_size("val_k_shot", get("val_k_shot"));
  t.validation.q = to_size("val_q", get("val_q"));
  t.validation.tasks = to_size("val_episodes", get("val_episodes"));
  t.adapt.steps = to_size("adapt_steps", get("adapt_steps"));
  t.adapt.learning_rate = to_double("adapt_lr", get("adapt_lr"));
  t.adapt.scale = t.cosine_scale;
  t.holdout_per_class = to_size("holdout_per_class", get("holdout_per_class"));
  rc.threads = to_size("threads", get("threads"));
  if (rc.threads == 0) throw ConfigError("key 'threads': must be at least 1");
  t.threads = rc.threads;

  rc.synthetic.seed = seed;
  rc.synthetic.classes = to_size("classes", get("classes"));
  rc.synthetic.per_class = to_size("per_class", get("per_class"));
  rc.synthetic.size = to_size("image_size", get("image_size"));
  t.backbone.image_size = rc.synthetic.size;
  rc.ratios.base = to_size("split_base", get("split_base"));
  rc.ratios.validation = to_size("split_val", get("split_val"));
  rc.ratios.novel = to_size("split_novel", get("split_novel"));
  rc.merge_validation = to_bool("merge_val", get("merge_val"));

  rc.eval.n_way = to_size("n_way", get("n_way"));
  rc.eval.k_shot = to_size("k_shot", get("k_shot"));
  rc.eval.q = to_size("q", get("q"));
  rc.eval.tasks = to_size("tasks", get("tasks"));
  rc.eval.seed = seed;
  if (rc.eval.tasks < 1) throw ConfigError("key 'tasks': must be at least 1");
  for (const auto* key : {"eval_split", "export_split"}) {
    const auto& v = get(key);
    if (v != "novel" && v != "validation" && v != "base" && v != "all") bad_value(key, v, "a split name");
  }
  rc.eval_split = get("eval_split");
  rc.export_split = get("export_split");
  for (const auto& name : to_list(get("perturb"))) {
    rc.perturb.push_back(parse_as("perturb", name, parse_perturb_kind));
  }
  const std::size_t sev = to_size("max_severity", get("max_severity"));
  if (sev > 5) throw ConfigError("key 'max_severity': must be in 0..5");
  rc.max_severity = static_cast<int>(sev);
  rc.fgsm_epsilon = to_double("fgsm_epsilon", get("fgsm_epsilon"));
  if (rc.fgsm_epsilon < 0.0) throw ConfigError("key 'fgsm_epsilon': must be non-negative");
  rc.percentile = to_double("percentile", get("percentile"));
  if (!(rc.percentile > 0.0 && rc.percentile <= 100.0)) throw ConfigError("key 'percentile': must be in (0, 100]");
  rc.image_index = to_size("image_index", get("image_index"));

  rc.dataset = get("dataset");
  rc.splits = get("splits");
  rc.checkpoint = get("checkpoint");
  rc.report_dir = get("report_dir");
  if (rc.report_dir.empty()) throw ConfigError("key 'report_dir': must not be empty");

  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  rc.resolved = std::move(raw);
  return rc;
}

std::string format_config(const RawConfig& resolved) {
  std::string out;
  for (const auto& k : config_keys()) {
    auto it = resolved.find(k.name);
    if (it != resolved.end()) out += k.name + " = " + it->second + "\n";
  }
  return out;
}

std::vector<std::size_t> split_classes(const SplitSpec& split, const std::string& which, std::size_t class_count) {
  if (which == "base") return split.base;
  if (which == "validation") return split.validation;
  if (which == "novel") return split.novel;
  if (which == "all") {
    std::vector<std::size_t> all(class_count);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  throw ConfigError("unknown split '" + which + "'");
}

std::string format_eval_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "model" << std::right << std::setw(6) << "N" << std::setw(6) << "K"
     << std::setw(6) << "Q" << std::setw(8) << "tasks" << "  accuracy (%)\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(16) << name << std::right << std::setw(6) << r.spec.n_way << std::setw(6)
       << r.spec.k_shot << std::setw(6) << r.spec.q << std::setw(8) << r.spec.tasks << "  " << 100.0 * r.mean
       << " ± " << 100.0 * r.ci95 << "\n";
  }
  return os.str();
}

std::string format_training_table(const TrainState& state) {
  std::ostringstream os;
  os << "phase epoch steps       loss    L_class       L_ss       L_mm  val_acc\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& r : state.history) {
    os << std::setw(5) << r.phase << std::setw(6) << r.epoch << std::setw(6) << r.steps << std::setw(11)
       << r.mean_loss << std::setw(11) << r.mean_class << std::setw(11) << r.mean_selfsup << std::setw(11)
       << r.mean_mixup;
    if (r.val_acc) {
      os << std::setw(9) << std::setprecision(4) << *r.val_acc << std::setprecision(6);
    } else {
      os << std::setw(9) << "-";
    }
    os << "\n";
  }
  return os.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw std::runtime_error("cannot create report directory " + dir.string());
  }
}

void require_input(const std::filesystem::path& path, const std::string& key) {
  if (path.empty()) throw ConfigError("missing required path '" + key + "'");
  if (!std::filesystem::exists(path)) throw ConfigError("path '" + key + "' does not exist: " + path.string());
}

SplitSpec resolve_split(const RunConfig& rc, std::size_t class_count) {
  SplitSpec split = rc.splits.empty() ? make_splits(class_count, rc.ratios, rc.train.seed)
                                      : load_split(rc.splits, class_count);
  return rc.merge_validation ? merge_validation(split) : split;
}

struct Loaded {
  ImageDataset dataset;
  SplitSpec split;
  TrainedModel model;
};

// A split is not needed when every class of the dataset is used, which is
// how a backbone is evaluated on a different dataset.
Loaded load_inputs(const RunConfig& rc, bool need_split = true) {
  require_input(rc.dataset, "dataset");
  require_input(rc.checkpoint, "checkpoint");
  if (!rc.splits.empty()) require_input(rc.splits, "splits");
  ImageDataset dataset = load_dataset(rc.dataset);
  SplitSpec split = need_split || !rc.splits.empty() ? resolve_split(rc, dataset.class_count) : SplitSpec{};
  TrainedModel model = model_from_checkpoint(load_checkpoint(rc.checkpoint));
  const auto& cfg = model.backbone.config();
  if (cfg.in_channels != dataset.channels || cfg.image_size != dataset.height || dataset.height != dataset.width) {
    throw ConfigError("checkpoint expects " + std::to_string(cfg.in_channels) + "x" +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + " images");
  }
  return {std::move(dataset), std::move(split), std::move(model)};
}

void check_base(const Loaded& in) {
  if (in.model.classifier.classes() != in.split.base.size()) {
    throw ConfigError("checkpoint has " + std::to_string(in.model.classifier.classes()) +
                      " base classes, split has " + std::to_string(in.split.base.size()));
  }
}

int cmd_gen_data(const RunConfig& rc, std::ostream& out) {
  if (rc.dataset.empty()) throw ConfigError("missing required path 'dataset'");
  const ImageDataset ds = generate_synthetic(rc.synthetic);
  if (rc.dataset.has_parent_path()) ensure_dir(rc.dataset.parent_path());
  save_dataset(ds, rc.dataset);
  out << "wrote " << ds.size() << " images, " << ds.class_count << " classes to " << rc.dataset.string() << "\n";
  if (!rc.splits.empty()) {
    if (rc.splits.has_parent_path()) ensure_dir(rc.splits.parent_path());
    save_split(make_splits(ds.class_count, rc.ratios, rc.train.seed), rc.splits);
    out << "wrote split to " << rc.splits.string() << "\n";
  }
  return 0;
}

int cmd_train(const RunConfig& rc, std::ostream& out) {
  require_input(rc.dataset, "dataset");
  if (!rc.splits.empty()) require_input(rc.splits, "splits");
  const ImageDataset ds = load_dataset(rc.dataset);
  const SplitSpec split = resolve_split(rc, ds.class_count);
  TrainConfig cfg = rc.train;
  cfg.backbone.in_channels = ds.channels;
  cfg.backbone.image_size = ds.height;
  ensure_dir(rc.report_dir);
  write_file(rc.report_dir / "config.txt", format_config(rc.resolved));
  write_file(rc.report_dir / "splits.txt", format_split(split));

  const RunResult result = run_s2m2(ds, split, cfg);
  const auto ckpt = rc.checkpoint.empty() ? rc.report_dir / "model.fsm" : rc.checkpoint;
  if (ckpt.has_parent_path()) ensure_dir(ckpt.parent_path());
  save_checkpoint(result.checkpoint, ckpt);
  write_file(rc.report_dir / "train.jsonl", training_report_jsonl(result.state));
  const std::string table = format_training_table(result.state);
  write_file(rc.report_dir / "train.txt", table);
  out << table;
  const TrainingSet train = make_training_set(ds, split.base, cfg.holdout_per_class);
  out << std::fixed << std::setprecision(4) << "base training accuracy " << classification_accuracy(result.model, ds, train)
      << "\ncheckpoint " << ckpt.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, std::ostream& out) {
  const Loaded in = load_inputs(rc, rc.eval_split != "all");
  const auto classes = split_classes(in.split, rc.eval_split, in.dataset.class_count);
  EvalOptions options;
  options.adapt = rc.train.adapt;
  options.threads = rc.threads;
  options.dataset_name = rc.dataset.string();
  options.checkpoint_name = rc.checkpoint.string();
  const EvalReport report = evaluate(in.model.backbone, in.dataset, classes, rc.eval, options);
  ensure_dir(rc.report_dir);
  const std::string stem = "eval_" + std::to_string(rc.eval.n_way) + "w" + std::to_string(rc.eval.k_shot) + "s";
  write_file(rc.report_dir / (stem + ".json"), eval_report_json(report) + "\n");
  write_file(rc.report_dir / (stem + "_tasks.jsonl"), eval_tasks_jsonl(report));
  const std::string table = format_eval_table({{rc.checkpoint.stem().string(), report}});
  write_file(rc.report_dir / (stem + ".txt"), table);
  out << table;
  return 0;
}

int cmd_robust(const RunConfig& rc, std::ostream& out) {
  const Loaded in = load_inputs(rc);
  check_base(in);
  const TrainingSet held = make_holdout_set(in.dataset, in.split.base, rc.train.holdout_per_class);
  if (held.indices.empty()) throw ConfigError("robust needs holdout_per_class > 0");
  std::vector<Image> images;
  for (auto i : held.indices) images.push_back(in.dataset.image(i));
  const RobustnessTable table = robustness_eval(in.model.backbone, in.model.classifier, images, held.labels,
                                                rc.perturb, rc.max_severity, rc.fgsm_epsilon);
  ensure_dir(rc.report_dir);
  const std::string text = format_robustness_table(table);
  write_file(rc.report_dir / "robust.txt", text);
  std::string jsonl;
  for (const auto& row : table.rows) {
    nlohmann::ordered_json j;
    j["name"] = row.name;
    j["accuracies"] = row.accuracies;
    jsonl += j.dump() + "\n";
  }
  write_file(rc.report_dir / "robust.jsonl", jsonl);
  out << text;
  return 0;
}

int cmd_saliency(const RunConfig& rc, std::ostream& out) {
  const Loaded in = load_inputs(rc);
  check_base(in);
  if (rc.image_index >= in.dataset.size()) throw ConfigError("key 'image_index': out of range");
  const std::size_t cls = in.dataset.labels[rc.image_index];
  const auto it = std::find(in.split.base.begin(), in.split.base.end(), cls);
  if (it == in.split.base.end()) throw ConfigError("key 'image_index': image is not from a base class");
  const std::size_t label = static_cast<std::size_t>(it - in.split.base.begin());
  const Image image = in.dataset.image(rc.image_index);
  const auto mask = saliency_mask(classifier_logits(in.model.backbone, in.model.classifier), image, label,
                                  rc.percentile);
  std::string text;
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) text += mask[r * image.width + c] ? '1' : '0';
    text += '\n';
  }
  ensure_dir(rc.report_dir);
  write_file(rc.report_dir / ("saliency_" + std::to_string(rc.image_index) + ".txt"), text);
  out << "image " << rc.image_index << " class " << cls << " marked "
      << std::accumulate(mask.begin(), mask.end(), std::size_t{0}) << " of " << mask.size() << " pixels\n"
      << text;
  return 0;
}

int cmd_export(const RunConfig& rc, std::ostream& out) {
  const Loaded in = load_inputs(rc, rc.export_split != "all");
  const auto classes = split_classes(in.split, rc.export_split, in.dataset.class_count);
  const FeatureDump dump = export_features(in.model.backbone, in.dataset, classes);
  ensure_dir(rc.report_dir);
  const auto path = rc.report_dir / "features.fsf";
  write_bytes(path, encode_features(dump));
  out << "wrote " << dump.size() << " features of dim " << dump.dim << " to " << path.string() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& rc, std::ostream& out) {
  const auto results = run_gradcheck_suite(rc.train.seed);
  double worst = 0.0;
  out << std::scientific << std::setprecision(3);
  for (const auto& r : results) {
    out << std::left << std::setw(28) << r.name << std::right << std::setw(6) << r.checked << "  "
        << r.max_rel_error << "\n";
    worst = std::max(worst, r.max_rel_error);
  }
  out << "max relative error " << worst << "\n";
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot learning with self-supervision and Manifold Mixup"};
  app.require_subcommand(1);
  struct Sub {
    std::string name;
    std::string help;
    int (*run)(const RunConfig&, std::ostream&);
  };
  const std::vector<Sub> subs = {
      {"gen-data", "generate the synthetic dataset (and split file)", cmd_gen_data},
      {"train", "train a backbone", cmd_train},
      {"eval", "episodic few-shot evaluation", cmd_eval},
      {"robust", "perturbation and FGSM accuracy table", cmd_robust},
      {"saliency", "gradient saliency mask of one image", cmd_saliency},
      {"gradcheck", "finite-difference gradient self-check", cmd_gradcheck},
      {"export-features", "write backbone features", cmd_export},
  };
  std::string config_path;
  std::map<std::string, std::string> flags;
  std::vector<CLI::App*> apps;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "config file of key = value lines");
    for (const auto& k : config_keys()) {
      std::string flag = k.name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      sub->add_option("--" + flag, flags[k.name], k.help);
    }
    apps.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 2;
  }

  std::size_t chosen = 0;
  for (std::size_t i = 0; i < apps.size(); ++i) {
    if (apps[i]->parsed()) chosen = i;
  }
  RawConfig overrides;
  for (const auto& k : config_keys()) {
    std::string flag = k.name;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (apps[chosen]->count("--" + flag) > 0) overrides[k.name] = flags[k.name];
  }

  RunConfig rc;
  try {
    std::vector<std::string> warnings;
    RawConfig file;
    if (!config_path.empty()) file = parse_config_file(config_path, warnings);
    for (const auto& w : warnings) err << "warning: " << w << "\n";
    rc = build_config(file, overrides);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    return subs[chosen].run(rc, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fsl
