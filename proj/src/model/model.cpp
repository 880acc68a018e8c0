#include "fsl/model.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <memory>
#include <sstream>

#include "fsl/errors.hpp"
#include "fsl/ops.hpp"
#include "fsl/random.hpp"

namespace fsl {

namespace {

std::vector<double> normal_values(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

Backbone::Backbone(BackboneConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.channels.empty() || config_.channels.size() != config_.strides.size()) {
    throw ValidationError("backbone: channels and strides must be nonempty and of equal length");
  }
  if (config_.kernel % 2 == 0) throw ValidationError("backbone: kernel must be odd");
  for (auto l : config_.mixup_layers) {
    if (l >= final_layer()) throw ValidationError("backbone: mixup layer " + std::to_string(l) + " out of range");
  }
  auto rng = make_rng(seed, Stream::init, 0);
  std::size_t in = config_.in_channels;
  const std::size_t k = config_.kernel;
  for (std::size_t b = 0; b < config_.channels.size(); ++b) {
    const std::size_t out = config_.channels[b];
    const double he = std::sqrt(2.0 / static_cast<double>(in * k * k));
    params_.push_back(Tensor::parameter({out, in, k, k}, normal_values(out * in * k * k, he, rng)));
    params_.push_back(Tensor::parameter({out}, std::vector<double>(out, 0.0)));
    in = out;
  }
}

Shape Backbone::layer_shape(std::size_t layer, std::size_t batch) const {
  if (layer > final_layer()) throw UsageError("backbone: layer " + std::to_string(layer) + " does not exist");
  if (layer == final_layer()) return {batch, feature_dim()};
  std::size_t ch = config_.in_channels, size = config_.image_size;
  for (std::size_t b = 0; b < layer; ++b) {
    ch = config_.channels[b];
    size = conv_out(size, config_.kernel, config_.strides[b]);
  }
  return {batch, ch, size, size};
}

Tensor Backbone::block(const Tensor& x, std::size_t index) const {
  auto y = conv2d(x, params_[2 * index], {config_.strides[index], Padding::same});
  return relu(add_channel_bias(y, params_[2 * index + 1]));
}

Tensor Backbone::forward_to_layer(const Tensor& x, std::size_t layer) const {
  if (layer > final_layer()) throw UsageError("backbone: layer " + std::to_string(layer) + " does not exist");
  if (x.rank() != 4 || x.shape() != layer_shape(0, x.dim(0))) {
    throw DimensionError("backbone: input " + shape_string(x.shape()) + " does not match " +
                         shape_string(layer_shape(0, x.rank() == 4 ? x.dim(0) : 0)));
  }
  Tensor h = x;
  for (std::size_t b = 0; b < std::min(layer, block_count()); ++b) h = block(h, b);
  if (layer == final_layer()) h = global_avg_pool(h);
  return h;
}

Tensor Backbone::forward_from_layer(const Tensor& hidden, std::size_t layer) const {
  if (layer > final_layer()) throw UsageError("backbone: layer " + std::to_string(layer) + " does not exist");
  if (hidden.rank() < 2 || hidden.shape() != layer_shape(layer, hidden.dim(0))) {
    throw DimensionError("backbone: hidden " + shape_string(hidden.shape()) + " does not match layer " +
                         std::to_string(layer));
  }
  if (layer == final_layer()) return hidden;
  Tensor h = hidden;
  for (std::size_t b = layer; b < block_count(); ++b) h = block(h, b);
  return global_avg_pool(h);
}

Tensor Backbone::features(const Tensor& x) const { return forward_to_layer(x, final_layer()); }

Backbone Backbone::frozen() const {
  Backbone copy = *this;
  for (auto& p : copy.params_) p = p.detach();
  return copy;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

Backbone Backbone::clone() const {
  Backbone copy = *this;
  for (auto& p : copy.params_) p = p.clone();
  return copy;
}

CosineClassifier::CosineClassifier(std::size_t classes, std::size_t dim, double scale, std::uint64_t seed)
    : scale_(scale) {
  if (!(scale > 0.0)) throw ValidationError("cosine classifier: scale must be positive");
  auto rng = make_rng(seed, Stream::init, 1);
  weight_ = Tensor::parameter({classes, dim}, normal_values(classes * dim, 1.0 / std::sqrt(double(dim)), rng));
}

CosineClassifier::CosineClassifier(Tensor weight, double scale) : weight_(std::move(weight)), scale_(scale) {
  if (weight_.rank() != 2) throw DimensionError("cosine classifier: weight must be rank 2");
  if (!(scale > 0.0)) throw ValidationError("cosine classifier: scale must be positive");
}

RotationHead::RotationHead(std::size_t outputs, std::size_t dim, std::uint64_t seed) {
  auto rng = make_rng(seed, Stream::init, 2);
  weight_ = Tensor::parameter({outputs, dim}, normal_values(outputs * dim, 1.0 / std::sqrt(double(dim)), rng));
  bias_ = Tensor::parameter({outputs}, std::vector<double>(outputs, 0.0));
}

RotationHead::RotationHead(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.rank() != 2 || bias_.rank() != 1 || bias_.dim(0) != weight_.dim(0)) {
    throw DimensionError("rotation head: weight/bias shapes disagree");
  }
}

Tensor cosine_logits(const CosineClassifier& classifier, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != classifier.dim()) {
    throw DimensionError("cosine_logits: features " + shape_string(z.shape()) + " vs weight " +
                         shape_string(classifier.weight().shape()));
  }
  auto cos = matmul(l2_normalize(z), transpose(l2_normalize(classifier.weight())));
  return scale(cos, classifier.scale());
}

Tensor linear_logits(const RotationHead& head, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != head.weight().dim(1)) {
    throw DimensionError("linear_logits: features " + shape_string(z.shape()) + " vs weight " +
                         shape_string(head.weight().shape()));
  }
  return add_row_bias(matmul(z, transpose(head.weight())), head.bias());
}

std::string parameter_digest(const std::vector<Tensor>& params) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  for (const auto& p : params) {
    EVP_DigestUpdate(ctx.get(), p.data().data(), p.numel() * sizeof(double));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[4] = {'F', 'S', 'M', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

struct ByteReader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size()) {
      throw FormatError("checkpoint: truncated reading " + std::string(what) + " at offset " + std::to_string(pos));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) put_f64(out, v);
  }
  std::string text;
  for (const auto& [k, v] : checkpoint.header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ValidationError("checkpoint: header key/value contains a separator: " + k);
    }
    text += k + "=" + v + "\n";
  }
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0 (expected FSM1)");
  }
  ByteReader in{bytes, 4};
  if (in.u32("version") != kVersion) throw FormatError("checkpoint: unsupported version at offset 4");
  const std::uint32_t count = in.u32("tensor count");
  Checkpoint cp;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t rank = in.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank at offset " + std::to_string(in.pos - 4));
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(in.u32("extent"));
    const std::size_t n = shape_numel(shape);
    in.need(n * 8, "tensor data");
    std::vector<double> values(n);
    for (auto& v : values) v = in.f64("tensor data");
    cp.tensors.push_back(Tensor::parameter(std::move(shape), std::move(values)));
  }
  const std::uint32_t len = in.u32("header length");
  in.need(len, "header");
  std::string text(reinterpret_cast<const char*>(bytes.data() + in.pos), len);
  in.pos += len;
  if (in.pos != bytes.size()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(in.pos));
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed header line '" + line + "'");
    cp.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return cp;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::string join_sizes(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    std::size_t used = 0;
    const auto v = std::stoull(item.substr(first), &used);
    if (item.find_first_not_of(" \t", first + used) != std::string::npos) {
      throw ValidationError("not an integer list: '" + text + "'");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

Checkpoint make_checkpoint(const TrainedModel& model, std::map<std::string, std::string> extra) {
  const auto& cfg = model.backbone.config();
  Checkpoint cp;
  cp.header = std::move(extra);
  cp.header["in_channels"] = std::to_string(cfg.in_channels);
  cp.header["image_size"] = std::to_string(cfg.image_size);
  cp.header["channels"] = join_sizes(cfg.channels);
  cp.header["strides"] = join_sizes(cfg.strides);
  cp.header["kernel"] = std::to_string(cfg.kernel);
  cp.header["mixup_layers"] = join_sizes(cfg.mixup_layers);
  std::ostringstream s;
  s << std::setprecision(17) << model.classifier.scale();
  cp.header["cosine_scale"] = s.str();
  cp.header["base_classes"] = std::to_string(model.classifier.classes());
  cp.header["rotation_outputs"] = std::to_string(model.rotation ? model.rotation->outputs() : 0);
  for (const auto& p : model.backbone.parameters()) cp.tensors.push_back(p);
  cp.tensors.push_back(model.classifier.weight());
  if (model.rotation) {
    cp.tensors.push_back(model.rotation->weight());
    cp.tensors.push_back(model.rotation->bias());
  }
  return cp;
}

TrainedModel model_from_checkpoint(const Checkpoint& checkpoint) {
  auto get = [&](const char* key) {
    auto it = checkpoint.header.find(key);
    if (it == checkpoint.header.end()) throw FormatError(std::string("checkpoint: header lacks '") + key + "'");
    return it->second;
  };
  try {
    BackboneConfig cfg;
    cfg.in_channels = std::stoul(get("in_channels"));
    cfg.image_size = std::stoul(get("image_size"));
    cfg.channels = parse_sizes(get("channels"));
    cfg.strides = parse_sizes(get("strides"));
    cfg.kernel = std::stoul(get("kernel"));
    cfg.mixup_layers = parse_sizes(get("mixup_layers"));
    const double scale = std::stod(get("cosine_scale"));
    const std::size_t rot = std::stoul(get("rotation_outputs"));

    Backbone backbone(cfg, 0);
    const std::size_t expected = backbone.parameters().size() + 1 + (rot ? 2 : 0);
    if (checkpoint.tensors.size() != expected) {
      throw FormatError("checkpoint: expected " + std::to_string(expected) + " tensors, found " +
                        std::to_string(checkpoint.tensors.size()));
    }
    for (std::size_t i = 0; i < backbone.parameters().size(); ++i) {
      if (checkpoint.tensors[i].shape() != backbone.parameters()[i].shape()) {
        throw FormatError("checkpoint: tensor " + std::to_string(i) + " has shape " +
                          shape_string(checkpoint.tensors[i].shape()));
      }
      backbone.parameters()[i] = checkpoint.tensors[i].clone();
    }
    std::size_t next = backbone.parameters().size();
    CosineClassifier classifier(checkpoint.tensors[next++].clone(), scale);
    std::optional<RotationHead> head;
    if (rot) {
      auto w = checkpoint.tensors[next++].clone();
      auto b = checkpoint.tensors[next++].clone();
      head.emplace(std::move(w), std::move(b));
    }
    return TrainedModel{std::move(backbone), std::move(classifier), std::move(head)};
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: bad header value: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw FormatError(std::string("checkpoint: bad header value: ") + e.what());
  }
}

}  // namespace fsl
