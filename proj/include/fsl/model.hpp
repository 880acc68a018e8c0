#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsl/tensor.hpp"

namespace fsl {

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t image_size = 32;
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::vector<std::size_t> strides{2, 2, 2, 2};
  std::size_t kernel = 3;
  // Layer taps eligible for mixing: 0 is the input, l is the output of block l.
  std::vector<std::size_t> mixup_layers{0, 1, 2, 3};

  bool operator==(const BackboneConfig&) const = default;
};

// Conv + bias + ReLU blocks followed by a global average pool.
//
// Layer taps: 0 is the input batch, l in [1, blocks] is the output of block
// l, and final_layer() == blocks + 1 is the pooled feature vector.
class Backbone {
 public:
  Backbone(BackboneConfig config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  std::size_t block_count() const { return config_.channels.size(); }
  std::size_t final_layer() const { return block_count() + 1; }
  std::size_t feature_dim() const { return config_.channels.back(); }
  const std::vector<std::size_t>& mixup_layers() const { return config_.mixup_layers; }

  // Shape of the activation at a tap for a given batch size.
  Shape layer_shape(std::size_t layer, std::size_t batch) const;

  Tensor forward_to_layer(const Tensor& x, std::size_t layer) const;
  Tensor forward_from_layer(const Tensor& hidden, std::size_t layer) const;
  Tensor features(const Tensor& x) const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  // Independent copy of all parameters.
  Backbone clone() const;
  // Copy whose parameters are constants: no gradient ever reaches them.
  Backbone frozen() const;

 private:
  Tensor block(const Tensor& x, std::size_t index) const;

  BackboneConfig config_;
  std::vector<Tensor> params_;  // kernel_1, bias_1, kernel_2, bias_2, ...
};

// Logits s * <z/|z|, w_j/|w_j|>, bounded by [-s, s].
class CosineClassifier {
 public:
  CosineClassifier(std::size_t classes, std::size_t dim, double scale, std::uint64_t seed);
  CosineClassifier(Tensor weight, double scale);

  std::size_t classes() const { return weight_.dim(0); }
  std::size_t dim() const { return weight_.dim(1); }
  double scale() const { return scale_; }
  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  std::vector<Tensor> parameters() const { return {weight_}; }
  CosineClassifier clone() const { return CosineClassifier(weight_.clone(), scale_); }
  CosineClassifier frozen() const { return CosineClassifier(weight_.detach(), scale_); }

 private:
  Tensor weight_;
  double scale_;
};

// Linear head over features predicting the rotation label.
class RotationHead {
 public:
  RotationHead(std::size_t outputs, std::size_t dim, std::uint64_t seed);
  RotationHead(Tensor weight, Tensor bias);

  std::size_t outputs() const { return weight_.dim(0); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  std::vector<Tensor> parameters() const { return {weight_, bias_}; }
  RotationHead clone() const { return RotationHead(weight_.clone(), bias_.clone()); }

 private:
  Tensor weight_;
  Tensor bias_;
};

Tensor cosine_logits(const CosineClassifier& classifier, const Tensor& z);
Tensor linear_logits(const RotationHead& head, const Tensor& z);

// SHA-256 over the raw float64 bytes of every tensor, in order.
std::string parameter_digest(const std::vector<Tensor>& params);

// ---------------------------------------------------------------------------
// Checkpoints: "FSM1" | u32 version | u32 tensor count | per tensor
// (u32 rank | u32 extents... | float64 data) | u32 header length | header
// text of "key=value" lines. Little-endian.

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<Tensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// A backbone with its base classifier and optional rotation head.
struct TrainedModel {
  Backbone backbone;
  CosineClassifier classifier;
  std::optional<RotationHead> rotation;
};

Checkpoint make_checkpoint(const TrainedModel& model, std::map<std::string, std::string> extra = {});
TrainedModel model_from_checkpoint(const Checkpoint& checkpoint);

std::string join_sizes(const std::vector<std::size_t>& values);
std::vector<std::size_t> parse_sizes(const std::string& text);

}  // namespace fsl
