#pragma once

// Backbone F (stem + three conv blocks + global average pool) and affine
// classifier head C. Split s ∈ {1,2,3} names the output of block s, the
// points where feature-statistic augmentation can be applied.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mcsad/checkpoint.hpp"
#include "mcsad/ops.hpp"
#include "mcsad/random.hpp"

namespace mcsad {

struct BackboneConfig {
  int in_channels = 3;
  std::array<int, 3> block_channels{16, 32, 64};
  int image_size = 32;
  int embedding_dim = 64;
  int num_classes = 5;

  void validate() const {
    if (in_channels < 1 || num_classes < 1) throw ContractError("backbone needs positive channel and class counts");
    for (int c : block_channels) {
      if (c < 1) throw ContractError("block channels must be positive");
    }
    if (embedding_dim != block_channels[2]) {
      throw ContractError("embedding_dim " + std::to_string(embedding_dim) + " must equal last block channels " +
                          std::to_string(block_channels[2]));
    }
    if (image_size < 8 || image_size % 8 != 0) {
      throw ContractError("image_size " + std::to_string(image_size) + " must be a positive multiple of 8");
    }
  }

  /// Canonical (name, shape) layout; this order defines the checkpoint format.
  std::vector<std::pair<std::string, Shape>> parameter_layout() const {
    std::vector<std::pair<std::string, Shape>> layout;
    const Index c0 = block_channels[0];
    layout.push_back({"stem.weight", {c0, in_channels, 3, 3}});
    layout.push_back({"stem.bias", {c0}});
    Index prev = c0;
    for (int b = 0; b < 3; ++b) {
      const Index c = block_channels[static_cast<std::size_t>(b)];
      const std::string p = "block" + std::to_string(b + 1);
      layout.push_back({p + ".conv1.weight", {c, prev, 3, 3}});
      layout.push_back({p + ".conv1.bias", {c}});
      layout.push_back({p + ".conv2.weight", {c, c, 3, 3}});
      layout.push_back({p + ".conv2.bias", {c}});
      prev = c;
    }
    layout.push_back({"head.weight", {num_classes, embedding_dim}});
    layout.push_back({"head.bias", {num_classes}});
    return layout;
  }

  /// 3×3 kernels plus one bias per output channel for each conv, then K·D + K.
  Index parameter_count() const {
    const Index c1 = block_channels[0], c2 = block_channels[1], c3 = block_channels[2];
    const Index stem = 9 * in_channels * c1 + c1;
    auto block = [](Index in, Index out) { return 9 * in * out + out + 9 * out * out + out; };
    return stem + block(c1, c1) + block(c1, c2) + block(c2, c3) + Index{num_classes} * embedding_dim + num_classes;
  }

  bool operator==(const BackboneConfig&) const = default;
};

/// Classifier head: logits = z·Wᵀ + b.
template <typename Scalar = float>
struct Head {
  Tensor<Scalar> weight;  // [K × D]
  Tensor<Scalar> bias;    // [K]

  /// Deep copy with gradients disabled, for use as a fixed discriminator.
  Head frozen() const {
    Head h{weight.detach(), bias.detach()};
    return h;
  }

  Index embedding_dim() const { return weight.dim(1); }
  Index num_classes() const { return weight.dim(0); }

  static Head from_checkpoint(const Checkpoint& ckpt) {
    const NamedTensor* w = ckpt.find("head.weight");
    const NamedTensor* b = ckpt.find("head.bias");
    if (!w || !b) throw CheckpointError(CheckpointError::Kind::ShapeMismatch, "checkpoint carries no head parameters");
    return Head{Tensor<Scalar>(w->shape, {w->values.begin(), w->values.end()}),
                Tensor<Scalar>(b->shape, {b->values.begin(), b->values.end()})};
  }
};

template <typename Scalar>
Tensor<Scalar> head_only_forward(const Head<Scalar>& head, const Tensor<Scalar>& embedding) {
  if (embedding.rank() != 2 || embedding.dim(1) != head.embedding_dim()) {
    throw ShapeError("head expects embeddings of width " + std::to_string(head.embedding_dim()) + ", got " +
                     shape_string(embedding.shape()));
  }
  return linear(embedding, head.weight, head.bias);
}

/// Inputs in [0,1] are mapped to 4·(x − 0.5) before the stem, roughly zero
/// mean and unit scale; without it the unnormalized stack sits on a long
/// loss plateau.
inline constexpr double kInputScale = 4.0;

/// stem: 3×3 conv + relu on the rescaled input;
/// block b: conv, relu, conv, relu, 2×2 average pool; then global average
/// pooling and the head. Every conv is 3×3, stride 1, padding 1.
template <typename Scalar = float>
class Model {
 public:
  /// All-zero parameters with gradients enabled.
  explicit Model(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (auto& [name, shape] : cfg_.parameter_layout()) {
      names_.push_back(name);
      params_.push_back(Tensor<Scalar>::zeros(shape));
      params_.back().set_requires_grad(true);
    }
  }

  /// Kaiming-uniform convolutions (gain √2), uniform ±1/√D head, zero biases.
  static Model initialized(const BackboneConfig& cfg, std::uint64_t seed) {
    Model m(cfg);
    Rng rng(seed);
    for (std::size_t i = 0; i < m.params_.size(); ++i) {
      const Shape& s = m.params_[i].shape();
      if (s.size() < 2) continue;
      double bound = 0.0;
      if (s.size() == 4) {
        bound = std::sqrt(6.0 / static_cast<double>(s[1] * s[2] * s[3]));
      } else {
        bound = 1.0 / std::sqrt(static_cast<double>(s[1]));
      }
      for (Scalar& v : m.params_[i].mutable_data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    return m;
  }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const {
    Model m(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::copy(params_[i].data().begin(), params_[i].data().end(), m.params_[i].mutable_data().begin());
    }
    return m;
  }

  const BackboneConfig& config() const { return cfg_; }
  std::vector<Tensor<Scalar>>& parameters() { return params_; }
  const std::vector<Tensor<Scalar>>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  const Tensor<Scalar>& param(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return params_[i];
    }
    throw ContractError("no parameter named '" + name + "'");
  }

  /// The live head (shares storage with the model).
  Head<Scalar> head() const { return Head<Scalar>{params_[params_.size() - 2], params_.back()}; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return forward_from_split(forward_to_split(x, 1), 1); }

  Tensor<Scalar> embed(const Tensor<Scalar>& x) const { return embed_from_split(forward_to_split(x, 1), 1); }

  /// Feature map after block `split`: [B × block_channels[s-1] × S/2^s × S/2^s].
  Tensor<Scalar> forward_to_split(const Tensor<Scalar>& x, int split) const {
    check_split(split);
    check_input(x);
    auto h = checked(relu(conv((x - Scalar(0.5)) * Scalar(kInputScale), 0)), "stem");
    for (int b = 1; b <= split; ++b) h = block(h, b);
    return h;
  }

  /// Global-average-pooled embedding computed from a split feature map.
  Tensor<Scalar> embed_from_split(const Tensor<Scalar>& feature, int split) const {
    check_split(split);
    const Index expect_c = cfg_.block_channels[static_cast<std::size_t>(split - 1)];
    const Index expect_s = cfg_.image_size >> split;
    if (feature.rank() != 4 || feature.dim(1) != expect_c || feature.dim(2) != expect_s || feature.dim(3) != expect_s) {
      throw ShapeError("split " + std::to_string(split) + " feature must be [B," + std::to_string(expect_c) + "," +
                       std::to_string(expect_s) + "," + std::to_string(expect_s) + "], got " +
                       shape_string(feature.shape()));
    }
    Tensor<Scalar> h = feature;
    for (int b = split + 1; b <= 3; ++b) h = block(h, b);
    return reduce(ReduceOp::Mean, h, {2, 3});
  }

  Tensor<Scalar> forward_from_split(const Tensor<Scalar>& feature, int split) const {
    return checked(head_only_forward(head(), embed_from_split(feature, split)), "head");
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ckpt.params.push_back(NamedTensor{names_[i], params_[i].shape(),
                                        std::vector<float>(params_[i].data().begin(), params_[i].data().end())});
    }
    return ckpt;
  }

  /// Copies parameters from a checkpoint after validating the full layout.
  void load(const Checkpoint& ckpt) {
    if (ckpt.params.size() != params_.size()) {
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                            "checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                                std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const NamedTensor& p = ckpt.params[i];
      if (p.name != names_[i]) {
        throw CheckpointError(CheckpointError::Kind::UnknownParameter,
                              "expected parameter '" + names_[i] + "' at position " + std::to_string(i) + ", found '" +
                                  p.name + "'");
      }
      if (p.shape != params_[i].shape()) {
        throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                              "parameter '" + p.name + "' has shape " + shape_string(p.shape) + ", expected " +
                                  shape_string(params_[i].shape()));
      }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::copy(ckpt.params[i].values.begin(), ckpt.params[i].values.end(), params_[i].mutable_data().begin());
    }
  }

  static Model from_checkpoint(const BackboneConfig& cfg, const Checkpoint& ckpt) {
    Model m(cfg);
    m.load(ckpt);
    return m;
  }

 private:
  static void check_split(int split) {
    if (split < 1 || split > 3) throw ContractError("split id " + std::to_string(split) + " outside {1,2,3}");
  }

  void check_input(const Tensor<Scalar>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size) {
      throw ShapeError("model expects [B," + std::to_string(cfg_.in_channels) + "," +
                       std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "] input, got " +
                       shape_string(x.shape()));
    }
  }

  static Tensor<Scalar> checked(Tensor<Scalar> t, const char* layer) {
    if (!all_finite(t.data())) throw NumericError(std::string("non-finite activation after ") + layer);
    return t;
  }

  // Parameter i·2 is a weight, i·2+1 its bias; conv index 0 is the stem.
  Tensor<Scalar> conv(const Tensor<Scalar>& x, std::size_t index) const {
    return conv2d(x, params_[2 * index], std::optional<Tensor<Scalar>>(params_[2 * index + 1]), 1, 1);
  }

  Tensor<Scalar> block(const Tensor<Scalar>& x, int b) const {
    const std::size_t first = 1 + 2 * static_cast<std::size_t>(b - 1);
    auto h = relu(conv(x, first));
    h = relu(conv(h, first + 1));
    return checked(avg_pool2d(h, 2), b == 1 ? "block1" : b == 2 ? "block2" : "block3");
  }

  BackboneConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor<Scalar>> params_;
};

}  // namespace mcsad
