#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fewshot/tensor.hpp"

namespace fewshot {

/// Residual backbone shape. The defaults give a 14-conv network:
/// stem + 3 stages x 2 blocks x 2 convs + 2 projection shortcuts.
struct BackboneConfig {
  int input_channels = 3;
  int input_size = 32;
  std::vector<int> stage_channels{16, 32, 64};
  int blocks_per_stage = 2;
  int embedding_dim = 64;

  void validate() const;
  int num_stages() const { return static_cast<int>(stage_channels.size()); }
  bool operator==(const BackboneConfig&) const = default;
};

enum class ParamRole : std::uint8_t { weight = 0, buffer = 1 };

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  ParamRole role = ParamRole::weight;
  bool trainable = true;
};

/// Insertion-ordered named tensors. Trainable flags and the tensors'
/// requires_grad are kept in sync; buffers are never trainable.
template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(std::string name, Tensor<T> tensor, ParamRole role);

  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  ParamEntry<T>& operator[](std::size_t i) { return entries_.at(i); }
  const ParamEntry<T>& operator[](std::size_t i) const { return entries_.at(i); }
  ParamEntry<T>& at(std::string_view name) { return entries_[index_of(name)]; }
  const ParamEntry<T>& at(std::string_view name) const { return entries_[index_of(name)]; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void set_trainable(std::size_t i, bool trainable);
  /// Drops every entry at position >= n.
  void truncate(std::size_t n);
  void clear_grads();

  std::vector<std::vector<T>> snapshot() const;
  void restore(const std::vector<std::vector<T>>& values);

  std::size_t weight_elements() const;
  std::size_t trainable_elements() const;

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct ConvUnit {
  Tensor<T> weight;
  NormParams<T> norm;
  std::size_t stride = 1;
  std::size_t pad = 1;
};

template <typename T>
struct ResidualBlockParams {
  ConvUnit<T> conv1, conv2;
  std::optional<ConvUnit<T>> shortcut;  // 1x1 strided projection when shapes change
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

/// conv -> batch norm. A unit whose scale is frozen always normalises with its
/// running statistics so frozen layers stay bit-stable under training.
template <typename T>
Tensor<T> conv_unit_forward(const Tensor<T>& x, ConvUnit<T>& unit, bool training);

/// relu(norm2(conv2(relu(norm1(conv1(x))))) + shortcut(x))
template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& x, ResidualBlockParams<T>& block, bool training);

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const LinearParams<T>& layer);

enum class Mode { train, eval };
enum class HeadKind : std::uint8_t { none = 0, projection = 1, identity = 2, classifier = 3 };

struct FreezeCounts {
  std::size_t frozen_tensors = 0;
  std::size_t trainable_tensors = 0;
  std::size_t frozen_elements = 0;
  std::size_t trainable_elements = 0;
};

template <typename T>
class Model {
 public:
  /// Deterministic He-uniform initialisation keyed by (seed, parameter name).
  static Model build(const BackboneConfig& config, std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Deep copy; tensors are not shared with the source.
  Model clone() const;

  /// Two-layer MLP embedding_dim -> embedding_dim -> proj_dim with relu between.
  void attach_projection_head(int proj_dim);
  /// Contrastive output is the backbone embedding itself.
  void attach_identity_head();
  /// Linear embedding_dim -> num_classes. Replaces any head; backbone untouched.
  void attach_classifier(int num_classes, bool zero_init = false);

  /// Stem and stages 1..boundary become non-trainable; everything after stays
  /// trainable. boundary in [0, num_stages].
  FreezeCounts freeze_prefix(int boundary);

  Tensor<T> forward_features(const Tensor<T>& batch);
  Tensor<T> forward_contrastive(const Tensor<T>& batch);
  Tensor<T> forward_logits(const Tensor<T>& batch);

  void set_mode(Mode mode) { mode_ = mode; }
  Mode mode() const { return mode_; }

  const BackboneConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  HeadKind head_kind() const { return head_kind_; }
  /// proj_dim for a projection head, num_classes for a classifier, else 0.
  int head_dim() const { return head_dim_; }
  int num_stages() const { return config_.num_stages(); }

  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::vector<ResidualBlockParams<T>>& blocks() { return blocks_; }

  /// Name of the stage group a parameter belongs to: "stem", "stage<k>",
  /// "embed", "head" or "classifier".
  static std::string group_of(std::string_view name);

 private:
  Model() = default;
  ConvUnit<T> make_conv_unit(const std::string& conv, const std::string& norm, int in_ch, int out_ch,
                             int kernel, std::size_t stride, std::size_t pad);
  LinearParams<T> make_linear(const std::string& prefix, int in, int out, bool zero_init);
  void drop_head();

  BackboneConfig config_;
  std::uint64_t seed_ = 0;
  ParameterSet<T> params_;
  ConvUnit<T> stem_;
  std::vector<ResidualBlockParams<T>> blocks_;
  std::optional<LinearParams<T>> embed_;
  std::size_t backbone_entries_ = 0;
  HeadKind head_kind_ = HeadKind::none;
  int head_dim_ = 0;
  std::optional<LinearParams<T>> head_fc1_, head_fc2_, classifier_;
  Mode mode_ = Mode::train;
};

/// Converts images [N,C,H,W] stored as float pixels into a tensor of T.
template <typename T>
Tensor<T> make_batch(std::span<const float> pixels, std::size_t n, std::size_t c, std::size_t h,
                     std::size_t w);

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace fewshot
