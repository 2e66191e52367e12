#include "fewshot/model.hpp"

#include <cmath>

#include "fewshot/rng.hpp"

namespace fewshot {

void BackboneConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(Errc::invalid_argument, "backbone config: " + msg); };
  if (input_channels <= 0) bad("input_channels must be positive");
  if (input_size <= 0) bad("input_size must be positive");
  if (stage_channels.empty()) bad("stage_channels must be nonempty");
  for (int c : stage_channels) {
    if (c <= 0) bad("stage channel counts must be positive");
  }
  if (blocks_per_stage <= 0) bad("blocks_per_stage must be positive");
  if (embedding_dim < 2) bad("embedding_dim must be at least 2");
  // Every stage after the first halves the spatial extent.
  int size = input_size;
  for (int s = 1; s < num_stages(); ++s) size = (size - 1) / 2 + 1;
  if (size < 1) bad("input_size too small for the number of stages");
}

// --- ParameterSet -----------------------------------------------------------

template <typename T>
Tensor<T>& ParameterSet<T>::add(std::string name, Tensor<T> tensor, ParamRole role) {
  if (index_.count(name)) throw Error(Errc::invalid_argument, "duplicate parameter name " + name);
  const bool trainable = role == ParamRole::weight;
  tensor.set_requires_grad(trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(tensor), role, trainable});
  return entries_.back().tensor;
}

template <typename T>
bool ParameterSet<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename T>
std::size_t ParameterSet<T>::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error(Errc::invalid_argument, "no parameter named " + std::string(name));
  return it->second;
}

template <typename T>
void ParameterSet<T>::set_trainable(std::size_t i, bool trainable) {
  auto& e = entries_.at(i);
  if (e.role == ParamRole::buffer) return;
  e.trainable = trainable;
  e.tensor.set_requires_grad(trainable);
  if (!trainable) e.tensor.clear_grad();
}

template <typename T>
void ParameterSet<T>::truncate(std::size_t n) {
  while (entries_.size() > n) {
    index_.erase(entries_.back().name);
    entries_.pop_back();
  }
}

template <typename T>
void ParameterSet<T>::clear_grads() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

template <typename T>
std::vector<std::vector<T>> ParameterSet<T>::snapshot() const {
  std::vector<std::vector<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
  return out;
}

template <typename T>
void ParameterSet<T>::restore(const std::vector<std::vector<T>>& values) {
  if (values.size() != entries_.size()) throw Error(Errc::incompatible, "snapshot does not match parameter set");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].tensor.mutable_values();
    if (dst.size() != values[i].size()) {
      throw Error(Errc::incompatible, "snapshot size mismatch for " + entries_[i].name);
    }
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

template <typename T>
std::size_t ParameterSet<T>::weight_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.role == ParamRole::weight) n += e.tensor.numel();
  }
  return n;
}

template <typename T>
std::size_t ParameterSet<T>::trainable_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

// --- layers -----------------------------------------------------------------

template <typename T>
Tensor<T> conv_unit_forward(const Tensor<T>& x, ConvUnit<T>& unit, bool training) {
  auto y = conv2d(x, unit.weight, unit.stride, unit.pad);
  BatchNormOptions opt;
  opt.use_batch_stats = training && unit.norm.gamma.requires_grad();
  opt.update_running = opt.use_batch_stats;
  return batch_norm(y, unit.norm.gamma, unit.norm.beta, unit.norm.running_mean, unit.norm.running_var, opt);
}

template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& x, ResidualBlockParams<T>& block, bool training) {
  if (x.rank() != 4 || x.dim(1) != block.conv1.weight.dim(1)) {
    throw Error(Errc::shape_mismatch, "residual block: input " + shape_str(x.shape()) +
                                          " does not match conv1 kernel " + shape_str(block.conv1.weight.shape()));
  }
  auto h = relu(conv_unit_forward(x, block.conv1, training));
  h = conv_unit_forward(h, block.conv2, training);
  auto shortcut = block.shortcut ? conv_unit_forward(x, *block.shortcut, training) : x;
  if (shortcut.shape() != h.shape()) {
    throw Error(Errc::shape_mismatch, "residual block: identity shortcut " + shape_str(shortcut.shape()) +
                                          " vs branch " + shape_str(h.shape()));
  }
  return relu(add(h, shortcut));
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const LinearParams<T>& layer) {
  return add_bias(matmul(x, layer.weight), layer.bias);
}

// --- Model ------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> he_uniform(const std::string& name, std::uint64_t seed, Shape shape, std::size_t fan_in) {
  auto rng = Rng::stream(seed, name);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace

template <typename T>
ConvUnit<T> Model<T>::make_conv_unit(const std::string& conv, const std::string& norm, int in_ch,
                                     int out_ch, int kernel, std::size_t stride, std::size_t pad) {
  const auto in = static_cast<std::size_t>(in_ch), out = static_cast<std::size_t>(out_ch),
             k = static_cast<std::size_t>(kernel);
  ConvUnit<T> u;
  u.stride = stride;
  u.pad = pad;
  u.weight = params_.add(conv + ".weight", he_uniform<T>(conv + ".weight", seed_, {out, in, k, k}, in * k * k),
                         ParamRole::weight);
  u.norm.gamma = params_.add(norm + ".weight", Tensor<T>::full({out}, T(1)), ParamRole::weight);
  u.norm.beta = params_.add(norm + ".bias", Tensor<T>::zeros({out}), ParamRole::weight);
  u.norm.running_mean = params_.add(norm + ".running_mean", Tensor<T>::zeros({out}), ParamRole::buffer);
  u.norm.running_var = params_.add(norm + ".running_var", Tensor<T>::full({out}, T(1)), ParamRole::buffer);
  return u;
}

template <typename T>
LinearParams<T> Model<T>::make_linear(const std::string& prefix, int in, int out, bool zero_init) {
  const auto i = static_cast<std::size_t>(in), o = static_cast<std::size_t>(out);
  LinearParams<T> l;
  l.weight = params_.add(prefix + ".weight",
                         zero_init ? Tensor<T>::zeros({i, o}) : he_uniform<T>(prefix + ".weight", seed_, {i, o}, i),
                         ParamRole::weight);
  l.bias = params_.add(prefix + ".bias", Tensor<T>::zeros({o}), ParamRole::weight);
  return l;
}

template <typename T>
Model<T> Model<T>::build(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.seed_ = seed;
  m.stem_ = m.make_conv_unit("stem.conv", "stem.bn", config.input_channels, config.stage_channels[0], 3, 1, 1);
  int in_ch = config.stage_channels[0];
  for (int s = 0; s < config.num_stages(); ++s) {
    const int out_ch = config.stage_channels[s];
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      ResidualBlockParams<T> blk;
      blk.conv1 = m.make_conv_unit(prefix + ".conv1", prefix + ".bn1", in_ch, out_ch, 3, stride, 1);
      blk.conv2 = m.make_conv_unit(prefix + ".conv2", prefix + ".bn2", out_ch, out_ch, 3, 1, 1);
      if (stride != 1 || in_ch != out_ch) {
        blk.shortcut = m.make_conv_unit(prefix + ".shortcut.conv", prefix + ".shortcut.bn", in_ch, out_ch, 1, stride, 0);
      }
      m.blocks_.push_back(std::move(blk));
      in_ch = out_ch;
    }
  }
  if (in_ch != config.embedding_dim) m.embed_ = m.make_linear("embed", in_ch, config.embedding_dim, false);
  m.backbone_entries_ = m.params_.size();
  return m;
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model m = build(config_, seed_);
  switch (head_kind_) {
    case HeadKind::projection: m.attach_projection_head(head_dim_); break;
    case HeadKind::identity: m.attach_identity_head(); break;
    case HeadKind::classifier: m.attach_classifier(head_dim_); break;
    case HeadKind::none: break;
  }
  m.params_.restore(params_.snapshot());
  for (std::size_t i = 0; i < params_.size(); ++i) m.params_.set_trainable(i, params_[i].trainable);
  m.mode_ = mode_;
  return m;
}

template <typename T>
void Model<T>::drop_head() {
  params_.truncate(backbone_entries_);
  head_fc1_.reset();
  head_fc2_.reset();
  classifier_.reset();
  head_kind_ = HeadKind::none;
  head_dim_ = 0;
}

template <typename T>
void Model<T>::attach_projection_head(int proj_dim) {
  if (proj_dim < 2) throw Error(Errc::invalid_argument, "projection dimension must be at least 2");
  drop_head();
  head_fc1_ = make_linear("head.fc1", config_.embedding_dim, config_.embedding_dim, false);
  head_fc2_ = make_linear("head.fc2", config_.embedding_dim, proj_dim, false);
  head_kind_ = HeadKind::projection;
  head_dim_ = proj_dim;
}

template <typename T>
void Model<T>::attach_identity_head() {
  drop_head();
  head_kind_ = HeadKind::identity;
}

template <typename T>
void Model<T>::attach_classifier(int num_classes, bool zero_init) {
  if (num_classes < 2) throw Error(Errc::invalid_argument, "classifier needs at least 2 classes");
  drop_head();
  classifier_ = make_linear("classifier", config_.embedding_dim, num_classes, zero_init);
  head_kind_ = HeadKind::classifier;
  head_dim_ = num_classes;
}

template <typename T>
std::string Model<T>::group_of(std::string_view name) {
  return std::string(name.substr(0, name.find('.')));
}

template <typename T>
FreezeCounts Model<T>::freeze_prefix(int boundary) {
  if (boundary < 0 || boundary > num_stages()) {
    throw Error(Errc::invalid_argument, "freeze boundary " + std::to_string(boundary) + " outside [0, " +
                                            std::to_string(num_stages()) + "]");
  }
  FreezeCounts counts;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& e = params_[i];
    if (e.role == ParamRole::buffer) continue;
    const auto group = group_of(e.name);
    bool frozen = false;
    if (boundary > 0) {
      if (group == "stem") frozen = true;
      for (int s = 1; s <= boundary; ++s) {
        if (group == "stage" + std::to_string(s)) frozen = true;
      }
    }
    params_.set_trainable(i, !frozen);
    if (frozen) {
      ++counts.frozen_tensors;
      counts.frozen_elements += e.tensor.numel();
    } else {
      ++counts.trainable_tensors;
      counts.trainable_elements += e.tensor.numel();
    }
  }
  return counts;
}

template <typename T>
Tensor<T> Model<T>::forward_features(const Tensor<T>& batch) {
  const auto in = static_cast<std::size_t>(config_.input_channels);
  const auto size = static_cast<std::size_t>(config_.input_size);
  if (batch.rank() != 4 || batch.dim(1) != in || batch.dim(2) != size || batch.dim(3) != size) {
    throw Error(Errc::shape_mismatch, "model expects [N," + std::to_string(in) + "," + std::to_string(size) + "," +
                                          std::to_string(size) + "], got " + shape_str(batch.shape()));
  }
  const bool training = mode_ == Mode::train;
  auto h = relu(conv_unit_forward(batch, stem_, training));
  for (auto& blk : blocks_) h = residual_block_forward(h, blk, training);
  auto pooled = global_avg_pool(h);
  return embed_ ? linear_forward(pooled, *embed_) : pooled;
}

template <typename T>
Tensor<T> Model<T>::forward_contrastive(const Tensor<T>& batch) {
  if (head_kind_ == HeadKind::projection) {
    auto h = relu(linear_forward(forward_features(batch), *head_fc1_));
    return linear_forward(h, *head_fc2_);
  }
  if (head_kind_ == HeadKind::identity) return forward_features(batch);
  throw Error(Errc::invalid_argument, "contrastive forward needs a projection or identity head");
}

template <typename T>
Tensor<T> Model<T>::forward_logits(const Tensor<T>& batch) {
  if (head_kind_ != HeadKind::classifier) throw Error(Errc::invalid_argument, "no classifier attached");
  return linear_forward(forward_features(batch), *classifier_);
}

template <typename T>
Tensor<T> make_batch(std::span<const float> pixels, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<T> v(pixels.begin(), pixels.end());
  return Tensor<T>::from({n, c, h, w}, std::move(v));
}

#define FEWSHOT_INSTANTIATE(T)                                                                     \
  template class ParameterSet<T>;                                                                  \
  template class Model<T>;                                                                         \
  template Tensor<T> conv_unit_forward<T>(const Tensor<T>&, ConvUnit<T>&, bool);                   \
  template Tensor<T> residual_block_forward<T>(const Tensor<T>&, ResidualBlockParams<T>&, bool);   \
  template Tensor<T> linear_forward<T>(const Tensor<T>&, const LinearParams<T>&);                  \
  template Tensor<T> make_batch<T>(std::span<const float>, std::size_t, std::size_t, std::size_t,  \
                                   std::size_t);

FEWSHOT_INSTANTIATE(float)
FEWSHOT_INSTANTIATE(double)

#undef FEWSHOT_INSTANTIATE

}  // namespace fewshot
