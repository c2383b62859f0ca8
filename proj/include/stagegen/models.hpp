#pragma once

// The four networks: a DCGAN generator/discriminator pair for noise -> edges
// and a ResNet generator with a conditional discriminator for edges -> gray.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stagegen/ops.hpp"
#include "stagegen/rng.hpp"
#include "stagegen/tensor.hpp"

namespace stagegen {

struct ModelSpec {
  int image_side = 64;
  int latent_dim = 100;
  int base_feature_maps_g = 0;  // 0 selects image_side / 2
  int base_feature_maps_d = 0;  // 0 selects image_side / 2
  int disc_reduction_factor = 4;
  int stage2_disc_reduction_factor = 1;
  int resnet_blocks = 6;
  bool dropout_enabled = false;
  double dropout_rate = 0.5;
  bool stage2_latent_enabled = false;

  int feature_maps_g() const { return base_feature_maps_g > 0 ? base_feature_maps_g : image_side / 2; }
  int feature_maps_d() const { return base_feature_maps_d > 0 ? base_feature_maps_d : image_side / 2; }

  void validate() const {
    if (image_side < 32 || (image_side & (image_side - 1)) != 0) {
      throw ConfigError("image_side must be a power of two >= 32, got " + std::to_string(image_side));
    }
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (base_feature_maps_g < 0 || base_feature_maps_d < 0) throw ConfigError("base feature maps must be >= 0");
    if (feature_maps_g() < 2) throw ConfigError("generator feature maps must be >= 2");
    if (disc_reduction_factor < 1 || stage2_disc_reduction_factor < 1) throw ConfigError("disc_reduction_factor must be >= 1");
    if (resnet_blocks < 1) throw ConfigError("resnet_blocks must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0, 1)");
  }

  bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"image_side", s.image_side},
       {"latent_dim", s.latent_dim},
       {"base_feature_maps_g", s.base_feature_maps_g},
       {"base_feature_maps_d", s.base_feature_maps_d},
       {"disc_reduction_factor", s.disc_reduction_factor},
       {"stage2_disc_reduction_factor", s.stage2_disc_reduction_factor},
       {"resnet_blocks", s.resnet_blocks},
       {"dropout_enabled", s.dropout_enabled},
       {"dropout_rate", s.dropout_rate},
       {"stage2_latent_enabled", s.stage2_latent_enabled}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  if (!j.is_object()) throw ConfigError("model spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "image_side") s.image_side = v.get<int>();
    else if (k == "latent_dim") s.latent_dim = v.get<int>();
    else if (k == "base_feature_maps_g") s.base_feature_maps_g = v.get<int>();
    else if (k == "base_feature_maps_d") s.base_feature_maps_d = v.get<int>();
    else if (k == "disc_reduction_factor") s.disc_reduction_factor = v.get<int>();
    else if (k == "stage2_disc_reduction_factor") s.stage2_disc_reduction_factor = v.get<int>();
    else if (k == "resnet_blocks") s.resnet_blocks = v.get<int>();
    else if (k == "dropout_enabled") s.dropout_enabled = v.get<bool>();
    else if (k == "dropout_rate") s.dropout_rate = v.get<double>();
    else if (k == "stage2_latent_enabled") s.stage2_latent_enabled = v.get<bool>();
    else throw ConfigError("unknown model spec key '" + k + "'");
  }
}

/// Standard-normal latent batch N×L.
template <class T = float>
Tensor<T> sample_latent(std::int64_t n, int latent_dim, Rng& rng) {
  Tensor<T> z(Shape{n, latent_dim});
  fill_normal(z.data(), rng, 0.0, 1.0);
  return z;
}

/// Named, ordered parameters plus batch-norm running statistics.
/// Weight names end in ".weight"; norm scales in ".gamma", shifts in ".beta",
/// biases in ".bias".
template <class T>
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  // Copies are deep: tensors are handles, and aliasing parameters between
  // two networks would silently couple their training.
  Module(const Module& o) : names_(o.names_), index_(o.index_) { copy_tensors(o); }
  Module& operator=(const Module& o) {
    if (this != &o) {
      names_ = o.names_;
      index_ = o.index_;
      copy_tensors(o);
    }
    return *this;
  }
  Module(Module&&) noexcept = default;
  Module& operator=(Module&&) noexcept = default;

  const std::vector<std::string>& param_names() const { return names_; }
  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  std::map<std::string, RunningStats<T>>& running_stats() { return running_; }
  const std::map<std::string, RunningStats<T>>& running_stats() const { return running_; }

  Tensor<T>& param(const std::string& name) { return params_.at(lookup(name)); }
  const Tensor<T>& param(const std::string& name) const { return params_.at(lookup(name)); }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void set_requires_grad(bool v) {
    for (auto& p : params_) p.set_requires_grad(v);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Weights ~ N(0, 0.02), gammas ~ N(1, 0.02), betas and biases 0;
  /// running stats reset to mean 0, variance 1.
  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& n = names_[i];
      auto& p = params_[i];
      if (n.ends_with(".weight")) fill_normal(p.data(), rng, 0.0, 0.02);
      else if (n.ends_with(".gamma")) fill_normal(p.data(), rng, 1.0, 0.02);
      else std::fill(p.values().begin(), p.values().end(), T(0));
    }
    for (auto& [name, rs] : running_) rs = RunningStats<T>(rs.mean.numel());
  }

  /// Every tensor of the module (parameters, then "<norm>.running_mean/var").
  std::vector<std::pair<std::string, Tensor<T>>> state() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], params_[i]);
    for (const auto& [name, rs] : running_) {
      out.emplace_back(name + ".running_mean", rs.mean);
      out.emplace_back(name + ".running_var", rs.var);
    }
    return out;
  }

  /// Copies values (converting element type) from a module of identical layout.
  template <class U>
  void copy_values_from(const Module<U>& other) {
    const auto src = other.state();
    auto dst = state();
    if (src.size() != dst.size()) throw ShapeError("copy_values_from: modules differ in layout");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape()) {
        throw ShapeError("copy_values_from: tensor '" + dst[i].first + "' differs");
      }
      std::transform(src[i].second.values().begin(), src[i].second.values().end(), dst[i].second.values().begin(),
                     [](U v) { return static_cast<T>(v); });
    }
  }

 protected:
  Tensor<T>& add_param(const std::string& name, Shape shape) {
    if (index_.count(name)) throw Error("duplicate parameter name " + name);
    index_[name] = params_.size();
    names_.push_back(name);
    params_.emplace_back(std::move(shape));
    params_.back().set_requires_grad(true);
    return params_.back();
  }

  void add_batch_norm(const std::string& name, std::int64_t channels) {
    add_param(name + ".gamma", {channels});
    add_param(name + ".beta", {channels});
    running_.emplace(name, RunningStats<T>(channels));
  }

  void add_instance_norm(const std::string& name, std::int64_t channels) {
    add_param(name + ".gamma", {channels});
    add_param(name + ".beta", {channels});
  }

  Tensor<T> bn(const std::string& name, const Tensor<T>& x, Mode mode) {
    return batch_norm2d(x, param(name + ".gamma"), param(name + ".beta"), running_.at(name), mode);
  }

  Tensor<T> in(const std::string& name, const Tensor<T>& x) const {
    return instance_norm2d(x, param(name + ".gamma"), param(name + ".beta"));
  }

  std::optional<Tensor<T>> bias(const std::string& name) const { return param(name + ".bias"); }

 private:
  void copy_tensors(const Module& o) {
    params_.clear();
    for (const auto& p : o.params_) {
      params_.push_back(p.clone());
      params_.back().set_requires_grad(p.requires_grad());
    }
    running_.clear();
    for (const auto& [name, rs] : o.running_) {
      RunningStats<T> copy;
      copy.mean = rs.mean.clone();
      copy.var = rs.var.clone();
      running_.emplace(name, std::move(copy));
    }
  }

  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter named " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, RunningStats<T>> running_;
};

inline int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return k;
}

/// z (N×L) -> L×1×1 -> transposed conv to 8F×4×4, then blocks that halve the
/// channels and double the side, each with batch norm and ReLU, and a final
/// transposed conv to one channel with tanh.
template <class T>
class Stage1Generator : public Module<T> {
 public:
  explicit Stage1Generator(const ModelSpec& spec) : spec_(spec) {
    spec.validate();
    const std::int64_t f = spec.feature_maps_g();
    std::int64_t ch = 8 * f;
    this->add_param("proj.weight", {spec.latent_dim, ch, 4, 4});
    this->add_batch_norm("proj.bn", ch);
    blocks_ = log2_exact(spec.image_side) - 3;
    for (int b = 0; b < blocks_; ++b) {
      const auto out = std::max<std::int64_t>(1, ch / 2);
      this->add_param(block(b) + ".weight", {ch, out, 4, 4});
      this->add_batch_norm(block(b) + ".bn", out);
      ch = out;
    }
    this->add_param("out.weight", {ch, 1, 4, 4});
  }

  Tensor<T> forward(const Tensor<T>& z, Mode mode) {
    require_shape(z, 2, "stage1 generator latent");
    if (z.dim(1) != spec_.latent_dim) {
      throw ShapeError("stage1 generator: latent length " + std::to_string(z.dim(1)) + " != latent_dim " + std::to_string(spec_.latent_dim));
    }
    auto x = reshape(z, {z.dim(0), spec_.latent_dim, 1, 1});
    x = relu(this->bn("proj.bn", conv_transpose2d<T>(x, this->param("proj.weight"), std::nullopt, 1, 0), mode));
    for (int b = 0; b < blocks_; ++b) {
      x = relu(this->bn(block(b) + ".bn", conv_transpose2d<T>(x, this->param(block(b) + ".weight"), std::nullopt, 2, 1), mode));
    }
    return tanh(conv_transpose2d<T>(x, this->param("out.weight"), std::nullopt, 2, 1));
  }

  const ModelSpec& spec() const { return spec_; }

 private:
  static std::string block(int b) { return "up" + std::to_string(b); }
  ModelSpec spec_;
  int blocks_ = 0;
};

/// Strided conv stack side -> 4 with widths F, 2F, 4F, ... divided by the
/// reduction factor, leaky ReLU, batch norm after every block but the first,
/// and a final 4×4 conv to one logit per sample.
template <class T>
class ConvDiscriminator : public Module<T> {
 public:
  ConvDiscriminator(const ModelSpec& spec, int in_channels, int reduction) : side_(spec.image_side), in_channels_(in_channels) {
    spec.validate();
    blocks_ = log2_exact(spec.image_side) - 2;
    std::int64_t ch = in_channels, width = spec.feature_maps_d();
    for (int b = 0; b < blocks_; ++b) {
      const auto out = std::max<std::int64_t>(1, width / reduction);
      this->add_param(block(b) + ".weight", {out, ch, 4, 4});
      if (b > 0) this->add_batch_norm(block(b) + ".bn", out);
      ch = out;
      width *= 2;
    }
    this->add_param("out.weight", {1, ch, 4, 4});
  }

  Tensor<T> forward_stack(const Tensor<T>& input, Mode mode) {
    require_shape(input, 4, "discriminator input");
    if (input.dim(1) != in_channels_ || input.dim(2) != side_ || input.dim(3) != side_) {
      throw ShapeError("discriminator: expected N×" + std::to_string(in_channels_) + "×" + std::to_string(side_) + "×" +
                       std::to_string(side_) + ", got " + shape_str(input.shape()));
    }
    auto x = input;
    for (int b = 0; b < blocks_; ++b) {
      x = conv2d<T>(x, this->param(block(b) + ".weight"), std::nullopt, 2, 1);
      if (b > 0) x = this->bn(block(b) + ".bn", x, mode);
      x = leaky_relu(x);
    }
    x = conv2d<T>(x, this->param("out.weight"), std::nullopt, 1, 0);
    return reshape(x, {x.dim(0), 1});
  }

 private:
  static std::string block(int b) { return "down" + std::to_string(b); }
  int side_;
  int in_channels_;
  int blocks_ = 0;
};

template <class T>
class Stage1Discriminator : public ConvDiscriminator<T> {
 public:
  explicit Stage1Discriminator(const ModelSpec& spec) : ConvDiscriminator<T>(spec, 1, spec.disc_reduction_factor) {}
  Tensor<T> forward(const Tensor<T>& edges, Mode mode) { return this->forward_stack(edges, mode); }
};

/// Conditional discriminator: sees the edge map and a grayscale image stacked as two channels.
template <class T>
class Stage2Discriminator : public ConvDiscriminator<T> {
 public:
  explicit Stage2Discriminator(const ModelSpec& spec) : ConvDiscriminator<T>(spec, 2, spec.stage2_disc_reduction_factor) {}
  Tensor<T> forward(const Tensor<T>& edges, const Tensor<T>& gray, Mode mode) {
    return this->forward_stack(concat_channels(edges, gray), mode);
  }
};

/// ResNet translator with instance norm and reflect padding. Convs feeding a
/// norm carry no bias (the norm would cancel it). Optional extras:
/// dropout between the two convs of each residual block, and a latent z2
/// mapped linearly to the innermost channels and added before the blocks.
template <class T>
class Stage2Generator : public Module<T> {
 public:
  explicit Stage2Generator(const ModelSpec& spec) : spec_(spec) {
    spec.validate();
    const std::int64_t f = spec.feature_maps_g();
    conv("stem", 1, f, 7);
    conv("down0", f, 2 * f, 3);
    conv("down1", 2 * f, 4 * f, 3);
    if (spec.stage2_latent_enabled) {
      this->add_param("z2.weight", {4 * f, spec.latent_dim});
      this->add_param("z2.bias", {4 * f});
    }
    for (int b = 0; b < spec.resnet_blocks; ++b) {
      conv(res(b) + ".conv0", 4 * f, 4 * f, 3);
      conv(res(b) + ".conv1", 4 * f, 4 * f, 3);
    }
    conv_t("up0", 4 * f, 2 * f);
    conv_t("up1", 2 * f, f);
    this->add_param("out.weight", {1, f, 7, 7});
    this->add_param("out.bias", {1});
  }

  /// `rng` drives dropout in train mode; `skip_residual` evaluates the trunk without the residual branches.
  Tensor<T> forward(const Tensor<T>& edges, Mode mode, Rng& rng, const std::optional<Tensor<T>>& z2 = std::nullopt,
                    bool skip_residual = false) {
    require_shape(edges, 4, "stage2 generator input");
    if (edges.dim(1) != 1 || edges.dim(2) != spec_.image_side || edges.dim(3) != spec_.image_side) {
      throw ShapeError("stage2 generator: expected N×1×" + std::to_string(spec_.image_side) + "×" + std::to_string(spec_.image_side) +
                       " edges, got " + shape_str(edges.shape()));
    }
    auto x = block("stem", reflect_pad2d(edges, 3), 1, 0);
    x = block("down0", x, 2, 1);
    x = block("down1", x, 2, 1);
    if (spec_.stage2_latent_enabled) {
      if (!z2) throw ConfigError("stage2 generator: z2 required when stage2_latent_enabled");
      require_shape(*z2, 2, "stage2 latent");
      if (z2->dim(0) != edges.dim(0) || z2->dim(1) != spec_.latent_dim) throw ShapeError("stage2 generator: z2 must be N×latent_dim");
      x = add_channelwise(x, linear(*z2, this->param("z2.weight"), this->bias("z2")));
    } else if (z2) {
      throw ConfigError("stage2 generator: z2 given but stage2_latent_enabled is false");
    }
    if (!skip_residual) {
      for (int b = 0; b < spec_.resnet_blocks; ++b) {
        auto h = block(res(b) + ".conv0", reflect_pad2d(x, 1), 1, 0);
        if (spec_.dropout_enabled) h = dropout(h, spec_.dropout_rate, mode, rng);
        const auto& n = res(b) + ".conv1";
        h = this->in(n + ".in", conv2d<T>(reflect_pad2d(h, 1), this->param(n + ".weight"), std::nullopt, 1, 0));
        x = add(x, h);
      }
    }
    x = relu(this->in("up0.in", conv_transpose2d<T>(x, this->param("up0.weight"), std::nullopt, 2, 1)));
    x = relu(this->in("up1.in", conv_transpose2d<T>(x, this->param("up1.weight"), std::nullopt, 2, 1)));
    return tanh(conv2d<T>(reflect_pad2d(x, 3), this->param("out.weight"), this->bias("out"), 1, 0));
  }

  const ModelSpec& spec() const { return spec_; }

 private:
  static std::string res(int b) { return "res" + std::to_string(b); }

  void conv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k) {
    this->add_param(name + ".weight", {out, in, k, k});
    this->add_instance_norm(name + ".in", out);
  }

  void conv_t(const std::string& name, std::int64_t in, std::int64_t out) {
    this->add_param(name + ".weight", {in, out, 4, 4});
    this->add_instance_norm(name + ".in", out);
  }

  // conv -> instance norm -> ReLU
  Tensor<T> block(const std::string& name, const Tensor<T>& x, std::int64_t stride, std::int64_t pad) const {
    return relu(this->in(name + ".in", conv2d<T>(x, this->param(name + ".weight"), std::nullopt, stride, pad)));
  }

  ModelSpec spec_;
};

/// All four networks for one spec.
template <class T = float>
struct ModelSet {
  ModelSpec spec;
  Stage1Generator<T> g1;
  Stage1Discriminator<T> d1;
  Stage2Generator<T> g2;
  Stage2Discriminator<T> d2;

  explicit ModelSet(const ModelSpec& s) : spec(s), g1(s), d1(s), g2(s), d2(s) {}
};

/// Fresh networks with DCGAN-style initialization; each network draws from
/// its own stream derived from `seed`.
template <class T = float>
ModelSet<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  ModelSet<T> m(spec);
  m.g1.init(derive_seed(seed, 101));
  m.d1.init(derive_seed(seed, 102));
  m.g2.init(derive_seed(seed, 201));
  m.d2.init(derive_seed(seed, 202));
  return m;
}

}  // namespace stagegen
