#pragma once

// Network definitions: fully-connected stacks (style generator, critic),
// the convolutional encoder/decoder pair, and the attribute predictor
// backbone. Every network exposes its parameters as named leaf tensors so
// optimizers and checkpoints can treat them uniformly.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bae/checkpoint.hpp"
#include "bae/errors.hpp"
#include "bae/rng.hpp"
#include "bae/tensor.hpp"

namespace bae {

enum class Activation { relu, none };

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline void zero_grads(const ParamList& params) {
  for (auto p : params) p.tensor.zero_grad();
}

/// Frozen parameters take no part in differentiation, so inference graphs
/// only carry gradients for the inputs that need them.
inline void set_trainable(const ParamList& params, bool on) {
  for (auto p : params) p.tensor.set_requires_grad(on);
}

inline std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// He-style uniform initialisation: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor apply(Activation act, const Tensor& x) { return act == Activation::relu ? relu(x) : x; }

// ---------------------------------------------------------------------------
// Fully connected stacks

struct MlpSpec {
  std::vector<std::size_t> widths;
  std::vector<Activation> activations;

  void validate() const {
    if (widths.empty() || widths.size() != activations.size())
      throw ConfigError("MLP spec needs one activation per layer width");
    for (auto w : widths)
      if (w == 0) throw ConfigError("MLP layer widths must be positive");
  }
};

/// 128(relu) -> 512(relu) -> out_dim.
inline MlpSpec default_generator_spec(std::size_t out_dim) {
  return {{128, 512, out_dim}, {Activation::relu, Activation::relu, Activation::none}};
}

/// 512(relu) -> 256(relu) -> 128(relu) -> 1.
inline MlpSpec default_critic_spec() {
  return {{512, 256, 128, 1}, {Activation::relu, Activation::relu, Activation::relu, Activation::none}};
}

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  Tensor forward(const Tensor& x) const { return matmul(x, weight) + bias; }
};

/// Pre-activation values of every layer from one forward pass, kept so the
/// critic's input gradient can be rebuilt as an explicit expression.
struct MlpTrace {
  std::vector<Tensor> pre;
  Tensor out;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t input_dim, MlpSpec spec, Rng& rng) : input_dim_(input_dim), spec_(std::move(spec)) {
    if (input_dim_ == 0) throw ConfigError("MLP input dimension must be positive");
    spec_.validate();
    std::size_t in = input_dim_;
    for (auto w : spec_.widths) {
      layers_.push_back({he_uniform({in, w}, in, rng), Tensor::zeros({w}, true)});
      in = w;
    }
  }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return spec_.widths.back(); }
  const MlpSpec& spec() const { return spec_; }
  const std::vector<Linear>& layers() const { return layers_; }

  /// x is batch x input_dim.
  Tensor forward(const Tensor& x) const { return trace(x).out; }

  MlpTrace trace(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != input_dim_)
      throw DimensionError("MLP expects batch x " + std::to_string(input_dim_) + " input, got " + shape_str(x.shape()));
    MlpTrace t;
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Tensor pre = layers_[i].forward(h);
      t.pre.push_back(pre);
      h = apply(spec_.activations[i], pre);
    }
    t.out = h;
    return t;
  }

  void zero_last_layer() {
    auto& last = layers_.back();
    for (auto& v : last.weight.data_mut()) v = 0.0;
    for (auto& v : last.bias.data_mut()) v = 0.0;
  }

  ParamList parameters() const {
    ParamList out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"layer" + std::to_string(i) + ".weight", layers_[i].weight});
      out.push_back({"layer" + std::to_string(i) + ".bias", layers_[i].bias});
    }
    return out;
  }

  void write(Checkpoint& ck, const std::string& prefix) const;
  static Mlp read(const Checkpoint& ck, const std::string& prefix);

 private:
  std::size_t input_dim_ = 0;
  MlpSpec spec_;
  std::vector<Linear> layers_;
};

/// Closed-form count of an MLP's parameters.
inline std::size_t mlp_parameter_count(std::size_t input_dim, const MlpSpec& spec) {
  std::size_t n = 0, in = input_dim;
  for (auto w : spec.widths) {
    n += in * w + w;
    in = w;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Parameter <-> checkpoint plumbing

inline void write_params(Checkpoint& ck, const std::string& prefix, const ParamList& params) {
  for (const auto& p : params) ck.put(prefix + p.name, p.tensor);
}

inline void read_params(const Checkpoint& ck, const std::string& prefix, const ParamList& params) {
  for (auto p : params) {
    const auto& e = ck.at(prefix + p.name);
    if (e.shape != p.tensor.shape())
      throw CheckpointError("shape mismatch for '" + prefix + p.name + "': stored " + shape_str(e.shape) +
                            ", expected " + shape_str(p.tensor.shape()));
    std::copy(e.values.begin(), e.values.end(), p.tensor.data_mut().begin());
  }
}

inline std::vector<double> to_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }
inline std::vector<std::size_t> to_sizes(const std::vector<double>& v) {
  std::vector<std::size_t> out;
  for (double d : v) {
    if (d < 0 || d != std::floor(d)) throw CheckpointError("corrupt integer field in checkpoint");
    out.push_back(static_cast<std::size_t>(d));
  }
  return out;
}

inline void Mlp::write(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + "spec.input_dim", static_cast<double>(input_dim_));
  ck.put(prefix + "spec.widths", {spec_.widths.size()}, to_doubles(spec_.widths));
  std::vector<double> acts;
  for (auto a : spec_.activations) acts.push_back(a == Activation::relu ? 1.0 : 0.0);
  ck.put(prefix + "spec.activations", {acts.size()}, acts);
  write_params(ck, prefix, parameters());
}

inline Mlp Mlp::read(const Checkpoint& ck, const std::string& prefix) {
  MlpSpec spec;
  spec.widths = to_sizes(ck.at(prefix + "spec.widths").values);
  for (double a : ck.at(prefix + "spec.activations").values)
    spec.activations.push_back(a != 0.0 ? Activation::relu : Activation::none);
  Rng rng(0);
  Mlp m(static_cast<std::size_t>(ck.scalar(prefix + "spec.input_dim")), spec, rng);
  read_params(ck, prefix, m.parameters());
  return m;
}

// ---------------------------------------------------------------------------
// Style vectors and the style generator

/// Per-channel (mu, sigma) statistics of an encoded style image.
struct StyleVector {
  Tensor mu;     // [C]
  Tensor sigma;  // [C], strictly positive

  std::size_t channels() const { return mu.numel(); }

  /// mu followed by sigma, length 2C.
  std::vector<double> flatten() const {
    std::vector<double> out(mu.values());
    out.insert(out.end(), sigma.values().begin(), sigma.values().end());
    return out;
  }
  static StyleVector from_flat(std::span<const double> v) {
    if (v.size() % 2) throw DimensionError("flattened style vector must have even length");
    std::size_t c = v.size() / 2;
    StyleVector s{Tensor::vector({v.begin(), v.begin() + static_cast<std::ptrdiff_t>(c)}),
                  Tensor::vector({v.begin() + static_cast<std::ptrdiff_t>(c), v.end()})};
    for (double x : s.sigma.values())
      if (!(x > 0)) throw DomainError("style sigma must be strictly positive");
    return s;
  }
};

/// Feature-wise affine map between the generator's output space and the
/// (mu, log sigma) style space: styled = raw * scale + mean.
struct StyleNormalization {
  std::vector<double> mean;
  std::vector<double> scale;

  static StyleNormalization identity(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }
  std::size_t dim() const { return mean.size(); }

  std::vector<double> normalize(std::span<const double> v) const {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean[i]) / scale[i];
    return out;
  }
  std::vector<double> denormalize(std::span<const double> v) const {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * scale[i] + mean[i];
    return out;
  }
};

/// Style generator G: z -> (mu, sigma). The network produces a point in
/// normalised (mu, log sigma) space; de-normalisation and exponentiation of
/// the sigma half happen here so generated sigmas are always positive.
class StyleGenerator {
 public:
  StyleGenerator() = default;
  StyleGenerator(Mlp net, std::size_t channels)
      : net_(std::move(net)), channels_(channels), norm_(StyleNormalization::identity(2 * channels)) {}

  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }
  std::size_t z_dim() const { return net_.input_dim(); }
  std::size_t channels() const { return channels_; }
  const StyleNormalization& normalization() const { return norm_; }
  void set_normalization(StyleNormalization n) {
    if (n.dim() != 2 * channels_) throw DimensionError("normalization dimension must equal 2C");
    norm_ = std::move(n);
  }

  /// Differentiable map of one latent row [1 x z_dim] to style tensors.
  StyleVector forward(const Tensor& z_row) const {
    Tensor raw = net_.forward(z_row);
    Tensor styled = raw * Tensor({1, 2 * channels_}, norm_.scale) + Tensor({1, 2 * channels_}, norm_.mean);
    Tensor mu = reshape(narrow(styled, 1, 0, channels_), {channels_});
    Tensor sigma = exp(reshape(narrow(styled, 1, channels_, channels_), {channels_}));
    return {mu, sigma};
  }

  StyleVector operator()(std::span<const double> z) const {
    return forward(Tensor({1, z.size()}, {z.begin(), z.end()}).detach());
  }

  void write(Checkpoint& ck, const std::string& prefix) const {
    net_.write(ck, prefix + "net.");
    ck.put_scalar(prefix + "channels", static_cast<double>(channels_));
    ck.put(prefix + "norm.mean", {norm_.dim()}, norm_.mean);
    ck.put(prefix + "norm.scale", {norm_.dim()}, norm_.scale);
  }
  static StyleGenerator read(const Checkpoint& ck, const std::string& prefix) {
    StyleGenerator g(Mlp::read(ck, prefix + "net."), static_cast<std::size_t>(ck.scalar(prefix + "channels")));
    g.set_normalization({ck.at(prefix + "norm.mean").values, ck.at(prefix + "norm.scale").values});
    set_trainable(g.net().parameters(), false);
    return g;
  }

 private:
  Mlp net_;
  std::size_t channels_ = 0;
  StyleNormalization norm_;
};

inline StyleGenerator build_generator(const MlpSpec& spec, std::size_t z_dim, std::size_t channels, Rng& rng) {
  spec.validate();
  if (channels == 0 || z_dim == 0) throw ConfigError("generator needs positive z_dim and channel count");
  if (spec.widths.back() != 2 * channels)
    throw ConfigError("generator final width " + std::to_string(spec.widths.back()) + " must equal 2C = " +
                      std::to_string(2 * channels));
  return StyleGenerator(Mlp(z_dim, spec, rng), channels);
}

// ---------------------------------------------------------------------------
// Convolutional encoder / decoder

struct ConvLayer {
  Tensor kernels;  // out x in x k x k
  Tensor bias;     // out

  Tensor forward(const Tensor& x) const { return add_channel_bias(conv2d(x, kernels), bias); }
};

inline ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
  return {he_uniform({out, in, k, k}, in * k * k, rng), Tensor::zeros({out}, true)};
}

/// Encoder conv stack; the decoder is its mirror with up-sampling in place of
/// pooling.
struct CodecSpec {
  std::size_t image_channels = 3;
  std::size_t image_size = 16;
  std::vector<std::size_t> channels{8, 16};  // per encoder conv layer
  std::vector<bool> pool_after{true, false};  // 2x2 average pool after layer i
  std::size_t kernel = 3;

  std::size_t feature_channels() const { return channels.back(); }
  std::size_t feature_size() const {
    std::size_t s = image_size;
    for (bool p : pool_after) s = p ? s / 2 : s;
    return s;
  }

  void validate() const {
    if (channels.empty() || channels.size() != pool_after.size())
      throw ConfigError("codec spec needs one pool flag per conv layer");
    if (kernel % 2 == 0) throw ConfigError("codec kernel size must be odd");
    std::size_t s = image_size;
    for (bool p : pool_after) {
      if (p && s % 2) throw ConfigError("codec image size not divisible by pooling");
      s = p ? s / 2 : s;
    }
    if (s * s < 4) throw ConfigError("encoder output must keep at least 4 spatial positions");
  }
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(CodecSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t in = spec_.image_channels;
    for (auto c : spec_.channels) {
      layers_.push_back(make_conv(in, c, spec_.kernel, rng));
      in = c;
    }
  }

  const CodecSpec& spec() const { return spec_; }

  void check_input(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != spec_.image_channels || image.dim(1) != spec_.image_size ||
        image.dim(2) != spec_.image_size)
      throw DimensionError("encoder expects " + std::to_string(spec_.image_channels) + "x" +
                           std::to_string(spec_.image_size) + "x" + std::to_string(spec_.image_size) +
                           " images, got " + shape_str(image.shape()));
  }

  /// Post-activation output of every conv layer (before pooling); the last
  /// one, pooled if configured, is the feature map.
  std::vector<Tensor> stages(const Tensor& image) const {
    check_input(image);
    std::vector<Tensor> out;
    Tensor h = image;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = relu(layers_[i].forward(h));
      out.push_back(h);
      if (spec_.pool_after[i]) h = avg_pool2(h);
    }
    out.back() = h;
    return out;
  }

  Tensor forward(const Tensor& image) const { return stages(image).back(); }

  ParamList parameters() const {
    ParamList out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"conv" + std::to_string(i) + ".kernels", layers_[i].kernels});
      out.push_back({"conv" + std::to_string(i) + ".bias", layers_[i].bias});
    }
    return out;
  }

 private:
  CodecSpec spec_;
  std::vector<ConvLayer> layers_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(CodecSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t i = spec_.channels.size(); i-- > 0;) {
      std::size_t in = spec_.channels[i];
      std::size_t out = i == 0 ? spec_.image_channels : spec_.channels[i - 1];
      layers_.push_back(make_conv(in, out, spec_.kernel, rng));
    }
  }

  const CodecSpec& spec() const { return spec_; }

  /// Maps a feature map back to an image in [0,1].
  Tensor forward(const Tensor& features) const {
    if (features.rank() != 3 || features.dim(0) != spec_.feature_channels() || features.dim(1) != spec_.feature_size())
      throw DimensionError("decoder input shape " + shape_str(features.shape()) + " does not match codec spec");
    Tensor h = features;
    std::size_t n = layers_.size();
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t i = n - 1 - j;  // encoder layer being mirrored
      if (spec_.pool_after[i]) h = upsample2(h);
      h = layers_[j].forward(h);
      h = (j + 1 == n) ? sigmoid(h) : relu(h);
    }
    return h;
  }

  ParamList parameters() const {
    ParamList out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"conv" + std::to_string(i) + ".kernels", layers_[i].kernels});
      out.push_back({"conv" + std::to_string(i) + ".bias", layers_[i].bias});
    }
    return out;
  }

 private:
  CodecSpec spec_;
  std::vector<ConvLayer> layers_;
};

inline void write_codec_spec(Checkpoint& ck, const std::string& prefix, const CodecSpec& s) {
  ck.put_scalar(prefix + "spec.image_channels", static_cast<double>(s.image_channels));
  ck.put_scalar(prefix + "spec.image_size", static_cast<double>(s.image_size));
  ck.put_scalar(prefix + "spec.kernel", static_cast<double>(s.kernel));
  ck.put(prefix + "spec.channels", {s.channels.size()}, to_doubles(s.channels));
  std::vector<double> pools;
  for (bool p : s.pool_after) pools.push_back(p ? 1.0 : 0.0);
  ck.put(prefix + "spec.pool_after", {pools.size()}, pools);
}

inline CodecSpec read_codec_spec(const Checkpoint& ck, const std::string& prefix) {
  CodecSpec s;
  s.image_channels = static_cast<std::size_t>(ck.scalar(prefix + "spec.image_channels"));
  s.image_size = static_cast<std::size_t>(ck.scalar(prefix + "spec.image_size"));
  s.kernel = static_cast<std::size_t>(ck.scalar(prefix + "spec.kernel"));
  s.channels = to_sizes(ck.at(prefix + "spec.channels").values);
  s.pool_after.clear();
  for (double p : ck.at(prefix + "spec.pool_after").values) s.pool_after.push_back(p != 0.0);
  s.validate();
  return s;
}

/// Frozen encoder + trained decoder.
struct Codec {
  Encoder encoder;
  Decoder decoder;

  void freeze() const {
    set_trainable(encoder.parameters(), false);
    set_trainable(decoder.parameters(), false);
  }

  void write(Checkpoint& ck, const std::string& prefix = "codec.") const {
    write_codec_spec(ck, prefix, encoder.spec());
    write_params(ck, prefix + "encoder.", encoder.parameters());
    write_params(ck, prefix + "decoder.", decoder.parameters());
  }
  static Codec read(const Checkpoint& ck, const std::string& prefix = "codec.") {
    auto spec = read_codec_spec(ck, prefix);
    Rng rng(0);
    Codec c{Encoder(spec, rng), Decoder(spec, rng)};
    read_params(ck, prefix + "encoder.", c.encoder.parameters());
    read_params(ck, prefix + "decoder.", c.decoder.parameters());
    c.freeze();
    return c;
  }
};

/// Style of an image: channel statistics of its encoded feature map.
inline StyleVector encode_style(const Tensor& image, const Encoder& encoder) {
  auto stats = channel_stats(encoder.forward(image));
  return {stats.mu, stats.sigma};
}

// ---------------------------------------------------------------------------
// Attribute predictor backbone: 2 conv layers + global average pool + 2 FC.

struct PredictorSpec {
  std::size_t image_channels = 3;
  std::size_t image_size = 16;
  std::size_t conv1 = 8;
  std::size_t conv2 = 8;
  std::size_t hidden = 16;
};

class PredictorNet {
 public:
  PredictorNet() = default;
  PredictorNet(PredictorSpec spec, Rng& rng)
      : spec_(spec),
        c1_(make_conv(spec.image_channels, spec.conv1, 3, rng)),
        c2_(make_conv(spec.conv1, spec.conv2, 3, rng)),
        head_(spec.conv2, MlpSpec{{spec.hidden, 1}, {Activation::relu, Activation::none}}, rng) {}

  const PredictorSpec& spec() const { return spec_; }

  /// Scalar pre-output (a logit or a regression value), shape [1].
  Tensor forward(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != spec_.image_channels || image.dim(1) != spec_.image_size ||
        image.dim(2) != spec_.image_size)
      throw DimensionError("predictor expects " + std::to_string(spec_.image_channels) + "x" +
                           std::to_string(spec_.image_size) + "x" + std::to_string(spec_.image_size) +
                           " images, got " + shape_str(image.shape()));
    Tensor h = avg_pool2(relu(c1_.forward(image)));
    h = relu(c2_.forward(h));
    std::size_t c = h.dim(0);
    Tensor pooled = reshape(mean_axis(reshape(h, {c, h.numel() / c}), 1), {1, c});
    return reshape(head_.forward(pooled), {1});
  }

  ParamList parameters() const {
    ParamList out{{"conv0.kernels", c1_.kernels}, {"conv0.bias", c1_.bias}, {"conv1.kernels", c2_.kernels},
                  {"conv1.bias", c2_.bias}};
    for (auto& p : head_.parameters()) out.push_back({"head." + p.name, p.tensor});
    return out;
  }

  void write(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "spec", {5},
           {static_cast<double>(spec_.image_channels), static_cast<double>(spec_.image_size),
            static_cast<double>(spec_.conv1), static_cast<double>(spec_.conv2), static_cast<double>(spec_.hidden)});
    write_params(ck, prefix, parameters());
  }
  static PredictorNet read(const Checkpoint& ck, const std::string& prefix) {
    auto v = to_sizes(ck.at(prefix + "spec").values);
    if (v.size() != 5) throw CheckpointError("corrupt predictor spec");
    Rng rng(0);
    PredictorNet p(PredictorSpec{v[0], v[1], v[2], v[3], v[4]}, rng);
    read_params(ck, prefix, p.parameters());
    set_trainable(p.parameters(), false);
    return p;
  }

 private:
  PredictorSpec spec_;
  ConvLayer c1_, c2_;
  Mlp head_;
};

// ---------------------------------------------------------------------------
// Whole-network checkpoint files

inline void save_checkpoint(const Mlp& net, const std::string& path) {
  Checkpoint ck;
  net.write(ck, "mlp.");
  ck.save(path);
}

inline Mlp load_mlp_checkpoint(const std::string& path) { return Mlp::read(Checkpoint::load(path), "mlp."); }

inline void save_checkpoint(const StyleGenerator& g, const std::string& path) {
  Checkpoint ck;
  g.write(ck, "generator.");
  ck.save(path);
}

inline StyleGenerator load_generator_checkpoint(const std::string& path) {
  return StyleGenerator::read(Checkpoint::load(path), "generator.");
}

inline void save_checkpoint(const Codec& c, const std::string& path) {
  Checkpoint ck;
  c.write(ck);
  ck.save(path);
}

inline Codec load_codec_checkpoint(const std::string& path) { return Codec::read(Checkpoint::load(path)); }

}  // namespace bae
