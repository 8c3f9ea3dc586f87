#pragma once

// AdaIN style transfer on top of the encoder/decoder pair.

#include <cmath>
#include <limits>
#include <vector>

#include "bae/errors.hpp"
#include "bae/nets.hpp"
#include "bae/optim.hpp"
#include "bae/rng.hpp"
#include "bae/tensor.hpp"

namespace bae {

/// Re-targets the per-channel mean and standard deviation of a C x H x W
/// feature map to (mu_s, sigma_s).
///
/// Evaluated as x + (sigma_s - sigma(x)) nu(x) + (mu_s - mu(x)), which equals
/// sigma_s nu(x) + mu_s because x = sigma(x) nu(x) + mu(x) identically. In this
/// form feeding a map its own statistics returns it bit for bit.
inline Tensor adain(const Tensor& content_feat, const Tensor& mu_s, const Tensor& sigma_s) {
  if (content_feat.rank() != 3) throw DimensionError("adain expects a CxHxW feature map");
  std::size_t c = content_feat.dim(0);
  if (mu_s.numel() != c || sigma_s.numel() != c)
    throw DimensionError("adain style statistics must have " + std::to_string(c) + " channels");
  for (double s : sigma_s.values())
    if (!(s > 0)) throw DomainError("adain requires strictly positive style sigma, got " + std::to_string(s));
  auto [mu, sigma] = channel_stats(content_feat);
  Tensor nu = (content_feat - reshape(mu, {c, 1, 1})) / reshape(sigma, {c, 1, 1});
  return content_feat + reshape(sigma_s - sigma, {c, 1, 1}) * nu + reshape(mu_s - mu, {c, 1, 1});
}

inline Tensor adain(const Tensor& content_feat, const StyleVector& s) { return adain(content_feat, s.mu, s.sigma); }

/// alpha * content + (1 - alpha) * target, with alpha a [1] tensor so the
/// mix is differentiable in alpha.
inline Tensor mix_features(const Tensor& content_feat, const Tensor& target, const Tensor& alpha) {
  return alpha * content_feat + (1.0 - alpha) * target;
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("stylization alpha must lie in [0,1], got " + std::to_string(alpha));
}

/// Z(I, s) = f_D(adain(f_E(I), s)).
inline Tensor stylize(const Tensor& image, const StyleVector& s, const Codec& codec) {
  return codec.decoder.forward(adain(codec.encoder.forward(image), s));
}

/// Pre-decoder feature map of the alpha-interpolated operator.
inline Tensor stylized_features(const Tensor& content_feat, const StyleVector& s, double alpha) {
  check_alpha(alpha);
  return mix_features(content_feat, adain(content_feat, s), Tensor::scalar(alpha));
}

/// f_D(alpha f_E(I) + (1 - alpha) t). alpha = 1 reproduces f_D(f_E(I));
/// alpha = 0 reproduces stylize(I, s) exactly.
inline Tensor stylize_alpha(const Tensor& image, const StyleVector& s, double alpha, const Codec& codec) {
  return codec.decoder.forward(stylized_features(codec.encoder.forward(image), s, alpha));
}

/// Style-image form: the style is taken from S through the encoder.
inline Tensor stylize_alpha(const Tensor& image, const Tensor& style_image, double alpha, const Codec& codec) {
  return stylize_alpha(image, encode_style(style_image, codec.encoder), alpha, codec);
}

inline Tensor reconstruct(const Tensor& image, const Codec& codec) {
  return codec.decoder.forward(codec.encoder.forward(image));
}

inline double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("psnr shape mismatch");
  double mse = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.numel());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// ---------------------------------------------------------------------------
// Training

struct TransferLossConfig {
  double gamma = 10.0;
  /// Evaluate the style loss at every encoder stage, or only at the final
  /// feature map.
  bool all_stages = true;

  void validate() const {
    if (!(gamma >= 0)) throw ConfigError("style-loss weight gamma must be non-negative");
  }
};

struct TransferTrainConfig {
  TransferLossConfig loss;
  std::size_t autoencoder_steps = 1500;
  std::size_t transfer_steps = 1500;
  std::size_t batch = 8;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  double psnr_floor = 15.0;
  /// Train the encoder as a plain autoencoder first; when false the randomly
  /// initialised encoder is frozen as is.
  bool pretrain_encoder = true;
  CodecSpec spec;
};

struct TransferReport {
  std::vector<double> autoencoder_loss;
  std::vector<double> transfer_loss;
  double reconstruction_psnr = 0;  // mean self-style PSNR on held-out images
};

/// Content + gamma * style loss of one (content, style) pair. The style
/// statistics of S are constants.
inline Tensor transfer_loss(const Tensor& content, const Tensor& style, const Codec& codec, const TransferLossConfig& cfg) {
  auto content_feat = codec.encoder.forward(content).detach();
  auto style_stages = codec.encoder.stages(style);
  auto target = adain(content_feat, channel_stats(style_stages.back()).mu.detach(),
                      channel_stats(style_stages.back()).sigma.detach())
                    .detach();
  Tensor out = codec.decoder.forward(target);
  auto out_stages = codec.encoder.stages(out);
  Tensor loss = mean(square(out_stages.back() - target));
  if (cfg.gamma > 0) {
    std::size_t first = cfg.all_stages ? 0 : out_stages.size() - 1;
    for (std::size_t i = first; i < out_stages.size(); ++i) {
      auto so = channel_stats(out_stages[i]);
      auto ss = channel_stats(style_stages[i].detach());
      Tensor ls = mean(square(so.mu - ss.mu.detach())) + mean(square(so.sigma - ss.sigma.detach()));
      loss = loss + cfg.gamma * ls;
    }
  }
  return loss;
}

namespace detail {

inline void check_divergence(double loss, double initial, std::size_t& over, std::size_t step, const char* what) {
  if (!std::isfinite(loss))
    throw TrainingDivergedError(std::string(what) + " loss became non-finite at step " + std::to_string(step));
  over = loss > 10.0 * initial ? over + 1 : 0;
  if (over >= 100)
    throw TrainingDivergedError(std::string(what) + " loss exceeded 10x its initial value for 100 steps (step " +
                                std::to_string(step) + ")");
}

}  // namespace detail

/// Trains encoder (optionally) and decoder. `images` are used for the
/// autoencoder phase and as content; `styles` supply the style side of each
/// pair; `held_out` is only used for the reported PSNR.
inline Codec train_transfer(const std::vector<Tensor>& images, const std::vector<Tensor>& styles,
                            const std::vector<Tensor>& held_out, const TransferTrainConfig& cfg,
                            TransferReport* report = nullptr) {
  cfg.loss.validate();
  if (images.empty() || styles.empty()) throw ContractError("train_transfer needs non-empty content and style sets");
  if (cfg.batch == 0) throw ConfigError("batch size must be positive");
  Rng rng(cfg.seed);
  Codec codec{Encoder(cfg.spec, rng), Decoder(cfg.spec, rng)};
  TransferReport local;
  TransferReport& rep = report ? *report : local;

  std::vector<const Tensor*> pool;
  for (const auto& t : images) pool.push_back(&t);
  for (const auto& t : styles) pool.push_back(&t);
  std::uniform_int_distribution<std::size_t> pick_pool(0, pool.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_content(0, images.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_style(0, styles.size() - 1);

  if (cfg.pretrain_encoder && cfg.autoencoder_steps > 0) {
    ParamList all = codec.encoder.parameters();
    for (auto& p : codec.decoder.parameters()) all.push_back(p);
    Adam opt(all, {cfg.lr});
    double initial = 0;
    std::size_t over = 0;
    for (std::size_t step = 0; step < cfg.autoencoder_steps; ++step) {
      opt.zero_grad();
      double total = 0;
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const Tensor& x = *pool[pick_pool(rng)];
        Tensor loss = mean(square(reconstruct(x, codec) - x));
        loss.backward();
        total += loss.item();
      }
      total /= static_cast<double>(cfg.batch);
      if (step == 0) initial = total;
      detail::check_divergence(total, initial, over, step, "autoencoder");
      rep.autoencoder_loss.push_back(total);
      opt.scale_grads(1.0 / static_cast<double>(cfg.batch));
      opt.step();
    }
  }

  set_trainable(codec.encoder.parameters(), false);
  Adam opt(codec.decoder.parameters(), {cfg.lr});
  double initial = 0;
  std::size_t over = 0;
  for (std::size_t step = 0; step < cfg.transfer_steps; ++step) {
    opt.zero_grad();
    double total = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      Tensor loss = transfer_loss(images[pick_content(rng)], styles[pick_style(rng)], codec, cfg.loss);
      loss.backward();
      total += loss.item();
    }
    total /= static_cast<double>(cfg.batch);
    if (step == 0) initial = total;
    detail::check_divergence(total, initial, over, step, "transfer");
    rep.transfer_loss.push_back(total);
    opt.scale_grads(1.0 / static_cast<double>(cfg.batch));
    opt.step();
  }
  set_trainable(codec.decoder.parameters(), false);

  if (!held_out.empty()) {
    double acc = 0;
    for (const auto& x : held_out) acc += psnr(stylize(x, encode_style(x, codec.encoder), codec), x);
    rep.reconstruction_psnr = acc / static_cast<double>(held_out.size());
  }
  return codec;
}

}  // namespace bae
