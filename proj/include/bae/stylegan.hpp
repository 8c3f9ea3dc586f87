#pragma once

// Style-space density model: a WGAN-GP over (mu, log sigma) style vectors.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "bae/errors.hpp"
#include "bae/nets.hpp"
#include "bae/optim.hpp"
#include "bae/rng.hpp"
#include "bae/tensor.hpp"

namespace bae {

/// Styles of K images in (mu, log sigma) space plus the feature-wise
/// normalisation the GAN is trained under.
struct StyleCorpus {
  std::size_t channels = 0;
  std::vector<StyleVector> styles;
  std::vector<std::vector<double>> log_space;   // (mu, log sigma) rows
  std::vector<std::vector<double>> normalized;  // same rows after normalisation
  StyleNormalization norm;

  std::size_t size() const { return styles.size(); }
  std::size_t dim() const { return 2 * channels; }
};

inline std::vector<double> to_log_space(const StyleVector& s) {
  auto v = s.flatten();
  for (std::size_t i = s.channels(); i < v.size(); ++i) {
    if (!(v[i] > 0)) throw DomainError("style sigma must be positive before the log transform");
    v[i] = std::log(v[i]);
  }
  return v;
}

/// Population mean and standard deviation per feature; a zero spread
/// (including K = 1) falls back to unit scale.
inline StyleNormalization fit_normalization(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ContractError("cannot fit a normalization to zero rows");
  std::size_t d = rows.front().size();
  StyleNormalization n{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i) n.mean[i] += r[i];
  for (auto& m : n.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i) n.scale[i] += (r[i] - n.mean[i]) * (r[i] - n.mean[i]);
  for (auto& s : n.scale) {
    s = std::sqrt(s / static_cast<double>(rows.size()));
    if (!(s > 0)) s = 1.0;
  }
  return n;
}

inline StyleCorpus build_corpus(const std::vector<Tensor>& style_images, const Encoder& encoder) {
  if (style_images.empty()) throw ContractError("style corpus needs at least one image");
  StyleCorpus c;
  c.channels = encoder.spec().feature_channels();
  for (std::size_t i = 0; i < style_images.size(); ++i) {
    StyleVector s;
    try {
      if (!all_finite(style_images[i])) throw DomainError("non-finite pixel values");
      s = encode_style(style_images[i], encoder);
    } catch (const Error& e) {
      throw IngestionError("style image " + std::to_string(i) + " is unusable: " + e.what());
    }
    c.styles.push_back(s);
    c.log_space.push_back(to_log_space(s));
  }
  c.norm = fit_normalization(c.log_space);
  for (const auto& r : c.log_space) c.normalized.push_back(c.norm.normalize(r));
  return c;
}

// ---------------------------------------------------------------------------
// WGAN-GP

struct GanConfig {
  std::size_t z_dim = 64;
  std::size_t batch = 32;
  std::size_t iterations = 20000;  // generator updates
  std::size_t critic_steps = 5;
  double gp_weight = 10.0;
  AdamConfig critic_adam{1e-4, 0.5, 0.9, 1e-8};
  AdamConfig generator_adam{1e-4, 0.5, 0.9, 1e-8};
  std::vector<std::size_t> generator_hidden{128, 512};
  MlpSpec critic = default_critic_spec();
  std::uint64_t seed = 0;

  void validate() const {
    if (batch < 2) throw ConfigError("GAN batch size must be at least 2");
    if (!(gp_weight >= 0)) throw ConfigError("gradient-penalty weight must be non-negative");
    if (critic_steps == 0) throw ConfigError("GAN needs at least one critic step per generator step");
    if (z_dim == 0) throw ConfigError("GAN latent dimension must be positive");
    critic.validate();
    if (critic.widths.back() != 1) throw ConfigError("critic must end in a single output");
  }

  MlpSpec generator_spec(std::size_t out_dim) const {
    MlpSpec s;
    for (auto w : generator_hidden) {
      s.widths.push_back(w);
      s.activations.push_back(Activation::relu);
    }
    s.widths.push_back(out_dim);
    s.activations.push_back(Activation::none);
    return s;
  }
};

struct GanReport {
  std::vector<double> critic_loss;       // per generator iteration (last critic step)
  std::vector<double> wasserstein;       // E[D(real)] - E[D(fake)]
  std::vector<double> gradient_penalty;  // unweighted
  std::vector<double> generator_loss;
};

/// d D / d x for every row of x, built as an explicit expression from the
/// forward trace: for D = W_L^T relu(... relu(x W_1 + b_1) ...) + b_L,
/// grad = ((1 W_L^T o M_{L-1}) W_{L-1}^T o ...) W_1^T with M_k the relu masks.
/// The masks are piecewise constant, so differentiating this expression
/// with respect to the weights needs only first-order autodiff.
inline Tensor critic_input_gradient(const Mlp& critic, const MlpTrace& trace) {
  const auto& layers = critic.layers();
  const auto& acts = critic.spec().activations;
  std::size_t batch = trace.out.dim(0);
  Tensor g = matmul_nt(Tensor::ones({batch, 1}), layers.back().weight);
  for (std::size_t k = layers.size() - 1; k-- > 0;) {
    if (acts[k] == Activation::relu) {
      const auto& pre = trace.pre[k].values();
      std::vector<double> mask(pre.size());
      for (std::size_t i = 0; i < pre.size(); ++i) mask[i] = pre[i] > 0 ? 1.0 : 0.0;
      g = g * Tensor(trace.pre[k].shape(), std::move(mask));
    }
    g = matmul_nt(g, layers[k].weight);
  }
  return g;
}

/// E[(||grad_x D(x)|| - 1)^2] over the rows of x.
inline Tensor gradient_penalty(const Mlp& critic, const Tensor& x) {
  if (critic.output_dim() != 1) throw ConfigError("gradient penalty needs a scalar critic");
  Tensor g = critic_input_gradient(critic, critic.trace(x));
  return mean(square(row_norms(g) - 1.0));
}

struct GanNets {
  Mlp generator;
  Mlp critic;
};

namespace detail {

inline Tensor batch_rows(const std::vector<std::vector<double>>& rows, const std::vector<std::size_t>& idx) {
  std::size_t d = rows.front().size();
  std::vector<double> v;
  v.reserve(idx.size() * d);
  for (auto i : idx) v.insert(v.end(), rows[i].begin(), rows[i].end());
  return Tensor({idx.size(), d}, std::move(v));
}

inline Tensor latent_batch(std::size_t n, std::size_t z_dim, Rng& rng) {
  return Tensor({n, z_dim}, standard_normal(rng, n * z_dim));
}

}  // namespace detail

/// Trains G: R^z_dim -> R^d and critic D on the rows of `data`.
inline GanNets train_wgan_gp(const std::vector<std::vector<double>>& data, const GanConfig& cfg,
                             GanReport* report = nullptr) {
  cfg.validate();
  if (data.size() < cfg.batch)
    throw ContractError("GAN corpus (" + std::to_string(data.size()) + ") smaller than batch size (" +
                        std::to_string(cfg.batch) + ")");
  std::size_t d = data.front().size();
  for (const auto& r : data)
    if (r.size() != d) throw DimensionError("GAN corpus rows differ in length");

  Rng rng(cfg.seed);
  GanNets nets{Mlp(cfg.z_dim, cfg.generator_spec(d), rng), Mlp(d, cfg.critic, rng)};
  GanReport local;
  GanReport& rep = report ? *report : local;
  auto gparams = nets.generator.parameters();
  auto cparams = nets.critic.parameters();
  Adam gopt(gparams, cfg.generator_adam);
  Adam copt(cparams, cfg.critic_adam);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<std::size_t> idx(cfg.batch);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    set_trainable(gparams, false);
    set_trainable(cparams, true);
    double closs = 0, west = 0, gp = 0;
    for (std::size_t k = 0; k < cfg.critic_steps; ++k) {
      for (auto& i : idx) i = pick(rng);
      Tensor real = detail::batch_rows(data, idx);
      Tensor fake = nets.generator.forward(detail::latent_batch(cfg.batch, cfg.z_dim, rng)).detach();
      std::vector<double> mix(cfg.batch * d);
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        double e = u01(rng);
        for (std::size_t j = 0; j < d; ++j) mix[b * d + j] = e * real.values()[b * d + j] + (1 - e) * fake.values()[b * d + j];
      }
      Tensor d_real = mean(nets.critic.forward(real));
      Tensor d_fake = mean(nets.critic.forward(fake));
      Tensor loss = d_fake - d_real;
      Tensor pen = cfg.gp_weight > 0 ? gradient_penalty(nets.critic, Tensor({cfg.batch, d}, std::move(mix)))
                                     : Tensor::scalar(0.0);
      if (cfg.gp_weight > 0) loss = loss + cfg.gp_weight * pen;
      copt.zero_grad();
      loss.backward();
      closs = loss.item();
      west = d_real.item() - d_fake.item();
      gp = pen.item();
      if (!std::isfinite(closs)) throw TrainingDivergedError("critic loss is NaN/inf at iteration " + std::to_string(it));
      copt.step();
    }
    set_trainable(cparams, false);
    set_trainable(gparams, true);
    Tensor gloss = -mean(nets.critic.forward(nets.generator.forward(detail::latent_batch(cfg.batch, cfg.z_dim, rng))));
    gopt.zero_grad();
    gloss.backward();
    if (!std::isfinite(gloss.item()))
      throw TrainingDivergedError("generator loss is NaN/inf at iteration " + std::to_string(it));
    gopt.step();
    rep.critic_loss.push_back(closs);
    rep.wasserstein.push_back(west);
    rep.gradient_penalty.push_back(gp);
    rep.generator_loss.push_back(gloss.item());
  }
  set_trainable(gparams, false);
  set_trainable(cparams, false);
  return nets;
}

struct StyleGan {
  StyleGenerator generator;
  Mlp critic;
};

/// Trains on the corpus' normalised rows; the generator carries the
/// normalisation so its outputs are real (mu, sigma) styles.
inline StyleGan train_wgan_gp(const StyleCorpus& corpus, const GanConfig& cfg, GanReport* report = nullptr) {
  auto nets = train_wgan_gp(corpus.normalized, cfg, report);
  StyleGenerator g(std::move(nets.generator), corpus.channels);
  g.set_normalization(corpus.norm);
  return {std::move(g), std::move(nets.critic)};
}

inline std::vector<StyleVector> sample_styles(const StyleGenerator& g, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("sample_styles needs n >= 1");
  Rng rng(seed);
  std::vector<StyleVector> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(g(standard_normal(rng, g.z_dim())));
  return out;
}

/// Rows of a trained generator's raw output for n latents (used for
/// diagnostics in the generator's own space).
inline std::vector<std::vector<double>> sample_rows(const Mlp& generator, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out = generator.forward(detail::latent_batch(n, generator.input_dim(), rng));
  std::size_t d = out.dim(1);
  std::vector<std::vector<double>> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i].assign(out.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                                                     out.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  return rows;
}

}  // namespace bae
