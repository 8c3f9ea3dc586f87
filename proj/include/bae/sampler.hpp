#pragma once

// Energies over latent styles and the three MCMC samplers that explore them.

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bae/attribute.hpp"
#include "bae/errors.hpp"
#include "bae/nets.hpp"
#include "bae/rng.hpp"
#include "bae/styletx.hpp"
#include "bae/tensor.hpp"

namespace bae {

struct EnergyValue {
  double value = 0;
  std::vector<double> gradient;
};

/// Log-density (up to a constant) over a real vector.
class Energy {
 public:
  virtual ~Energy() = default;
  virtual std::size_t dim() const = 0;
  virtual EnergyValue evaluate(std::span<const double> x) const = 0;
  /// Value without the gradient; gradient-free samplers call only this.
  virtual double value(std::span<const double> x) const { return evaluate(x).value; }
  virtual std::vector<double> initial_point(Rng& rng) const { return standard_normal(rng, dim()); }
};

/// Energy from a callable returning value and gradient.
class FunctionEnergy : public Energy {
 public:
  using Fn = std::function<EnergyValue(std::span<const double>)>;
  FunctionEnergy(std::size_t dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
  std::size_t dim() const override { return dim_; }
  EnergyValue evaluate(std::span<const double> x) const override { return fn_(x); }

 private:
  std::size_t dim_;
  Fn fn_;
};

/// log N(x; mean, cov) up to a constant.
class GaussianEnergy : public Energy {
 public:
  GaussianEnergy(std::vector<double> mean, const std::vector<double>& cov_row_major) : mean_(std::move(mean)) {
    std::size_t d = mean_.size();
    if (cov_row_major.size() != d * d) throw DimensionError("covariance must be d x d");
    Eigen::MatrixXd cov(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(i, j) = cov_row_major[i * d + j];
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw DomainError("covariance is not positive definite");
    precision_ = llt.solve(Eigen::MatrixXd::Identity(d, d));
  }
  static GaussianEnergy isotropic(std::size_t d) {
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) cov[i * d + i] = 1.0;
    return GaussianEnergy(std::vector<double>(d, 0.0), cov);
  }

  std::size_t dim() const override { return mean_.size(); }
  EnergyValue evaluate(std::span<const double> x) const override {
    Eigen::VectorXd r(mean_.size());
    for (std::size_t i = 0; i < mean_.size(); ++i) r(static_cast<Eigen::Index>(i)) = x[i] - mean_[i];
    Eigen::VectorXd pr = precision_ * r;
    EnergyValue out{-0.5 * r.dot(pr), std::vector<double>(mean_.size())};
    for (std::size_t i = 0; i < mean_.size(); ++i) out.gradient[i] = -pr(static_cast<Eigen::Index>(i));
    return out;
  }

 private:
  std::vector<double> mean_;
  Eigen::MatrixXd precision_;
};

// ---------------------------------------------------------------------------
// Chain configuration and bookkeeping

enum class SamplerKind { metropolis_hastings, langevin, hamiltonian };

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::metropolis_hastings: return "mh";
    case SamplerKind::langevin: return "langevin";
    default: return "hmc";
  }
}
inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "mh" || s == "metropolis-hastings") return SamplerKind::metropolis_hastings;
  if (s == "langevin" || s == "mala") return SamplerKind::langevin;
  if (s == "hmc" || s == "hamiltonian") return SamplerKind::hamiltonian;
  throw ConfigError("unknown sampler '" + s + "' (expected mh|langevin|hmc)");
}

/// accepted: collect M accepted candidates (the loop of Algorithm 1).
/// proposals: record the chain state after every proposal (standard MCMC).
enum class CountMode { accepted, proposals };

struct ChainConfig {
  SamplerKind sampler = SamplerKind::langevin;
  double tau = 0.1;
  std::size_t samples = 500;
  bool adaptive_gradient = false;
  bool adaptive_lr = false;
  double decay = 0.9;
  std::size_t burn_in = 200;
  std::uint64_t seed = 0;
  std::size_t leapfrog_steps = 10;
  double leapfrog_step = 0.05;
  double proposal_sigma = 0.1;
  CountMode count = CountMode::accepted;
  std::size_t max_consecutive_rejections = 10000;
  bool record_trace = false;

  void validate() const {
    if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
    if (samples == 0) throw ConfigError("number of samples M must be at least 1");
    if (!(decay > 0 && decay < 1)) throw ConfigError("adaptive-lr decay must lie in (0,1)");
    if (leapfrog_steps == 0) throw ConfigError("HMC needs at least one leapfrog step");
    if (!(leapfrog_step > 0)) throw ConfigError("HMC step size must be positive");
    if (!(proposal_sigma > 0)) throw ConfigError("MH proposal sigma must be positive");
    if (max_consecutive_rejections == 0) throw ConfigError("rejection limit must be positive");
  }
};

struct TraceRow {
  std::size_t step = 0;
  double energy = 0;
  double tau = 0;
  bool accepted = false;
};

struct ChainResult {
  std::vector<std::vector<double>> samples;
  std::vector<double> energies;
  std::vector<double> acceptance_trace;  // running acceptance rate after each proposal
  std::vector<double> tau_trace;         // step size in force after each proposal
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  std::vector<TraceRow> trace;

  double acceptance_rate() const { return proposals ? static_cast<double>(accepted) / static_cast<double>(proposals) : 0.0; }
};

inline void write_trace_csv(const ChainResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write chain trace: " + path);
  out << "step,energy,tau,accepted\n";
  out.precision(17);
  for (const auto& t : r.trace) out << t.step << ',' << t.energy << ',' << t.tau << ',' << (t.accepted ? 1 : 0) << '\n';
}

/// Step size with the decay-on-rejection, reset-on-acceptance rule.
class StepSchedule {
 public:
  StepSchedule(double tau0, double decay, bool adaptive) : tau0_(tau0), tau_(tau0), decay_(decay), adaptive_(adaptive) {}
  double tau() const { return tau_; }
  double initial() const { return tau0_; }
  /// Ratio to the initial value; scales the MH and HMC step sizes.
  double factor() const { return tau_ / tau0_; }
  void on_reject() {
    if (adaptive_) tau_ *= decay_;
  }
  void on_accept() { tau_ = tau0_; }

 private:
  double tau0_, tau_, decay_;
  bool adaptive_;
};

/// Bias-corrected moment normalisation m_hat / (sqrt(v_hat) + eps).
class AdaptiveGradient {
 public:
  explicit AdaptiveGradient(std::size_t dim, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps), m_(dim, 0.0), v_(dim, 0.0) {}

  std::vector<double> apply(std::span<const double> g) {
    std::vector<double> out = peek(g);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1 - b1_) * g[i];
      v_[i] = b2_ * v_[i] + (1 - b2_) * g[i] * g[i];
    }
    ++t_;
    return out;
  }

  /// What apply() would return, without touching the moments.
  std::vector<double> peek(std::span<const double> g) const {
    if (g.size() != m_.size()) throw DimensionError("adaptive gradient dimension mismatch");
    double t = static_cast<double>(t_ + 1);
    double c1 = 1.0 - std::pow(b1_, t), c2 = 1.0 - std::pow(b2_, t);
    std::vector<double> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double m = b1_ * m_[i] + (1 - b1_) * g[i];
      double v = b2_ * v_[i] + (1 - b2_) * g[i] * g[i];
      out[i] = (m / c1) / (std::sqrt(v / c2) + eps_);
    }
    return out;
  }

  std::size_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

namespace detail {

inline double squared_distance_with_drift(std::span<const double> to, std::span<const double> from,
                                          std::span<const double> drift, double tau) {
  double s = 0;
  for (std::size_t i = 0; i < to.size(); ++i) {
    double d = to[i] - from[i] - tau * drift[i];
    s += d * d;
  }
  return s;
}

/// Shared accept/record loop. `propose` performs one proposal from the
/// current state and returns whether it was accepted.
class ChainDriver {
 public:
  ChainDriver(const ChainConfig& cfg, ChainResult& res) : cfg_(cfg), res_(res) {}

  /// Returns true once enough samples are collected.
  bool record(bool accepted, std::span<const double> state, double energy, double tau) {
    ++res_.proposals;
    if (accepted) {
      ++res_.accepted;
      rejections_ = 0;
    } else if (++rejections_ >= cfg_.max_consecutive_rejections) {
      throw StuckChainError(std::to_string(rejections_) +
                            " consecutive proposals rejected; reduce the step size tau or the sharpness lambda");
    }
    res_.acceptance_trace.push_back(res_.acceptance_rate());
    res_.tau_trace.push_back(tau);
    if (cfg_.record_trace) res_.trace.push_back({res_.proposals, energy, tau, accepted});
    if (res_.proposals <= cfg_.burn_in) return false;
    if (cfg_.count == CountMode::proposals || accepted) {
      res_.samples.emplace_back(state.begin(), state.end());
      res_.energies.push_back(energy);
    }
    return res_.samples.size() >= cfg_.samples;
  }

 private:
  const ChainConfig& cfg_;
  ChainResult& res_;
  std::size_t rejections_ = 0;
};

inline std::vector<double> start_point(const Energy& e, Rng& rng, const std::optional<std::vector<double>>& init) {
  if (init) {
    if (init->size() != e.dim()) throw DimensionError("chain start point has wrong dimension");
    return *init;
  }
  return e.initial_point(rng);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Metropolis-adjusted Langevin (Algorithm 1)

inline ChainResult langevin_chain(const Energy& e, const ChainConfig& cfg,
                                  const std::optional<std::vector<double>>& init = std::nullopt) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ChainResult res;
  detail::ChainDriver driver(cfg, res);
  StepSchedule sched(cfg.tau, cfg.decay, cfg.adaptive_lr);
  AdaptiveGradient adapt(e.dim());
  const std::size_t d = e.dim();

  std::vector<double> z = detail::start_point(e, rng, init);
  EnergyValue cur = e.evaluate(z);
  std::vector<double> cand(d);
  for (;;) {
    const double tau = sched.tau();
    std::vector<double> drift_fwd = cfg.adaptive_gradient ? adapt.apply(cur.gradient) : cur.gradient;
    const double noise = std::sqrt(2.0 * tau);
    for (std::size_t i = 0; i < d; ++i) cand[i] = z[i] + tau * drift_fwd[i] + noise * normal(rng);
    EnergyValue next = e.evaluate(cand);
    std::vector<double> drift_rev = cfg.adaptive_gradient ? adapt.peek(next.gradient) : next.gradient;
    double log_r = next.value - cur.value + detail::squared_distance_with_drift(cand, z, drift_fwd, tau) / (4 * tau) -
                   detail::squared_distance_with_drift(z, cand, drift_rev, tau) / (4 * tau);
    bool accept = std::isfinite(next.value) && (log_r >= 0 || std::log(uniform01(rng)) < log_r);
    if (accept) {
      z = cand;
      cur = std::move(next);
      sched.on_accept();
    } else {
      sched.on_reject();
    }
    if (driver.record(accept, z, cur.value, sched.tau())) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Random-walk Metropolis-Hastings

inline ChainResult mh_chain(const Energy& e, const ChainConfig& cfg,
                            const std::optional<std::vector<double>>& init = std::nullopt) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ChainResult res;
  detail::ChainDriver driver(cfg, res);
  StepSchedule sched(cfg.tau, cfg.decay, cfg.adaptive_lr);
  const std::size_t d = e.dim();

  std::vector<double> z = detail::start_point(e, rng, init);
  double cur = e.value(z);
  std::vector<double> cand(d);
  for (;;) {
    double sigma = cfg.proposal_sigma * sched.factor();
    for (std::size_t i = 0; i < d; ++i) cand[i] = z[i] + sigma * normal(rng);
    double next = e.value(cand);
    double log_r = next - cur;
    bool accept = std::isfinite(next) && (log_r >= 0 || std::log(uniform01(rng)) < log_r);
    if (accept) {
      z = cand;
      cur = next;
      sched.on_accept();
    } else {
      sched.on_reject();
    }
    if (driver.record(accept, z, cur, sched.tau())) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo

struct LeapfrogState {
  std::vector<double> z;
  std::vector<double> p;
  EnergyValue at;  // energy and gradient at z
};

/// L leapfrog steps of size eps for H = -O(z) + |p|^2 / 2 (unit mass).
inline LeapfrogState leapfrog(const Energy& e, LeapfrogState s, double eps, std::size_t steps) {
  const std::size_t d = s.z.size();
  for (std::size_t i = 0; i < d; ++i) s.p[i] += 0.5 * eps * s.at.gradient[i];
  for (std::size_t l = 0; l < steps; ++l) {
    for (std::size_t i = 0; i < d; ++i) s.z[i] += eps * s.p[i];
    s.at = e.evaluate(s.z);
    double w = (l + 1 == steps) ? 0.5 * eps : eps;
    for (std::size_t i = 0; i < d; ++i) s.p[i] += w * s.at.gradient[i];
  }
  return s;
}

inline double hamiltonian(const LeapfrogState& s) {
  double k = 0;
  for (double v : s.p) k += v * v;
  return -s.at.value + 0.5 * k;
}

inline ChainResult hmc_chain(const Energy& e, const ChainConfig& cfg,
                             const std::optional<std::vector<double>>& init = std::nullopt) {
  cfg.validate();
  Rng rng(cfg.seed);
  ChainResult res;
  detail::ChainDriver driver(cfg, res);
  StepSchedule sched(cfg.tau, cfg.decay, cfg.adaptive_lr);
  const std::size_t d = e.dim();

  LeapfrogState cur{detail::start_point(e, rng, init), std::vector<double>(d), {}};
  cur.at = e.evaluate(cur.z);
  for (;;) {
    cur.p = standard_normal(rng, d);
    double h0 = hamiltonian(cur);
    LeapfrogState next = leapfrog(e, cur, cfg.leapfrog_step * sched.factor(), cfg.leapfrog_steps);
    double h1 = hamiltonian(next);
    // a non-finite H marks a divergent trajectory: the proposal is rejected
    bool accept = std::isfinite(h1) && std::log(uniform01(rng)) < h0 - h1;
    if (accept) {
      cur = std::move(next);
      sched.on_accept();
    } else {
      sched.on_reject();
    }
    if (driver.record(accept, cur.z, cur.at.value, sched.tau())) break;
  }
  return res;
}

inline ChainResult run_chain(const Energy& e, const ChainConfig& cfg,
                             const std::optional<std::vector<double>>& init = std::nullopt) {
  switch (cfg.sampler) {
    case SamplerKind::metropolis_hastings: return mh_chain(e, cfg, init);
    case SamplerKind::langevin: return langevin_chain(e, cfg, init);
    default: return hmc_chain(e, cfg, init);
  }
}

// ---------------------------------------------------------------------------
// The attribute-enhancement energy

struct BaeModels {
  const StyleGenerator* generator = nullptr;
  const Codec* codec = nullptr;
  const Predictor* internal = nullptr;

  void check() const {
    if (!generator || !codec || !internal) throw ContractError("BAE needs a generator, a codec and an internal predictor");
    if (generator->channels() != codec->encoder.spec().feature_channels())
      throw ConfigError("generator channel count does not match the codec feature channels");
  }
};

enum class AlphaPolicy { fixed, adaptive };

struct BaeEnergyConfig {
  NormalizationSpec norm;
  AlphaPolicy alpha_policy = AlphaPolicy::fixed;
  double alpha = 0.5;  // used by the fixed policy
  double alpha_prior_mean = 0.5;
  double alpha_prior_var = 0.25;

  void validate() const {
    norm.validate();
    if (alpha_policy == AlphaPolicy::fixed) check_alpha(alpha);
    if (!(alpha_prior_var > 0)) throw ConfigError("alpha prior variance must be positive");
  }
};

inline double clip_alpha(double a) { return std::min(1.0, std::max(0.0, a)); }

/// O(z) = log P_A(Z(I, G(z))) + log N(z; 0, I), or for the adaptive policy
/// O(z, a) = log P_A(Zhat(I, G(z), clip(a))) + log N(z; 0, I) + log N(a; m, v).
/// The point layout is z followed by a.
class BaeEnergy : public Energy {
 public:
  BaeEnergy(const Tensor& image, BaeModels models, BaeEnergyConfig cfg) : models_(models), cfg_(cfg) {
    models_.check();
    cfg_.validate();
    content_feat_ = models_.codec->encoder.forward(image.detach()).detach();
  }

  std::size_t z_dim() const { return models_.generator->z_dim(); }
  bool adaptive() const { return cfg_.alpha_policy == AlphaPolicy::adaptive; }
  std::size_t dim() const override { return z_dim() + (adaptive() ? 1 : 0); }
  const BaeEnergyConfig& config() const { return cfg_; }

  std::vector<double> initial_point(Rng& rng) const override {
    auto x = standard_normal(rng, z_dim());
    if (adaptive()) x.push_back(cfg_.alpha_prior_mean + std::sqrt(cfg_.alpha_prior_var) * standard_normal(rng, 1)[0]);
    return x;
  }

  EnergyValue evaluate(std::span<const double> x) const override { return run(x, true); }
  double value(std::span<const double> x) const override { return run(x, false).value; }

  /// Stylized image and raw internal score for a point (no gradient).
  Tensor stylized(std::span<const double> x) const {
    check_point(x);
    Tensor z({1, z_dim()}, {x.begin(), x.begin() + static_cast<std::ptrdiff_t>(z_dim())});
    auto s = (*models_.generator).forward(z);
    return models_.codec->decoder.forward(mix_features(content_feat_, adain(content_feat_, s), Tensor::scalar(alpha_of(x))));
  }
  double alpha_of(std::span<const double> x) const { return adaptive() ? clip_alpha(x[z_dim()]) : cfg_.alpha; }

 private:
  void check_point(std::span<const double> x) const {
    if (x.size() != dim())
      throw DimensionError("energy point has " + std::to_string(x.size()) + " entries, expected " + std::to_string(dim()));
  }

  /// Runs one stage of the composition, reporting any numerical failure
  /// under the stage's name.
  template <typename F>
  static auto stage(const char* name, F&& f) {
    try {
      return f();
    } catch (const EnergyEvaluationError&) {
      throw;
    } catch (const Error& err) {
      throw EnergyEvaluationError(std::string("energy evaluation failed in the ") + name + " stage: " + err.what());
    }
  }

  static void check_stage(const Tensor& t, const char* stage) {
    if (!all_finite(t)) throw EnergyEvaluationError(std::string("non-finite values after the ") + stage + " stage");
  }

  EnergyValue run(std::span<const double> x, bool with_grad) const {
    check_point(x);
    const std::size_t zd = z_dim();
    Tensor z({1, zd}, {x.begin(), x.begin() + static_cast<std::ptrdiff_t>(zd)}, with_grad);
    Tensor a_raw = Tensor::scalar(adaptive() ? x[zd] : cfg_.alpha);
    if (with_grad && adaptive()) a_raw.set_requires_grad(true);

    StyleVector s = stage("generator", [&] { return models_.generator->forward(z); });
    check_stage(s.mu, "generator");
    check_stage(s.sigma, "generator");
    Tensor t = stage("adain", [&] { return adain(content_feat_, s); });
    check_stage(t, "adain");
    Tensor alpha = adaptive() ? clip(a_raw, 0.0, 1.0) : a_raw;
    Tensor img = stage("decoder", [&] { return models_.codec->decoder.forward(mix_features(content_feat_, t, alpha)); });
    check_stage(img, "decoder");
    Tensor raw = stage("predictor", [&] { return models_.internal->raw(img); });
    check_stage(raw, "predictor");
    Tensor objective = log_normalized_score(raw, cfg_.norm);
    check_stage(objective, "normalization");

    constexpr double kLog2Pi = 1.8378770664093453;
    objective = objective - 0.5 * sum(square(z)) - 0.5 * static_cast<double>(zd) * kLog2Pi;
    if (adaptive()) {
      objective = objective - square(a_raw - cfg_.alpha_prior_mean) / (2 * cfg_.alpha_prior_var) -
                  0.5 * std::log(2 * M_PI * cfg_.alpha_prior_var);
    }
    objective = sum(objective);
    check_stage(objective, "prior");

    EnergyValue out{objective.item(), {}};
    if (!with_grad) return out;
    objective.backward();
    out.gradient.assign(z.grad().begin(), z.grad().end());
    if (adaptive()) out.gradient.push_back(a_raw.grad()[0]);
    for (double g : out.gradient)
      if (!std::isfinite(g)) throw EnergyEvaluationError("non-finite gradient in the backward pass");
    return out;
  }

  BaeModels models_;
  BaeEnergyConfig cfg_;
  Tensor content_feat_;
};

struct BaeSamples {
  ChainResult chain;
  std::vector<std::vector<double>> latents;  // S'
  std::vector<double> alphas;                // A' (clipped), or the fixed alpha
  std::vector<StyleVector> styles;
};

inline BaeSamples sample_styles_bae(const Tensor& image, const BaeModels& models, const BaeEnergyConfig& ecfg,
                                    const ChainConfig& ccfg) {
  BaeEnergy energy(image, models, ecfg);
  BaeSamples out{run_chain(energy, ccfg), {}, {}, {}};
  const std::size_t zd = energy.z_dim();
  for (const auto& x : out.chain.samples) {
    out.latents.emplace_back(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(zd));
    out.alphas.push_back(energy.alpha_of(x));
    out.styles.push_back((*models.generator)(out.latents.back()));
  }
  return out;
}

}  // namespace bae
