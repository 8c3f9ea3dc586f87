#pragma once

// Attribute predictors and the score normalisations feeding the energy.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bae/errors.hpp"
#include "bae/nets.hpp"
#include "bae/optim.hpp"
#include "bae/rng.hpp"
#include "bae/tensor.hpp"

namespace bae {

enum class AttributeMode { regression, binary };

inline std::string to_string(AttributeMode m) { return m == AttributeMode::regression ? "regression" : "binary"; }
inline AttributeMode parse_attribute_mode(const std::string& s) {
  if (s == "regression") return AttributeMode::regression;
  if (s == "binary") return AttributeMode::binary;
  throw ConfigError("unknown attribute mode '" + s + "' (expected regression|binary)");
}

/// P_A = sigmoid(raw)^lambda (sigmoid_power) or raw^lambda (power).
struct NormalizationSpec {
  enum class Mode { sigmoid_power, power };
  Mode mode = Mode::sigmoid_power;
  double lambda = 1.0;

  void validate() const {
    if (!(lambda > 0) || !std::isfinite(lambda)) throw ConfigError("normalization lambda must be positive");
  }
  static NormalizationSpec for_attribute(AttributeMode m, double lambda) {
    return {m == AttributeMode::regression ? Mode::sigmoid_power : Mode::power, lambda};
  }
};

inline std::string to_string(NormalizationSpec::Mode m) {
  return m == NormalizationSpec::Mode::sigmoid_power ? "sigmoid-power" : "power";
}

inline double normalize_score(double raw, const NormalizationSpec& spec) {
  spec.validate();
  if (spec.mode == NormalizationSpec::Mode::power) {
    if (!(raw >= 0.0 && raw <= 1.0))
      throw DomainError("power normalization needs a raw score in [0,1], got " + std::to_string(raw));
    return std::pow(raw, spec.lambda);
  }
  double s = raw >= 0 ? 1.0 / (1.0 + std::exp(-raw)) : std::exp(raw) / (1.0 + std::exp(raw));
  return std::pow(s, spec.lambda);
}

/// Smallest base probability admitted inside the log in power mode.
inline constexpr double kScoreFloor = 1e-12;

/// Differentiable log P_A of a raw score tensor [1]. The sigmoid form is
/// evaluated in log space and never underflows; the power form floors its
/// base at kScoreFloor.
inline Tensor log_normalized_score(const Tensor& raw, const NormalizationSpec& spec) {
  spec.validate();
  if (spec.mode == NormalizationSpec::Mode::sigmoid_power) return spec.lambda * log_sigmoid(raw);
  for (double r : raw.values())
    if (!(r >= 0.0 && r <= 1.0)) throw DomainError("power normalization needs a raw score in [0,1], got " + std::to_string(r));
  return spec.lambda * log(clamp_min(raw, kScoreFloor));
}

/// A trained predictor: regression value, or class probability in binary mode.
class Predictor {
 public:
  Predictor() = default;
  Predictor(PredictorNet net, AttributeMode mode) : net_(std::move(net)), mode_(mode) {}

  AttributeMode mode() const { return mode_; }
  const PredictorNet& net() const { return net_; }

  /// Differentiable raw score, shape [1].
  Tensor raw(const Tensor& image) const {
    Tensor out = net_.forward(image);
    return mode_ == AttributeMode::binary ? sigmoid(out) : out;
  }
  double score(const Tensor& image) const { return raw(image.detach()).item(); }

  void write(Checkpoint& ck, const std::string& prefix) const {
    net_.write(ck, prefix);
    ck.put_scalar(prefix + "mode", mode_ == AttributeMode::binary ? 1.0 : 0.0);
  }
  static Predictor read(const Checkpoint& ck, const std::string& prefix) {
    return {PredictorNet::read(ck, prefix), ck.scalar(prefix + "mode") != 0.0 ? AttributeMode::binary : AttributeMode::regression};
  }

 private:
  PredictorNet net_;
  AttributeMode mode_ = AttributeMode::regression;
};

struct ScoreResult {
  double raw = 0;
  std::optional<double> normalized;
};

inline ScoreResult score_image(const Tensor& image, const Predictor& predictor,
                               const std::optional<NormalizationSpec>& spec = std::nullopt) {
  ScoreResult r{predictor.score(image), std::nullopt};
  if (spec) r.normalized = normalize_score(r.raw, *spec);
  return r;
}

// ---------------------------------------------------------------------------
// Rank correlation

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation; nullopt when either side is constant.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return std::nullopt;
  auto ra = average_ranks(a), rb = average_ranks(b);
  double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0 || db == 0) return std::nullopt;
  return num / std::sqrt(da * db);
}

// ---------------------------------------------------------------------------
// Training

struct PredictorTrainConfig {
  PredictorSpec arch;
  std::size_t epochs = 12;
  std::size_t batch = 16;
  double lr = 3e-3;
  double holdout_fraction = 0.15;
  std::uint64_t seed = 0;
};

struct PredictorReport {
  std::vector<double> epoch_loss;
  std::optional<double> holdout_spearman;  // undefined for constant labels
  std::size_t train_size = 0;
  std::size_t holdout_size = 0;
};

inline Tensor predictor_loss(const Predictor& p, const Tensor& image, double label) {
  Tensor out = p.net().forward(image);
  if (p.mode() == AttributeMode::regression) return square(out - label);
  // binary cross-entropy on the logit: softplus(x) - y x
  return softplus(out) - label * out;
}

inline Predictor train_predictor(const std::vector<Tensor>& images, const std::vector<double>& labels, AttributeMode mode,
                                 const PredictorTrainConfig& cfg, PredictorReport* report = nullptr) {
  if (images.empty() || images.size() != labels.size())
    throw ContractError("train_predictor needs one label per image and a non-empty dataset");
  if (mode == AttributeMode::binary)
    for (double y : labels)
      if (y != 0.0 && y != 1.0) throw ContractError("binary labels must be 0 or 1");
  if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("predictor batch and epochs must be positive");

  Rng rng(cfg.seed);
  Predictor pred(PredictorNet(cfg.arch, rng), mode);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t holdout = images.size() >= 20 ? static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(images.size())) : 0;
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(holdout));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(holdout), order.end());

  PredictorReport local;
  PredictorReport& rep = report ? *report : local;
  rep.train_size = train.size();
  rep.holdout_size = test.size();

  Adam opt(pred.net().parameters(), {cfg.lr});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < train.size(); start += cfg.batch) {
      std::size_t end = std::min(train.size(), start + cfg.batch);
      opt.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        Tensor loss = predictor_loss(pred, images[train[i]], labels[train[i]]);
        loss.backward();
        total += loss.item();
      }
      opt.scale_grads(1.0 / static_cast<double>(end - start));
      opt.step();
    }
    total /= static_cast<double>(train.size());
    if (!std::isfinite(total))
      throw TrainingDivergedError("predictor loss became non-finite in epoch " + std::to_string(epoch));
    rep.epoch_loss.push_back(total);
  }
  set_trainable(pred.net().parameters(), false);

  if (!test.empty()) {
    std::vector<double> truth, predicted;
    for (auto i : test) {
      truth.push_back(labels[i]);
      predicted.push_back(pred.score(images[i]));
    }
    rep.holdout_spearman = spearman(truth, predicted);
  }
  return pred;
}

/// Internal predictor (drives sampling and ranking) and external predictor
/// (evaluation only), trained on disjoint partitions.
struct PredictorPair {
  Predictor internal;
  Predictor external;
  std::vector<std::size_t> internal_ids;
  std::vector<std::size_t> external_ids;

  bool disjoint() const {
    std::vector<std::size_t> a(internal_ids), b(external_ids), both;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    return both.empty();
  }
};

}  // namespace bae
