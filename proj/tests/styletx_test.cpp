#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <random>

#include "bae/styletx.hpp"
#include "bae/synth.hpp"
#include "fd_oracle.hpp"

using namespace bae;
using bae::testing::finite_difference;
using bae::testing::relative_error;
using bae::testing::to_vec;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, v);
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

Codec random_codec(std::uint64_t seed) {
  Rng rng(seed);
  Codec c{Encoder(CodecSpec{}, rng), Decoder(CodecSpec{}, rng)};
  c.freeze();
  return c;
}

StyleVector random_style(std::size_t c, Rng& rng) {
  std::uniform_real_distribution<double> mu(-1.0, 1.0), sg(0.1, 2.0);
  std::vector<double> m(c), s(c);
  for (auto& x : m) x = mu(rng);
  for (auto& x : s) x = sg(rng);
  return {Tensor::vector(m), Tensor::vector(s)};
}

}  // namespace

TEST(Adain, HandExampleAgainstScalarOracle) {
  // independent scalar evaluation: (x - mean) / sqrt(popvar + eps) * 1 + 0
  const double xs[4] = {1, 2, 3, 4};
  const double m = 2.5, sd = std::sqrt(1.25 + 1e-6);
  Tensor out = adain(Tensor({1, 2, 2}, {1, 2, 3, 4}), Tensor::vector({0.0}), Tensor::vector({1.0}));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(out[i], (xs[i] - m) / sd, 1e-12);
  EXPECT_NEAR(out[0], -1.3416, 1e-4);
  EXPECT_NEAR(out[3], 1.3416, 1e-4);
}

TEST(Adain, OutputStatisticsMatchTargets) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor feat = random_tensor({6, 5, 4}, rng);
    auto s = random_style(6, rng);
    auto st = channel_stats(adain(feat, s));
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_NEAR(st.mu[c], s.mu[c], 1e-6);
      EXPECT_NEAR(st.sigma[c], s.sigma[c], 1e-4);
    }
  }
}

TEST(Adain, SelfStyleIsBitwiseFixedPoint) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor feat = random_tensor({4, 3, 3}, rng);
    auto st = channel_stats(feat);
    EXPECT_TRUE(bit_equal(adain(feat, st.mu, st.sigma).values(), feat.values()));
  }
}

TEST(Adain, IdempotentUpToStatEpsilon) {
  // With eps under the square root the second pass sees sigma(out)^2 =
  // sigma_s^2 v / (v + eps) + eps, so it rescales by at most
  // eps/2 * (1/sigma_s + sigma_s/v) * max|nu| per channel.
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor feat = random_tensor({5, 4, 4}, rng);
    auto s = random_style(5, rng);
    auto st = channel_stats(feat);
    Tensor once = adain(feat, s);
    Tensor twice = adain(once, s);
    for (std::size_t c = 0; c < 5; ++c) {
      double v = st.sigma[c] * st.sigma[c] - kStatEpsilon;
      double max_nu = 0;
      for (std::size_t i = 0; i < 16; ++i) max_nu = std::max(max_nu, std::abs(feat[c * 16 + i] - st.mu[c]) / st.sigma[c]);
      double bound = kStatEpsilon * (1.0 / s.sigma[c] + s.sigma[c] / v) * max_nu;
      for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(twice[c * 16 + i], once[c * 16 + i], bound);
    }
  }
}

TEST(Adain, ErrorContracts) {
  Tensor feat = Tensor::ones({2, 2, 2});
  EXPECT_THROW(adain(feat, Tensor::vector({0, 0}), Tensor::vector({1, 0})), DomainError);
  EXPECT_THROW(adain(feat, Tensor::vector({0, 0}), Tensor::vector({1, -1})), DomainError);
  EXPECT_THROW(adain(feat, Tensor::vector({0}), Tensor::vector({1})), DimensionError);
  EXPECT_THROW(adain(Tensor::ones({2, 4}), Tensor::vector({0, 0}), Tensor::vector({1, 1})), DimensionError);
}

TEST(Adain, GradientsWrtStyleStatsMatchFiniteDifferences) {
  Rng rng(4);
  Tensor feat = random_tensor({3, 4, 4}, rng);
  Tensor w = random_tensor({3, 4, 4}, rng);
  auto s = random_style(3, rng);
  auto mu0 = s.mu.values(), sg0 = s.sigma.values();
  Tensor mu(Shape{3}, mu0, true), sg(Shape{3}, sg0, true);
  sum(adain(feat, mu, sg) * w).backward();
  auto f_mu = [&](const std::vector<double>& v) { return sum(adain(feat, Tensor::vector(v), Tensor::vector(sg0)) * w).item(); };
  auto f_sg = [&](const std::vector<double>& v) { return sum(adain(feat, Tensor::vector(mu0), Tensor::vector(v)) * w).item(); };
  EXPECT_LT(relative_error(to_vec(mu.grad()), finite_difference(f_mu, mu0)), 1e-6);
  EXPECT_LT(relative_error(to_vec(sg.grad()), finite_difference(f_sg, sg0)), 1e-6);
}

TEST(Stylize, SelfStyleEqualsReconstruction) {
  auto codec = random_codec(5);
  Rng rng(5);
  auto img = synth::content_image(rng);
  auto out = stylize(img, encode_style(img, codec.encoder), codec);
  EXPECT_TRUE(bit_equal(out.values(), reconstruct(img, codec).values()));
}

TEST(Stylize, DeterministicAndEqualsManualComposition) {
  auto codec = random_codec(6);
  Rng rng(6);
  auto img = synth::content_image(rng);
  auto s = random_style(16, rng);
  auto a = stylize(img, s, codec), b = stylize(img, s, codec);
  EXPECT_TRUE(bit_equal(a.values(), b.values()));
  auto manual = codec.decoder.forward(adain(codec.encoder.forward(img), s.mu, s.sigma));
  EXPECT_TRUE(bit_equal(a.values(), manual.values()));
}

TEST(StylizeAlpha, EndpointsAreExact) {
  auto codec = random_codec(7);
  Rng rng(7);
  auto img = synth::content_image(rng);
  auto s = random_style(16, rng);
  EXPECT_TRUE(bit_equal(stylize_alpha(img, s, 1.0, codec).values(), reconstruct(img, codec).values()));
  EXPECT_TRUE(bit_equal(stylize_alpha(img, s, 0.0, codec).values(), stylize(img, s, codec).values()));
}

TEST(StylizeAlpha, StyleImageFormUsesEncodedStyle) {
  auto codec = random_codec(8);
  Rng rng(8);
  auto img = synth::content_image(rng);
  auto style = synth::style_image(rng);
  auto viaImage = stylize_alpha(img, style, 0.3, codec);
  auto viaVector = stylize_alpha(img, encode_style(style, codec.encoder), 0.3, codec);
  EXPECT_TRUE(bit_equal(viaImage.values(), viaVector.values()));
}

TEST(StylizeAlpha, HalfwayFeaturesAreMeanOfEndpoints) {
  auto codec = random_codec(9);
  Rng rng(9);
  auto feat = codec.encoder.forward(synth::content_image(rng));
  auto s = random_style(16, rng);
  auto f0 = stylized_features(feat, s, 0.0), f1 = stylized_features(feat, s, 1.0), fh = stylized_features(feat, s, 0.5);
  for (std::size_t i = 0; i < fh.numel(); ++i) EXPECT_NEAR(fh[i], 0.5 * (f0[i] + f1[i]), 1e-12);
}

TEST(StylizeAlpha, AlphaOutsideUnitIntervalIsContractError) {
  auto codec = random_codec(10);
  Rng rng(10);
  auto img = synth::content_image(rng);
  auto s = random_style(16, rng);
  EXPECT_THROW(stylize_alpha(img, s, -0.01, codec), ContractError);
  EXPECT_THROW(stylize_alpha(img, s, 1.01, codec), ContractError);
}

TEST(Stylize, GradientWrtStyleMatchesFiniteDifferences) {
  auto codec = random_codec(11);
  Rng rng(11);
  auto img = synth::content_image(rng);
  auto s = random_style(16, rng);
  auto flat0 = s.flatten();
  Tensor w = random_tensor({3, 16, 16}, rng);
  auto objective = [&](const Tensor& mu, const Tensor& sg) { return sum(stylize(img, {mu, sg}, codec) * w); };
  Tensor mu(Shape{16}, s.mu.values(), true), sg(Shape{16}, s.sigma.values(), true);
  objective(mu, sg).backward();
  std::vector<double> grad(to_vec(mu.grad()));
  auto gs = to_vec(sg.grad());
  grad.insert(grad.end(), gs.begin(), gs.end());
  auto f = [&](const std::vector<double>& v) {
    auto st = StyleVector::from_flat(v);
    return objective(st.mu, st.sigma).item();
  };
  EXPECT_LT(relative_error(grad, finite_difference(f, flat0)), 1e-4);
}

TEST(TransferLoss, PositiveForRandomInit) {
  auto codec = random_codec(12);
  Rng rng(12);
  for (int i = 0; i < 5; ++i) {
    Tensor loss = transfer_loss(synth::content_image(rng), synth::style_image(rng), codec, {});
    EXPECT_GT(loss.item(), 0.0);
  }
}

TEST(TransferLoss, GammaZeroIsContentOnly) {
  auto codec = random_codec(13);
  Rng rng(13);
  auto c = synth::content_image(rng), s = synth::style_image(rng);
  double content_only = transfer_loss(c, s, codec, {0.0, true}).item();
  auto t = adain(codec.encoder.forward(c), encode_style(s, codec.encoder));
  auto out = codec.encoder.forward(codec.decoder.forward(t));
  double manual = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) manual += (out[i] - t[i]) * (out[i] - t[i]);
  EXPECT_NEAR(content_only, manual / static_cast<double>(t.numel()), 1e-12);
  EXPECT_GT(transfer_loss(c, s, codec, {10.0, true}).item(), content_only);
  EXPECT_THROW(TransferLossConfig({-1.0, true}).validate(), ConfigError);
}

TEST(TrainTransfer, ShortRunClearsPsnrFloorAndLossDecreases) {
  Rng rng(14);
  std::vector<Tensor> content, styles, held;
  for (int i = 0; i < 120; ++i) content.push_back(synth::content_image(rng));
  for (int i = 0; i < 120; ++i) styles.push_back(synth::style_image(rng));
  for (int i = 0; i < 20; ++i) held.push_back(synth::content_image(rng));
  TransferTrainConfig cfg;
  cfg.autoencoder_steps = 400;
  cfg.transfer_steps = 200;
  cfg.seed = 14;
  TransferReport rep;
  auto codec = train_transfer(content, styles, held, cfg, &rep);
  ASSERT_EQ(rep.autoencoder_loss.size(), 400u);
  ASSERT_EQ(rep.transfer_loss.size(), 200u);
  auto window_mean = [](const std::vector<double>& v, std::size_t from, std::size_t n) {
    double s = 0;
    for (std::size_t i = from; i < from + n; ++i) s += v[i];
    return s / static_cast<double>(n);
  };
  EXPECT_LT(window_mean(rep.autoencoder_loss, 350, 50), 0.5 * window_mean(rep.autoencoder_loss, 0, 20));
  EXPECT_GT(rep.reconstruction_psnr, cfg.psnr_floor);
  for (auto p : codec.decoder.parameters()) EXPECT_FALSE(p.tensor.requires_grad());
  for (auto p : codec.encoder.parameters()) EXPECT_FALSE(p.tensor.requires_grad());
}

TEST(TrainTransfer, GammaZeroStillReconstructs) {
  Rng rng(15);
  std::vector<Tensor> content, held;
  for (int i = 0; i < 60; ++i) content.push_back(synth::content_image(rng));
  for (int i = 0; i < 10; ++i) held.push_back(synth::content_image(rng));
  TransferTrainConfig cfg;
  cfg.loss.gamma = 0.0;
  cfg.autoencoder_steps = 300;
  cfg.transfer_steps = 100;
  TransferReport rep;
  train_transfer(content, content, held, cfg, &rep);
  EXPECT_GT(rep.reconstruction_psnr, cfg.psnr_floor);
}

TEST(TrainTransfer, DivergenceDetector) {
  std::size_t over = 0;
  EXPECT_THROW(detail::check_divergence(std::nan(""), 1.0, over, 3, "x"), TrainingDivergedError);
  over = 0;
  for (std::size_t s = 0; s < 99; ++s) detail::check_divergence(11.0, 1.0, over, s, "x");
  detail::check_divergence(1.0, 1.0, over, 99, "x");
  EXPECT_EQ(over, 0u);
  for (std::size_t s = 0; s < 99; ++s) detail::check_divergence(11.0, 1.0, over, s, "x");
  EXPECT_THROW(detail::check_divergence(11.0, 1.0, over, 99, "x"), TrainingDivergedError);
}

TEST(TrainTransfer, EmptyDatasetRejected) {
  EXPECT_THROW(train_transfer({}, {}, {}, TransferTrainConfig{}), ContractError);
}
