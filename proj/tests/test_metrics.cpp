#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sknas/data.hpp"
#include "sknas/metrics.hpp"
#include "sknas/rng.hpp"
#include "sknas/tensor.hpp"

using namespace sknas;

namespace {

Tensor random_image(Rng& rng, const Shape& shape, double lo = 0.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

}  // namespace

TEST(Psnr, ClosedFormValues) {
  // Round decades of mse give round dB values, bit for bit.
  EXPECT_EQ(psnr_from_mse(0.01), 20.0);
  EXPECT_EQ(psnr_from_mse(1.0), 0.0);
  EXPECT_EQ(psnr_from_mse(1e-4), 40.0);
  // Floors below 1e-12 hit the cap instead of heading to infinity.
  EXPECT_EQ(psnr_from_mse(0.0), 100.0);
  EXPECT_EQ(psnr_from_mse(9e-13), 100.0);
  // A doubled peak adds 20*log10(2) dB.
  EXPECT_NEAR(psnr_from_mse(0.01, 2.0), 20.0 + 20.0 * std::log10(2.0), 1e-12);
  EXPECT_THROW(psnr_from_mse(0.01, 0.0), std::invalid_argument);
}

TEST(Psnr, MatchesDirectComputation) {
  const Tensor a = Tensor::zeros({1, 4, 4});
  const Tensor b = Tensor::full({1, 4, 4}, 0.5);
  EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(0.25), 1e-12);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_THROW(psnr(a, Tensor::zeros({1, 4, 5})), ShapeError);
}

TEST(Ssim, IdenticalImagesScoreExactlyOne) {
  Rng rng(3);
  const Tensor x = random_image(rng, {3, 16, 16});
  EXPECT_EQ(ssim(x, x), 1.0);
  const Tensor b = random_image(rng, {2, 3, 12, 12});
  EXPECT_EQ(ssim(b, b), 1.0);
}

TEST(Ssim, RespondsToStructure) {
  // A textured image against its negative: structure is anti-correlated.
  std::vector<double> v(16 * 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      v[y * 16 + x] = 0.5 + 0.4 * std::sin(0.7 * x) * std::cos(0.9 * y);
  std::vector<double> neg(v.size());
  for (size_t i = 0; i < v.size(); ++i) neg[i] = 1.0 - v[i];
  const Tensor a = Tensor::from_data({1, 16, 16}, std::move(v));
  const Tensor b = Tensor::from_data({1, 16, 16}, std::move(neg));
  EXPECT_LT(ssim(a, b), 0.3);
  // Symmetry holds exactly.
  EXPECT_EQ(ssim(a, b), ssim(b, a));

  // Mild noise dents the score; heavy noise dents it more.
  Rng rng(5);
  std::vector<double> mild(a.data()), heavy(a.data());
  for (auto& x : mild) x += 0.02 * rng.normal();
  for (auto& x : heavy) x += 0.2 * rng.normal();
  const double s_mild = ssim(a, Tensor::from_data({1, 16, 16}, std::move(mild)));
  const double s_heavy = ssim(a, Tensor::from_data({1, 16, 16}, std::move(heavy)));
  EXPECT_GT(s_mild, 0.8);
  EXPECT_LT(s_heavy, s_mild);
}

TEST(Ssim, ValidatesInput) {
  Rng rng(3);
  const Tensor small = random_image(rng, {1, 8, 8});
  EXPECT_THROW(ssim(small, small), std::invalid_argument);
  const Tensor a = random_image(rng, {1, 16, 16});
  const Tensor b = random_image(rng, {1, 16, 17});
  EXPECT_THROW(ssim(a, b), ShapeError);
}

TEST(Dihedral, TransformsInvertExactly) {
  Rng rng(7);
  const Tensor x = random_image(rng, {2, 3, 5, 8});
  EXPECT_EQ(detail::rot90(detail::rot90(x, 1), 3).data(), x.data());
  EXPECT_EQ(detail::rot90(detail::rot90(x, 2), 2).data(), x.data());
  EXPECT_EQ(detail::hflip(detail::hflip(x)).data(), x.data());
  EXPECT_EQ(detail::rot90(x, 0).data(), x.data());
  // A quarter turn swaps the spatial dims.
  EXPECT_EQ(detail::rot90(x, 1).shape(), (Shape{2, 3, 8, 5}));
}

TEST(Ensemble, IdentityModelPassesThrough) {
  Rng rng(9);
  const Tensor x = random_image(rng, {1, 3, 8, 8});
  const Tensor y = self_ensemble([](const Tensor& t) { return t; }, x);
  ASSERT_EQ(y.shape(), x.shape());
  for (int i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-12);
}

TEST(Ensemble, EquivariantModelGainsNothing) {
  // A 1x1 convolution commutes with every dihedral transform, so ensembling
  // must reproduce the single pass.
  Rng rng(11);
  const Tensor w = Tensor::randn(rng, {3, 3, 1, 1});
  const Tensor b = Tensor::randn(rng, {3});
  const auto model = [&](const Tensor& t) { return conv2d(t, w, b, 1, 0); };
  const Tensor x = random_image(rng, {1, 3, 10, 10});
  const Tensor single = model(x);
  const Tensor ens = self_ensemble(model, x);
  for (int i = 0; i < single.size(); ++i)
    EXPECT_NEAR(ens.data()[i], single.data()[i], 1e-12);
}

TEST(Ensemble, AveragesTheEightTransforms) {
  // A horizontally asymmetric model: shift-left via an off-center 3x3 tap.
  std::vector<double> wv(9, 0.0);
  wv[5] = 1.0;  // kernel position (1,2)
  const Tensor w = Tensor::from_data({1, 1, 3, 3}, std::move(wv));
  Rng rng(13);
  const Tensor x = random_image(rng, {1, 1, 12, 12});
  const auto shifted = [&](const Tensor& t) { return conv2d(t, w, Tensor(), 1, 1); };
  const Tensor ens = self_ensemble(shifted, x);
  // Manual average over the eight conjugated passes.
  Tensor acc;
  for (int flip = 0; flip < 2; ++flip)
    for (int k = 0; k < 4; ++k) {
      Tensor in = detail::rot90(flip ? detail::hflip(x) : x, k);
      Tensor y = detail::rot90(shifted(in), 4 - k);
      if (flip) y = detail::hflip(y);
      acc = acc.defined() ? add(acc, y) : y;
    }
  const Tensor manual = scale(acc, 0.125);
  EXPECT_EQ(ens.data(), manual.data());
  // And it differs from the raw single pass for this asymmetric model.
  const Tensor single = shifted(x);
  double diff = 0.0;
  for (int i = 0; i < single.size(); ++i) diff += std::abs(single.data()[i] - ens.data()[i]);
  EXPECT_GT(diff, 1e-3);
}

TEST(Evaluate, AggregatesAndValidates) {
  DataConfig cfg;
  cfg.count = 4;
  cfg.sigma = 0.0;
  cfg.seed = 31;
  const auto clean_set = generate_synthetic_set(cfg);
  const auto identity = [](const Tensor& t) { return t; };
  const EvalResult r = evaluate(identity, clean_set);
  EXPECT_EQ(r.count, 4);
  EXPECT_EQ(r.psnr, 100.0);  // noisy == clean, so the identity is perfect
  EXPECT_EQ(r.ssim, 1.0);

  cfg.sigma = 0.1;
  const auto noisy_set = generate_synthetic_set(cfg);
  const EvalResult rn = evaluate(identity, noisy_set);
  EXPECT_LT(rn.psnr, 30.0);
  EXPECT_GT(rn.psnr, 10.0);
  EXPECT_LT(rn.ssim, 1.0);
  // Ensembling an identity model changes nothing.
  const EvalResult re = evaluate(identity, noisy_set, /*use_ensemble=*/true);
  EXPECT_NEAR(re.psnr, rn.psnr, 1e-9);

  EXPECT_THROW(evaluate(identity, {}), std::invalid_argument);
}
