#include <gtest/gtest.h>

#include "imformer/noise.hpp"

using namespace imformer;

namespace {

double complex_std(ComplexImage const &img)
{
  double acc = 0;
  for (auto const &v : img.values) { acc += std::norm(v); }
  return std::sqrt(acc / static_cast<double>(img.values.size()));
}

double mean_of(std::vector<double> const &v)
{
  double s = 0;
  for (double x : v) { s += x; }
  return s / static_cast<double>(v.size());
}

} // namespace

TEST(GFactor, ZeroRoughnessIsConstantAtTargetMean)
{
  auto g = synth_gfactor(32, 32, 2, 0.0, 1);
  for (double v : g.values) { EXPECT_DOUBLE_EQ(v, 1.35); }
}

TEST(GFactor, MinimumIsExactlyOne)
{
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto g = synth_gfactor(48, 40, 2 + static_cast<int>(seed % 5), 3.0, seed);
    EXPECT_EQ(*std::min_element(g.values.begin(), g.values.end()), 1.0) << "seed " << seed;
  }
}

TEST(GFactor, MeanFollowsAccelerationConvention)
{
  double previous = 1.0;
  for (int R = 2; R <= 6; ++R) {
    auto g = synth_gfactor(64, 64, R, 2.5, 17);
    double const m = mean_of(g.values);
    double const target = 1.0 + 0.35 * (R - 1);
    EXPECT_NEAR(m, target, 0.2 * target);
    EXPECT_GT(m, previous);
    previous = m;
  }
}

TEST(GFactor, DeterministicPerSeed)
{
  EXPECT_EQ(synth_gfactor(32, 32, 4, 2.0, 99).values, synth_gfactor(32, 32, 4, 2.0, 99).values);
  EXPECT_NE(synth_gfactor(32, 32, 4, 2.0, 99).values, synth_gfactor(32, 32, 4, 2.0, 100).values);
}

TEST(GFactor, InvalidAccelerationRejected)
{
  EXPECT_THROW(synth_gfactor(32, 32, 1, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(synth_gfactor(32, 32, 7, 1.0, 0), std::invalid_argument);
}

TEST(GFactor, SmoothnessBoundedByRoughness)
{
  // A Gaussian-shaped spectrum of width r cycles/FOV keeps the discrete Laplacian below
  // (2 pi * 4r / N)^2 times the map's dynamic range.
  for (double r : {1.0, 2.0, 4.0}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto g = synth_gfactor(64, 64, 4, r, seed);
      auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
      double const cap = std::pow(2 * M_PI * 4 * r / 64.0, 2) * (*hi - *lo);
      EXPECT_LE(max_laplacian(g), cap) << "r " << r << " seed " << seed;
    }
  }
}

TEST(KSpaceFilter, FlatWindowRoundTripsThroughFft)
{
  ComplexImage img(2, 16, 24);
  Rng rng(4);
  std::normal_distribution<double> n;
  for (auto &v : img.values) { v = {n(rng), n(rng)}; }
  auto const flat = KSpaceFilter::hann(0.0);
  auto out = apply_kspace_filter_snr_unit(img, flat);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    EXPECT_LE(std::abs(out.values[i] - img.values[i]), 1e-10 * std::abs(img.values[i]) + 1e-14);
  }
}

TEST(KSpaceFilter, RenormalisationIsInverseRootMeanSquare)
{
  // A raised cosine at strength 2/3 has mean |H|^2 = 1/2 per axis, 1/4 in 2D.
  auto f = KSpaceFilter::hann(2.0 / 3.0);
  EXPECT_NEAR(kspace_filter_scale(f, 64, 32), 2.0, 1e-12);
  EXPECT_NEAR(kspace_filter_scale(KSpaceFilter::identity(), 8, 8), 1.0, 0.0);
  // Full Hann: mean w^2 = 3/8 per axis.
  EXPECT_NEAR(kspace_filter_scale(KSpaceFilter::hann(1.0), 16, 16), 1.0 / (3.0 / 8.0), 1e-12);
}

TEST(KSpaceFilter, ZeroFilterRejected)
{
  KSpaceFilter f;
  f.phase = {WindowKind::custom, 0.0, std::vector<double>(16, 0.0)};
  ComplexImage img(1, 16, 16);
  EXPECT_THROW(apply_kspace_filter_snr_unit(img, f), std::invalid_argument);
}

TEST(KSpaceFilter, HannWhiteNoiseKeepsUnitStd)
{
  auto n = make_correlated_unit_noise(16, 256, 256, KSpaceFilter::identity(), 1.0, 5);
  auto out = apply_kspace_filter_snr_unit(n, KSpaceFilter::hann(1.0));
  EXPECT_NEAR(complex_std(out), 1.0, 0.01);
}

TEST(PartialFourier, FullFractionIsIdentity)
{
  auto n = make_correlated_unit_noise(1, 16, 16, KSpaceFilter::identity(), 1.0, 3);
  auto out = apply_partial_fourier_snr_unit(n, 1.0);
  EXPECT_EQ(out.values, n.values);
}

TEST(PartialFourier, ThreeQuartersKeepsUnitStd)
{
  auto n = make_correlated_unit_noise(16, 256, 256, KSpaceFilter::identity(), 1.0, 6);
  auto out = apply_partial_fourier_snr_unit(n, 0.75);
  EXPECT_NEAR(complex_std(out), 1.0, 0.01);
  EXPECT_DOUBLE_EQ(partial_fourier_energy_fraction(0.75, 256), 0.75);
}

TEST(PartialFourier, FractionOutOfRangeRejected)
{
  ComplexImage img(1, 8, 8);
  EXPECT_THROW(apply_partial_fourier_snr_unit(img, 0.4), std::invalid_argument);
  EXPECT_THROW(apply_partial_fourier_snr_unit(img, 0.5), std::invalid_argument);
  EXPECT_THROW(apply_partial_fourier_snr_unit(img, 1.01), std::invalid_argument);
}

TEST(CorrelatedNoise, IdentityChainIsWhiteUnitNoise)
{
  auto n = make_correlated_unit_noise(16, 256, 256, KSpaceFilter::identity(), 1.0, 8);
  EXPECT_TRUE(n.snr_unit);
  EXPECT_NEAR(complex_std(n), 1.0, 0.01);
}

TEST(CorrelatedNoise, HannNoiseIsSpatiallyCorrelatedWithUnitVariance)
{
  auto n = make_correlated_unit_noise(16, 128, 128, KSpaceFilter::hann(1.0), 0.75, 9);
  EXPECT_NEAR(complex_std(n), 1.0, 0.01);
  double corr = 0;
  for (Index t = 0; t < n.frames; ++t) {
    for (Index y = 0; y < n.height; ++y) {
      for (Index x = 0; x + 1 < n.width; ++x) { corr += (n.at(t, y, x) * std::conj(n.at(t, y, x + 1))).real(); }
    }
  }
  corr /= static_cast<double>(n.frames * n.height * (n.width - 1));
  EXPECT_GT(corr, 0.1);
}

TEST(CorrelatedNoise, FramesAreIndependent)
{
  auto n = make_correlated_unit_noise(32, 128, 128, KSpaceFilter::hann(1.0), 0.75, 10);
  double corr = 0;
  Index count = 0;
  for (Index t = 0; t + 1 < n.frames; ++t) {
    for (Index i = 0; i < n.plane(); ++i) {
      corr += (n.values[t * n.plane() + i] * std::conj(n.values[(t + 1) * n.plane() + i])).real();
      ++count;
    }
  }
  EXPECT_NEAR(corr / static_cast<double>(count), 0.0, 0.01);
}

TEST(Corrupt, ZeroSigmaLeavesImageUnchanged)
{
  ComplexImage clean(2, 16, 16);
  for (std::size_t i = 0; i < clean.values.size(); ++i) { clean.values[i] = {double(i), -double(i)}; }
  NoiseSpec spec;
  spec.sigma_lo = spec.sigma_hi = 0.0;
  auto out = corrupt(clean, GFactorMap::constant(16, 16, 2.0), spec);
  EXPECT_EQ(out.noisy.values, clean.values);
  EXPECT_EQ(out.sigma, 0.0);
}

TEST(Corrupt, ConstantGScalesResidualStd)
{
  ComplexImage clean(16, 256, 256);
  NoiseSpec spec;
  spec.sigma_lo = spec.sigma_hi = 1.0;
  spec.seed = 12;
  auto out = corrupt(clean, GFactorMap::constant(256, 256, 2.0), spec);
  EXPECT_NEAR(complex_std(out.noisy), 2.0, 0.04);
}

TEST(Corrupt, ResidualStdTracksLocalGFactor)
{
  Index const T = 400, N = 64, B = 8;
  ComplexImage clean(T, N, N);
  auto g = synth_gfactor(N, N, 5, 2.0, 21);
  NoiseSpec spec;
  spec.sigma_lo = spec.sigma_hi = 1.5;
  spec.filter = KSpaceFilter::hann(0.5);
  spec.partial_fourier = 0.75;
  spec.seed = 13;
  auto out = corrupt(clean, g, spec);
  for (Index by = 0; by < N; by += B) {
    for (Index bx = 0; bx < N; bx += B) {
      double res = 0, gg = 0;
      for (Index y = by; y < by + B; ++y) {
        for (Index x = bx; x < bx + B; ++x) {
          gg += g.at(y, x) * g.at(y, x);
          for (Index t = 0; t < T; ++t) { res += std::norm(out.noisy.at(t, y, x)); }
        }
      }
      double const measured = std::sqrt(res / double(T * B * B));
      double const expected = 1.5 * std::sqrt(gg / double(B * B));
      EXPECT_NEAR(measured / expected, 1.0, 0.05) << "block " << by << "," << bx;
    }
  }
}

TEST(Corrupt, DeterministicPerSeed)
{
  ComplexImage clean(2, 32, 32);
  NoiseSpec spec;
  spec.seed = 77;
  spec.filter = KSpaceFilter::hann(0.7);
  spec.partial_fourier = 0.8;
  auto g = synth_gfactor(32, 32, 3, 2.0, 5);
  auto a = corrupt(clean, g, spec);
  auto b = corrupt(clean, g, spec);
  EXPECT_EQ(a.noisy.values, b.noisy.values);
  EXPECT_EQ(a.sigma, b.sigma);
}

TEST(Corrupt, DimensionMismatchRejected)
{
  ComplexImage clean(1, 16, 16);
  EXPECT_THROW(corrupt(clean, GFactorMap::constant(16, 8, 1.0), NoiseSpec{}), std::invalid_argument);
}

TEST(SnrUnitInvariant, EveryStageKeepsUnitStd)
{
  auto white = make_correlated_unit_noise(16, 256, 256, KSpaceFilter::identity(), 1.0, 31);
  EXPECT_NEAR(complex_std(white), 1.0, 0.01);
  auto filtered = apply_kspace_filter_snr_unit(white, KSpaceFilter::hann(1.0));
  EXPECT_NEAR(complex_std(filtered), 1.0, 0.01);
  auto chained = apply_partial_fourier_snr_unit(filtered, 0.75, KSpaceFilter::hann(1.0).phase);
  EXPECT_NEAR(complex_std(chained), 1.0, 0.01);
  auto full = make_correlated_unit_noise(16, 256, 256, KSpaceFilter::hann(1.0), 0.75, 32);
  EXPECT_NEAR(complex_std(full), 1.0, 0.01);
}
