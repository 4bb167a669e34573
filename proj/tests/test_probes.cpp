#include <gtest/gtest.h>

#include <random>

#include "frozen_oracles.hpp"
#include "imformer/probes.hpp"

using namespace imformer;
using imformer::testing::kBlurSigma1Ratio;
using imformer::testing::kBox3Ratio;

namespace {

ComplexImage random_image(Index T, Index H, Index W, std::uint64_t seed, double scale = 100)
{
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, scale);
  ComplexImage img(T, H, W);
  for (auto &v : img.values) { v = {n(rng), n(rng)}; }
  return img;
}

std::vector<double> gaussian_kernel(double sigma, int radius)
{
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) { s += k[i + radius] = std::exp(-i * i / (2 * sigma * sigma)); }
  for (auto &v : k) { v /= s; }
  return k;
}

ImageOperator spatial_blur(double sigma)
{
  auto const k = gaussian_kernel(sigma, 4);
  return [k](ComplexImage const &x) {
    int const r = 4;
    ComplexImage tmp = x, out = x;
    for (Index t = 0; t < x.frames; ++t) {
      for (Index h = 0; h < x.height; ++h) {
        for (Index w = 0; w < x.width; ++w) {
          Complex s{};
          for (int d = -r; d <= r; ++d) {
            if (w + d >= 0 && w + d < x.width) { s += k[d + r] * x.at(t, h, w + d); }
          }
          tmp.at(t, h, w) = s;
        }
      }
      for (Index h = 0; h < x.height; ++h) {
        for (Index w = 0; w < x.width; ++w) {
          Complex s{};
          for (int d = -r; d <= r; ++d) {
            if (h + d >= 0 && h + d < x.height) { s += k[d + r] * tmp.at(t, h + d, w); }
          }
          out.at(t, h, w) = s;
        }
      }
    }
    return out;
  };
}

ComplexImage temporal_box(ComplexImage const &x)
{
  ComplexImage out = x;
  for (Index t = 0; t < x.frames; ++t) {
    for (Index i = 0; i < x.plane(); ++i) {
      Complex s{};
      int n = 0;
      for (Index d = -1; d <= 1; ++d) {
        if (t + d >= 0 && t + d < x.frames) {
          s += x.frame(t + d)[static_cast<std::size_t>(i)];
          ++n;
        }
      }
      out.frame(t)[static_cast<std::size_t>(i)] = s / double(n);
    }
  }
  return out;
}

ComplexImage identity(ComplexImage const &x) { return x; }

} // namespace

TEST(Blur, LibraryOperatorMatchesReference)
{
  auto const y = random_image(2, 12, 13, 5);
  auto const a = gaussian_blur(1.3)(y), b = spatial_blur(1.3)(y);
  for (std::size_t i = 0; i < a.values.size(); ++i) { EXPECT_NEAR(std::abs(a.values[i] - b.values[i]), 0.0, 1e-10); }
  EXPECT_THROW(gaussian_blur(0.0), std::invalid_argument);
}

TEST(Probes, IdentityScoresOneOnEveryAxis)
{
  auto const y = random_image(9, 24, 24, 1);
  for (ProbePoint p : {ProbePoint{4, 12, 12}, ProbePoint{0, 4, 19}, ProbePoint{8, 10, 5}}) {
    auto const r = local_psf(identity, y, p);
    EXPECT_FALSE(r.flagged);
    EXPECT_NEAR(r.h, 1.0, 1e-6);
    EXPECT_NEAR(r.w, 1.0, 1e-6);
    EXPECT_NEAR(r.t, 1.0, 1e-6);
    EXPECT_DOUBLE_EQ(local_linearity_ratio(identity, y, p).ratio, 1.0);
  }
}

TEST(Probes, SingleFrameTemporalAxisIsOne)
{
  auto const y = random_image(1, 16, 16, 2);
  auto const r = local_psf(spatial_blur(1.0), y, {0, 8, 8});
  EXPECT_DOUBLE_EQ(r.t, 1.0);
}

TEST(Probes, SpatialBlurMatchesFrozenOracle)
{
  auto const y = random_image(3, 32, 32, 3);
  auto const r = local_psf(spatial_blur(1.0), y, {1, 16, 15});
  EXPECT_FALSE(r.flagged);
  EXPECT_NEAR(r.h / kBlurSigma1Ratio, 1.0, 0.02);
  EXPECT_NEAR(r.w / kBlurSigma1Ratio, 1.0, 0.02);
  EXPECT_NEAR(r.t, 1.0, 1e-6);
}

TEST(Probes, TemporalBoxMatchesFrozenOracle)
{
  auto const y = random_image(12, 16, 16, 4);
  auto const r = local_psf(temporal_box, y, {6, 8, 8});
  EXPECT_NEAR(r.t / kBox3Ratio, 1.0, 0.02);
  EXPECT_NEAR(r.h, 1.0, 1e-6);
  EXPECT_NEAR(r.w, 1.0, 1e-6);
}

TEST(Probes, FitRecoversSampledGaussianWidth)
{
  std::vector<double> x, v;
  for (int i = -4; i <= 4; ++i) {
    x.push_back(i);
    v.push_back(3.0 * std::exp(-i * i / (2 * 2.0 * 2.0)));
  }
  EXPECT_NEAR(fit_gaussian_sigma(x, v), 2.0, 0.05); // interpolation widens slightly
}

TEST(Probes, ConvolutionIsExactlyLinear)
{
  auto const y = random_image(4, 20, 20, 5);
  for (double sigma : {0.7, 1.0, 2.0}) {
    auto const l = local_linearity_ratio(spatial_blur(sigma), y, {2, 10, 9});
    EXPECT_FALSE(l.flagged);
    EXPECT_NEAR(l.ratio, 1.0, 1e-9);
  }
  EXPECT_NEAR(local_linearity_ratio(temporal_box, y, {1, 10, 10}).ratio, 1.0, 1e-9);
}

TEST(Probes, SquareOperatorClosedForm)
{
  ImageOperator sq = [](ComplexImage const &x) {
    ComplexImage o = x;
    for (auto &v : o.values) { v *= v; }
    return o;
  };
  ComplexImage y(1, 16, 16);
  for (double base : {10.0, 2.0, 0.0, -1.0}) {
    y.at(0, 8, 8) = base;
    double const eps = 5.0;
    double const expected = (2 * base + 2 * eps) / (2 * base + eps);
    EXPECT_NEAR(local_linearity_ratio(sq, y, {0, 8, 8, eps}).ratio, expected, 1e-12) << base;
  }
  // Complex base: r2 = 2 r1 + 2 eps^2, so ratio = 1 + eps^2 Re(r1) / |r1|^2.
  Complex const z{3.0, -4.0};
  y.at(0, 8, 8) = z;
  Complex const r1 = (z + 5.0) * (z + 5.0) - z * z;
  EXPECT_NEAR(local_linearity_ratio(sq, y, {0, 8, 8, 5.0}).ratio, 1 + 25 * r1.real() / std::norm(r1), 1e-12);
}

TEST(Probes, HalvingEpsilonOnLinearOperators)
{
  auto const y = random_image(8, 24, 24, 6);
  for (auto const &op : {spatial_blur(1.0), ImageOperator(temporal_box), spatial_blur(1.6)}) {
    auto const a = local_psf(op, y, {4, 12, 11, 5.0});
    auto const b = local_psf(op, y, {4, 12, 11, 2.5});
    EXPECT_NEAR(a.h / b.h, 1.0, 0.01);
    EXPECT_NEAR(a.w / b.w, 1.0, 0.01);
    EXPECT_NEAR(a.t / b.t, 1.0, 0.01);
  }
}

TEST(Probes, PointsNeedSpatialMargin)
{
  auto const y = random_image(2, 16, 16, 7);
  EXPECT_THROW(local_psf(identity, y, {0, 3, 8}), std::invalid_argument);
  EXPECT_THROW(local_psf(identity, y, {0, 8, 12}), std::invalid_argument);
  EXPECT_THROW(local_psf(identity, y, {2, 8, 8}), std::invalid_argument);
  EXPECT_THROW(local_psf(identity, y, {0, 8, 8, 0.0}), std::invalid_argument);
  EXPECT_NO_THROW(local_psf(identity, y, {1, 4, 11}));
}

TEST(Probes, DeadOperatorIsFlaggedAndCounted)
{
  auto const y = random_image(2, 16, 16, 8);
  ImageOperator dead = [](ComplexImage const &x) { return ComplexImage(x.frames, x.height, x.width); };
  // Responds only in the left half of the image.
  ImageOperator half = [](ComplexImage const &x) {
    ComplexImage o = x;
    for (Index t = 0; t < x.frames; ++t) {
      for (Index h = 0; h < x.height; ++h) {
        for (Index w = x.width / 2; w < x.width; ++w) { o.at(t, h, w) = 0; }
      }
    }
    return o;
  };
  std::vector<ProbePoint> pts{{0, 8, 4}, {1, 8, 5}, {0, 8, 10}, {1, 6, 11}, {0, 9, 6}};
  auto const rd = probe_operator(dead, y, pts);
  EXPECT_EQ(rd.requested, 5);
  EXPECT_EQ(rd.excluded, 5);
  EXPECT_EQ(rd.reported, 0);
  EXPECT_TRUE(std::isnan(rd.lpsf_h.mean));

  auto const rh = probe_operator(half, y, pts);
  EXPECT_EQ(rh.excluded, 2);
  EXPECT_EQ(rh.reported, 3);
  EXPECT_EQ(rh.excluded + rh.reported, rh.requested);
  EXPECT_EQ(rh.lpsf_h.n, 3);
}

TEST(Probes, ReportIsDeterministic)
{
  auto const y = random_image(6, 20, 20, 9);
  std::vector<ProbePoint> pts{{1, 6, 6}, {3, 10, 12}, {5, 14, 7}};
  auto const a = probe_operator(spatial_blur(1.2), y, pts);
  auto const b = probe_operator(spatial_blur(1.2), y, pts);
  EXPECT_EQ(probe_csv(a), probe_csv(b));
  EXPECT_EQ(probe_json(a).dump(), probe_json(b).dump());
}

TEST(Probes, IdentitySelfTestPassesAndGuards)
{
  auto const y = random_image(5, 16, 16, 10);
  std::vector<ProbePoint> pts{{0, 5, 5}, {2, 8, 8}, {4, 10, 6}};
  auto const rep = identity_self_test(y, pts);
  EXPECT_NEAR(rep.lpsf_h.mean, 1.0, 0.01);
  EXPECT_NEAR(rep.lpsf_t.mean, 1.0, 0.01);
  EXPECT_NEAR(rep.linearity.mean, 1.0, 1e-6);
  EXPECT_EQ(rep.reported, 3);
}

TEST(Probes, CsvAndJsonLayout)
{
  auto const y = random_image(3, 16, 16, 11);
  auto const rep = probe_operator(spatial_blur(1.0), y, {{1, 8, 8}, {0, 7, 9}});
  auto const csv = probe_csv(rep);
  EXPECT_EQ(csv.rfind("t,h,w,epsilon,lpsf_h,lpsf_w,lpsf_t,linearity,flagged,reason\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  auto const j = probe_json(rep);
  EXPECT_EQ(j["requested"], 2);
  EXPECT_EQ(j["reported"], 2);
  EXPECT_EQ(j["excluded"], 0);
  EXPECT_NEAR(j["lpsf_readout"]["mean"].get<double>() / kBlurSigma1Ratio, 1.0, 0.02);
  EXPECT_NEAR(j["linearity_ratio"]["mean"].get<double>(), 1.0, 1e-9);
  EXPECT_EQ(j["lpsf_temporal"]["n"], 2);
}

namespace {

struct RoiScene
{
  ComplexImage clean, noisy;
  std::vector<bool> roi, noise;
};

RoiScene roi_scene(std::uint64_t seed)
{
  RoiScene s{ComplexImage(2, 32, 32), ComplexImage(2, 32, 32), {}, {}};
  s.roi.assign(static_cast<std::size_t>(s.clean.size()), false);
  s.noise = s.roi;
  for (Index t = 0; t < 2; ++t) {
    for (Index h = 0; h < 32; ++h) {
      for (Index w = 0; w < 32; ++w) {
        auto const i = static_cast<std::size_t>((t * 32 + h) * 32 + w);
        bool const in = (h - 16) * (h - 16) + (w - 16) * (w - 16) < 36;
        s.clean.values[i] = in ? Complex{40.0, 10.0} : Complex{};
        s.roi[i] = in;
        s.noise[i] = h < 6;
      }
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, std::sqrt(0.5));
  s.noisy = s.clean;
  for (auto &v : s.noisy.values) { v += Complex{n(rng), n(rng)}; }
  return s;
}

} // namespace

TEST(Probes, RoiGainIdentityIsZero)
{
  auto const s = roi_scene(1);
  EXPECT_DOUBLE_EQ(roi_snr_gain(s.noisy, s.noisy, s.roi, s.noise), 0.0);
}

TEST(Probes, RoiGainDoubledSignalIsHundredPercent)
{
  auto const s = roi_scene(2);
  // Separate signal and noise so the ROI mean doubles while the noise region is untouched.
  ComplexImage before = s.clean, after = s.clean;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  for (std::size_t i = 0; i < before.values.size(); ++i) {
    after.values[i] *= 2.0;
    if (s.noise[i]) {
      Complex const e{n(rng), n(rng)};
      before.values[i] += e;
      after.values[i] += e;
    }
  }
  EXPECT_NEAR(roi_snr_gain(before, after, s.roi, s.noise), 100.0, 1e-9);
}

TEST(Probes, RoiGainAgainstPartialOracle)
{
  auto const s = roi_scene(4);
  // Keep a third of the noise: a partial denoiser with known output.
  ComplexImage after = s.noisy;
  for (std::size_t i = 0; i < after.values.size(); ++i) {
    after.values[i] = s.clean.values[i] + (s.noisy.values[i] - s.clean.values[i]) / 3.0;
  }
  auto direct = [&](ComplexImage const &img) {
    double ms = 0, ns = 0, nq = 0;
    int cr = 0, cn = 0;
    for (std::size_t i = 0; i < img.values.size(); ++i) {
      double const m = std::abs(img.values[i]);
      if (s.roi[i]) { ms += m, ++cr; }
      if (s.noise[i]) { ns += m, nq += m * m, ++cn; }
    }
    double const mean = ns / cn;
    return (ms / cr) / std::sqrt((nq - cn * mean * mean) / (cn - 1));
  };
  double const expected = 100 * (direct(after) / direct(s.noisy) - 1);
  EXPECT_NEAR(roi_snr_gain(s.noisy, after, s.roi, s.noise), expected, 1e-9);
  EXPECT_GT(expected, 100.0);
}

TEST(Probes, RoiGainRejectsBadMasks)
{
  auto const s = roi_scene(5);
  std::vector<bool> empty(s.roi.size(), false);
  EXPECT_THROW(roi_snr_gain(s.noisy, s.noisy, empty, s.noise), std::invalid_argument);
  EXPECT_THROW(roi_snr_gain(s.noisy, s.noisy, s.roi, empty), std::invalid_argument);
  EXPECT_THROW(roi_snr_gain(s.noisy, s.clean, s.roi, s.noise), std::invalid_argument); // noiseless region
  EXPECT_THROW(roi_snr_gain(s.noisy, s.noisy, std::vector<bool>(3), s.noise), std::invalid_argument);
}
