#pragma once

// Impulse-response probes for image-to-image operators: local point spread function, local linearity,
// and ROI SNR gain.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "complex_image.hpp"

namespace imformer {

using ImageOperator = std::function<ComplexImage(ComplexImage const &)>;

/// Per-frame separable Gaussian blur over (h, w) with a normalised kernel of the given radius and zero
/// padding at the borders.
inline ImageOperator gaussian_blur(double sigma, int radius = 4)
{
  if (!(sigma > 0) || radius < 1) { throw std::invalid_argument("gaussian_blur needs sigma > 0 and radius >= 1"); }
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) { sum += k[i + radius] = std::exp(-i * i / (2 * sigma * sigma)); }
  for (auto &v : k) { v /= sum; }
  return [k, radius](ComplexImage const &x) {
    ComplexImage tmp = x, out = x;
    for (Index t = 0; t < x.frames; ++t) {
      for (Index h = 0; h < x.height; ++h) {
        for (Index w = 0; w < x.width; ++w) {
          Complex s{};
          for (int d = std::max<Index>(-radius, -w); d <= radius && w + d < x.width; ++d) {
            s += k[d + radius] * x.at(t, h, w + d);
          }
          tmp.at(t, h, w) = s;
        }
      }
      for (Index h = 0; h < x.height; ++h) {
        for (Index w = 0; w < x.width; ++w) {
          Complex s{};
          for (int d = std::max<Index>(-radius, -h); d <= radius && h + d < x.height; ++d) {
            s += k[d + radius] * tmp.at(t, h + d, w);
          }
          out.at(t, h, w) = s;
        }
      }
    }
    return out;
  };
}

inline constexpr double kDefaultProbeEpsilon = 5.0;
inline constexpr Index kProfileHalfWidth = 4; // 9-sample profiles

struct ProbePoint
{
  Index t = 0, h = 0, w = 0;
  double epsilon = kDefaultProbeEpsilon;
};

/// Width of a least-squares Gaussian A exp(-x^2 / 2 s^2) fitted to the piecewise-linear interpolant of
/// samples at integer offsets (continuous L2 over the sampled span). Returns s.
inline double fit_gaussian_sigma(std::vector<double> const &offsets, std::vector<double> const &values)
{
  if (offsets.size() != values.size() || offsets.size() < 2) {
    throw std::invalid_argument("fit_gaussian_sigma needs at least two samples");
  }
  constexpr int kSub = 64;
  std::vector<double> xs, fs, wq;
  for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
    double const dx = (offsets[i + 1] - offsets[i]) / kSub;
    for (int j = 0; j < kSub; ++j) {
      double const a = double(j) / kSub;
      xs.push_back(offsets[i] + j * dx);
      fs.push_back((1 - a) * values[i] + a * values[i + 1]);
      wq.push_back(j == 0 ? (i == 0 ? dx / 2 : dx) : dx);
    }
  }
  xs.push_back(offsets.back());
  fs.push_back(values.back());
  wq.push_back((offsets.back() - offsets[offsets.size() - 2]) / kSub / 2);

  // Negative explained energy (f.g)^2 / (g.g); minimising it is the LS fit with A eliminated.
  auto cost = [&](double log_s) {
    double const s = std::exp(log_s), k = 1.0 / (2 * s * s);
    double fg = 0, gg = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double const g = std::exp(-xs[i] * xs[i] * k);
      fg += wq[i] * fs[i] * g;
      gg += wq[i] * g * g;
    }
    return -fg * fg / gg;
  };
  double const lo = std::log(0.05), hi = std::log(20.0);
  constexpr int kScan = 240;
  int best = 0;
  double best_cost = cost(lo);
  for (int i = 1; i <= kScan; ++i) {
    double const c = cost(lo + (hi - lo) * i / kScan);
    if (c < best_cost) {
      best_cost = c;
      best = i;
    }
  }
  double a = lo + (hi - lo) * std::max(best - 1, 0) / kScan;
  double b = lo + (hi - lo) * std::min(best + 1, kScan) / kScan;
  double const phi = (std::sqrt(5.0) - 1) / 2;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = cost(c), fd = cost(d);
  for (int it = 0; it < 100 && b - a > 1e-13; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = cost(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = cost(d);
    }
  }
  return std::exp((a + b) / 2);
}

struct LpsfResult
{
  double h = NAN, w = NAN, t = NAN; // NAN when flagged
  bool flagged = false;
  std::string reason;
};

namespace detail {

inline void check_point(ComplexImage const &y, ProbePoint const &p)
{
  if (p.t < 0 || p.t >= y.frames || p.h < 0 || p.h >= y.height || p.w < 0 || p.w >= y.width) {
    throw std::invalid_argument("probe point (" + std::to_string(p.t) + "," + std::to_string(p.h) + "," +
                                std::to_string(p.w) + ") outside the image");
  }
  if (!(p.epsilon > 0)) { throw std::invalid_argument("probe epsilon must be > 0"); }
  auto const m = kProfileHalfWidth;
  if (p.h < m || p.h >= y.height - m || p.w < m || p.w >= y.width - m) {
    throw std::invalid_argument("probe point needs a spatial margin of " + std::to_string(m) + " pixels");
  }
}

inline ComplexImage impulse_response(ImageOperator const &op, ComplexImage const &y, ComplexImage const &base,
                                     ProbePoint const &p, double scale)
{
  ComplexImage yp = y;
  yp.at(p.t, p.h, p.w) += scale * p.epsilon;
  ComplexImage r = op(yp);
  if (!r.same_dims(base)) { throw std::invalid_argument("operator changed the image dimensions"); }
  for (std::size_t i = 0; i < r.values.size(); ++i) { r.values[i] -= base.values[i]; }
  return r;
}

// |r| along one axis through p, at offsets -4..4 that fall inside the image.
inline void profile(ComplexImage const &r, ProbePoint const &p, int axis, std::vector<double> &off, std::vector<double> &val)
{
  off.clear();
  val.clear();
  Index const n = axis == 0 ? r.frames : axis == 1 ? r.height : r.width;
  Index const c = axis == 0 ? p.t : axis == 1 ? p.h : p.w;
  for (Index k = -kProfileHalfWidth; k <= kProfileHalfWidth; ++k) {
    if (c + k < 0 || c + k >= n) { continue; }
    Index t = p.t, h = p.h, w = p.w;
    (axis == 0 ? t : axis == 1 ? h : w) += k;
    off.push_back(double(k));
    val.push_back(std::abs(r.at(t, h, w)));
  }
}

} // namespace detail

/// Temporal profiles are truncated at the series ends; spatial axes require a full 9-sample window.
/// LPSF per axis: fitted width of |op(y + eps d_p) - op(y)| divided by the same fit on a pristine impulse
/// sampled with the same in-image mask. Identity scores exactly 1.
inline LpsfResult local_psf(ImageOperator const &op, ComplexImage const &y, ProbePoint const &p,
                            std::optional<ComplexImage> const &base = std::nullopt)
{
  detail::check_point(y, p);
  ComplexImage const b = base ? *base : op(y);
  ComplexImage const r = detail::impulse_response(op, y, b, p, 1.0);
  LpsfResult res;
  std::vector<double> off, val;
  double const floor = 1e-3 * p.epsilon;
  double peak = 0;
  for (auto const &v : r.values) { peak = std::max(peak, std::abs(v)); }
  if (peak < floor) {
    res.flagged = true;
    res.reason = "response below floor";
    return res;
  }
  for (int axis = 0; axis < 3; ++axis) {
    detail::profile(r, p, axis, off, val);
    if (off.size() < 2) {
      (axis == 0 ? res.t : axis == 1 ? res.h : res.w) = 1.0; // a lone sample cannot be wider than the impulse
      continue;
    }
    double vmax = 0;
    for (double v : val) { vmax = std::max(vmax, v); }
    if (vmax < floor) {
      res.flagged = true;
      res.reason = "axis profile below floor";
      continue;
    }
    std::vector<double> delta(off.size());
    for (std::size_t i = 0; i < off.size(); ++i) { delta[i] = off[i] == 0 ? 1.0 : 0.0; }
    double const ratio = fit_gaussian_sigma(off, val) / fit_gaussian_sigma(off, delta);
    (axis == 0 ? res.t : axis == 1 ? res.h : res.w) = ratio;
  }
  return res;
}

struct LinearityResult
{
  double ratio = NAN;
  bool flagged = false;
};

/// <r2, r1> / (2 <r1, r1>) with r_k the response to k * eps at p; 1 for linear operators.
inline LinearityResult local_linearity_ratio(ImageOperator const &op, ComplexImage const &y, ProbePoint const &p,
                                            std::optional<ComplexImage> const &base = std::nullopt)
{
  detail::check_point(y, p);
  ComplexImage const b = base ? *base : op(y);
  auto const r1 = detail::impulse_response(op, y, b, p, 1.0);
  auto const r2 = detail::impulse_response(op, y, b, p, 2.0);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < r1.values.size(); ++i) {
    num += (r2.values[i] * std::conj(r1.values[i])).real();
    den += std::norm(r1.values[i]);
  }
  LinearityResult res;
  double const floor = std::pow(1e-3 * p.epsilon, 2);
  if (den < floor) {
    res.flagged = true;
    return res;
  }
  res.ratio = num / (2 * den);
  return res;
}

/// SNR = mean |after| over the ROI / std |.| over the noise region, per image; returns 100 (SNR_after / SNR_before - 1).
inline double roi_snr(ComplexImage const &img, std::vector<bool> const &roi, std::vector<bool> const &noise)
{
  auto const n = static_cast<std::size_t>(img.size());
  if (roi.size() != n || noise.size() != n) { throw std::invalid_argument("roi_snr: mask size does not match image"); }
  double sum = 0, nsum = 0, nsq = 0;
  std::size_t cr = 0, cn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double const m = std::abs(img.values[i]);
    if (roi[i]) {
      sum += m;
      ++cr;
    }
    if (noise[i]) {
      nsum += m;
      nsq += m * m;
      ++cn;
    }
  }
  if (cr == 0) { throw std::invalid_argument("roi_snr: empty ROI mask"); }
  if (cn < 2) { throw std::invalid_argument("roi_snr: noise mask needs at least two pixels"); }
  double const mean_n = nsum / double(cn);
  double const var = std::max(0.0, (nsq - double(cn) * mean_n * mean_n) / double(cn - 1));
  if (!(var > 0)) { throw std::invalid_argument("roi_snr: noise region has zero spread"); }
  return (sum / double(cr)) / std::sqrt(var);
}

inline double roi_snr_gain(ComplexImage const &before, ComplexImage const &after, std::vector<bool> const &roi,
                           std::vector<bool> const &noise)
{
  if (!before.same_dims(after)) { throw std::invalid_argument("roi_snr_gain: dimension mismatch"); }
  return 100.0 * (roi_snr(after, roi, noise) / roi_snr(before, roi, noise) - 1.0);
}

struct PointRecord
{
  ProbePoint point;
  LpsfResult lpsf;
  LinearityResult linearity;
  bool flagged() const { return lpsf.flagged || linearity.flagged; }
};

struct Summary
{
  double mean = NAN, std = NAN;
  Index n = 0;
};

struct ProbeReport
{
  std::vector<PointRecord> points;
  Summary lpsf_h, lpsf_w, lpsf_t, linearity;
  Index requested = 0, reported = 0, excluded = 0;
};

namespace detail {

inline Summary summarise(std::vector<double> const &v)
{
  Summary s;
  s.n = static_cast<Index>(v.size());
  if (v.empty()) { return s; }
  double m = 0;
  for (double x : v) { m += x; }
  m /= double(v.size());
  double q = 0;
  for (double x : v) { q += (x - m) * (x - m); }
  s.mean = m;
  s.std = v.size() > 1 ? std::sqrt(q / double(v.size() - 1)) : 0.0;
  return s;
}

} // namespace detail

class CalibrationError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Probes every point; flagged points are excluded from the summaries and counted.
inline ProbeReport probe_operator(ImageOperator const &op, ComplexImage const &y, std::vector<ProbePoint> const &points)
{
  ProbeReport rep;
  rep.requested = static_cast<Index>(points.size());
  ComplexImage const base = op(y);
  std::vector<double> hs, ws, ts, ls;
  for (auto const &p : points) {
    PointRecord rec{p, local_psf(op, y, p, base), local_linearity_ratio(op, y, p, base)};
    if (rec.flagged()) {
      ++rep.excluded;
    } else {
      ++rep.reported;
      if (!std::isnan(rec.lpsf.h)) { hs.push_back(rec.lpsf.h); }
      if (!std::isnan(rec.lpsf.w)) { ws.push_back(rec.lpsf.w); }
      if (!std::isnan(rec.lpsf.t)) { ts.push_back(rec.lpsf.t); }
      ls.push_back(rec.linearity.ratio);
    }
    rep.points.push_back(std::move(rec));
  }
  rep.lpsf_h = detail::summarise(hs);
  rep.lpsf_w = detail::summarise(ws);
  rep.lpsf_t = detail::summarise(ts);
  rep.linearity = detail::summarise(ls);
  return rep;
}

/// Identity calibration on the same image and points; throws CalibrationError when it drifts by more than 1%.
inline ProbeReport identity_self_test(ComplexImage const &y, std::vector<ProbePoint> const &points)
{
  auto rep = probe_operator([](ComplexImage const &x) { return x; }, y, points);
  for (auto const &r : rep.points) {
    for (double v : {r.lpsf.h, r.lpsf.w, r.lpsf.t, r.linearity.ratio}) {
      if (!std::isnan(v) && std::abs(v - 1.0) > 0.01) {
        throw CalibrationError("identity probe self-test failed at (" + std::to_string(r.point.t) + "," +
                               std::to_string(r.point.h) + "," + std::to_string(r.point.w) + "): " + std::to_string(v));
      }
    }
  }
  return rep;
}

inline std::string probe_csv(ProbeReport const &rep)
{
  std::string s = "t,h,w,epsilon,lpsf_h,lpsf_w,lpsf_t,linearity,flagged,reason\n";
  char buf[256];
  for (auto const &r : rep.points) {
    std::snprintf(buf, sizeof buf, "%lld,%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%d,", (long long)r.point.t,
                  (long long)r.point.h, (long long)r.point.w, r.point.epsilon, r.lpsf.h, r.lpsf.w, r.lpsf.t,
                  r.linearity.ratio, r.flagged() ? 1 : 0);
    s += buf;
    s += r.linearity.flagged && r.lpsf.reason.empty() ? "linearity below floor" : r.lpsf.reason;
    s += '\n';
  }
  return s;
}

inline nlohmann::json probe_json(ProbeReport const &rep)
{
  auto sj = [](Summary const &s) {
    nlohmann::json j;
    j["mean"] = std::isnan(s.mean) ? nlohmann::json(nullptr) : nlohmann::json(s.mean);
    j["std"] = std::isnan(s.std) ? nlohmann::json(nullptr) : nlohmann::json(s.std);
    j["n"] = s.n;
    return j;
  };
  return {{"lpsf_readout", sj(rep.lpsf_w)}, {"lpsf_phase", sj(rep.lpsf_h)}, {"lpsf_temporal", sj(rep.lpsf_t)},
          {"linearity_ratio", sj(rep.linearity)}, {"requested", rep.requested}, {"reported", rep.reported},
          {"excluded", rep.excluded}};
}

} // namespace imformer
