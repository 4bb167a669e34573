#pragma once

// Unitary 2D FFT (1/sqrt(N) in both directions) backed by FFTW.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <stdexcept>
#include <utility>

#include "tensor.hpp"

namespace imformer {

using Complex = std::complex<double>;

class Fft2d
{
public:
  Fft2d(Index height, Index width)
    : h_(height)
    , w_(width)
    , buf_(static_cast<fftw_complex *>(fftw_malloc(sizeof(fftw_complex) * static_cast<std::size_t>(height * width))))
  {
    if (!buf_) { throw std::bad_alloc(); }
    std::lock_guard lock(planner_mutex());
    auto &cache = plans();
    auto key = std::make_pair(h_, w_);
    auto it = cache.find(key);
    if (it == cache.end()) {
      // Planned in place on a scratch array; executed through the new-array interface on buf_.
      auto *a = static_cast<fftw_complex *>(fftw_malloc(sizeof(fftw_complex) * static_cast<std::size_t>(h_ * w_)));
      Plans p;
      p.fwd = fftw_plan_dft_2d(static_cast<int>(h_), static_cast<int>(w_), a, a, FFTW_FORWARD, FFTW_ESTIMATE);
      p.bwd = fftw_plan_dft_2d(static_cast<int>(h_), static_cast<int>(w_), a, a, FFTW_BACKWARD, FFTW_ESTIMATE);
      fftw_free(a);
      it = cache.emplace(key, p).first;
    }
    plans_ = it->second;
  }

  Fft2d(Fft2d const &) = delete;
  Fft2d &operator=(Fft2d const &) = delete;
  ~Fft2d() { fftw_free(buf_); }

  void forward(Complex *data) const { run(plans_.fwd, data); }
  void inverse(Complex *data) const { run(plans_.bwd, data); }

  Index height() const { return h_; }
  Index width() const { return w_; }

private:
  struct Plans
  {
    fftw_plan fwd = nullptr;
    fftw_plan bwd = nullptr;
  };

  static std::mutex &planner_mutex()
  {
    static std::mutex m;
    return m;
  }

  static std::map<std::pair<Index, Index>, Plans> &plans()
  {
    static std::map<std::pair<Index, Index>, Plans> cache;
    return cache;
  }

  void run(fftw_plan plan, Complex *data) const
  {
    Index const n = h_ * w_;
    auto *b = reinterpret_cast<Complex *>(buf_);
    std::copy_n(data, n, b);
    fftw_execute_dft(plan, buf_, buf_);
    double const s = 1.0 / std::sqrt(static_cast<double>(n));
    for (Index i = 0; i < n; ++i) { data[i] = b[i] * s; }
  }

  Index h_, w_;
  fftw_complex *buf_;
  Plans plans_;
};

// Signed frequency index for bin k of an unshifted n-point transform, in [-n/2, n/2).
inline Index signed_frequency(Index k, Index n) { return k < (n + 1) / 2 ? k : k - n; }

} // namespace imformer
