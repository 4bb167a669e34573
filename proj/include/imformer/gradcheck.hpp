#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "autodiff.hpp"

namespace imformer {

template <class S>
using TensorFunction = std::function<Var<S>(Tape<S> &, Var<S>)>;

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12) for a scalar function of x.
/// `coords` limits the check to the first `coords` strided coordinates (0 = all).
template <class S>
double finite_diff_check(TensorFunction<S> const &f, Tensor<S> const &x, double step, Index coords = 0)
{
  if (!(step > 0)) { throw std::invalid_argument("finite_diff_check: step must be > 0"); }

  Tensor<S> analytic;
  {
    Tape<S> tape;
    auto xv = tape.leaf(x);
    auto y = f(tape, xv);
    auto grads = tape.backward(y);
    analytic = std::move(grads.at(xv.id));
  }

  auto eval = [&](Tensor<S> const &at) {
    Tape<S> tape;
    auto xv = tape.constant(at);
    return static_cast<double>(f(tape, xv).value()[0]);
  };

  Index const n = x.numel();
  Index const stride = coords > 0 && coords < n ? n / coords : 1;
  double worst = 0.0;
  Tensor<S> probe = x;
  for (Index i = 0; i < n; i += stride) {
    S const orig = probe[i];
    probe[i] = orig + S(step);
    double const fp = eval(probe);
    probe[i] = orig - S(step);
    double const fm = eval(probe);
    probe[i] = orig;
    double const central = (fp - fm) / (2.0 * step);
    double const a = static_cast<double>(analytic[i]);
    double const err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

} // namespace imformer
