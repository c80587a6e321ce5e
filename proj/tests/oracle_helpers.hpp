#pragma once

// Independent reference implementations used as test oracles. These must
// stay straight-line and separate from the library code paths they check.

#include <functional>
#include <string>
#include <vector>

#include "crackmamba/tensor.hpp"

namespace oracle {

using crackmamba::Index;
using crackmamba::SplitMix64;
using crackmamba::Tensor;

/// Direct six-nested-loop cross-correlation, no im2col.
inline Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                                   const Tensor<double>& b, Index stride, Index pad,
                                   Index groups) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (ww + 2 * pad - kw) / stride + 1;
  const Index cg = cin / groups, og = cout / groups;
  Tensor<double> out({n, cout, ho, wo});
  for (Index in = 0; in < n; ++in)
    for (Index oc = 0; oc < cout; ++oc)
      for (Index y = 0; y < ho; ++y)
        for (Index xo = 0; xo < wo; ++xo) {
          double acc = b[oc];
          const Index g = oc / og;
          for (Index ic = 0; ic < cg; ++ic)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Index sy = y * stride + i - pad;
                const Index sx = xo * stride + j - pad;
                if (sy >= 0 && sy < h && sx >= 0 && sx < ww)
                  acc += w(oc, ic, i, j) * x(in, g * cg + ic, sy, sx);
              }
          out(in, oc, y, xo) = acc;
        }
  return out;
}

/// Straight-line unrolled selective scan for one sequence: tokens [L][C],
/// independent of the library implementation (own softplus/discretization).
struct ScanOracleParams {
  Tensor<double> a;     // [C,N], strictly negative entries
  Tensor<double> w_dt;  // [C,C]
  Tensor<double> b_dt;  // [C]
  Tensor<double> w_b;   // [N,C]
  Tensor<double> w_c;   // [N,C]
  Tensor<double> d;     // [C]
  bool euler = false;
};

inline std::vector<std::vector<double>> selective_scan_oracle(
    const std::vector<std::vector<double>>& tokens, const ScanOracleParams& p) {
  const Index c = p.a.dim(0), ns = p.a.dim(1);
  std::vector<std::vector<double>> y;
  std::vector<std::vector<double>> h(static_cast<std::size_t>(c),
                                     std::vector<double>(static_cast<std::size_t>(ns), 0.0));
  for (const auto& u : tokens) {
    std::vector<double> yt(static_cast<std::size_t>(c), 0.0);
    for (Index ic = 0; ic < c; ++ic) {
      double raw = p.b_dt[ic];
      for (Index j = 0; j < c; ++j) raw += p.w_dt(ic, j) * u[static_cast<std::size_t>(j)];
      const double dt = std::log1p(std::exp(raw));
      double yv = p.d[ic] * u[static_cast<std::size_t>(ic)];
      for (Index in = 0; in < ns; ++in) {
        double bt = 0, ct = 0;
        for (Index j = 0; j < c; ++j) {
          bt += p.w_b(in, j) * u[static_cast<std::size_t>(j)];
          ct += p.w_c(in, j) * u[static_cast<std::size_t>(j)];
        }
        const double z = dt * p.a(ic, in);
        const double abar = std::exp(z);
        const double bbar = p.euler ? dt * bt : std::expm1(z) / p.a(ic, in) * bt;
        auto& hc = h[static_cast<std::size_t>(ic)][static_cast<std::size_t>(in)];
        hc = abar * hc + bbar * u[static_cast<std::size_t>(ic)];
        yv += ct * hc;
      }
      yt[static_cast<std::size_t>(ic)] = yv;
    }
    y.push_back(std::move(yt));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Central finite differences.
// ---------------------------------------------------------------------------

inline double fd_derivative(const std::function<double()>& eval, double* slot, double step) {
  const double orig = *slot;
  *slot = orig + step;
  const double fp = eval();
  *slot = orig - step;
  const double fm = eval();
  *slot = orig;
  return (fp - fm) / (2 * step);
}

struct GradCheckStats {
  double max_rel = 0;
  Index coords = 0;
  std::string worst;
};

/// Compares analytic gradients against central differences over every
/// coordinate of `value` (or `max_coords` sampled ones). `eval` must fully
/// recompute the scalar objective from current tensor contents.
inline void check_tensor_grad(GradCheckStats& stats, const std::function<double()>& eval,
                              Tensor<double>& value, const Tensor<double>& analytic,
                              const std::string& label, SplitMix64* rng = nullptr,
                              Index max_coords = -1, double step = 1e-5) {
  std::vector<Index> coords;
  if (max_coords > 0 && value.size() > max_coords && rng) {
    for (Index k = 0; k < max_coords; ++k)
      coords.push_back(static_cast<Index>(rng->bounded(static_cast<std::uint64_t>(value.size()))));
  } else {
    for (Index i = 0; i < value.size(); ++i) coords.push_back(i);
  }
  for (Index i : coords) {
    const double fd = fd_derivative(eval, value.data() + i, step);
    const double ad = analytic[i];
    const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6});
    ++stats.coords;
    if (rel > stats.max_rel) {
      stats.max_rel = rel;
      stats.worst = label + "[" + std::to_string(i) + "] fd=" + std::to_string(fd) +
                    " ad=" + std::to_string(ad);
    }
  }
}

inline Tensor<double> random_tensor(SplitMix64& rng, crackmamba::Shape shape, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace oracle
