#pragma once

#include "crackmamba/autodiff.hpp"
#include "crackmamba/scan.hpp"

namespace crackmamba {

namespace detail {

template <typename S>
void check_rank4(const Tensor<S>& x, const char* op) {
  check_arg(x.rank() == 4, std::string(op) + ": expected a rank-4 tensor, got " + shape_str(x.shape()));
}

/// Unfolds one sample/group into a [Cg*kh*kw, Ho*Wo] patch matrix.
template <typename S>
void im2col(const S* x, Index c_g, Index h, Index w, Index kh, Index kw, Index stride, Index pad,
            Index ho, Index wo, S* col) {
  for (Index c = 0; c < c_g; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        S* row = col + ((c * kh + i) * kw + j) * ho * wo;
        for (Index y = 0; y < ho; ++y) {
          const Index sy = y * stride + i - pad;
          for (Index xo = 0; xo < wo; ++xo) {
            const Index sx = xo * stride + j - pad;
            row[y * wo + xo] =
                (sy >= 0 && sy < h && sx >= 0 && sx < w) ? x[(c * h + sy) * w + sx] : S(0);
          }
        }
      }
}

template <typename S>
void col2im_add(const S* col, Index c_g, Index h, Index w, Index kh, Index kw, Index stride,
                Index pad, Index ho, Index wo, S* x) {
  for (Index c = 0; c < c_g; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        const S* row = col + ((c * kh + i) * kw + j) * ho * wo;
        for (Index y = 0; y < ho; ++y) {
          const Index sy = y * stride + i - pad;
          if (sy < 0 || sy >= h) continue;
          for (Index xo = 0; xo < wo; ++xo) {
            const Index sx = xo * stride + j - pad;
            if (sx >= 0 && sx < w) x[(c * h + sy) * w + sx] += row[y * wo + xo];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution and linear maps.
// ---------------------------------------------------------------------------

/// Cross-correlation. x [N,Cin,H,W], w [Cout,Cin/groups,kh,kw], b [Cout].
/// Ho = (H + 2*pad - kh)/stride + 1. groups == Cin gives depthwise.
template <typename S>
Var<S> conv2d(Var<S> xv, Var<S> wv, Var<S> bv, Index stride = 1, Index pad = 0, Index groups = 1) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  const Tensor<S>& w = t.val(wv.id);
  detail::check_rank4(x, "conv2d");
  detail::check_rank4(w, "conv2d weight");
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check_arg(stride >= 1 && pad >= 0 && groups >= 1, "conv2d: bad stride/pad/groups");
  check_arg(cin % groups == 0 && cout % groups == 0,
            "conv2d: channels (" + std::to_string(cin) + "," + std::to_string(cout) +
                ") not divisible by groups " + std::to_string(groups));
  check_arg(w.dim(1) == cin / groups, "conv2d: weight expects " + std::to_string(w.dim(1) * groups) +
                                          " input channels, got " + std::to_string(cin));
  check_arg(t.val(bv.id).size() == cout, "conv2d: bias size mismatch");
  check_arg(kh <= h + 2 * pad && kw <= ww + 2 * pad, "conv2d: kernel larger than padded input");
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (ww + 2 * pad - kw) / stride + 1;
  const Index cg = cin / groups, og = cout / groups, patch = cg * kh * kw;

  Tensor<S> out({n, cout, ho, wo});
  std::vector<S> col(static_cast<std::size_t>(patch * ho * wo));
  for (Index in = 0; in < n; ++in)
    for (Index g = 0; g < groups; ++g) {
      detail::im2col(x.data() + (in * cin + g * cg) * h * ww, cg, h, ww, kh, kw, stride, pad, ho,
                     wo, col.data());
      typename Tensor<S>::ConstMatrixMap wm(w.data() + g * og * patch, og, patch);
      typename Tensor<S>::ConstMatrixMap cm(col.data(), patch, ho * wo);
      typename Tensor<S>::MatrixMap om(out.data() + (in * cout + g * og) * ho * wo, og, ho * wo);
      om.noalias() = wm * cm;
    }
  const Tensor<S>& b = t.val(bv.id);
  for (Index in = 0; in < n; ++in)
    for (Index c = 0; c < cout; ++c)
      Eigen::Map<typename Tensor<S>::Array>(out.data() + (in * cout + c) * ho * wo, ho * wo) +=
          b[c];

  auto bw = [x_id = xv.id, w_id = wv.id, b_id = bv.id, stride, pad, groups](Tape<S>& t, int self) {
    const Tensor<S>& x = t.val(x_id);
    const Tensor<S>& w = t.val(w_id);
    const Tensor<S>& go = t.grad_ref(self);
    const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const Index ho = go.dim(2), wo = go.dim(3);
    const Index cg = cin / groups, og = cout / groups, patch = cg * kh * kw;
    std::vector<S> col(static_cast<std::size_t>(patch * ho * wo));
    std::vector<S> dcol(static_cast<std::size_t>(patch * ho * wo));
    const bool need_x = t.wants_grad(x_id), need_w = t.wants_grad(w_id);
    for (Index in = 0; in < n; ++in)
      for (Index g = 0; g < groups; ++g) {
        typename Tensor<S>::ConstMatrixMap gm(go.data() + (in * cout + g * og) * ho * wo, og,
                                              ho * wo);
        typename Tensor<S>::ConstMatrixMap wm(w.data() + g * og * patch, og, patch);
        if (need_w) {
          detail::im2col(x.data() + (in * cin + g * cg) * h * ww, cg, h, ww, kh, kw, stride, pad,
                         ho, wo, col.data());
          typename Tensor<S>::ConstMatrixMap cm(col.data(), patch, ho * wo);
          typename Tensor<S>::MatrixMap dwm(t.grad_ref(w_id).data() + g * og * patch, og, patch);
          dwm.noalias() += gm * cm.transpose();
        }
        if (need_x) {
          typename Tensor<S>::MatrixMap dcm(dcol.data(), patch, ho * wo);
          dcm.noalias() = wm.transpose() * gm;
          detail::col2im_add(dcol.data(), cg, h, ww, kh, kw, stride, pad, ho, wo,
                             t.grad_ref(x_id).data() + (in * cin + g * cg) * h * ww);
        }
      }
    if (t.wants_grad(b_id)) {
      Tensor<S>& db = t.grad_ref(b_id);
      for (Index in = 0; in < n; ++in)
        for (Index c = 0; c < cout; ++c)
          db[c] += Eigen::Map<const typename Tensor<S>::Array>(
                       go.data() + (in * cout + c) * ho * wo, ho * wo)
                       .sum();
    }
  };
  return t.emit(std::move(out), {xv.id, wv.id, bv.id}, std::move(bw));
}

/// x [N,Cin] @ w[Cout,Cin]^T + b.
template <typename S>
Var<S> linear(Var<S> xv, Var<S> wv, Var<S> bv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  const Tensor<S>& w = t.val(wv.id);
  check_arg(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
            "linear: shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  check_arg(t.val(bv.id).size() == w.dim(0), "linear: bias size mismatch");
  const Index n = x.dim(0), cout = w.dim(0), cin = w.dim(1);
  Tensor<S> out({n, cout});
  out.matrix(n, cout).noalias() = x.matrix(n, cin) * w.matrix(cout, cin).transpose();
  out.matrix(n, cout).rowwise() += t.val(bv.id).matrix(1, cout).row(0);
  auto bw = [x_id = xv.id, w_id = wv.id, b_id = bv.id, n, cout, cin](Tape<S>& t, int self) {
    const auto go = t.grad_ref(self).matrix(n, cout);
    if (t.wants_grad(x_id))
      t.grad_ref(x_id).matrix(n, cin).noalias() += go * t.val(w_id).matrix(cout, cin);
    if (t.wants_grad(w_id))
      t.grad_ref(w_id).matrix(cout, cin).noalias() += go.transpose() * t.val(x_id).matrix(n, cin);
    if (t.wants_grad(b_id))
      t.grad_ref(b_id).matrix(1, cout).row(0) += go.colwise().sum();
  };
  return t.emit(std::move(out), {xv.id, wv.id, bv.id}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

/// LayerNorm over the channel axis: each (n,h,w) position is normalized
/// across C, then scaled and shifted by per-channel gain/offset.
template <typename S>
Var<S> layer_norm(Var<S> xv, Var<S> gain, Var<S> offset, S eps = S(1e-6)) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "layer_norm");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_arg(t.val(gain.id).size() == c && t.val(offset.id).size() == c,
            "layer_norm: gain/offset must have C=" + std::to_string(c) + " entries");
  const Index hw = h * w;
  Tensor<S> out(x.shape());
  const S* g = t.val(gain.id).data();
  const S* o = t.val(offset.id).data();
  for (Index in = 0; in < n; ++in)
    for (Index p = 0; p < hw; ++p) {
      const S* xp = x.data() + in * c * hw + p;
      S mean = 0;
      for (Index ic = 0; ic < c; ++ic) mean += xp[ic * hw];
      mean /= static_cast<S>(c);
      S var = 0;
      for (Index ic = 0; ic < c; ++ic) {
        const S d = xp[ic * hw] - mean;
        var += d * d;
      }
      var /= static_cast<S>(c);
      const S inv = S(1) / std::sqrt(var + eps);
      S* op = out.data() + in * c * hw + p;
      for (Index ic = 0; ic < c; ++ic) op[ic * hw] = (xp[ic * hw] - mean) * inv * g[ic] + o[ic];
    }
  auto bw = [x_id = xv.id, g_id = gain.id, o_id = offset.id, eps](Tape<S>& t, int self) {
    const Tensor<S>& x = t.val(x_id);
    const Tensor<S>& go = t.grad_ref(self);
    const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const S* g = t.val(g_id).data();
    std::vector<S> xhat(static_cast<std::size_t>(c));
    for (Index in = 0; in < n; ++in)
      for (Index p = 0; p < hw; ++p) {
        const S* xp = x.data() + in * c * hw + p;
        const S* gp = go.data() + in * c * hw + p;
        S mean = 0;
        for (Index ic = 0; ic < c; ++ic) mean += xp[ic * hw];
        mean /= static_cast<S>(c);
        S var = 0;
        for (Index ic = 0; ic < c; ++ic) {
          const S d = xp[ic * hw] - mean;
          var += d * d;
        }
        var /= static_cast<S>(c);
        const S inv = S(1) / std::sqrt(var + eps);
        for (Index ic = 0; ic < c; ++ic) xhat[static_cast<std::size_t>(ic)] = (xp[ic * hw] - mean) * inv;
        if (t.wants_grad(g_id)) {
          Tensor<S>& dg = t.grad_ref(g_id);
          for (Index ic = 0; ic < c; ++ic) dg[ic] += gp[ic * hw] * xhat[static_cast<std::size_t>(ic)];
        }
        if (t.wants_grad(o_id)) {
          Tensor<S>& doff = t.grad_ref(o_id);
          for (Index ic = 0; ic < c; ++ic) doff[ic] += gp[ic * hw];
        }
        if (t.wants_grad(x_id)) {
          // dL/dx = inv/C * (C*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
          S s1 = 0, s2 = 0;
          for (Index ic = 0; ic < c; ++ic) {
            const S dxh = gp[ic * hw] * g[ic];
            s1 += dxh;
            s2 += dxh * xhat[static_cast<std::size_t>(ic)];
          }
          S* dx = t.grad_ref(x_id).data() + in * c * hw + p;
          for (Index ic = 0; ic < c; ++ic) {
            const S dxh = gp[ic * hw] * g[ic];
            dx[ic * hw] += inv * (dxh - (s1 + xhat[static_cast<std::size_t>(ic)] * s2) / static_cast<S>(c));
          }
        }
      }
  };
  return t.emit(std::move(out), {xv.id, gain.id, offset.id}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Pooling and per-position channel statistics.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> global_max_pool(Var<S> xv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "global_max_pool");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out({n, c, 1, 1});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * c));
  for (Index i = 0; i < n * c; ++i) {
    const S* p = x.data() + i * hw;
    Index best = 0;
    for (Index j = 1; j < hw; ++j)
      if (p[j] > p[best]) best = j;
    (*argmax)[static_cast<std::size_t>(i)] = best;
    out[i] = p[best];
  }
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, hw, argmax](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    for (Index i = 0; i < go.size(); ++i) dx[i * hw + (*argmax)[static_cast<std::size_t>(i)]] += go[i];
  });
}

template <typename S>
Var<S> global_avg_pool(Var<S> xv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "global_avg_pool");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out({n, c, 1, 1});
  for (Index i = 0; i < n * c; ++i)
    out[i] = Eigen::Map<const typename Tensor<S>::Array>(x.data() + i * hw, hw).mean();
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, hw](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    for (Index i = 0; i < go.size(); ++i)
      Eigen::Map<typename Tensor<S>::Array>(dx.data() + i * hw, hw) += go[i] / static_cast<S>(hw);
  });
}

template <typename S>
Var<S> channel_max(Var<S> xv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "channel_max");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  Tensor<S> out({n, 1, h, w});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * hw));
  for (Index in = 0; in < n; ++in)
    for (Index p = 0; p < hw; ++p) {
      const S* xp = x.data() + in * c * hw + p;
      Index best = 0;
      for (Index ic = 1; ic < c; ++ic)
        if (xp[ic * hw] > xp[best * hw]) best = ic;
      (*argmax)[static_cast<std::size_t>(in * hw + p)] = best;
      out[in * hw + p] = xp[best * hw];
    }
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, c, hw, argmax](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    const Index n = go.dim(0);
    for (Index in = 0; in < n; ++in)
      for (Index p = 0; p < hw; ++p)
        dx[in * (c * hw) + (*argmax)[static_cast<std::size_t>(in * hw + p)] * hw + p] += go[in * hw + p];
  });
}

template <typename S>
Var<S> channel_mean(Var<S> xv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "channel_mean");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  Tensor<S> out({n, 1, h, w});
  for (Index in = 0; in < n; ++in)
    for (Index p = 0; p < hw; ++p) {
      const S* xp = x.data() + in * c * hw + p;
      S s = 0;
      for (Index ic = 0; ic < c; ++ic) s += xp[ic * hw];
      out[in * hw + p] = s / static_cast<S>(c);
    }
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, c, hw](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    const Index n = go.dim(0);
    for (Index in = 0; in < n; ++in)
      for (Index p = 0; p < hw; ++p)
        for (Index ic = 0; ic < c; ++ic) dx[in * (c * hw) + ic * hw + p] += go[in * hw + p] / static_cast<S>(c);
  });
}

// ---------------------------------------------------------------------------
// Resampling.
// ---------------------------------------------------------------------------

enum class UpsampleMode { bilinear, nearest };

/// Factor-2 upsampling, half-pixel centers, clamped borders.
template <typename S>
Var<S> upsample2x(Var<S> xv, UpsampleMode mode = UpsampleMode::bilinear) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "upsample2x");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = 2 * h, wo = 2 * w;
  Tensor<S> out({n, c, ho, wo});
  auto src_axis = [](Index i) { return static_cast<double>(i) * 0.5 - 0.25; };
  for (Index nc = 0; nc < n * c; ++nc) {
    const S* in = x.data() + nc * h * w;
    S* op = out.data() + nc * ho * wo;
    for (Index y = 0; y < ho; ++y) {
      const double sy = src_axis(y);
      const Index y0 = static_cast<Index>(std::floor(sy));
      const double fy = sy - static_cast<double>(y0);
      const Index y0c = std::clamp<Index>(y0, 0, h - 1), y1c = std::clamp<Index>(y0 + 1, 0, h - 1);
      for (Index xo = 0; xo < wo; ++xo) {
        const double sx = src_axis(xo);
        const Index x0 = static_cast<Index>(std::floor(sx));
        const double fx = sx - static_cast<double>(x0);
        const Index x0c = std::clamp<Index>(x0, 0, w - 1), x1c = std::clamp<Index>(x0 + 1, 0, w - 1);
        if (mode == UpsampleMode::nearest) {
          op[y * wo + xo] = in[(y / 2) * w + xo / 2];
        } else {
          op[y * wo + xo] = static_cast<S>((1 - fy) * ((1 - fx) * in[y0c * w + x0c] + fx * in[y0c * w + x1c]) +
                                           fy * ((1 - fx) * in[y1c * w + x0c] + fx * in[y1c * w + x1c]));
        }
      }
    }
  }
  auto bw = [x_id = xv.id, mode](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    const Index n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    const Index ho = 2 * h, wo = 2 * w;
    auto src_axis = [](Index i) { return static_cast<double>(i) * 0.5 - 0.25; };
    for (Index nc = 0; nc < n * c; ++nc) {
      const S* gp = go.data() + nc * ho * wo;
      S* dp = dx.data() + nc * h * w;
      for (Index y = 0; y < ho; ++y) {
        const double sy = src_axis(y);
        const Index y0 = static_cast<Index>(std::floor(sy));
        const double fy = sy - static_cast<double>(y0);
        const Index y0c = std::clamp<Index>(y0, 0, h - 1), y1c = std::clamp<Index>(y0 + 1, 0, h - 1);
        for (Index xo = 0; xo < wo; ++xo) {
          const S g = gp[y * wo + xo];
          if (mode == UpsampleMode::nearest) {
            dp[(y / 2) * w + xo / 2] += g;
            continue;
          }
          const double sx = src_axis(xo);
          const Index x0 = static_cast<Index>(std::floor(sx));
          const double fx = sx - static_cast<double>(x0);
          const Index x0c = std::clamp<Index>(x0, 0, w - 1), x1c = std::clamp<Index>(x0 + 1, 0, w - 1);
          dp[y0c * w + x0c] += static_cast<S>((1 - fy) * (1 - fx)) * g;
          dp[y0c * w + x1c] += static_cast<S>((1 - fy) * fx) * g;
          dp[y1c * w + x0c] += static_cast<S>(fy * (1 - fx)) * g;
          dp[y1c * w + x1c] += static_cast<S>(fy * fx) * g;
        }
      }
    }
  };
  return t.emit(std::move(out), {xv.id}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Regularization, gating, reshuffling.
// ---------------------------------------------------------------------------

/// Stochastic depth: in training, zeroes the whole tensor per sample with
/// probability `rate` and scales survivors by 1/(1-rate); identity in eval.
template <typename S>
Var<S> drop_path(Var<S> xv, double rate, bool training, SplitMix64& rng) {
  Tape<S>& t = *xv.tape;
  check_arg(rate >= 0.0 && rate < 1.0, "drop_path: rate must be in [0,1)");
  const Tensor<S>& x = t.val(xv.id);
  const Index n = x.dim(0);
  const Index per = x.size() / n;
  auto mask = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n), S(1));
  if (training && rate > 0.0) {
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (Index i = 0; i < n; ++i)
      (*mask)[static_cast<std::size_t>(i)] = rng.next_double() < rate ? S(0) : keep_scale;
  }
  Tensor<S> out(x.shape());
  for (Index i = 0; i < n; ++i)
    Eigen::Map<typename Tensor<S>::Array>(out.data() + i * per, per) =
        Eigen::Map<const typename Tensor<S>::Array>(x.data() + i * per, per) *
        (*mask)[static_cast<std::size_t>(i)];
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, per, mask](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    const Index n = go.dim(0);
    for (Index i = 0; i < n; ++i)
      Eigen::Map<typename Tensor<S>::Array>(dx.data() + i * per, per) +=
          Eigen::Map<const typename Tensor<S>::Array>(go.data() + i * per, per) *
          (*mask)[static_cast<std::size_t>(i)];
  });
}

/// x [N,C,H,W] * gate [N,C,1,1], broadcast over H,W.
template <typename S>
Var<S> mul_channel_gate(Var<S> xv, Var<S> gv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  const Tensor<S>& g = t.val(gv.id);
  detail::check_rank4(x, "mul_channel_gate");
  check_arg(g.rank() == 4 && g.dim(0) == x.dim(0) && g.dim(1) == x.dim(1) && g.dim(2) == 1 &&
                g.dim(3) == 1,
            "mul_channel_gate: gate must be [N,C,1,1]");
  const Index nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out(x.shape());
  for (Index i = 0; i < nc; ++i)
    Eigen::Map<typename Tensor<S>::Array>(out.data() + i * hw, hw) =
        Eigen::Map<const typename Tensor<S>::Array>(x.data() + i * hw, hw) * g[i];
  return t.emit(std::move(out), {xv.id, gv.id}, [x_id = xv.id, g_id = gv.id, nc, hw](Tape<S>& t, int self) {
    const Tensor<S>& go = t.grad_ref(self);
    for (Index i = 0; i < nc; ++i) {
      Eigen::Map<const typename Tensor<S>::Array> gslice(go.data() + i * hw, hw);
      if (t.wants_grad(x_id))
        Eigen::Map<typename Tensor<S>::Array>(t.grad_ref(x_id).data() + i * hw, hw) +=
            gslice * t.val(g_id)[i];
      if (t.wants_grad(g_id))
        t.grad_ref(g_id)[i] +=
            (gslice * Eigen::Map<const typename Tensor<S>::Array>(t.val(x_id).data() + i * hw, hw))
                .sum();
    }
  });
}

/// x [N,C,H,W] * gate [N,1,H,W], broadcast over C.
template <typename S>
Var<S> mul_spatial_gate(Var<S> xv, Var<S> gv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  const Tensor<S>& g = t.val(gv.id);
  detail::check_rank4(x, "mul_spatial_gate");
  check_arg(g.rank() == 4 && g.dim(0) == x.dim(0) && g.dim(1) == 1 && g.dim(2) == x.dim(2) &&
                g.dim(3) == x.dim(3),
            "mul_spatial_gate: gate must be [N,1,H,W]");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out(x.shape());
  for (Index in = 0; in < n; ++in)
    for (Index ic = 0; ic < c; ++ic)
      Eigen::Map<typename Tensor<S>::Array>(out.data() + (in * c + ic) * hw, hw) =
          Eigen::Map<const typename Tensor<S>::Array>(x.data() + (in * c + ic) * hw, hw) *
          Eigen::Map<const typename Tensor<S>::Array>(g.data() + in * hw, hw);
  return t.emit(std::move(out), {xv.id, gv.id}, [x_id = xv.id, g_id = gv.id, n, c, hw](Tape<S>& t, int self) {
    const Tensor<S>& go = t.grad_ref(self);
    for (Index in = 0; in < n; ++in) {
      Eigen::Map<const typename Tensor<S>::Array> gate(t.val(g_id).data() + in * hw, hw);
      for (Index ic = 0; ic < c; ++ic) {
        Eigen::Map<const typename Tensor<S>::Array> gslice(go.data() + (in * c + ic) * hw, hw);
        if (t.wants_grad(x_id))
          Eigen::Map<typename Tensor<S>::Array>(t.grad_ref(x_id).data() + (in * c + ic) * hw, hw) +=
              gslice * gate;
        if (t.wants_grad(g_id))
          Eigen::Map<typename Tensor<S>::Array>(t.grad_ref(g_id).data() + in * hw, hw) +=
              gslice *
              Eigen::Map<const typename Tensor<S>::Array>(t.val(x_id).data() + (in * c + ic) * hw, hw);
      }
    }
  });
}

template <typename S>
Var<S> concat_channels(Var<S> av, Var<S> bv) {
  Tape<S>& t = *av.tape;
  const Tensor<S>& a = t.val(av.id);
  const Tensor<S>& b = t.val(bv.id);
  detail::check_rank4(a, "concat_channels");
  check_arg(b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: spatial/batch dims differ: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  const Index n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<S> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (Index in = 0; in < n; ++in) {
    std::copy(a.data() + in * ca * hw, a.data() + (in + 1) * ca * hw,
              out.data() + in * (ca + cb) * hw);
    std::copy(b.data() + in * cb * hw, b.data() + (in + 1) * cb * hw,
              out.data() + in * (ca + cb) * hw + ca * hw);
  }
  return t.emit(std::move(out), {av.id, bv.id}, [a_id = av.id, b_id = bv.id, n, ca, cb, hw](Tape<S>& t, int self) {
    const Tensor<S>& go = t.grad_ref(self);
    for (Index in = 0; in < n; ++in) {
      if (t.wants_grad(a_id))
        Eigen::Map<typename Tensor<S>::Array>(t.grad_ref(a_id).data() + in * ca * hw, ca * hw) +=
            Eigen::Map<const typename Tensor<S>::Array>(go.data() + in * (ca + cb) * hw, ca * hw);
      if (t.wants_grad(b_id))
        Eigen::Map<typename Tensor<S>::Array>(t.grad_ref(b_id).data() + in * cb * hw, cb * hw) +=
            Eigen::Map<const typename Tensor<S>::Array>(go.data() + in * (ca + cb) * hw + ca * hw,
                                                        cb * hw);
    }
  });
}

/// One channel as [N,1,H,W].
template <typename S>
Var<S> take_channel(Var<S> xv, Index channel) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "take_channel");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check_arg(channel >= 0 && channel < c, "take_channel: index out of range");
  Tensor<S> out({n, 1, x.dim(2), x.dim(3)});
  for (Index in = 0; in < n; ++in)
    std::copy(x.data() + (in * c + channel) * hw, x.data() + (in * c + channel + 1) * hw,
              out.data() + in * hw);
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, c, channel, hw](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    const Index n = go.dim(0);
    for (Index in = 0; in < n; ++in)
      Eigen::Map<typename Tensor<S>::Array>(t.grad_ref(x_id).data() + (in * c + channel) * hw, hw) +=
          Eigen::Map<const typename Tensor<S>::Array>(go.data() + in * hw, hw);
  });
}

/// Softmax over the channel (class) axis.
template <typename S>
Var<S> softmax_channels(Var<S> xv) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "softmax_channels");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out(x.shape());
  for (Index in = 0; in < n; ++in)
    for (Index p = 0; p < hw; ++p) {
      const S* xp = x.data() + in * c * hw + p;
      S mx = xp[0];
      for (Index ic = 1; ic < c; ++ic) mx = std::max(mx, xp[ic * hw]);
      S sum = 0;
      S* op = out.data() + in * c * hw + p;
      for (Index ic = 0; ic < c; ++ic) {
        op[ic * hw] = std::exp(xp[ic * hw] - mx);
        sum += op[ic * hw];
      }
      for (Index ic = 0; ic < c; ++ic) op[ic * hw] /= sum;
    }
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, c, hw](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& p = t.val(self);
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    const Index n = p.dim(0);
    for (Index in = 0; in < n; ++in)
      for (Index pos = 0; pos < hw; ++pos) {
        const S* pp = p.data() + in * c * hw + pos;
        const S* gp = go.data() + in * c * hw + pos;
        S dot = 0;
        for (Index ic = 0; ic < c; ++ic) dot += gp[ic * hw] * pp[ic * hw];
        S* dp = dx.data() + in * c * hw + pos;
        for (Index ic = 0; ic < c; ++ic) dp[ic * hw] += pp[ic * hw] * (gp[ic * hw] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Scan orderings on the tape.
// ---------------------------------------------------------------------------

/// Serializes [N,C,H,W] along one scan order into [N,C,L].
template <typename S>
Var<S> scan_expand_dir(Var<S> xv, const ScanOrder& order) {
  Tape<S>& t = *xv.tape;
  const Tensor<S>& x = t.val(xv.id);
  detail::check_rank4(x, "scan_expand_dir");
  check_arg(x.dim(2) == order.height && x.dim(3) == order.width,
            "scan_expand_dir: order grid mismatch");
  const Index nc = x.dim(0) * x.dim(1), l = order.length();
  Tensor<S> out({x.dim(0), x.dim(1), l});
  for (Index i = 0; i < nc; ++i) {
    const S* src = x.data() + i * l;
    S* dst = out.data() + i * l;
    for (Index tt = 0; tt < l; ++tt) dst[tt] = src[order.perm[static_cast<std::size_t>(tt)]];
  }
  auto perm = std::make_shared<std::vector<Index>>(order.perm);
  return t.emit(std::move(out), {xv.id}, [x_id = xv.id, nc, l, perm](Tape<S>& t, int self) {
    if (!t.wants_grad(x_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& dx = t.grad_ref(x_id);
    for (Index i = 0; i < nc; ++i) {
      const S* src = go.data() + i * l;
      S* dst = dx.data() + i * l;
      for (Index tt = 0; tt < l; ++tt) dst[(*perm)[static_cast<std::size_t>(tt)]] += src[tt];
    }
  });
}

/// Inverse-permutes one [N,C,L] sequence back onto the [N,C,H,W] grid.
/// Summing the four directions afterwards realizes the scan merge.
template <typename S>
Var<S> scan_merge_inv(Var<S> sv, const ScanOrder& order) {
  Tape<S>& t = *sv.tape;
  const Tensor<S>& s = t.val(sv.id);
  check_arg(s.rank() == 3, "scan_merge_inv: expected [N,C,L]");
  check_arg(s.dim(2) == order.length(), "scan_merge_inv: sequence length mismatch");
  const Index nc = s.dim(0) * s.dim(1), l = order.length();
  Tensor<S> out({s.dim(0), s.dim(1), order.height, order.width});
  for (Index i = 0; i < nc; ++i) {
    const S* src = s.data() + i * l;
    S* dst = out.data() + i * l;
    for (Index tt = 0; tt < l; ++tt) dst[order.perm[static_cast<std::size_t>(tt)]] = src[tt];
  }
  auto perm = std::make_shared<std::vector<Index>>(order.perm);
  return t.emit(std::move(out), {sv.id}, [s_id = sv.id, nc, l, perm](Tape<S>& t, int self) {
    if (!t.wants_grad(s_id)) return;
    const Tensor<S>& go = t.grad_ref(self);
    Tensor<S>& ds = t.grad_ref(s_id);
    for (Index i = 0; i < nc; ++i) {
      const S* src = go.data() + i * l;
      S* dst = ds.data() + i * l;
      for (Index tt = 0; tt < l; ++tt) dst[tt] += src[(*perm)[static_cast<std::size_t>(tt)]];
    }
  });
}

}  // namespace crackmamba
