#pragma once

#include <optional>
#include <vector>

#include "crackmamba/autodiff.hpp"

namespace crackmamba {

// Selective state-space core. The continuous system
//     h'(t) = A h(t) + B x(t),   y(t) = C h(t)
// is discretized with a zero-order hold at step size delta and run as the
// recurrence h(t) = Abar h(t-1) + Bbar x(t). A is diagonal per channel and
// kept strictly negative, so every Abar entry lies in (0,1).

enum class DiscretizeRule {
  zoh,    // Bbar = ((exp(dA) - 1)/A) * B, exact hold
  euler,  // Bbar = d * B, first-order shortcut
};

namespace detail {

/// phi(z) = (exp(z) - 1) / z, continuous at 0. Truncated series below
/// |z| = 1e-4 (next term is O(1e-18) relative).
template <typename S>
S zoh_phi(S z) {
  if (std::abs(static_cast<double>(z)) < 1e-4)
    return S(1) + z / S(2) + z * z / S(6) + z * z * z / S(24);
  return static_cast<S>(std::expm1(static_cast<double>(z))) / z;
}

/// phi'(z) = (z e^z - e^z + 1) / z^2, same small-z treatment.
template <typename S>
S zoh_phi_prime(S z) {
  if (std::abs(static_cast<double>(z)) < 1e-4)
    return S(0.5) + z / S(3) + z * z / S(8) + z * z * z / S(30);
  const S ez = std::exp(z);
  return (z * ez - ez + S(1)) / (z * z);
}

template <typename S>
S softplus(S x) {
  return x > S(20) ? x : static_cast<S>(std::log1p(std::exp(static_cast<double>(x))));
}

template <typename S>
S logistic(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace detail

/// Zero-order-hold discretization of one (A, B) entry at step `delta`.
template <typename S>
std::pair<S, S> zoh_discretize(S delta, S a, S b) {
  check_arg(delta > S(0), "zoh_discretize: delta must be positive");
  const S z = delta * a;
  return {std::exp(z), delta * detail::zoh_phi(z) * b};
}

template <typename S>
using ParamMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Runs h(t) = Abar(t) h(t-1) + Bbar(t) x(t), y(t) = C(t) h(t) [+ D x(t)].
/// Each parameter matrix has one row per step or a single row shared by all
/// steps (LTI); columns index the state dimension.
template <typename S>
std::vector<S> ssm_recurrence(const ParamMatrix<S>& abar, const ParamMatrix<S>& bbar,
                              const ParamMatrix<S>& c, const std::vector<S>& x,
                              std::optional<S> d = std::nullopt) {
  const Index len = static_cast<Index>(x.size());
  const Index n_state = abar.cols();
  auto row_ok = [&](const ParamMatrix<S>& m) {
    return m.cols() == n_state && (m.rows() == 1 || m.rows() == len);
  };
  check_arg(row_ok(abar) && row_ok(bbar) && row_ok(c),
            "ssm_recurrence: parameter sequences must have 1 or L rows and matching state width");
  Eigen::Matrix<S, Eigen::Dynamic, 1> h = Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(n_state);
  std::vector<S> y(x.size());
  for (Index t = 0; t < len; ++t) {
    const Index ra = abar.rows() == 1 ? 0 : t;
    const Index rb = bbar.rows() == 1 ? 0 : t;
    const Index rc = c.rows() == 1 ? 0 : t;
    h = abar.row(ra).transpose().cwiseProduct(h) + bbar.row(rb).transpose() * x[static_cast<std::size_t>(t)];
    y[static_cast<std::size_t>(t)] = c.row(rc).dot(h) + (d ? *d * x[static_cast<std::size_t>(t)] : S(0));
  }
  return y;
}

/// Convolution-kernel form of an LTI system:
/// K = (C Bbar, C Abar Bbar, ..., C Abar^{L-1} Bbar), summed over states.
/// Per-step (selective) parameters have no kernel form and are rejected.
template <typename S>
std::vector<S> ssm_kernel(const ParamMatrix<S>& abar, const ParamMatrix<S>& bbar,
                          const ParamMatrix<S>& c, Index len) {
  check_arg(abar.cols() == bbar.cols() && abar.cols() == c.cols(),
            "ssm_kernel: state widths differ");
  if (abar.rows() != 1 || bbar.rows() != 1 || c.rows() != 1)
    throw std::domain_error("ssm_kernel: per-step (selective) parameters have no kernel form");
  Eigen::Matrix<S, Eigen::Dynamic, 1> pow =
      Eigen::Matrix<S, Eigen::Dynamic, 1>::Ones(abar.cols());
  std::vector<S> k(static_cast<std::size_t>(len));
  for (Index t = 0; t < len; ++t) {
    k[static_cast<std::size_t>(t)] = c.row(0).cwiseProduct(pow.transpose()).dot(bbar.row(0));
    pow = pow.cwiseProduct(abar.row(0).transpose());
  }
  return k;
}

/// Causal convolution y(t) = sum_{tau<=t} k(tau) x(t-tau).
template <typename S>
std::vector<S> ssm_conv_apply(const std::vector<S>& x, const std::vector<S>& k) {
  check_arg(x.size() == k.size(), "ssm_conv_apply: sequence lengths differ");
  std::vector<S> y(x.size(), S(0));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t tau = 0; tau <= t; ++tau) y[t] += k[tau] * x[t - tau];
  return y;
}

// ---------------------------------------------------------------------------
// Selective (input-dependent) scan.
// ---------------------------------------------------------------------------

/// Learnable per-direction scan parameters for C channels and N states.
/// A is stored as a_log with A = -exp(a_log), which keeps it negative under
/// unconstrained updates. delta(t) = softplus(W_dt u_t + b_dt) per channel;
/// B(t) = W_b u_t and C(t) = W_c u_t are shared across channels.
template <typename S>
struct SSMParams {
  Parameter<S> a_log;   // [C,N]
  Parameter<S> w_dt;    // [C,C]
  Parameter<S> b_dt;    // [C]
  Parameter<S> w_b;     // [N,C]
  Parameter<S> w_c;     // [N,C]
  Parameter<S> d_skip;  // [C]
  DiscretizeRule rule = DiscretizeRule::zoh;
};

/// Input-selective scan over [N,C,L] sequences: per step, project the token
/// into (delta, B, C), discretize, advance the recurrence independently per
/// channel, and read out y(t) = C(t) h(t) + D u(t). Differentiable in the
/// tokens and every projection.
template <typename S>
Var<S> selective_scan(Var<S> uv, Var<S> a_log_v, Var<S> w_dt_v, Var<S> b_dt_v, Var<S> w_b_v,
                      Var<S> w_c_v, Var<S> d_skip_v, DiscretizeRule rule) {
  Tape<S>& t = *uv.tape;
  const Tensor<S>& u = t.val(uv.id);
  check_arg(u.rank() == 3, "selective_scan: tokens must be [N,C,L]");
  const Index nb = u.dim(0), c = u.dim(1), l = u.dim(2);
  const Tensor<S>& a_log = t.val(a_log_v.id);
  check_arg(a_log.rank() == 2 && a_log.dim(0) == c, "selective_scan: a_log must be [C,N]");
  const Index ns = a_log.dim(1);
  check_arg(t.val(w_dt_v.id).shape() == Shape({c, c}), "selective_scan: w_dt must be [C,C]");
  check_arg(t.val(b_dt_v.id).size() == c, "selective_scan: b_dt must be [C]");
  check_arg(t.val(w_b_v.id).shape() == Shape({ns, c}) && t.val(w_c_v.id).shape() == Shape({ns, c}),
            "selective_scan: w_b/w_c must be [N_state,C]");
  check_arg(t.val(d_skip_v.id).size() == c, "selective_scan: d_skip must be [C]");

  struct Cache {
    // One entry per batch element; matrices keep [rows, cols] noted below.
    std::vector<Tensor<S>> dtraw;  // [C,L]
    std::vector<Tensor<S>> dt;     // [C,L]
    std::vector<Tensor<S>> bmat;   // [Ns,L]
    std::vector<Tensor<S>> cmat;   // [Ns,L]
    std::vector<Tensor<S>> abar;   // [L,C,Ns]
    std::vector<Tensor<S>> hist;   // [L,C,Ns], state after each step
    Tensor<S> a;                   // [C,Ns]
  };
  auto cache = std::make_shared<Cache>();
  cache->a = Tensor<S>({c, ns});
  cache->a.array() = -t.val(a_log_v.id).array().exp();

  Tensor<S> out({nb, c, l});
  const Tensor<S>& d_skip = t.val(d_skip_v.id);
  for (Index b = 0; b < nb; ++b) {
    typename Tensor<S>::ConstMatrixMap um(u.data() + b * c * l, c, l);
    Tensor<S> dtraw({c, l}), dt({c, l}), bmat({ns, l}), cmat({ns, l});
    dtraw.matrix(c, l).noalias() = t.val(w_dt_v.id).matrix(c, c) * um;
    dtraw.matrix(c, l).colwise() +=
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(t.val(b_dt_v.id).data(), c);
    for (Index i = 0; i < dtraw.size(); ++i) dt[i] = detail::softplus(dtraw[i]);
    bmat.matrix(ns, l).noalias() = t.val(w_b_v.id).matrix(ns, c) * um;
    cmat.matrix(ns, l).noalias() = t.val(w_c_v.id).matrix(ns, c) * um;

    Tensor<S> abar({l, c, ns}), hist({l, c, ns});
    std::vector<S> h(static_cast<std::size_t>(c * ns), S(0));
    for (Index step = 0; step < l; ++step) {
      bool finite = true;
      for (Index ic = 0; ic < c; ++ic) {
        const S ut = um(ic, step);
        const S dtv = dt(ic, step);
        S yv = d_skip[ic] * ut;
        S* hc = h.data() + ic * ns;
        for (Index in = 0; in < ns; ++in) {
          const S z = dtv * cache->a(ic, in);
          const S ab = std::exp(z);
          const S bb = rule == DiscretizeRule::zoh ? dtv * detail::zoh_phi(z) * bmat(in, step)
                                                   : dtv * bmat(in, step);
          hc[in] = ab * hc[in] + bb * ut;
          abar(step, ic, in) = ab;
          hist(step, ic, in) = hc[in];
          yv += cmat(in, step) * hc[in];
        }
        out(b, ic, step) = yv;
        finite = finite && std::isfinite(static_cast<double>(yv));
      }
      if (!finite) throw NumericFault("selective_scan", step);
    }
    cache->dtraw.push_back(std::move(dtraw));
    cache->dt.push_back(std::move(dt));
    cache->bmat.push_back(std::move(bmat));
    cache->cmat.push_back(std::move(cmat));
    cache->abar.push_back(std::move(abar));
    cache->hist.push_back(std::move(hist));
  }

  auto bw = [u_id = uv.id, a_log_id = a_log_v.id, w_dt_id = w_dt_v.id, b_dt_id = b_dt_v.id,
             w_b_id = w_b_v.id, w_c_id = w_c_v.id, d_id = d_skip_v.id, rule, nb, c, l, ns,
             cache](Tape<S>& t, int self) {
    const Tensor<S>& u = t.val(u_id);
    const Tensor<S>& gy = t.grad_ref(self);
    Tensor<S> ga({c, ns});  // d loss / d A, chained into a_log at the end
    for (Index b = 0; b < nb; ++b) {
      const Tensor<S>& dtraw = cache->dtraw[static_cast<std::size_t>(b)];
      const Tensor<S>& dt = cache->dt[static_cast<std::size_t>(b)];
      const Tensor<S>& bmat = cache->bmat[static_cast<std::size_t>(b)];
      const Tensor<S>& cmat = cache->cmat[static_cast<std::size_t>(b)];
      const Tensor<S>& abar = cache->abar[static_cast<std::size_t>(b)];
      const Tensor<S>& hist = cache->hist[static_cast<std::size_t>(b)];
      typename Tensor<S>::ConstMatrixMap um(u.data() + b * c * l, c, l);
      typename Tensor<S>::ConstMatrixMap gym(gy.data() + b * c * l, c, l);

      Tensor<S> gu_tok({c, l}), gdtraw({c, l}), gb({ns, l}), gc({ns, l}), gd({c});
      std::vector<S> gh(static_cast<std::size_t>(c * ns), S(0));
      for (Index step = l - 1; step >= 0; --step) {
        for (Index ic = 0; ic < c; ++ic) {
          const S gyv = gym(ic, step);
          const S ut = um(ic, step);
          const S dtv = dt(ic, step);
          gd[ic] += gyv * ut;
          S gu_acc = gyv * t.val(d_id)[ic];
          S gdt_acc = S(0);
          S* ghc = gh.data() + ic * ns;
          for (Index in = 0; in < ns; ++in) {
            const S hv = hist(step, ic, in);
            const S hprev = step > 0 ? hist(step - 1, ic, in) : S(0);
            gc(in, step) += gyv * hv;
            S ghv = ghc[in] + gyv * cmat(in, step);
            const S ab = abar(step, ic, in);
            const S av = cache->a(ic, in);
            const S z = dtv * av;
            const S bn = bmat(in, step);
            S bb, gb_coef, gdt_from_b, ga_from_b;
            if (rule == DiscretizeRule::zoh) {
              const S phi = detail::zoh_phi(z);
              bb = dtv * phi * bn;
              gb_coef = dtv * phi;
              gdt_from_b = ab * bn;  // d bbar / d dt = exp(z) B
              ga_from_b = dtv * dtv * detail::zoh_phi_prime(z) * bn;
            } else {
              bb = dtv * bn;
              gb_coef = dtv;
              gdt_from_b = bn;
              ga_from_b = S(0);
            }
            const S gabar = ghv * hprev;
            const S gbbar = ghv * ut;
            gb(in, step) += gbbar * gb_coef;
            gdt_acc += gbbar * gdt_from_b + gabar * av * ab;
            ga(ic, in) += gbbar * ga_from_b + gabar * dtv * ab;
            gu_acc += ghv * bb;
            ghc[in] = ghv * ab;  // flows to step-1
          }
          gu_tok(ic, step) = gu_acc;
          gdtraw(ic, step) = gdt_acc * detail::logistic(dtraw(ic, step));
        }
      }
      // Chain the token-side gradients through the three projections.
      if (t.wants_grad(u_id)) {
        typename Tensor<S>::MatrixMap gum(t.grad_ref(u_id).data() + b * c * l, c, l);
        gum.noalias() += gu_tok.matrix(c, l);
        gum.noalias() += t.val(w_dt_id).matrix(c, c).transpose() * gdtraw.matrix(c, l);
        gum.noalias() += t.val(w_b_id).matrix(ns, c).transpose() * gb.matrix(ns, l);
        gum.noalias() += t.val(w_c_id).matrix(ns, c).transpose() * gc.matrix(ns, l);
      }
      if (t.wants_grad(w_dt_id))
        t.grad_ref(w_dt_id).matrix(c, c).noalias() += gdtraw.matrix(c, l) * um.transpose();
      if (t.wants_grad(b_dt_id))
        t.grad_ref(b_dt_id).matrix(c, 1) += gdtraw.matrix(c, l).rowwise().sum();
      if (t.wants_grad(w_b_id))
        t.grad_ref(w_b_id).matrix(ns, c).noalias() += gb.matrix(ns, l) * um.transpose();
      if (t.wants_grad(w_c_id))
        t.grad_ref(w_c_id).matrix(ns, c).noalias() += gc.matrix(ns, l) * um.transpose();
      if (t.wants_grad(d_id)) t.grad_ref(d_id).array() += gd.array();
    }
    if (t.wants_grad(a_log_id))
      t.grad_ref(a_log_id).array() += ga.array() * cache->a.array();  // dA/da_log = A
  };
  return t.emit(std::move(out),
                {uv.id, a_log_v.id, w_dt_v.id, b_dt_v.id, w_b_v.id, w_c_v.id, d_skip_v.id},
                std::move(bw));
}

template <typename S>
Var<S> selective_scan(Tape<S>& tape, Var<S> u, SSMParams<S>& p) {
  return selective_scan(u, tape.param(p.a_log), tape.param(p.w_dt), tape.param(p.b_dt),
                        tape.param(p.w_b), tape.param(p.w_c), tape.param(p.d_skip), p.rule);
}

}  // namespace crackmamba
