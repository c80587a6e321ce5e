#pragma once

#include <optional>

#include "crackmamba/nn.hpp"
#include "crackmamba/ssm.hpp"

namespace crackmamba {

// Composite blocks: gated attention (SCA), the four-direction scan block
// (VSS / SnakeVSS differ only in their direction set), the three-branch
// SCVSS encoder block, and the decoder-side pieces.

template <typename S>
struct ConvWeights {
  Parameter<S> w;
  Parameter<S> b;
};

template <typename S>
struct NormWeights {
  Parameter<S> gain;
  Parameter<S> offset;
};

/// Deterministic weight initialization: one SplitMix64 stream, consumed in
/// construction order. Conv/linear weights are fan-in-scaled uniform, biases
/// and norm offsets zero, norm gains one.
template <typename S>
class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  SplitMix64& rng() { return rng_; }

  Tensor<S> uniform_fanin(Shape shape, Index fan_in) {
    const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<S> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng_.uniform(-k, k));
    return t;
  }

  void conv(ConvWeights<S>& c, Index out_ch, Index in_ch, Index kh, Index kw) {
    c.w.init(uniform_fanin({out_ch, in_ch, kh, kw}, in_ch * kh * kw));
    c.b.init(Tensor<S>({out_ch}));
  }

  void fc(ConvWeights<S>& c, Index out_dim, Index in_dim) {
    c.w.init(uniform_fanin({out_dim, in_dim}, in_dim));
    c.b.init(Tensor<S>({out_dim}));
  }

  void norm(NormWeights<S>& n, Index channels) {
    n.gain.init(Tensor<S>::full({channels}, S(1)));
    n.offset.init(Tensor<S>({channels}));
  }

  /// A_n = -(n+1) via a_log = log(n+1); delta bias set so that the initial
  /// delta = softplus(b_dt) is log-uniform in [0.01, 0.1] per channel.
  void ssm(SSMParams<S>& p, Index channels, Index n_state, DiscretizeRule rule) {
    Tensor<S> a_log({channels, n_state});
    for (Index c = 0; c < channels; ++c)
      for (Index n = 0; n < n_state; ++n)
        a_log(c, n) = static_cast<S>(std::log(static_cast<double>(n + 1)));
    p.a_log.init(std::move(a_log));
    p.w_dt.init(uniform_fanin({channels, channels}, channels));
    Tensor<S> b_dt({channels});
    for (Index c = 0; c < channels; ++c) {
      const double dt0 = std::exp(rng_.uniform(std::log(0.01), std::log(0.1)));
      b_dt[c] = static_cast<S>(std::log(std::expm1(dt0)));  // softplus inverse
    }
    p.b_dt.init(std::move(b_dt));
    p.w_b.init(uniform_fanin({n_state, channels}, channels));
    p.w_c.init(uniform_fanin({n_state, channels}, channels));
    p.d_skip.init(Tensor<S>::full({channels}, S(1)));
    p.rule = rule;
  }

 private:
  SplitMix64 rng_;
};

template <typename S, typename Fn>
void visit_params(ConvWeights<S>& c, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".w", c.w);
  fn(prefix + ".b", c.b);
}

template <typename S, typename Fn>
void visit_params(NormWeights<S>& n, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".g", n.gain);
  fn(prefix + ".o", n.offset);
}

template <typename S, typename Fn>
void visit_params(SSMParams<S>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".a_log", p.a_log);
  fn(prefix + ".w_dt", p.w_dt);
  fn(prefix + ".b_dt", p.b_dt);
  fn(prefix + ".w_b", p.w_b);
  fn(prefix + ".w_c", p.w_c);
  fn(prefix + ".d", p.d_skip);
}

// ---------------------------------------------------------------------------
// SCA: pooled-vector sigmoid gate (shared FC pair over max/avg pooling),
// then a channel-statistics sigmoid gate from a k x k conv over the
// concatenated per-position max/mean.
// ---------------------------------------------------------------------------

template <typename S>
struct SCAWeights {
  Index channels = 0;
  Index kernel = 7;
  ConvWeights<S> fc1;   // [C/ratio, C]
  ConvWeights<S> fc2;   // [C, C/ratio]
  ConvWeights<S> conv;  // [1, 2, k, k]
};

template <typename S>
SCAWeights<S> make_sca(Init<S>& init, Index channels, Index ratio, Index kernel) {
  SCAWeights<S> w;
  w.channels = channels;
  w.kernel = kernel;
  const Index hidden = std::max<Index>(1, channels / ratio);
  init.fc(w.fc1, hidden, channels);
  init.fc(w.fc2, channels, hidden);
  init.conv(w.conv, 1, 2, kernel, kernel);
  return w;
}

template <typename S, typename Fn>
void visit_params(SCAWeights<S>& w, const std::string& prefix, Fn&& fn) {
  visit_params(w.fc1, prefix + ".fc1", fn);
  visit_params(w.fc2, prefix + ".fc2", fn);
  visit_params(w.conv, prefix + ".conv", fn);
}

template <typename S>
Var<S> sca_forward(Tape<S>& t, Var<S> x, SCAWeights<S>& w) {
  const Index n = x.dim(0), c = x.dim(1);
  check_arg(c == w.channels, "sca_forward: channel mismatch");
  auto fc_path = [&](Var<S> pooled) {
    auto v = reshape(pooled, {n, c});
    auto h = relu(linear(v, t.param(w.fc1.w), t.param(w.fc1.b)));
    return linear(h, t.param(w.fc2.w), t.param(w.fc2.b));
  };
  auto gate_vec =
      sigmoid(add(fc_path(global_max_pool(x)), fc_path(global_avg_pool(x))));
  auto xs = mul_channel_gate(x, reshape(gate_vec, {n, c, 1, 1}));
  auto stats = concat_channels(channel_max(xs), channel_mean(xs));
  auto gate_map =
      sigmoid(conv2d(stats, t.param(w.conv.w), t.param(w.conv.b), 1, (w.kernel - 1) / 2));
  return mul_spatial_gate(xs, gate_map);
}

// ---------------------------------------------------------------------------
// VSS: project in, depthwise conv + SiLU, scan along four directions with an
// independent selective SSM per direction, merge, normalize, gate, project
// out. Cross vs snake is purely the DirectionSet. The residual around the
// block belongs to the caller.
// ---------------------------------------------------------------------------

template <typename S>
struct VSSWeights {
  Index dim = 0;
  Index inner = 0;
  ConvWeights<S> in_proj;    // 1x1, dim -> inner
  ConvWeights<S> gate_proj;  // 1x1, dim -> inner
  ConvWeights<S> dw_conv;    // 3x3 depthwise on inner
  std::array<SSMParams<S>, 4> ssm;
  NormWeights<S> out_norm;
  ConvWeights<S> out_proj;  // 1x1, inner -> dim
};

template <typename S>
VSSWeights<S> make_vss(Init<S>& init, Index dim, Index expand, Index n_state,
                       DiscretizeRule rule) {
  VSSWeights<S> w;
  w.dim = dim;
  w.inner = dim * expand;
  init.conv(w.in_proj, w.inner, dim, 1, 1);
  init.conv(w.gate_proj, w.inner, dim, 1, 1);
  init.conv(w.dw_conv, w.inner, 1, 3, 3);
  for (auto& p : w.ssm) init.ssm(p, w.inner, n_state, rule);
  init.norm(w.out_norm, w.inner);
  init.conv(w.out_proj, dim, w.inner, 1, 1);
  return w;
}

template <typename S, typename Fn>
void visit_params(VSSWeights<S>& w, const std::string& prefix, Fn&& fn) {
  visit_params(w.in_proj, prefix + ".in_proj", fn);
  visit_params(w.gate_proj, prefix + ".gate_proj", fn);
  visit_params(w.dw_conv, prefix + ".dw_conv", fn);
  for (int k = 0; k < 4; ++k)
    visit_params(w.ssm[static_cast<std::size_t>(k)], prefix + ".dir" + std::to_string(k), fn);
  visit_params(w.out_norm, prefix + ".out_norm", fn);
  visit_params(w.out_proj, prefix + ".out_proj", fn);
}

template <typename S>
Var<S> vss_forward(Tape<S>& t, Var<S> x, VSSWeights<S>& w, const DirectionSet& dirs) {
  check_arg(x.dim(1) == w.dim, "vss_forward: channel mismatch");
  auto proj = conv2d(x, t.param(w.in_proj.w), t.param(w.in_proj.b));
  auto u = silu(conv2d(proj, t.param(w.dw_conv.w), t.param(w.dw_conv.b), 1, 1, w.inner));
  std::optional<Var<S>> merged;
  for (int k = 0; k < 4; ++k) {
    const ScanOrder& order = dirs.orders[static_cast<std::size_t>(k)];
    auto seq = scan_expand_dir(u, order);
    auto y = selective_scan(t, seq, w.ssm[static_cast<std::size_t>(k)]);
    auto grid = scan_merge_inv(y, order);
    merged = merged ? add(*merged, grid) : grid;
  }
  auto normed = layer_norm(*merged, t.param(w.out_norm.gain), t.param(w.out_norm.offset));
  auto gate = silu(conv2d(x, t.param(w.gate_proj.w), t.param(w.gate_proj.b)));
  return conv2d(mul(normed, gate), t.param(w.out_proj.w), t.param(w.out_proj.b));
}

// ---------------------------------------------------------------------------
// SCVSS: conv / snake-VSS / cross-VSS branches, each gated by its own SCA,
// summed under drop-path into a residual, then a pre-norm MLP residual.
// ---------------------------------------------------------------------------

template <typename S>
struct SCVSSBlock {
  Index dim = 0;
  bool use_conv = true, use_snake = true, use_cross = true, use_sca = true;
  double drop_path_rate = 0;

  NormWeights<S> conv_norm;
  ConvWeights<S> conv1, conv2;  // 3x3 stack
  std::optional<VSSWeights<S>> snake, cross;
  std::optional<SCAWeights<S>> sca_conv, sca_snake, sca_cross;
  NormWeights<S> mlp_norm;
  ConvWeights<S> mlp_fc1, mlp_fc2;  // 1x1 convs, ratio x expansion
};

struct SCVSSOptions {
  bool use_conv = true, use_snake = true, use_cross = true, use_sca = true;
  double drop_path_rate = 0;
  Index vss_expand = 2;
  Index n_state = 8;
  Index mlp_ratio = 4;
  Index sca_ratio = 4;
  Index sca_kernel = 7;
  DiscretizeRule discretize = DiscretizeRule::zoh;
};

template <typename S>
SCVSSBlock<S> make_scvss(Init<S>& init, Index dim, const SCVSSOptions& opt) {
  check_arg(opt.use_conv || opt.use_snake || opt.use_cross,
            "scvss: at least one branch must be enabled");
  SCVSSBlock<S> b;
  b.dim = dim;
  b.use_conv = opt.use_conv;
  b.use_snake = opt.use_snake;
  b.use_cross = opt.use_cross;
  b.use_sca = opt.use_sca;
  b.drop_path_rate = opt.drop_path_rate;
  if (opt.use_conv) {
    init.norm(b.conv_norm, dim);
    init.conv(b.conv1, dim, dim, 3, 3);
    init.conv(b.conv2, dim, dim, 3, 3);
    if (opt.use_sca) b.sca_conv = make_sca(init, dim, opt.sca_ratio, opt.sca_kernel);
  }
  if (opt.use_snake) {
    b.snake = make_vss(init, dim, opt.vss_expand, opt.n_state, opt.discretize);
    if (opt.use_sca) b.sca_snake = make_sca(init, dim, opt.sca_ratio, opt.sca_kernel);
  }
  if (opt.use_cross) {
    b.cross = make_vss(init, dim, opt.vss_expand, opt.n_state, opt.discretize);
    if (opt.use_sca) b.sca_cross = make_sca(init, dim, opt.sca_ratio, opt.sca_kernel);
  }
  init.norm(b.mlp_norm, dim);
  init.conv(b.mlp_fc1, dim * opt.mlp_ratio, dim, 1, 1);
  init.conv(b.mlp_fc2, dim, dim * opt.mlp_ratio, 1, 1);
  return b;
}

template <typename S, typename Fn>
void visit_params(SCVSSBlock<S>& b, const std::string& prefix, Fn&& fn) {
  if (b.use_conv) {
    visit_params(b.conv_norm, prefix + ".conv.norm", fn);
    visit_params(b.conv1, prefix + ".conv.c1", fn);
    visit_params(b.conv2, prefix + ".conv.c2", fn);
    if (b.use_sca) visit_params(*b.sca_conv, prefix + ".sca_conv", fn);
  }
  if (b.use_snake) {
    visit_params(*b.snake, prefix + ".snake", fn);
    if (b.use_sca) visit_params(*b.sca_snake, prefix + ".sca_snake", fn);
  }
  if (b.use_cross) {
    visit_params(*b.cross, prefix + ".cross", fn);
    if (b.use_sca) visit_params(*b.sca_cross, prefix + ".sca_cross", fn);
  }
  visit_params(b.mlp_norm, prefix + ".mlp.norm", fn);
  visit_params(b.mlp_fc1, prefix + ".mlp.fc1", fn);
  visit_params(b.mlp_fc2, prefix + ".mlp.fc2", fn);
}

template <typename S>
Var<S> scvss_forward(Tape<S>& t, Var<S> x, SCVSSBlock<S>& b, const DirectionSet& cross_dirs,
                     const DirectionSet& snake_dirs, bool training, SplitMix64& rng) {
  auto gated = [&](Var<S> v, std::optional<SCAWeights<S>>& sca) {
    return b.use_sca ? sca_forward(t, v, *sca) : v;
  };
  std::optional<Var<S>> branch_sum;
  auto accumulate = [&](Var<S> v) { branch_sum = branch_sum ? add(*branch_sum, v) : v; };
  if (b.use_conv) {
    auto h = layer_norm(x, t.param(b.conv_norm.gain), t.param(b.conv_norm.offset));
    h = silu(conv2d(h, t.param(b.conv1.w), t.param(b.conv1.b), 1, 1));
    h = conv2d(h, t.param(b.conv2.w), t.param(b.conv2.b), 1, 1);
    accumulate(gated(h, b.sca_conv));
  }
  if (b.use_snake) accumulate(gated(vss_forward(t, x, *b.snake, snake_dirs), b.sca_snake));
  if (b.use_cross) accumulate(gated(vss_forward(t, x, *b.cross, cross_dirs), b.sca_cross));

  auto r = add(x, drop_path(*branch_sum, b.drop_path_rate, training, rng));
  auto h = layer_norm(r, t.param(b.mlp_norm.gain), t.param(b.mlp_norm.offset));
  h = silu(conv2d(h, t.param(b.mlp_fc1.w), t.param(b.mlp_fc1.b)));
  h = conv2d(h, t.param(b.mlp_fc2.w), t.param(b.mlp_fc2.b));
  return add(r, h);
}

// ---------------------------------------------------------------------------
// Decoder block and segmentation head.
// ---------------------------------------------------------------------------

template <typename S>
struct DecoderBlockWeights {
  Index in_ch = 0, skip_ch = 0, out_ch = 0;
  ConvWeights<S> adjust;  // 1x1, in -> out
  ConvWeights<S> fuse1, fuse2;
  NormWeights<S> norm1, norm2;
  UpsampleMode mode = UpsampleMode::bilinear;
};

template <typename S>
DecoderBlockWeights<S> make_decoder_block(Init<S>& init, Index in_ch, Index skip_ch, Index out_ch,
                                          UpsampleMode mode) {
  DecoderBlockWeights<S> w;
  w.in_ch = in_ch;
  w.skip_ch = skip_ch;
  w.out_ch = out_ch;
  w.mode = mode;
  init.conv(w.adjust, out_ch, in_ch, 1, 1);
  init.conv(w.fuse1, out_ch, out_ch + skip_ch, 3, 3);
  init.norm(w.norm1, out_ch);
  init.conv(w.fuse2, out_ch, out_ch, 3, 3);
  init.norm(w.norm2, out_ch);
  return w;
}

template <typename S, typename Fn>
void visit_params(DecoderBlockWeights<S>& w, const std::string& prefix, Fn&& fn) {
  visit_params(w.adjust, prefix + ".adjust", fn);
  visit_params(w.fuse1, prefix + ".fuse1", fn);
  visit_params(w.norm1, prefix + ".norm1", fn);
  visit_params(w.fuse2, prefix + ".fuse2", fn);
  visit_params(w.norm2, prefix + ".norm2", fn);
}

/// Upsample 2x, adjust channels, concat the skip, fuse with two
/// conv+norm+relu layers. The skip must be exactly twice the input size.
template <typename S>
Var<S> decoder_forward(Tape<S>& t, Var<S> x, Var<S> skip, DecoderBlockWeights<S>& w) {
  check_arg(skip.dim(2) == 2 * x.dim(2) && skip.dim(3) == 2 * x.dim(3),
            "decoder_forward: skip must be exactly 2x the input spatial size, got " +
                shape_str(skip.value().shape()) + " for input " + shape_str(x.value().shape()));
  auto up = upsample2x(x, w.mode);
  auto adj = conv2d(up, t.param(w.adjust.w), t.param(w.adjust.b));
  auto cat = concat_channels(adj, skip);
  auto h = relu(layer_norm(conv2d(cat, t.param(w.fuse1.w), t.param(w.fuse1.b), 1, 1),
                           t.param(w.norm1.gain), t.param(w.norm1.offset)));
  return relu(layer_norm(conv2d(h, t.param(w.fuse2.w), t.param(w.fuse2.b), 1, 1),
                         t.param(w.norm2.gain), t.param(w.norm2.offset)));
}

template <typename S>
struct SegHeadWeights {
  ConvWeights<S> f1, f2;
  NormWeights<S> n1, n2;
  ConvWeights<S> cls;  // 1x1 to class channels
};

template <typename S>
SegHeadWeights<S> make_seg_head(Init<S>& init, Index channels, Index classes) {
  SegHeadWeights<S> w;
  init.conv(w.f1, channels, channels, 3, 3);
  init.norm(w.n1, channels);
  init.conv(w.f2, channels, channels, 3, 3);
  init.norm(w.n2, channels);
  init.conv(w.cls, classes, channels, 1, 1);
  return w;
}

template <typename S, typename Fn>
void visit_params(SegHeadWeights<S>& w, const std::string& prefix, Fn&& fn) {
  visit_params(w.f1, prefix + ".f1", fn);
  visit_params(w.n1, prefix + ".n1", fn);
  visit_params(w.f2, prefix + ".f2", fn);
  visit_params(w.n2, prefix + ".n2", fn);
  visit_params(w.cls, prefix + ".cls", fn);
}

template <typename S>
Var<S> seg_head_forward(Tape<S>& t, Var<S> x, SegHeadWeights<S>& w) {
  auto h = relu(layer_norm(conv2d(x, t.param(w.f1.w), t.param(w.f1.b), 1, 1), t.param(w.n1.gain),
                           t.param(w.n1.offset)));
  h = relu(layer_norm(conv2d(h, t.param(w.f2.w), t.param(w.f2.b), 1, 1), t.param(w.n2.gain),
                      t.param(w.n2.offset)));
  return conv2d(h, t.param(w.cls.w), t.param(w.cls.b));
}

}  // namespace crackmamba
