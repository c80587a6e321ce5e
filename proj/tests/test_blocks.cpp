#include <doctest.h>

#include "crackmamba/blocks.hpp"
#include "oracle_helpers.hpp"

using namespace crackmamba;

namespace {

template <typename W>
void zero_all_params(W& w) {
  visit_params(w, "", [](const std::string&, Parameter<double>& p) {
    p.value.array().setZero();
  });
}

template <typename W>
std::vector<std::pair<std::string, Parameter<double>*>> params_of(W& w) {
  std::vector<std::pair<std::string, Parameter<double>*>> out;
  visit_params(w, "", [&](const std::string& name, Parameter<double>& p) {
    out.emplace_back(name, &p);
  });
  return out;
}

/// Straight-line SCA evaluation with plain loops and the naive conv oracle.
Tensor<double> sca_oracle(const Tensor<double>& x, SCAWeights<double>& w) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3), hw = h * ww;
  const Index hidden = w.fc1.w.value.dim(0);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };

  Tensor<double> xs(x.shape());
  for (Index in = 0; in < n; ++in) {
    std::vector<double> mx(static_cast<std::size_t>(c), -1e300), av(static_cast<std::size_t>(c), 0);
    for (Index ic = 0; ic < c; ++ic)
      for (Index p = 0; p < hw; ++p) {
        const double v = x[(in * c + ic) * hw + p];
        mx[static_cast<std::size_t>(ic)] = std::max(mx[static_cast<std::size_t>(ic)], v);
        av[static_cast<std::size_t>(ic)] += v / static_cast<double>(hw);
      }
    auto fc = [&](const std::vector<double>& in_vec) {
      std::vector<double> hvec(static_cast<std::size_t>(hidden), 0);
      for (Index i = 0; i < hidden; ++i) {
        double acc = w.fc1.b.value[i];
        for (Index j = 0; j < c; ++j) acc += w.fc1.w.value(i, j) * in_vec[static_cast<std::size_t>(j)];
        hvec[static_cast<std::size_t>(i)] = std::max(0.0, acc);
      }
      std::vector<double> out(static_cast<std::size_t>(c), 0);
      for (Index i = 0; i < c; ++i) {
        double acc = w.fc2.b.value[i];
        for (Index j = 0; j < hidden; ++j) acc += w.fc2.w.value(i, j) * hvec[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = acc;
      }
      return out;
    };
    const auto gm = fc(mx), ga = fc(av);
    for (Index ic = 0; ic < c; ++ic) {
      const double gate = sig(gm[static_cast<std::size_t>(ic)] + ga[static_cast<std::size_t>(ic)]);
      for (Index p = 0; p < hw; ++p) xs[(in * c + ic) * hw + p] = x[(in * c + ic) * hw + p] * gate;
    }
  }

  Tensor<double> stats({n, 2, h, ww});
  for (Index in = 0; in < n; ++in)
    for (Index p = 0; p < hw; ++p) {
      double cmax = -1e300, cmean = 0;
      for (Index ic = 0; ic < c; ++ic) {
        const double v = xs[(in * c + ic) * hw + p];
        cmax = std::max(cmax, v);
        cmean += v / static_cast<double>(c);
      }
      stats[(in * 2 + 0) * hw + p] = cmax;
      stats[(in * 2 + 1) * hw + p] = cmean;
    }
  const auto conv = oracle::naive_conv2d(stats, w.conv.w.value, w.conv.b.value, 1,
                                         (w.kernel - 1) / 2, 1);
  Tensor<double> out(x.shape());
  for (Index in = 0; in < n; ++in)
    for (Index ic = 0; ic < c; ++ic)
      for (Index p = 0; p < hw; ++p)
        out[(in * c + ic) * hw + p] = xs[(in * c + ic) * hw + p] * sig(conv[in * hw + p]);
  return out;
}

SCVSSOptions small_opts(bool sca = true) {
  SCVSSOptions o;
  o.use_sca = sca;
  o.drop_path_rate = 0.0;
  o.vss_expand = 2;
  o.n_state = 2;
  o.mlp_ratio = 2;
  o.sca_ratio = 2;
  o.sca_kernel = 3;
  return o;
}

}  // namespace

TEST_CASE("SCA with all-zero weights scales the input by exactly 1/4") {
  Init<double> init(3);
  auto w = make_sca(init, 4, 2, 3);
  zero_all_params(w);
  SplitMix64 rng(8);
  Tensor<double> x = oracle::random_tensor(rng, {2, 4, 3, 3});
  Tape<double> t;
  auto y = sca_forward(t, t.input(x), w);
  for (Index i = 0; i < x.size(); ++i)
    CHECK(y.value()[i] == doctest::Approx(x[i] / 4).epsilon(1e-14));
}

TEST_CASE("SCA gates keep the output magnitude below the input everywhere") {
  Init<double> init(11);
  auto w = make_sca(init, 6, 4, 7);
  SplitMix64 rng(12);
  Tensor<double> x = oracle::random_tensor(rng, {2, 6, 5, 5}, -4, 4);
  Tape<double> t;
  auto y = sca_forward(t, t.input(x), w);
  for (Index i = 0; i < x.size(); ++i) {
    REQUIRE(std::abs(y.value()[i]) <= std::abs(x[i]));
    if (x[i] != 0.0) REQUIRE(std::abs(y.value()[i]) > 0.0);  // gates strictly inside (0,1)
  }
}

TEST_CASE("SCA matches the straight-line oracle, including constant input") {
  Init<double> init(21);
  auto w = make_sca(init, 5, 2, 3);
  SplitMix64 rng(22);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor<double> x = trial == 0 ? Tensor<double>::full({1, 5, 4, 4}, 0.7)
                                  : oracle::random_tensor(rng, {2, 5, 4, 4});
    Tape<double> t;
    auto y = sca_forward(t, t.input(x), w);
    const auto expected = sca_oracle(x, w);
    for (Index i = 0; i < x.size(); ++i)
      REQUIRE(y.value()[i] == doctest::Approx(expected[i]).epsilon(1e-10));
  }
}

TEST_CASE("SCA gradient check") {
  Init<double> init(31);
  auto w = make_sca(init, 4, 2, 3);
  SplitMix64 rng(32);
  Tensor<double> x = oracle::random_tensor(rng, {1, 4, 3, 3});
  Tensor<double> weights = oracle::random_tensor(rng, {1, 4, 3, 3});
  auto eval = [&]() {
    Tape<double> t;
    auto y = sca_forward(t, t.input(x), w);
    return sum_all(mul(y, t.input(weights))).value()[0];
  };
  Tape<double> t;
  auto xv = t.input(x, true);
  for (auto& [name, p] : params_of(w)) p->zero_grad();
  t.backward(sum_all(mul(sca_forward(t, xv, w), t.input(weights))));
  oracle::GradCheckStats stats;
  oracle::check_tensor_grad(stats, eval, x, t.grad_ref(xv.id), "x");
  for (auto& [name, p] : params_of(w))
    oracle::check_tensor_grad(stats, eval, p->value, p->grad, name);
  INFO(stats.worst);
  CHECK(stats.max_rel < 1e-4);
}

TEST_CASE("VSS: snake and cross directions agree on spatially constant input") {
  Init<double> init(41);
  auto w = make_vss(init, 3, 2, 2, DiscretizeRule::zoh);
  const auto x = Tensor<double>::full({2, 3, 4, 4}, 1.3);
  Tape<double> t;
  auto y_cross = vss_forward(t, t.input(x), w, cross_orders(4, 4));
  auto y_snake = vss_forward(t, t.input(x), w, snake_orders(4, 4));
  for (Index i = 0; i < x.size(); ++i) REQUIRE(y_cross.value()[i] == y_snake.value()[i]);
}

TEST_CASE("VSS: zero input with zero biases maps to zero output") {
  Init<double> init(43);
  auto w = make_vss(init, 3, 2, 2, DiscretizeRule::zoh);
  w.in_proj.b.value.array().setZero();
  w.gate_proj.b.value.array().setZero();
  w.dw_conv.b.value.array().setZero();
  w.out_proj.b.value.array().setZero();
  w.out_norm.offset.value.array().setZero();
  Tape<double> t;
  auto y = vss_forward(t, t.input(Tensor<double>({1, 3, 4, 4})), w, snake_orders(4, 4));
  for (Index i = 0; i < y.value().size(); ++i) CHECK(y.value()[i] == 0.0);
}

TEST_CASE("VSS forward equals the documented composition of submodules") {
  Init<double> init(47);
  const Index dim = 3, expand = 2, inner = dim * expand;
  auto w = make_vss(init, dim, expand, 2, DiscretizeRule::zoh);
  SplitMix64 rng(48);
  Tensor<double> x = oracle::random_tensor(rng, {1, dim, 4, 4});
  const DirectionSet dirs = snake_orders(4, 4);

  Tape<double> t;
  auto y = vss_forward(t, t.input(x), w, dirs);

  // Step-by-step reference composition on a separate tape.
  Tape<double> r;
  auto xv = r.input(x);
  auto proj = conv2d(xv, r.param(w.in_proj.w), r.param(w.in_proj.b));
  auto u = silu(conv2d(proj, r.param(w.dw_conv.w), r.param(w.dw_conv.b), 1, 1, inner));
  std::optional<Var<double>> merged;
  for (int k = 0; k < 4; ++k) {
    auto seq = scan_expand_dir(u, dirs.orders[static_cast<std::size_t>(k)]);
    auto ys = selective_scan(r, seq, w.ssm[static_cast<std::size_t>(k)]);
    auto grid = scan_merge_inv(ys, dirs.orders[static_cast<std::size_t>(k)]);
    merged = merged ? add(*merged, grid) : grid;
  }
  auto normed = layer_norm(*merged, r.param(w.out_norm.gain), r.param(w.out_norm.offset));
  auto gate = silu(conv2d(xv, r.param(w.gate_proj.w), r.param(w.gate_proj.b)));
  auto expected = conv2d(mul(normed, gate), r.param(w.out_proj.w), r.param(w.out_proj.b));

  for (Index i = 0; i < x.size(); ++i) REQUIRE(y.value()[i] == expected.value()[i]);
}

TEST_CASE("VSS gradient check") {
  Init<double> init(53);
  auto w = make_vss(init, 2, 2, 2, DiscretizeRule::zoh);
  SplitMix64 rng(54);
  Tensor<double> x = oracle::random_tensor(rng, {1, 2, 3, 3});
  Tensor<double> weights = oracle::random_tensor(rng, {1, 2, 3, 3});
  const DirectionSet dirs = snake_orders(3, 3);
  auto eval = [&]() {
    Tape<double> t;
    return sum_all(mul(vss_forward(t, t.input(x), w, dirs), t.input(weights))).value()[0];
  };
  Tape<double> t;
  auto xv = t.input(x, true);
  for (auto& [name, p] : params_of(w)) p->zero_grad();
  t.backward(sum_all(mul(vss_forward(t, xv, w, dirs), t.input(weights))));
  oracle::GradCheckStats stats;
  SplitMix64 pick(55);
  oracle::check_tensor_grad(stats, eval, x, t.grad_ref(xv.id), "x");
  for (auto& [name, p] : params_of(w))
    oracle::check_tensor_grad(stats, eval, p->value, p->grad, name, &pick, 12);
  INFO(stats.worst);
  CHECK(stats.max_rel < 1e-4);
}

TEST_CASE("SCVSS: a fired drop-path leaves only the MLP residual of x") {
  Init<double> init(61);
  auto opts = small_opts();
  opts.drop_path_rate = 0.999999;
  auto b = make_scvss(init, 3, opts);
  SplitMix64 rng(62);
  Tensor<double> x = oracle::random_tensor(rng, {1, 3, 4, 4});

  REQUIRE(SplitMix64(7).next_double() < opts.drop_path_rate);  // this draw fires
  SplitMix64 dp(7);
  Tape<double> t;
  auto y = scvss_forward(t, t.input(x), b, cross_orders(4, 4), snake_orders(4, 4), true, dp);

  Tape<double> r;
  auto xv = r.input(x);
  auto h = layer_norm(xv, r.param(b.mlp_norm.gain), r.param(b.mlp_norm.offset));
  h = silu(conv2d(h, r.param(b.mlp_fc1.w), r.param(b.mlp_fc1.b)));
  h = conv2d(h, r.param(b.mlp_fc2.w), r.param(b.mlp_fc2.b));
  auto expected = add(xv, h);
  for (Index i = 0; i < x.size(); ++i) REQUIRE(y.value()[i] == expected.value()[i]);
}

TEST_CASE("SCVSS: eval mode with zero branch and MLP weights is the identity") {
  Init<double> init(63);
  auto b = make_scvss(init, 3, small_opts());
  zero_all_params(b);
  SplitMix64 rng(64);
  Tensor<double> x = oracle::random_tensor(rng, {2, 3, 4, 4});
  SplitMix64 dp(1);
  Tape<double> t;
  auto y = scvss_forward(t, t.input(x), b, cross_orders(4, 4), snake_orders(4, 4), false, dp);
  // Branches: the conv path is zero, VSS outputs are zero (zero projections),
  // SCA of a zero map is zero; the zero-weight MLP adds nothing.
  for (Index i = 0; i < x.size(); ++i) REQUIRE(y.value()[i] == x[i]);
}

TEST_CASE("SCVSS gradient check") {
  Init<double> init(71);
  auto b = make_scvss(init, 2, small_opts());
  SplitMix64 rng(72);
  Tensor<double> x = oracle::random_tensor(rng, {1, 2, 4, 4});
  Tensor<double> weights = oracle::random_tensor(rng, {1, 2, 4, 4});
  const DirectionSet cd = cross_orders(4, 4), sd = snake_orders(4, 4);
  auto eval = [&]() {
    SplitMix64 dp(5);
    Tape<double> t;
    return sum_all(mul(scvss_forward(t, t.input(x), b, cd, sd, false, dp), t.input(weights)))
        .value()[0];
  };
  SplitMix64 dp(5);
  Tape<double> t;
  auto xv = t.input(x, true);
  for (auto& [name, p] : params_of(b)) p->zero_grad();
  t.backward(sum_all(mul(scvss_forward(t, xv, b, cd, sd, false, dp), t.input(weights))));
  oracle::GradCheckStats stats;
  SplitMix64 pick(73);
  oracle::check_tensor_grad(stats, eval, x, t.grad_ref(xv.id), "x");
  for (auto& [name, p] : params_of(b))
    oracle::check_tensor_grad(stats, eval, p->value, p->grad, name, &pick, 8);
  INFO(stats.worst);
  CHECK(stats.max_rel < 1e-4);
}

TEST_CASE("drop-path expectation matches the eval-mode branch contribution") {
  // E[drop_path(s)] = s over training-mode trials.
  SplitMix64 rng(81);
  Tensor<double> s = oracle::random_tensor(rng, {1, 2, 2, 2}, 0.5, 1.5);
  const double rate = 0.3;
  const Index trials = 10000;
  Tensor<double> mean(s.shape());
  SplitMix64 dp(82);
  for (Index k = 0; k < trials; ++k) {
    Tape<double> t;
    auto y = drop_path(t.input(s), rate, true, dp);
    mean.array() += y.value().array() / static_cast<double>(trials);
  }
  // Per-trial variance is s^2 rate/(1-rate); allow 3 standard errors.
  for (Index i = 0; i < s.size(); ++i) {
    const double se = std::abs(s[i]) * std::sqrt(rate / (1 - rate) / static_cast<double>(trials));
    REQUIRE(std::abs(mean[i] - s[i]) <= 3 * se);
  }
}

TEST_CASE("blocks preserve [N,C,H,W] across a config matrix") {
  SplitMix64 rng(91);
  for (const auto& [c, h, w] : std::vector<std::tuple<Index, Index, Index>>{
           {2, 3, 5}, {4, 4, 4}, {3, 7, 2}, {5, 1, 6}}) {
    Init<double> init(static_cast<std::uint64_t>(c * 100 + h * 10 + w));
    Tensor<double> x = oracle::random_tensor(rng, {2, c, h, w});
    Tape<double> t;
    auto sca = make_sca(init, c, 2, 3);
    CHECK(sca_forward(t, t.input(x), sca).value().shape() == x.shape());
    auto vss = make_vss(init, c, 2, 2, DiscretizeRule::zoh);
    CHECK(vss_forward(t, t.input(x), vss, cross_orders(h, w)).value().shape() == x.shape());
    CHECK(vss_forward(t, t.input(x), vss, snake_orders(h, w)).value().shape() == x.shape());
    auto blk = make_scvss(init, c, small_opts());
    SplitMix64 dp(3);
    CHECK(scvss_forward(t, t.input(x), blk, cross_orders(h, w), snake_orders(h, w), true, dp)
              .value()
              .shape() == x.shape());
  }
}

TEST_CASE("decoder block: shape contract, zero case and spatial mismatch") {
  Init<double> init(101);
  auto w = make_decoder_block<double>(init, 4, 2, 3, UpsampleMode::bilinear);
  SplitMix64 rng(102);
  Tensor<double> x = oracle::random_tensor(rng, {2, 4, 3, 5});
  Tensor<double> skip = oracle::random_tensor(rng, {2, 2, 6, 10});
  Tape<double> t;
  auto y = decoder_forward(t, t.input(x), t.input(skip), w);
  CHECK(y.value().shape() == Shape{2, 3, 6, 10});

  CHECK_THROWS_AS(
      decoder_forward(t, t.input(x), t.input(oracle::random_tensor(rng, {2, 2, 5, 10})), w),
      std::invalid_argument);

  zero_all_params(w);
  auto z = decoder_forward(t, t.input(x), t.input(Tensor<double>({2, 2, 6, 10})), w);
  for (Index i = 0; i < z.value().size(); ++i) CHECK(z.value()[i] == 0.0);
}

TEST_CASE("decoder block equals the documented composition") {
  Init<double> init(103);
  auto w = make_decoder_block<double>(init, 3, 2, 2, UpsampleMode::bilinear);
  SplitMix64 rng(104);
  Tensor<double> x = oracle::random_tensor(rng, {1, 3, 4, 4});
  Tensor<double> skip = oracle::random_tensor(rng, {1, 2, 8, 8});
  Tape<double> t;
  auto y = decoder_forward(t, t.input(x), t.input(skip), w);

  Tape<double> r;
  auto up = upsample2x(r.input(x));
  auto adj = conv2d(up, r.param(w.adjust.w), r.param(w.adjust.b));
  auto cat = concat_channels(adj, r.input(skip));
  auto h1 = relu(layer_norm(conv2d(cat, r.param(w.fuse1.w), r.param(w.fuse1.b), 1, 1),
                            r.param(w.norm1.gain), r.param(w.norm1.offset)));
  auto expected = relu(layer_norm(conv2d(h1, r.param(w.fuse2.w), r.param(w.fuse2.b), 1, 1),
                                  r.param(w.norm2.gain), r.param(w.norm2.offset)));
  for (Index i = 0; i < y.value().size(); ++i) REQUIRE(y.value()[i] == expected.value()[i]);
}

TEST_CASE("decoder block gradient check") {
  Init<double> init(105);
  auto w = make_decoder_block<double>(init, 2, 2, 2, UpsampleMode::bilinear);
  SplitMix64 rng(106);
  Tensor<double> x = oracle::random_tensor(rng, {1, 2, 2, 2});
  Tensor<double> skip = oracle::random_tensor(rng, {1, 2, 4, 4});
  Tensor<double> weights = oracle::random_tensor(rng, {1, 2, 4, 4});
  auto eval = [&]() {
    Tape<double> t;
    auto y = decoder_forward(t, t.input(x), t.input(skip), w);
    return sum_all(mul(y, t.input(weights))).value()[0];
  };
  Tape<double> t;
  auto xv = t.input(x, true);
  auto sv = t.input(skip, true);
  for (auto& [name, p] : params_of(w)) p->zero_grad();
  t.backward(sum_all(mul(decoder_forward(t, xv, sv, w), t.input(weights))));
  oracle::GradCheckStats stats;
  SplitMix64 pick(107);
  oracle::check_tensor_grad(stats, eval, x, t.grad_ref(xv.id), "x");
  oracle::check_tensor_grad(stats, eval, skip, t.grad_ref(sv.id), "skip");
  for (auto& [name, p] : params_of(w))
    oracle::check_tensor_grad(stats, eval, p->value, p->grad, name, &pick, 10);
  INFO(stats.worst);
  CHECK(stats.max_rel < 1e-4);
}

TEST_CASE("segmentation head outputs two class channels") {
  Init<double> init(111);
  auto w = make_seg_head<double>(init, 3, 2);
  SplitMix64 rng(112);
  Tensor<double> x = oracle::random_tensor(rng, {2, 3, 5, 5});
  Tape<double> t;
  auto y = seg_head_forward(t, t.input(x), w);
  CHECK(y.value().shape() == Shape{2, 2, 5, 5});

  zero_all_params(w);
  auto logits = seg_head_forward(t, t.input(x), w);
  auto p = softmax_channels(logits);
  for (Index i = 0; i < p.value().size(); ++i) CHECK(p.value()[i] == doctest::Approx(0.5));
}

TEST_CASE("segmentation head gradient check") {
  Init<double> init(113);
  auto w = make_seg_head<double>(init, 2, 2);
  SplitMix64 rng(114);
  Tensor<double> x = oracle::random_tensor(rng, {1, 2, 3, 3});
  Tensor<double> weights = oracle::random_tensor(rng, {1, 2, 3, 3});
  auto eval = [&]() {
    Tape<double> t;
    return sum_all(mul(seg_head_forward(t, t.input(x), w), t.input(weights))).value()[0];
  };
  Tape<double> t;
  auto xv = t.input(x, true);
  for (auto& [name, p] : params_of(w)) p->zero_grad();
  t.backward(sum_all(mul(seg_head_forward(t, xv, w), t.input(weights))));
  oracle::GradCheckStats stats;
  SplitMix64 pick(115);
  oracle::check_tensor_grad(stats, eval, x, t.grad_ref(xv.id), "x");
  for (auto& [name, p] : params_of(w))
    oracle::check_tensor_grad(stats, eval, p->value, p->grad, name, &pick, 10);
  INFO(stats.worst);
  CHECK(stats.max_rel < 1e-4);
}
