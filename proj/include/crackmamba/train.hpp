#pragma once

#include <cstdio>
#include <ostream>

#include "crackmamba/data.hpp"
#include "crackmamba/model.hpp"

namespace crackmamba {

struct TrainConfig {
  double lr0 = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Index epochs = 60;  // desk-scale default; the reference setting is 500
  Index freeze_epochs = 10;
  std::array<double, 4> ds_weights{8.0 / 15, 4.0 / 15, 2.0 / 15, 1.0 / 15};  // full -> coarse
  Index batch_size = 8;
  std::uint64_t seed = 42;
  double stop_miou = -1;  // early stop thresholds; negative disables
  double stop_loss = -1;
  bool keep_best = true;  // restore the epoch with the best validation mIoU

  void validate() const {
    check_arg(lr0 > 0, "lr0: must be positive");
    check_arg(weight_decay >= 0, "weight_decay: must be non-negative");
    check_arg(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "betas: must be in (0,1)");
    check_arg(epochs >= 1, "epochs: must be positive");
    check_arg(freeze_epochs >= 0, "freeze_epochs: must be non-negative");
    check_arg(batch_size >= 1, "batch_size: must be positive");
    double sum = 0;
    for (double w : ds_weights) {
      check_arg(w >= 0, "ds_weights: entries must be non-negative");
      sum += w;
    }
    check_arg(std::abs(sum - 1.0) < 1e-9, "ds_weights: must sum to 1");
  }
};

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

template <typename S>
void check_binary_target(const Tensor<std::uint8_t>& target) {
  for (Index i = 0; i < target.size(); ++i)
    check_arg(target[i] <= 1, "target: mask values must be 0 or 1");
}

/// Pixel-mean cross entropy from logits [N,2,H,W] against a {0,1} mask
/// [N,H,W], computed through a stable log-sum-exp.
template <typename S>
Var<S> cross_entropy_with_logits(Var<S> logits, const Tensor<std::uint8_t>& target) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& l = t.val(logits.id);
  check_arg(l.rank() == 4 && l.dim(1) == 2, "cross_entropy: logits must be [N,2,H,W]");
  check_arg(target.rank() == 3 && target.dim(0) == l.dim(0) && target.dim(1) == l.dim(2) &&
                target.dim(2) == l.dim(3),
            "cross_entropy: target shape " + shape_str(target.shape()) + " does not match logits " +
                shape_str(l.shape()));
  check_binary_target<S>(target);
  const Index n = l.dim(0), hw = l.dim(2) * l.dim(3);
  double total = 0;
  for (Index in = 0; in < n; ++in)
    for (Index p = 0; p < hw; ++p) {
      const double l0 = static_cast<double>(l[(in * 2 + 0) * hw + p]);
      const double l1 = static_cast<double>(l[(in * 2 + 1) * hw + p]);
      const double m = std::max(l0, l1);
      const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      total += lse - (target[in * hw + p] ? l1 : l0);
    }
  Tensor<S> out({1});
  out[0] = static_cast<S>(total / static_cast<double>(n * hw));
  auto tgt = std::make_shared<Tensor<std::uint8_t>>(target);
  return t.emit(std::move(out), {logits.id}, [l_id = logits.id, tgt, n, hw](Tape<S>& t, int self) {
    if (!t.wants_grad(l_id)) return;
    const S g = t.grad_ref(self)[0] / static_cast<S>(n * hw);
    const Tensor<S>& l = t.val(l_id);
    Tensor<S>& dl = t.grad_ref(l_id);
    for (Index in = 0; in < n; ++in)
      for (Index p = 0; p < hw; ++p) {
        const S l0 = l[(in * 2 + 0) * hw + p];
        const S l1 = l[(in * 2 + 1) * hw + p];
        const S m = std::max(l0, l1);
        const S e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const S p1 = e1 / (e0 + e1);
        const bool crack = (*tgt)[in * hw + p] != 0;
        dl[(in * 2 + 0) * hw + p] += g * ((S(1) - p1) - (crack ? S(0) : S(1)));
        dl[(in * 2 + 1) * hw + p] += g * (p1 - (crack ? S(1) : S(0)));
      }
  });
}

/// Soft Dice over both classes on softmax probabilities, averaged, as
/// 1 - mean_c (2*sum(p_c g_c) + eps) / (sum(p_c) + sum(g_c) + eps).
template <typename S>
Var<S> dice_loss(Var<S> logits, const Tensor<std::uint8_t>& target, S eps = S(1e-5)) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& l = t.val(logits.id);
  const Index n = l.dim(0), h = l.dim(2), w = l.dim(3), hw = h * w;
  auto probs = softmax_channels(logits);
  std::optional<Var<S>> dice_sum;
  for (Index cls = 0; cls < 2; ++cls) {
    Tensor<S> g({n, 1, h, w});
    double g_total = 0;
    for (Index in = 0; in < n; ++in)
      for (Index p = 0; p < hw; ++p) {
        const S v = (target[in * hw + p] != 0) == (cls == 1) ? S(1) : S(0);
        g[in * hw + p] = v;
        g_total += static_cast<double>(v);
      }
    auto pc = take_channel(probs, cls);
    auto inter = sum_all(mul(pc, t.input(std::move(g))));
    auto num = add_scalar(scale(inter, S(2)), eps);
    auto den = add_scalar(sum_all(pc), static_cast<S>(g_total) + eps);
    auto dice = div(num, den);
    dice_sum = dice_sum ? add(*dice_sum, dice) : dice;
  }
  return add_scalar(scale(*dice_sum, S(-0.5)), S(1));
}

/// loss = cross entropy + Dice, both against the same {0,1} mask.
template <typename S>
Var<S> dice_ce_loss(Var<S> logits, const Tensor<std::uint8_t>& target) {
  return add(cross_entropy_with_logits(logits, target), dice_loss(logits, target));
}

/// Nearest-neighbour mask downsampling by a power-of-two factor.
inline Tensor<std::uint8_t> downsample_mask(const Tensor<std::uint8_t>& mask, Index factor) {
  const Index n = mask.dim(0), h = mask.dim(1) / factor, w = mask.dim(2) / factor;
  Tensor<std::uint8_t> out({n, h, w});
  for (Index in = 0; in < n; ++in)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out(in, y, x) = mask(in, y * factor, x * factor);
  return out;
}

/// Weighted deep-supervision sum: ds_weights[0] on the full head, then the
/// H/2, H/4, H/8 auxiliary heads against nearest-downsampled targets.
template <typename S>
Var<S> deep_supervision_loss(const ModelOutput<S>& out, const Tensor<std::uint8_t>& target,
                             const std::array<double, 4>& ds_weights) {
  check_arg(out.aux.size() == 3, "deep_supervision_loss: expected 3 auxiliary heads");
  auto total = scale(dice_ce_loss(out.logits_full, target), static_cast<S>(ds_weights[0]));
  const Index full = out.logits_full.value().dim(2);
  // aux is coarse->fine (H/8, H/4, H/2); ds_weights is full->coarse.
  for (int k = 0; k < 3; ++k) {
    const Var<S> head = out.aux[static_cast<std::size_t>(k)];
    const Index factor = full / head.value().dim(2);
    auto l = dice_ce_loss(head, downsample_mask(target, factor));
    total = add(total, scale(l, static_cast<S>(ds_weights[static_cast<std::size_t>(3 - k)])));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule.
// ---------------------------------------------------------------------------

/// AdamW with decoupled decay: p <- p - lr*wd*p, then the bias-corrected
/// Adam moment update. Frozen parameters are skipped entirely, moments
/// included, and keep their own step counts.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Parameter<S>*> params, const TrainConfig& cfg)
      : params_(std::move(params)),
        wd_(cfg.weight_decay),
        beta1_(cfg.beta1),
        beta2_(cfg.beta2),
        eps_(cfg.adam_eps) {
    for (Parameter<S>* p : params_)
      states_.push_back({Tensor<S>(p->value.shape()), Tensor<S>(p->value.shape()), 0});
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>& p = *params_[i];
      if (p.frozen) continue;
      State& st = states_[i];
      ++st.t;
      p.value.array() -= static_cast<S>(lr * wd_) * p.value.array();
      st.m.array() = static_cast<S>(beta1_) * st.m.array() +
                     static_cast<S>(1 - beta1_) * p.grad.array();
      st.v.array() = static_cast<S>(beta2_) * st.v.array() +
                     static_cast<S>(1 - beta2_) * p.grad.array().square();
      const S c1 = static_cast<S>(1.0 - std::pow(beta1_, static_cast<double>(st.t)));
      const S c2 = static_cast<S>(1.0 - std::pow(beta2_, static_cast<double>(st.t)));
      p.value.array() -= static_cast<S>(lr) * (st.m.array() / c1) /
                         ((st.v.array() / c2).sqrt() + static_cast<S>(eps_));
    }
  }

 private:
  struct State {
    Tensor<S> m, v;
    Index t;
  };
  std::vector<Parameter<S>*> params_;
  std::vector<State> states_;
  double wd_, beta1_, beta2_, eps_;
};

inline double cosine_lr(Index epoch, Index total_epochs, double lr0) {
  check_arg(epoch >= 0 && epoch < total_epochs, "cosine_lr: epoch out of range");
  return 0.5 * lr0 *
         (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(epoch) /
                         static_cast<double>(total_epochs)));
}

/// Freeze window for the pretrained-analog set (encoder cross-VSS branches,
/// tagged at build time): frozen exactly while epoch < freeze_epochs.
template <typename S>
void freeze_policy(Model<S>& model, Index epoch, Index freeze_epochs) {
  model.visit_params([&](const std::string&, Parameter<S>& p) {
    p.frozen = p.pretrained_analog && epoch < freeze_epochs;
  });
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

struct SegMetrics {
  // Index 0 = background, 1 = crack.
  std::array<std::int64_t, 2> tp{}, fp{}, fn{}, tn{};

  void add(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt) {
    check_arg(pred.shape() == gt.shape(), "compute_metrics: pred/gt shape mismatch");
    for (Index i = 0; i < pred.size(); ++i) {
      check_arg(pred[i] <= 1 && gt[i] <= 1, "compute_metrics: masks must be binary");
      for (int cls = 0; cls < 2; ++cls) {
        const bool p = pred[i] == cls, g = gt[i] == cls;
        auto c = static_cast<std::size_t>(cls);
        if (p && g)
          ++tp[c];
        else if (p)
          ++fp[c];
        else if (g)
          ++fn[c];
        else
          ++tn[c];
      }
    }
  }

  void merge(const SegMetrics& o) {
    for (std::size_t c = 0; c < 2; ++c) {
      tp[c] += o.tp[c];
      fp[c] += o.fp[c];
      fn[c] += o.fn[c];
      tn[c] += o.tn[c];
    }
  }

  // Empty-class convention: a class absent from both masks scores 1.
  double iou(int cls) const {
    const auto c = static_cast<std::size_t>(cls);
    const std::int64_t denom = tp[c] + fp[c] + fn[c];
    return denom == 0 ? 1.0 : static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  double miou() const { return 0.5 * (iou(0) + iou(1)); }
  double f1() const {
    const std::int64_t denom = 2 * tp[1] + fp[1] + fn[1];
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp[1]) / static_cast<double>(denom);
  }
  double sensitivity() const {
    const std::int64_t denom = tp[1] + fn[1];
    return denom == 0 ? 1.0 : static_cast<double>(tp[1]) / static_cast<double>(denom);
  }
};

inline SegMetrics compute_metrics(const Tensor<std::uint8_t>& pred,
                                  const Tensor<std::uint8_t>& gt) {
  SegMetrics m;
  m.add(pred, gt);
  return m;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> batch_images(const std::vector<Sample>& samples, const std::vector<Index>& ids) {
  const Index h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  Tensor<S> out({static_cast<Index>(ids.size()), 3, h, w});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& img = samples[static_cast<std::size_t>(ids[i])].image;
    check_arg(img.dim(1) == h && img.dim(2) == w, "batch: sample sizes differ");
    for (Index j = 0; j < img.size(); ++j)
      out[static_cast<Index>(i) * img.size() + j] = static_cast<S>(img[j]);
  }
  return out;
}

inline Tensor<std::uint8_t> batch_masks(const std::vector<Sample>& samples,
                                        const std::vector<Index>& ids) {
  const Index h = samples[0].mask.dim(0), w = samples[0].mask.dim(1);
  Tensor<std::uint8_t> out({static_cast<Index>(ids.size()), h, w});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& m = samples[static_cast<std::size_t>(ids[i])].mask;
    for (Index j = 0; j < m.size(); ++j) out[static_cast<Index>(i) * m.size() + j] = m[j];
  }
  return out;
}

template <typename S>
SegMetrics evaluate(Model<S>& model, const std::vector<Sample>& samples, Index batch_size = 8) {
  SegMetrics metrics;
  std::vector<Index> ids;
  for (Index i = 0; i < static_cast<Index>(samples.size()); i += batch_size) {
    ids.clear();
    for (Index j = i; j < std::min<Index>(i + batch_size, static_cast<Index>(samples.size())); ++j)
      ids.push_back(j);
    const auto pred = model.predict_mask(batch_images<S>(samples, ids));
    metrics.add(pred, batch_masks(samples, ids));
  }
  return metrics;
}

struct FitResult {
  Index epochs_run = 0;
  double final_train_loss = 0;
  double final_val_miou = 0;
  double final_val_f1 = 0;
  Index best_epoch = 0;
  double best_val_miou = 0;
  double best_val_f1 = 0;
};

/// One run of the AdamW + cosine schedule + freeze-window loop. Writes
/// one log line per epoch: epoch, lr, train_loss, val_miou, val_f1
/// (tab-separated) to `log`. Single-threaded and bit-reproducible per seed.
template <typename S>
FitResult fit(Model<S>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, std::ostream& log) {
  cfg.validate();
  check_arg(!train.empty(), "fit: training set is empty");
  auto named = model.parameters();
  std::vector<Parameter<S>*> params;
  for (auto& [name, p] : named) params.push_back(p);
  AdamW<S> opt(params, cfg);
  SplitMix64 dp_rng(seed_mix({cfg.seed, 0x64726f70ULL}));

  std::vector<Tensor<S>> best_values;
  FitResult res;
  res.best_val_miou = -1;

  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    freeze_policy(model, epoch, cfg.freeze_epochs);

    std::vector<Index> order(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) order[i] = static_cast<Index>(i);
    SplitMix64 shuffle_rng(seed_mix({cfg.seed, 0x65706f6368ULL, static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<Index> ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                 order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
      Tape<S> tape;
      auto images = tape.input(batch_images<S>(train, ids));
      auto out = model.forward(tape, images, true, dp_rng);
      auto loss = deep_supervision_loss(out, batch_masks(train, ids), cfg.ds_weights);
      model.zero_grad();
      tape.backward(loss);
      opt.step(lr);
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(ids.size());
    }
    const double train_loss = loss_sum / static_cast<double>(train.size());

    const SegMetrics vm = evaluate(model, val.empty() ? train : val, cfg.batch_size);
    char line[160];
    std::snprintf(line, sizeof line, "%lld\t%.8e\t%.8e\t%.6f\t%.6f\n",
                  static_cast<long long>(epoch), lr, train_loss, vm.miou(), vm.f1());
    log << line;
    log.flush();

    res.epochs_run = epoch + 1;
    res.final_train_loss = train_loss;
    res.final_val_miou = vm.miou();
    res.final_val_f1 = vm.f1();
    if (vm.miou() > res.best_val_miou) {
      res.best_val_miou = vm.miou();
      res.best_val_f1 = vm.f1();
      res.best_epoch = epoch;
      if (cfg.keep_best) {
        best_values.clear();
        for (Parameter<S>* p : params) best_values.push_back(p->value);
      }
    }
    const bool stop_active = cfg.stop_miou >= 0 || cfg.stop_loss >= 0;
    if (stop_active && (cfg.stop_miou < 0 || vm.miou() >= cfg.stop_miou) &&
        (cfg.stop_loss < 0 || train_loss < cfg.stop_loss))
      break;
  }

  if (cfg.keep_best && !best_values.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  return res;
}

}  // namespace crackmamba
