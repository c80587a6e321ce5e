#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "crackmamba/blocks.hpp"

namespace crackmamba {

// CrackMamba at desk scale: 4x patch-embed stem, four encoder stages of
// SCVSS blocks with 2x downsampling in between, a four-block decoder with
// skip connections, deep-supervision heads at each decoder scale, and a
// full-resolution segmentation head.

struct ModelConfig {
  std::array<Index, 4> stage_dims{16, 32, 64, 128};
  std::array<Index, 4> stage_depths{1, 1, 2, 1};
  Index state_dim = 8;
  Index input_size = 64;
  double drop_path_rate = 0.1;
  Index class_count = 2;  // background, crack
  bool use_cross_branch = true;
  bool use_snake_branch = true;
  bool use_conv_branch = true;
  bool use_sca = true;
  Index mlp_ratio = 4;
  Index sca_ratio = 4;
  Index sca_kernel = 7;
  Index vss_expand = 2;
  UpsampleMode upsample = UpsampleMode::bilinear;
  DiscretizeRule discretize = DiscretizeRule::zoh;

  Index stage_size(int stage) const { return input_size / 4 / (Index(1) << stage); }
  Index low_channels() const { return std::max<Index>(1, stage_dims[0] / 2); }

  void validate() const {
    for (int i = 0; i < 4; ++i) {
      check_arg(stage_dims[static_cast<std::size_t>(i)] >= 1, "stage_dims: entries must be positive");
      check_arg(stage_depths[static_cast<std::size_t>(i)] >= 1, "stage_depths: entries must be positive");
    }
    check_arg(state_dim >= 1, "state_dim: must be positive");
    check_arg(input_size >= 32 && input_size % 32 == 0,
              "input_size: must be a positive multiple of 32 (4x stem plus three 2x downsamples)");
    check_arg(drop_path_rate >= 0.0 && drop_path_rate < 1.0, "drop_path_rate: must be in [0,1)");
    check_arg(class_count == 2, "class_count: only binary segmentation is supported");
    check_arg(use_cross_branch || use_snake_branch || use_conv_branch,
              "use_cross_branch/use_snake_branch/use_conv_branch: at least one branch required");
    check_arg(mlp_ratio >= 1, "mlp_ratio: must be positive");
    check_arg(sca_ratio >= 1, "sca_ratio: must be positive");
    check_arg(sca_kernel >= 1 && sca_kernel % 2 == 1, "sca_kernel: must be odd");
    check_arg(vss_expand >= 1, "vss_expand: must be positive");
  }
};

template <typename S>
struct ModelOutput {
  Var<S> logits_full;           // [N,2,H,W]
  std::vector<Var<S>> aux;      // coarse -> fine: H/8, H/4, H/2
};

template <typename S>
struct Model {
  ModelConfig config;

  ConvWeights<S> stem_conv;  // 4x4, stride 4
  NormWeights<S> stem_norm;
  struct Down {
    NormWeights<S> norm;
    ConvWeights<S> conv;  // 2x2, stride 2, pre-normalized
  };
  std::vector<std::vector<SCVSSBlock<S>>> stages;
  std::array<Down, 3> downs;
  ConvWeights<S> lowlevel;  // 3x3, stride 2 on the input image
  std::array<DecoderBlockWeights<S>, 4> decoder;
  SegHeadWeights<S> head;
  std::array<ConvWeights<S>, 3> aux_heads;

  std::vector<DirectionSet> cross_dirs, snake_dirs;  // per encoder stage

  template <typename Fn>
  void visit_params(Fn&& fn) {
    crackmamba::visit_params(stem_conv, "stem.conv", fn);
    crackmamba::visit_params(stem_norm, "stem.norm", fn);
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (i > 0) {
        const std::string dp = "down." + std::to_string(i - 1);
        crackmamba::visit_params(downs[i - 1].norm, dp + ".norm", fn);
        crackmamba::visit_params(downs[i - 1].conv, dp + ".conv", fn);
      }
      for (std::size_t j = 0; j < stages[i].size(); ++j)
        crackmamba::visit_params(stages[i][j],
                                 "enc.s" + std::to_string(i) + ".b" + std::to_string(j), fn);
    }
    crackmamba::visit_params(lowlevel, "lowlevel.conv", fn);
    for (std::size_t i = 0; i < 4; ++i)
      crackmamba::visit_params(decoder[i], "dec.d" + std::to_string(i), fn);
    crackmamba::visit_params(head, "head", fn);
    for (std::size_t i = 0; i < 3; ++i)
      crackmamba::visit_params(aux_heads[i], "aux.a" + std::to_string(i), fn);
  }

  std::vector<std::pair<std::string, Parameter<S>*>> parameters() {
    std::vector<std::pair<std::string, Parameter<S>*>> out;
    visit_params([&](const std::string& name, Parameter<S>& p) { out.emplace_back(name, &p); });
    return out;
  }

  Index param_count() {
    Index n = 0;
    visit_params([&](const std::string&, Parameter<S>& p) { n += p.value.size(); });
    return n;
  }

  void zero_grad() {
    visit_params([](const std::string&, Parameter<S>& p) { p.zero_grad(); });
  }

  ModelOutput<S> forward(Tape<S>& t, Var<S> images, bool training, SplitMix64& rng) {
    const Tensor<S>& im = images.value();
    check_arg(im.rank() == 4 && im.dim(1) == 3, "forward: images must be [N,3,H,W]");
    check_arg(im.dim(2) == config.input_size && im.dim(3) == config.input_size,
              "forward: image size " + std::to_string(im.dim(2)) + "x" + std::to_string(im.dim(3)) +
                  " does not match configured input_size " + std::to_string(config.input_size));
    auto checked = [&](Var<S> v, const std::string& name) {
      if (!v.value().all_finite()) throw NumericFault(name);
      return v;
    };

    auto x = conv2d(images, t.param(stem_conv.w), t.param(stem_conv.b), 4, 0);
    x = checked(layer_norm(x, t.param(stem_norm.gain), t.param(stem_norm.offset)), "stem");

    std::vector<Var<S>> feats;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (i > 0) {
        x = layer_norm(x, t.param(downs[i - 1].norm.gain), t.param(downs[i - 1].norm.offset));
        x = conv2d(x, t.param(downs[i - 1].conv.w), t.param(downs[i - 1].conv.b), 2, 0);
      }
      for (std::size_t j = 0; j < stages[i].size(); ++j)
        x = checked(scvss_forward(t, x, stages[i][j], cross_dirs[i], snake_dirs[i], training, rng),
                    "enc.s" + std::to_string(i) + ".b" + std::to_string(j));
      feats.push_back(x);
    }

    auto low = conv2d(images, t.param(lowlevel.w), t.param(lowlevel.b), 2, 1);
    auto d0 = checked(decoder_forward(t, feats[3], feats[2], decoder[0]), "dec.d0");  // H/16
    auto d1 = checked(decoder_forward(t, d0, feats[1], decoder[1]), "dec.d1");        // H/8
    auto d2 = checked(decoder_forward(t, d1, feats[0], decoder[2]), "dec.d2");        // H/4
    auto d3 = checked(decoder_forward(t, d2, low, decoder[3]), "dec.d3");             // H/2

    ModelOutput<S> out;
    out.logits_full = checked(seg_head_forward(t, upsample2x(d3, config.upsample), head), "head");
    out.aux = {conv2d(d1, t.param(aux_heads[0].w), t.param(aux_heads[0].b)),
               conv2d(d2, t.param(aux_heads[1].w), t.param(aux_heads[1].b)),
               conv2d(d3, t.param(aux_heads[2].w), t.param(aux_heads[2].b))};
    return out;
  }

  /// Eval-mode forward + per-pixel argmax.
  Tensor<std::uint8_t> predict_mask(const Tensor<S>& images) {
    Tape<S> tape;
    SplitMix64 rng(0);
    auto out = forward(tape, tape.input(images), false, rng);
    const Tensor<S>& logits = out.logits_full.value();
    const Index n = logits.dim(0), h = logits.dim(2), w = logits.dim(3), hw = h * w;
    Tensor<std::uint8_t> mask({n, h, w});
    for (Index in = 0; in < n; ++in)
      for (Index p = 0; p < hw; ++p)
        mask[in * hw + p] = logits[(in * 2 + 1) * hw + p] > logits[(in * 2 + 0) * hw + p] ? 1 : 0;
    return mask;
  }
};

/// Deterministic build: one SplitMix64 stream seeded by `seed`, consumed in
/// construction order. The encoder's cross-VSS branches (the analogue of a
/// pretrained backbone) are tagged for the early-epoch freeze window.
template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<S> m;
  m.config = config;
  Init<S> init(seed_mix({seed, 0x6d6f64656cULL}));

  SCVSSOptions opt;
  opt.use_conv = config.use_conv_branch;
  opt.use_snake = config.use_snake_branch;
  opt.use_cross = config.use_cross_branch;
  opt.use_sca = config.use_sca;
  opt.drop_path_rate = config.drop_path_rate;
  opt.vss_expand = config.vss_expand;
  opt.n_state = config.state_dim;
  opt.mlp_ratio = config.mlp_ratio;
  opt.sca_ratio = config.sca_ratio;
  opt.sca_kernel = config.sca_kernel;
  opt.discretize = config.discretize;

  init.conv(m.stem_conv, config.stage_dims[0], 3, 4, 4);
  init.norm(m.stem_norm, config.stage_dims[0]);
  m.stages.resize(4);
  for (int i = 0; i < 4; ++i) {
    if (i > 0) {
      init.norm(m.downs[static_cast<std::size_t>(i - 1)].norm, config.stage_dims[static_cast<std::size_t>(i - 1)]);
      init.conv(m.downs[static_cast<std::size_t>(i - 1)].conv, config.stage_dims[static_cast<std::size_t>(i)],
                config.stage_dims[static_cast<std::size_t>(i - 1)], 2, 2);
    }
    for (Index j = 0; j < config.stage_depths[static_cast<std::size_t>(i)]; ++j)
      m.stages[static_cast<std::size_t>(i)].push_back(
          make_scvss(init, config.stage_dims[static_cast<std::size_t>(i)], opt));
    const Index s = config.stage_size(i);
    m.cross_dirs.push_back(cross_orders(s, s));
    m.snake_dirs.push_back(snake_orders(s, s));
  }
  init.conv(m.lowlevel, config.low_channels(), 3, 3, 3);

  const auto& d = config.stage_dims;
  const Index lc = config.low_channels();
  m.decoder[0] = make_decoder_block<S>(init, d[3], d[2], d[2], config.upsample);
  m.decoder[1] = make_decoder_block<S>(init, d[2], d[1], d[1], config.upsample);
  m.decoder[2] = make_decoder_block<S>(init, d[1], d[0], d[0], config.upsample);
  m.decoder[3] = make_decoder_block<S>(init, d[0], lc, lc, config.upsample);
  m.head = make_seg_head<S>(init, lc, config.class_count);
  init.conv(m.aux_heads[0], config.class_count, d[1], 1, 1);
  init.conv(m.aux_heads[1], config.class_count, d[0], 1, 1);
  init.conv(m.aux_heads[2], config.class_count, lc, 1, 1);

  m.visit_params([](const std::string& name, Parameter<S>& p) {
    if (name.rfind("enc.", 0) == 0 && name.find(".cross.") != std::string::npos)
      p.pretrained_analog = true;
  });
  return m;
}

// ---------------------------------------------------------------------------
// Ablation variants (scan-method and component ladder).
// ---------------------------------------------------------------------------

enum class AblationVariant { cross_only, snake_only, cross_snake, plus_conv, full_sca };

constexpr std::array<AblationVariant, 5> kAblationVariants = {
    AblationVariant::cross_only, AblationVariant::snake_only, AblationVariant::cross_snake,
    AblationVariant::plus_conv, AblationVariant::full_sca};

inline const char* to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::cross_only: return "cross-only";
    case AblationVariant::snake_only: return "snake-only";
    case AblationVariant::cross_snake: return "cross+snake";
    case AblationVariant::plus_conv: return "cross+snake+conv";
    default: return "full-scvss";
  }
}

inline ModelConfig apply_variant(ModelConfig base, AblationVariant v) {
  base.use_cross_branch = v != AblationVariant::snake_only;
  base.use_snake_branch = v != AblationVariant::cross_only;
  base.use_conv_branch = v == AblationVariant::plus_conv || v == AblationVariant::full_sca;
  base.use_sca = v == AblationVariant::full_sca;
  return base;
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic "CMSS", format version u32, a length-prefixed block
// of UTF-8 key=value lines, then one record per parameter in name order:
// (name length u32, name, dtype tag u8 [0=f32, 1=f64], rank u32, dims u64
// each, raw values). Everything little-endian.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_raw(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError(path + ": truncated checkpoint");
  return v;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, Model<S>& model,
                     const std::vector<std::pair<std::string, std::string>>& config) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open checkpoint for writing");
  f.write("CMSS", 4);
  detail::write_raw<std::uint32_t>(f, 1);
  std::string cfg;
  for (const auto& [k, v] : config) cfg += k + "=" + v + "\n";
  detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  auto params = model.parameters();
  std::sort(params.begin(), params.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [name, p] : params) {
    detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_raw<std::uint8_t>(f, std::is_same_v<S, float> ? 0 : 1);
    detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(p->value.rank()));
    for (Index d : p->value.shape()) detail::write_raw<std::uint64_t>(f, static_cast<std::uint64_t>(d));
    f.write(reinterpret_cast<const char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * static_cast<Index>(sizeof(S))));
  }
  if (!f) throw IoError(path + ": checkpoint write failed");
}

/// Magic/version check plus the config block; stops before the parameters.
inline std::vector<std::pair<std::string, std::string>> read_checkpoint_config(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open checkpoint");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "CMSS")
    throw IoError(path + ": not a CMSS checkpoint");
  const auto version = detail::read_raw<std::uint32_t>(f, path);
  if (version != 1) throw IoError(path + ": unsupported checkpoint version");
  const auto len = detail::read_raw<std::uint32_t>(f, path);
  std::string cfg(len, '\0');
  f.read(cfg.data(), len);
  if (!f) throw IoError(path + ": truncated config block");
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t start = 0;
  while (start < cfg.size()) {
    std::size_t end = cfg.find('\n', start);
    if (end == std::string::npos) end = cfg.size();
    const std::string line = cfg.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError(path + ": malformed config line '" + line + "'");
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

template <typename S>
void load_checkpoint_params(const std::string& path, Model<S>& model) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open checkpoint");
  f.seekg(8);  // magic + version, validated by read_checkpoint_config
  const auto cfg_len = detail::read_raw<std::uint32_t>(f, path);
  f.seekg(cfg_len, std::ios::cur);

  std::map<std::string, Tensor<S>> loaded;
  while (true) {
    std::uint32_t name_len;
    f.read(reinterpret_cast<char*>(&name_len), sizeof name_len);
    if (f.eof()) break;
    if (!f) throw IoError(path + ": truncated checkpoint");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto dtype = detail::read_raw<std::uint8_t>(f, path);
    if (dtype != (std::is_same_v<S, float> ? 0 : 1))
      throw IoError(path + ": parameter '" + name + "' has a different precision");
    const auto rank = detail::read_raw<std::uint32_t>(f, path);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i)
      shape.push_back(static_cast<Index>(detail::read_raw<std::uint64_t>(f, path)));
    Tensor<S> value(shape);
    f.read(reinterpret_cast<char*>(value.data()),
           static_cast<std::streamsize>(value.size() * static_cast<Index>(sizeof(S))));
    if (!f) throw IoError(path + ": truncated parameter '" + name + "'");
    loaded.emplace(std::move(name), std::move(value));
  }

  model.visit_params([&](const std::string& name, Parameter<S>& p) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw IoError(path + ": checkpoint is missing parameter '" + name + "'");
    check_arg(it->second.shape() == p.value.shape(),
              path + ": shape mismatch for '" + name + "'");
    p.value = it->second;
    loaded.erase(it);
  });
  if (!loaded.empty())
    throw IoError(path + ": checkpoint has unexpected parameter '" +
                             loaded.begin()->first + "'");
}

}  // namespace crackmamba
