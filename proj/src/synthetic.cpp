#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crackmamba/data.hpp"

namespace fs = std::filesystem;

namespace crackmamba {

namespace {

constexpr double kPi = 3.14159265358979323846;

const char* const kMorphNames[3] = {"linear", "branching", "reticulated"};

/// Coarse random grid, bilinearly upsampled: the low-frequency part of the
/// background texture.
struct CoarseField {
  Index grid = 5;
  std::vector<double> values;

  CoarseField(SplitMix64& rng, double lo, double hi) {
    values.resize(static_cast<std::size_t>(grid * grid));
    for (auto& v : values) v = rng.uniform(lo, hi);
  }

  double at(double ry, double rx) const {  // ry, rx in [0,1]
    const double y = ry * static_cast<double>(grid - 1);
    const double x = rx * static_cast<double>(grid - 1);
    const Index y0 = std::min<Index>(static_cast<Index>(y), grid - 2);
    const Index x0 = std::min<Index>(static_cast<Index>(x), grid - 2);
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    auto v = [&](Index yy, Index xx) { return values[static_cast<std::size_t>(yy * grid + xx)]; };
    return (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x0 + 1)) +
           fy * ((1 - fx) * v(y0 + 1, x0) + fx * v(y0 + 1, x0 + 1));
  }
};

struct WalkPoint {
  Index r, c;
};

/// Serpentine random walk: heading drifts by a slowly resampled curvature
/// plus jitter, each step moves to the 8-neighbour nearest the heading, and
/// a square stamp of the current width marks the mask.
std::vector<WalkPoint> trace_walk(SplitMix64& rng, Tensor<std::uint8_t>& mask, double r, double c,
                                  double theta, Index max_steps) {
  const Index h = mask.dim(0), w = mask.dim(1);
  std::vector<WalkPoint> centers;
  double kappa = rng.uniform(-0.12, 0.12);
  const Index base_width = 1 + static_cast<Index>(rng.bounded(3));
  for (Index step = 0; step < max_steps; ++step) {
    const Index ir = static_cast<Index>(std::lround(r));
    const Index ic = static_cast<Index>(std::lround(c));
    if (ir < 0 || ir >= h || ic < 0 || ic >= w) break;
    centers.push_back({ir, ic});
    Index width = base_width;
    if (rng.next_double() < 0.15) width = 1 + static_cast<Index>(rng.bounded(3));
    const Index lo = -(width - 1) / 2, hi = width / 2;
    for (Index dr = lo; dr <= hi; ++dr)
      for (Index dc = lo; dc <= hi; ++dc) {
        const Index rr = ir + dr, cc = ic + dc;
        if (rr >= 0 && rr < h && cc >= 0 && cc < w) mask(rr, cc) = 1;
      }
    if (step % 24 == 23) kappa = rng.uniform(-0.12, 0.12);
    theta += kappa + rng.uniform(-0.22, 0.22);
    double dr = std::lround(std::sin(theta));
    double dc = std::lround(std::cos(theta));
    if (dr == 0 && dc == 0) dc = 1;
    r += dr;
    c += dc;
  }
  return centers;
}

void draw_cracks(SplitMix64& rng, Tensor<std::uint8_t>& mask, Morphology morph) {
  const Index h = mask.dim(0), w = mask.dim(1);
  auto edge_start = [&](double& r, double& c, double& theta) {
    switch (rng.bounded(4)) {
      case 0: r = 0, c = static_cast<double>(rng.bounded(static_cast<std::uint64_t>(w))), theta = kPi / 2; break;
      case 1: r = static_cast<double>(h - 1), c = static_cast<double>(rng.bounded(static_cast<std::uint64_t>(w))), theta = -kPi / 2; break;
      case 2: c = 0, r = static_cast<double>(rng.bounded(static_cast<std::uint64_t>(h))), theta = 0; break;
      default: c = static_cast<double>(w - 1), r = static_cast<double>(rng.bounded(static_cast<std::uint64_t>(h))), theta = kPi; break;
    }
    theta += rng.uniform(-0.5, 0.5);
  };
  const Index long_walk = h + w;
  switch (morph) {
    case Morphology::linear: {
      double r, c, theta;
      edge_start(r, c, theta);
      trace_walk(rng, mask, r, c, theta, long_walk);
      break;
    }
    case Morphology::branching: {
      double r, c, theta;
      edge_start(r, c, theta);
      const auto parent = trace_walk(rng, mask, r, c, theta, long_walk);
      Index children = 0;
      for (std::size_t i = 4; i < parent.size() && children < 3; ++i)
        if (rng.next_double() < 0.04) {
          trace_walk(rng, mask, static_cast<double>(parent[i].r), static_cast<double>(parent[i].c),
                     rng.uniform(0, 2 * kPi), long_walk / 2);
          ++children;
        }
      break;
    }
    case Morphology::reticulated: {
      const Index walks = 3 + static_cast<Index>(rng.bounded(4));
      for (Index i = 0; i < walks; ++i) {
        double r, c, theta;
        edge_start(r, c, theta);
        trace_walk(rng, mask, r, c, theta, long_walk);
      }
      break;
    }
  }
}

}  // namespace

const char* to_string(Morphology m) { return kMorphNames[static_cast<int>(m)]; }

std::optional<Morphology> parse_morphology(const std::string& name) {
  for (int i = 0; i < 3; ++i)
    if (name == kMorphNames[i]) return static_cast<Morphology>(i);
  return std::nullopt;
}

Sample gen_crack_sample(std::uint64_t seed, Index height, Index width, Morphology morphology,
                        bool crack_free) {
  check_arg(height >= 16 && width >= 16, "gen_crack_sample: size must be at least 16x16");
  SplitMix64 rng(seed_mix({seed, static_cast<std::uint64_t>(height),
                           static_cast<std::uint64_t>(width),
                           static_cast<std::uint64_t>(morphology),
                           static_cast<std::uint64_t>(crack_free)}));
  Sample s;
  s.mask = Tensor<std::uint8_t>({height, width});
  if (!crack_free) draw_cracks(rng, s.mask, morphology);

  const CoarseField field(rng, 0.45, 0.75);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-0.03, 0.03);

  s.image = Tensor<float>({3, height, width});
  const Index hw = height * width;
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c) {
      const double base = field.at(static_cast<double>(r) / static_cast<double>(height - 1),
                                   static_cast<double>(c) / static_cast<double>(width - 1));
      const double dark = s.mask(r, c) ? 0.35 : 1.0;
      for (Index ch = 0; ch < 3; ++ch) {
        const double noise = rng.uniform(-0.04, 0.04);
        const double v = std::clamp(base * dark + tint[ch] + noise, 0.0, 1.0);
        s.image[ch * hw + r * width + c] = static_cast<float>(v);
      }
    }
  return s;
}

SplitSpec split_dataset(Index total, double ratio) {
  check_arg(total >= 1, "split_dataset: total must be at least 1");
  check_arg(ratio > 0.0 && ratio < 1.0, "split_dataset: ratio must be in (0,1)");
  SplitSpec spec;
  spec.total = total;
  spec.test_count = std::clamp<Index>(
      static_cast<Index>(std::floor(static_cast<double>(total) * ratio + 0.5)), 1, total);
  spec.interval = static_cast<double>(total) / static_cast<double>(spec.test_count);
  spec.test_indices.reserve(static_cast<std::size_t>(spec.test_count));
  for (Index k = 0; k < spec.test_count; ++k)
    spec.test_indices.push_back(static_cast<Index>(std::floor(static_cast<double>(k) * spec.interval)));
  return spec;
}

std::vector<DatasetEntry> generate_dataset(const GenDataConfig& cfg) {
  check_arg(cfg.count >= 1, "generate_dataset: count must be at least 1");
  check_arg(cfg.crack_free_frac >= 0.0 && cfg.crack_free_frac <= 1.0,
            "generate_dataset: crack-free fraction must be in [0,1]");
  std::error_code ec;
  fs::create_directories(fs::path(cfg.out_dir) / "images", ec);
  fs::create_directories(fs::path(cfg.out_dir) / "masks", ec);
  if (ec) throw IoError(cfg.out_dir + ": cannot create dataset directories: " + ec.message());

  const SplitSpec split = split_dataset(cfg.count);
  std::vector<bool> is_test(static_cast<std::size_t>(cfg.count), false);
  for (Index i : split.test_indices) is_test[static_cast<std::size_t>(i)] = true;

  // Crack-free samples are spread evenly: sample i is crack-free whenever
  // floor((i+1)*frac) advances past floor(i*frac).
  std::vector<DatasetEntry> entries;
  Index cracked_count = 0;
  for (Index i = 0; i < cfg.count; ++i) {
    DatasetEntry e;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05lld", static_cast<long long>(i));
    e.id = buf;
    e.crack_free =
        std::floor(static_cast<double>(i + 1) * cfg.crack_free_frac) >
        std::floor(static_cast<double>(i) * cfg.crack_free_frac);
    if (!e.crack_free) {
      e.morphology = static_cast<Morphology>(cracked_count % 3);
      ++cracked_count;
    }
    e.seed = seed_mix({cfg.seed, static_cast<std::uint64_t>(i)});
    e.is_test = is_test[static_cast<std::size_t>(i)];
    entries.push_back(e);
  }

  std::ofstream manifest(fs::path(cfg.out_dir) / "manifest.tsv");
  if (!manifest) throw IoError(cfg.out_dir + "/manifest.tsv: cannot open for writing");
  manifest << "id\tmorphology\tseed\tsplit\n";
  for (const auto& e : entries) {
    const Sample s = gen_crack_sample(e.seed, cfg.size, cfg.size, e.morphology, e.crack_free);
    write_image((fs::path(cfg.out_dir) / "images" / (e.id + ".ppm")).string(), s.image);
    write_mask((fs::path(cfg.out_dir) / "masks" / (e.id + ".pgm")).string(), s.mask);
    manifest << e.id << "\t" << (e.crack_free ? "crackfree" : to_string(e.morphology)) << "\t"
             << e.seed << "\t" << (e.is_test ? "test" : "train") << "\n";
  }
  if (!manifest) throw IoError(cfg.out_dir + "/manifest.tsv: write failed");
  return entries;
}

std::vector<DatasetEntry> read_manifest(const std::string& dir) {
  const std::string path = (fs::path(dir) / "manifest.tsv").string();
  std::ifstream f(path);
  if (!f) throw IoError(path + ": cannot open manifest");
  std::vector<DatasetEntry> entries;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("id\t", 0) == 0) continue;  // header
    }
    std::istringstream ss(line);
    std::string id, morph, seed, split;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, morph, '\t') ||
        !std::getline(ss, seed, '\t') || !std::getline(ss, split, '\t'))
      throw IoError(path + ": malformed manifest line: " + line);
    DatasetEntry e;
    e.id = id;
    if (morph == "crackfree") {
      e.crack_free = true;
    } else {
      const auto m = parse_morphology(morph);
      if (!m) throw IoError(path + ": unknown morphology '" + morph + "'");
      e.morphology = *m;
    }
    e.seed = std::stoull(seed);
    if (split != "train" && split != "test")
      throw IoError(path + ": unknown split '" + split + "'");
    e.is_test = split == "test";
    entries.push_back(std::move(e));
  }
  return entries;
}

Sample load_sample(const std::string& dir, const DatasetEntry& entry) {
  Sample s;
  s.id = entry.id;
  s.image = read_image((fs::path(dir) / "images" / (entry.id + ".ppm")).string());
  s.mask = read_mask((fs::path(dir) / "masks" / (entry.id + ".pgm")).string());
  return s;
}

}  // namespace crackmamba
