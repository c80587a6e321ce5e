// Command-line front end: dataset generation, training, evaluation,
// inference, scan-order visualization, and the ablation harness.
//
// Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numeric fault.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "crackmamba/data.hpp"
#include "crackmamba/run_config.hpp"
#include "crackmamba/scan.hpp"
#include "crackmamba/train.hpp"

namespace fs = std::filesystem;
using namespace crackmamba;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

/// Writes every character to two streams (per-epoch log lines go to the log
/// file and stdout).
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int ch) override {
    if (ch == EOF) return EOF;
    const int r1 = a_->sputc(static_cast<char>(ch));
    const int r2 = b_->sputc(static_cast<char>(ch));
    return r1 == EOF || r2 == EOF ? EOF : ch;
  }
  int sync() override { return a_->pubsync() == 0 && b_->pubsync() == 0 ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string tok = extras[i];
    if (tok.rfind("--", 0) != 0)
      throw std::invalid_argument("expected --key value override, got '" + tok + "'");
    tok = tok.substr(2);
    const auto eq = tok.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size())
        throw std::invalid_argument("override --" + tok + " is missing a value");
      out.emplace_back(tok, extras[++i]);
    }
  }
  return out;
}

void split_samples(const std::string& dir, std::vector<Sample>& train, std::vector<Sample>& test) {
  for (const DatasetEntry& e : read_manifest(dir))
    (e.is_test ? test : train).push_back(load_sample(dir, e));
}

void echo_config(const RunConfig& cfg, std::ostream& os) {
  for (const auto& [k, v] : cfg.items()) os << "# " << k << " = " << v << "\n";
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const GenDataConfig& cfg) {
  const auto entries = generate_dataset(cfg);
  Index test = 0, crack_free = 0;
  for (const auto& e : entries) {
    test += e.is_test ? 1 : 0;
    crack_free += e.crack_free ? 1 : 0;
  }
  std::cout << "wrote " << entries.size() << " samples to " << cfg.out_dir << " (" << test
            << " test, " << crack_free << " crack-free)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename S>
int run_train(const RunConfig& cfg) {
  check_arg(!cfg.data_dir.empty(), "data_dir: required for training");
  std::vector<Sample> train_set, val_set;
  split_samples(cfg.data_dir, train_set, val_set);

  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError(cfg.out_dir + ": cannot create output directory");

  echo_config(cfg, std::cout);
  {
    std::ofstream echo(fs::path(cfg.out_dir) / "effective_config.txt");
    if (!echo) throw IoError(cfg.out_dir + ": cannot write effective_config.txt");
    echo_config(cfg, echo);
  }

  auto model = build_model<S>(cfg.model, cfg.train.seed);
  std::cout << "# parameters = " << model.param_count() << "\n";

  const std::string log_path = (fs::path(cfg.out_dir) / "train_log.tsv").string();
  std::ofstream log_file(log_path);
  if (!log_file) throw IoError(log_path + ": cannot open log for writing");
  TeeBuf tee(log_file.rdbuf(), std::cout.rdbuf());
  std::ostream log(&tee);

  const FitResult res = fit(model, train_set, val_set, cfg.train, log);

  const std::string ckpt = (fs::path(cfg.out_dir) / "checkpoint.cmss").string();
  save_checkpoint(ckpt, model, cfg.items());
  std::cout << "# best_epoch = " << res.best_epoch << " best_val_miou = " << res.best_val_miou
            << "\n# checkpoint = " << ckpt << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <typename S>
SegMetrics eval_samples(Model<S>& model, const std::vector<Sample>& samples, Index threads) {
  if (threads <= 1 || samples.size() < 2) return evaluate(model, samples);
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(threads), samples.size());
  std::vector<SegMetrics> partial(t);
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < t; ++k)
    pool.emplace_back([&, k] {
      std::vector<Sample> chunk;
      for (std::size_t i = k; i < samples.size(); i += t) chunk.push_back(samples[i]);
      partial[k] = evaluate(model, chunk);
    });
  for (auto& th : pool) th.join();
  SegMetrics m;  // merged in thread-index order
  for (const auto& p : partial) m.merge(p);
  return m;
}

template <typename S>
int run_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
             Index threads, const RunConfig& cfg) {
  auto model = build_model<S>(cfg.model, cfg.train.seed);
  load_checkpoint_params(checkpoint, model);

  std::vector<Sample> train_set, test_set;
  split_samples(data_dir, train_set, test_set);
  std::vector<Sample> chosen;
  if (split == "train")
    chosen = train_set;
  else if (split == "test")
    chosen = test_set;
  else {
    chosen = train_set;
    chosen.insert(chosen.end(), test_set.begin(), test_set.end());
  }
  check_arg(!chosen.empty(), "eval: no samples in split '" + split + "'");

  const SegMetrics m = eval_samples(model, chosen, threads);
  char buf[64];
  std::cout << "images\t" << chosen.size() << "\n";
  auto row = [&](const char* name, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    std::cout << name << "\t" << buf << "\n";
  };
  row("iou_background", m.iou(0));
  row("iou_crack", m.iou(1));
  row("miou", m.miou());
  row("f1", m.f1());
  row("sensitivity", m.sensitivity());
  return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

template <typename S>
int run_infer(const std::string& checkpoint, const std::string& image_path,
              const std::string& out_path, const RunConfig& cfg) {
  auto model = build_model<S>(cfg.model, cfg.train.seed);
  load_checkpoint_params(checkpoint, model);

  const Tensor<float> img = read_image(image_path);
  check_arg(img.dim(1) == cfg.model.input_size && img.dim(2) == cfg.model.input_size,
            "infer: image is " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) +
                " but the model expects " + std::to_string(cfg.model.input_size) + "x" +
                std::to_string(cfg.model.input_size));
  Tensor<S> batch({1, 3, img.dim(1), img.dim(2)});
  for (Index i = 0; i < img.size(); ++i) batch[i] = static_cast<S>(img[i]);
  const Tensor<std::uint8_t> pred = model.predict_mask(batch);
  Tensor<std::uint8_t> mask({pred.dim(1), pred.dim(2)});
  for (Index i = 0; i < mask.size(); ++i) mask[i] = pred[i];
  write_mask(out_path, mask);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// scan-viz
// ---------------------------------------------------------------------------

int cmd_scan_viz(const std::string& kind_name, Index height, Index width, std::uint64_t seed,
                 const std::string& out_path) {
  const auto kind = parse_scan_kind(kind_name);
  if (!kind)
    throw std::invalid_argument("scan-viz: unknown kind '" + kind_name +
                                "' (expected v1..v4, s1..s4, r1..r4)");
  const ScanOrder order = make_order(height, width, *kind, seed);
  PnmImage img;
  img.channels = 1;
  img.height = height;
  img.width = width;
  img.pixels = scan_viz_image(order);
  write_pnm(out_path, img);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

template <typename S>
int run_ablate(const RunConfig& cfg) {
  check_arg(!cfg.data_dir.empty(), "data_dir: required for ablation");
  std::vector<Sample> train_set, val_set;
  split_samples(cfg.data_dir, train_set, val_set);

  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError(cfg.out_dir + ": cannot create output directory");
  std::ofstream table_file(fs::path(cfg.out_dir) / "ablate.tsv");
  if (!table_file) throw IoError(cfg.out_dir + ": cannot write ablate.tsv");
  TeeBuf tee(table_file.rdbuf(), std::cout.rdbuf());
  std::ostream table(&tee);

  echo_config(cfg, std::cout);
  table << "variant\tparams\tval_miou\tval_f1\n";
  for (const AblationVariant v : kAblationVariants) {
    const ModelConfig mc = apply_variant(cfg.model, v);
    auto model = build_model<S>(mc, cfg.train.seed);
    std::ostringstream sink;  // per-epoch lines are not part of the table
    const FitResult res = fit(model, train_set, val_set, cfg.train, sink);
    const double miou = cfg.train.keep_best ? res.best_val_miou : res.final_val_miou;
    const double f1 = cfg.train.keep_best ? res.best_val_f1 : res.final_val_f1;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f", miou, f1);
    table << to_string(v) << "\t" << model.param_count() << "\t" << buf << "\n";
    table.flush();
  }
  return 0;
}

template <typename Fn32, typename Fn64>
int dispatch_precision(const RunConfig& cfg, Fn32&& f32, Fn64&& f64) {
  return cfg.precision == "f64" ? f64() : f32();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CrackMamba-style crack segmentation: snake-scan selective state-space model"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic crack dataset");
  GenDataConfig gen_cfg;
  gen->add_option("--out", gen_cfg.out_dir, "Output dataset directory")->required();
  gen->add_option("--count", gen_cfg.count, "Number of samples");
  gen->add_option("--size", gen_cfg.size, "Image side length");
  gen->add_option("--seed", gen_cfg.seed, "Base RNG seed");
  gen->add_option("--crack-free-frac", gen_cfg.crack_free_frac, "Fraction of crack-free samples");

  // train
  auto* train = app.add_subcommand("train", "Train a model on a generated dataset");
  std::string train_config;
  train->add_option("--config", train_config, "key=value config file");
  train->allow_extras();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split = "test";
  Index eval_threads = 1;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "Split: test, train or all")
      ->check(CLI::IsMember({"test", "train", "all"}));
  eval->add_option("--threads", eval_threads, "Evaluation threads (deterministic merge)");

  // infer
  auto* infer = app.add_subcommand("infer", "Predict a crack mask for one image");
  std::string infer_ckpt, infer_image, infer_out;
  infer->add_option("--checkpoint", infer_ckpt, "Checkpoint file")->required();
  infer->add_option("--image", infer_image, "Input image (P5/P6 PNM)")->required();
  infer->add_option("--out", infer_out, "Output mask path (P5, values 0/255)")->required();

  // scan-viz
  auto* viz = app.add_subcommand("scan-viz", "Write a visit-time image for a scan order");
  std::string viz_kind, viz_out;
  Index viz_h = 8, viz_w = 8;
  std::uint64_t viz_seed = 0;
  viz->add_option("--kind", viz_kind, "Order kind: v1..v4, s1..s4, r1..r4")->required();
  viz->add_option("--height", viz_h, "Grid rows");
  viz->add_option("--width", viz_w, "Grid cols");
  viz->add_option("--seed", viz_seed, "Seed (random kinds only)");
  viz->add_option("--out", viz_out, "Output PGM path")->required();

  // ablate
  auto* ablate = app.add_subcommand(
      "ablate", "Train the scan/branch ablation ladder and emit a summary table");
  std::string ablate_config;
  ablate->add_option("--config", ablate_config, "key=value config file");
  ablate->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_cfg);
    if (train->parsed()) {
      const RunConfig cfg = RunConfig::load(train_config, parse_overrides(train->remaining()));
      return dispatch_precision(cfg, [&] { return run_train<float>(cfg); },
                                [&] { return run_train<double>(cfg); });
    }
    if (eval->parsed()) {
      const RunConfig cfg = RunConfig::from_items(read_checkpoint_config(eval_ckpt));
      return dispatch_precision(
          cfg, [&] { return run_eval<float>(eval_ckpt, eval_data, eval_split, eval_threads, cfg); },
          [&] { return run_eval<double>(eval_ckpt, eval_data, eval_split, eval_threads, cfg); });
    }
    if (infer->parsed()) {
      const RunConfig cfg = RunConfig::from_items(read_checkpoint_config(infer_ckpt));
      return dispatch_precision(
          cfg, [&] { return run_infer<float>(infer_ckpt, infer_image, infer_out, cfg); },
          [&] { return run_infer<double>(infer_ckpt, infer_image, infer_out, cfg); });
    }
    if (viz->parsed()) return cmd_scan_viz(viz_kind, viz_h, viz_w, viz_seed, viz_out);
    if (ablate->parsed()) {
      const RunConfig cfg = RunConfig::load(ablate_config, parse_overrides(ablate->remaining()));
      return dispatch_precision(cfg, [&] { return run_ablate<float>(cfg); },
                                [&] { return run_ablate<double>(cfg); });
    }
  } catch (const NumericFault& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
