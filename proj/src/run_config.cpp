#include "crackmamba/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace crackmamba {

namespace {

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw std::invalid_argument(key + ": cannot parse '" + v + "' as a number");
  }
}

Index parse_index(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return static_cast<Index>(i);
  } catch (...) {
    throw std::invalid_argument(key + ": cannot parse '" + v + "' as an integer");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t i = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return i;
  } catch (...) {
    throw std::invalid_argument(key + ": cannot parse '" + v + "' as an unsigned integer");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(key + ": cannot parse '" + v + "' as a bool (true/false/1/0)");
}

std::vector<std::string> split_csv(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

template <typename T, std::size_t N>
void parse_array(const std::string& key, const std::string& v, std::array<T, N>& dst,
                 T (*one)(const std::string&, const std::string&)) {
  const auto parts = split_csv(v);
  if (parts.size() != N)
    throw std::invalid_argument(key + ": expected " + std::to_string(N) +
                                " comma-separated values, got " + std::to_string(parts.size()));
  for (std::size_t i = 0; i < N; ++i) dst[i] = one(key, parts[i]);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

template <typename T, std::size_t N>
std::string fmt_array(const std::array<T, N>& a) {
  std::ostringstream ss;
  ss.precision(17);
  for (std::size_t i = 0; i < N; ++i) ss << (i ? "," : "") << a[i];
  return ss.str();
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  // model
  if (key == "stage_dims")
    parse_array<Index, 4>(key, value, model.stage_dims, parse_index);
  else if (key == "stage_depths")
    parse_array<Index, 4>(key, value, model.stage_depths, parse_index);
  else if (key == "state_dim")
    model.state_dim = parse_index(key, value);
  else if (key == "input_size")
    model.input_size = parse_index(key, value);
  else if (key == "drop_path_rate")
    model.drop_path_rate = parse_double(key, value);
  else if (key == "use_cross_branch")
    model.use_cross_branch = parse_bool(key, value);
  else if (key == "use_snake_branch")
    model.use_snake_branch = parse_bool(key, value);
  else if (key == "use_conv_branch")
    model.use_conv_branch = parse_bool(key, value);
  else if (key == "use_sca")
    model.use_sca = parse_bool(key, value);
  else if (key == "mlp_ratio")
    model.mlp_ratio = parse_index(key, value);
  else if (key == "sca_ratio")
    model.sca_ratio = parse_index(key, value);
  else if (key == "sca_kernel")
    model.sca_kernel = parse_index(key, value);
  else if (key == "vss_expand")
    model.vss_expand = parse_index(key, value);
  else if (key == "upsample") {
    if (value == "bilinear")
      model.upsample = UpsampleMode::bilinear;
    else if (value == "nearest")
      model.upsample = UpsampleMode::nearest;
    else
      throw std::invalid_argument("upsample: must be 'bilinear' or 'nearest'");
  } else if (key == "discretize") {
    if (value == "zoh")
      model.discretize = DiscretizeRule::zoh;
    else if (value == "euler")
      model.discretize = DiscretizeRule::euler;
    else
      throw std::invalid_argument("discretize: must be 'zoh' or 'euler'");
  }
  // train
  else if (key == "lr0")
    train.lr0 = parse_double(key, value);
  else if (key == "weight_decay")
    train.weight_decay = parse_double(key, value);
  else if (key == "beta1")
    train.beta1 = parse_double(key, value);
  else if (key == "beta2")
    train.beta2 = parse_double(key, value);
  else if (key == "epochs")
    train.epochs = parse_index(key, value);
  else if (key == "freeze_epochs")
    train.freeze_epochs = parse_index(key, value);
  else if (key == "ds_weights")
    parse_array<double, 4>(key, value, train.ds_weights, parse_double);
  else if (key == "batch_size")
    train.batch_size = parse_index(key, value);
  else if (key == "seed")
    train.seed = parse_u64(key, value);
  else if (key == "stop_miou")
    train.stop_miou = parse_double(key, value);
  else if (key == "stop_loss")
    train.stop_loss = parse_double(key, value);
  else if (key == "keep_best")
    train.keep_best = parse_bool(key, value);
  // run
  else if (key == "data_dir")
    data_dir = value;
  else if (key == "out_dir")
    out_dir = value;
  else if (key == "precision") {
    if (value != "f32" && value != "f64")
      throw std::invalid_argument("precision: must be 'f32' or 'f64'");
    precision = value;
  } else if (key == "threads")
    threads = parse_index(key, value);
  else
    throw std::invalid_argument("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("stage_dims", fmt_array(model.stage_dims));
  out.emplace_back("stage_depths", fmt_array(model.stage_depths));
  out.emplace_back("state_dim", std::to_string(model.state_dim));
  out.emplace_back("input_size", std::to_string(model.input_size));
  out.emplace_back("drop_path_rate", fmt(model.drop_path_rate));
  out.emplace_back("use_cross_branch", model.use_cross_branch ? "true" : "false");
  out.emplace_back("use_snake_branch", model.use_snake_branch ? "true" : "false");
  out.emplace_back("use_conv_branch", model.use_conv_branch ? "true" : "false");
  out.emplace_back("use_sca", model.use_sca ? "true" : "false");
  out.emplace_back("mlp_ratio", std::to_string(model.mlp_ratio));
  out.emplace_back("sca_ratio", std::to_string(model.sca_ratio));
  out.emplace_back("sca_kernel", std::to_string(model.sca_kernel));
  out.emplace_back("vss_expand", std::to_string(model.vss_expand));
  out.emplace_back("upsample", model.upsample == UpsampleMode::bilinear ? "bilinear" : "nearest");
  out.emplace_back("discretize", model.discretize == DiscretizeRule::zoh ? "zoh" : "euler");
  out.emplace_back("lr0", fmt(train.lr0));
  out.emplace_back("weight_decay", fmt(train.weight_decay));
  out.emplace_back("beta1", fmt(train.beta1));
  out.emplace_back("beta2", fmt(train.beta2));
  out.emplace_back("epochs", std::to_string(train.epochs));
  out.emplace_back("freeze_epochs", std::to_string(train.freeze_epochs));
  out.emplace_back("ds_weights", fmt_array(train.ds_weights));
  out.emplace_back("batch_size", std::to_string(train.batch_size));
  out.emplace_back("seed", std::to_string(train.seed));
  out.emplace_back("stop_miou", fmt(train.stop_miou));
  out.emplace_back("stop_loss", fmt(train.stop_loss));
  out.emplace_back("keep_best", train.keep_best ? "true" : "false");
  out.emplace_back("data_dir", data_dir);
  out.emplace_back("out_dir", out_dir);
  out.emplace_back("precision", precision);
  out.emplace_back("threads", std::to_string(threads));
  return out;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  check_arg(threads >= 1, "threads: must be positive");
}

RunConfig RunConfig::load(const std::string& path,
                          const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw IoError(path + ": cannot open config file");
    std::string line;
    Index line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
      std::size_t start = 0;
      while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
      line = line.substr(start);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                    ": expected key=value, got '" + line + "'");
      cfg.set(line.substr(0, eq), line.substr(eq + 1));
    }
  }
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_items(const std::vector<std::pair<std::string, std::string>>& items) {
  RunConfig cfg;
  for (const auto& [k, v] : items) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

}  // namespace crackmamba
