#pragma once

#include "crackmamba/model.hpp"
#include "crackmamba/train.hpp"

namespace crackmamba {

/// Merged model + training + run settings, parsed from a line-based
/// key=value file with command-line overrides. Unknown keys are hard errors;
/// items() echoes every effective value in a fixed order.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data_dir;
  std::string out_dir = "runs/out";
  std::string precision = "f32";  // f32 | f64
  Index threads = 1;

  /// Applies one key=value pair; throws std::invalid_argument on unknown
  /// keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  std::vector<std::pair<std::string, std::string>> items() const;

  void validate() const;

  /// Reads `path` (blank lines and #-comments allowed), then applies
  /// overrides in order.
  static RunConfig load(const std::string& path,
                        const std::vector<std::pair<std::string, std::string>>& overrides = {});

  static RunConfig from_items(const std::vector<std::pair<std::string, std::string>>& items);
};

}  // namespace crackmamba
