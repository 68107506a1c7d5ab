#pragma once

// Run configuration: one JSON document covering layout, model, training,
// pilot, evaluation and output settings.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "vqc/evaluation.hpp"

namespace vqc {

struct OutputConfig {
  /// Run directory; checkpoints, metrics and reports go below it.
  std::string dir = "runs/default";
  /// Training steps between metric lines; validation lines are always written.
  std::size_t log_every = 10;
};

struct RunConfig {
  std::string name = "default";
  SystemLayout layout;
  /// K, N, M and C always mirror the layout.
  ModelConfig model;
  TrainConfig train;
  EvalOptions eval;
  double radiomap_resolution = 1.0;
  OutputConfig output;

  PilotConfig pilot() const { return pilot_for(train); }
  /// Throws ConfigError listing every problem found.
  void validate() const;
};

/// Invalid configuration; `diagnostics` holds one entry per problem, each
/// prefixed with the JSON path of the offending field.
class ConfigError : public InvalidArgument {
 public:
  ConfigError(std::string origin, std::vector<std::string> diagnostics);
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<std::string> diagnostics_;
};

/// Single-RIS desk layout used when a config omits "layout".
SystemLayout default_layout();

/// Parses a config document. Absent fields keep their defaults; unknown
/// fields, wrong types and out-of-range values are reported together.
/// "feature_scale": "auto" and "position_frame": "area" are resolved here.
RunConfig parse_run_config(std::string_view json_text, std::string_view origin = "<config>");

/// Reads and parses a file; a missing or unreadable file is a ConfigError
/// naming the path.
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON with every value resolved; parsing it yields an equal config.
std::string run_config_to_json(const RunConfig& cfg, int indent = 2);

/// Throws InvalidArgument when a checkpoint trained under `trained` cannot be
/// run under `requested` (any parameter or codebook shape differs).
void check_compatible(const RunConfig& trained, const RunConfig& requested);

}  // namespace vqc
