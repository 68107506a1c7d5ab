#pragma once

// Subcommand bodies behind the command-line tool. Each returns a process
// exit code and reports problems on the context's error stream.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vqc/checkpoint.hpp"

namespace vqc {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumeric = 2 };

struct CommandContext {
  std::ostream& out;
  std::ostream& err;
  /// Overrides train.threads from the config when set.
  std::optional<std::size_t> threads;
  /// Forces single-threaded execution.
  bool deterministic = false;
};

/// Thread count from an environment value such as VQC_THREADS; empty for
/// unset, malformed or zero values.
std::optional<std::size_t> parse_thread_count(const char* value);

/// Runs `body`, mapping InvalidArgument to kExitUsage and NumericError to
/// kExitNumeric, each with a one-line diagnostic.
int run_guarded(const std::function<int()>& body, std::ostream& err);

/// Applies the context's thread settings to a config.
void apply_threads(RunConfig& cfg, const CommandContext& ctx);

struct TrainArtifacts {
  Checkpoint checkpoint;
  double validation_rmse = 0.0;
  std::filesystem::path checkpoint_dir;
};

/// Trains under `cfg`, writing below `dir`: config.json, metrics.jsonl,
/// checkpoints/epoch-NNNN at the configured cadence, checkpoint/ for the
/// final state, and codebook CSVs.
TrainArtifacts train_to_directory(const RunConfig& cfg, const std::filesystem::path& dir,
                                  std::ostream* progress);

int cmd_train(const std::filesystem::path& config, const CommandContext& ctx);

struct EvalRequest {
  std::filesystem::path checkpoint;
  /// Evaluation setup to use instead of the checkpoint's own; its shapes
  /// must match the checkpoint.
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> report;
  std::vector<std::size_t> sweep;
  std::optional<std::size_t> episodes;
  std::optional<std::uint64_t> seed;
};

/// Report for a loaded checkpoint under an effective run config.
EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const RunConfig& effective);

/// The config a request evaluates under: the checkpoint's own, or the
/// override file after a shape check, with request-level overrides applied.
RunConfig effective_eval_config(const Checkpoint& ckpt, const EvalRequest& req);

int cmd_eval(const EvalRequest& req, const CommandContext& ctx);

struct RadioMapRequest {
  std::filesystem::path checkpoint;
  Position ue;
  /// Defaults to <run dir>/radiomaps.
  std::optional<std::filesystem::path> out_dir;
  std::optional<double> resolution;
};

int cmd_radiomap(const RadioMapRequest& req, const CommandContext& ctx);

struct GradCheckRequest {
  std::uint64_t seed = 7;
  std::size_t op_instances = 100;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradCheckRequest& req, const CommandContext& ctx);

enum class BaselineKind { random, fixed, codebook_free };

std::optional<BaselineKind> parse_baseline_kind(const std::string& name);
std::string baseline_name(BaselineKind kind);

struct BaselineRequest {
  BaselineKind kind = BaselineKind::random;
  std::filesystem::path config;
  std::optional<std::filesystem::path> report;
};

/// Trains the chosen comparison scheme on the config's budget, evaluates it
/// on the config's evaluation settings, and writes its report.
int cmd_baseline(const BaselineRequest& req, const CommandContext& ctx);

}  // namespace vqc
