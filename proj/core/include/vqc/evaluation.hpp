#pragma once

// Localization metrics, the non-adaptive comparison schemes, and radio maps.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vqc/training.hpp"

namespace vqc {

struct EvalReport {
  std::string scheme;  // "vqc", "codebook-free", "random", "fixed"
  double rmse = 0.0;
  std::vector<std::pair<std::size_t, double>> per_t;  // (frames, rmse)
  std::size_t episodes = 0;
  std::uint64_t seed = 0;
  std::string config;  // JSON snapshot of the run configuration
};

struct EvalOptions {
  std::size_t episodes = 1000;
  std::uint64_t seed = 1000;
  /// Extra frame counts to evaluate besides the trained T.
  std::vector<std::size_t> sweep;
  std::size_t batch_size = 256;
};

/// Held-out episodes for evaluation, drawn from their own stream.
std::vector<EpisodeInput> evaluation_episodes(const SystemLayout& layout, const PilotConfig& pilot,
                                              double epsilon, std::size_t frames,
                                              const EvalOptions& opts);

/// RMSE of a trained network on fresh episodes; `codebooks` is ignored in
/// codebook-free mode.
EvalReport evaluate_rmse(const ModelParameters& params, const Codebooks* codebooks,
                         const ModelConfig& model, const SystemLayout& layout,
                         const PilotConfig& pilot, double epsilon, const EvalOptions& opts);

/// Same pipeline, but insists the model was configured codebook-free.
EvalReport codebook_free_eval(const ModelParameters& params, const ModelConfig& model,
                              const SystemLayout& layout, const PilotConfig& pilot,
                              double epsilon, const EvalOptions& opts);

/// sqrt(mean ||c - p||^2) for a constant predictor c.
double constant_predictor_rmse(std::span<const EpisodeInput> episodes, const Position& c);

// ------------------------------------------------------------ baselines

enum class SensingMode { random, fixed };

/// Feedforward estimator on the 2T pilot features, plus the learned
/// sensing vectors in fixed mode.
struct BaselineParams {
  std::vector<Affine<ad::Array>> layers;
  std::vector<ad::Array> w;                   // per frame, 1 x 2M
  std::vector<std::vector<ad::Array>> theta;  // [frame][k], 1 x 2N
};

struct BaselineConfig {
  SensingMode mode = SensingMode::random;
  std::vector<std::size_t> widths{200, 200, 200, 3};
};

struct BaselineState {
  BaselineParams params;
  Codebooks codebooks;  // sampling pool in random mode
  AdamState adam;
  std::uint64_t step = 0;
  std::uint64_t episodes_seen = 0;
};

BaselineState init_baseline(const BaselineConfig& base, const ModelConfig& model,
                            const SystemLayout& layout, std::uint64_t seed);

/// Per-episode codeword draws for random sensing: [frame] -> (bs index, ris indices).
struct RandomDraw {
  std::vector<std::size_t> bs;                // per frame
  std::vector<std::vector<std::size_t>> ris;  // [frame][k]
};

RandomDraw random_draw(const ModelConfig& model, std::uint64_t seed, std::uint64_t index,
                       StreamTag tag);

/// Sensing vectors the baseline uses for one episode, frame by frame.
struct BaselineSensing {
  std::vector<CVector> w;
  std::vector<std::vector<CVector>> theta;
};

BaselineSensing baseline_sensing(const BaselineState& state, const BaselineConfig& base,
                                 const ModelConfig& model, const RandomDraw* draw);

/// One Adam step on the MSE between estimate and truth.
StepMetrics baseline_step(BaselineState& state, const BaselineConfig& base,
                          std::span<const EpisodeInput> batch, std::span<const RandomDraw> draws,
                          const ModelConfig& model, const TrainConfig& train,
                          const PilotConfig& pilot);

double baseline_rmse(const BaselineState& state, const BaselineConfig& base,
                     const ModelConfig& model, const PilotConfig& pilot,
                     std::span<const EpisodeInput> episodes, std::span<const RandomDraw> draws);

struct BaselineResult {
  BaselineState state;
  EvalReport report;
};

/// Trains the estimator (and, in fixed mode, the sensing vectors) on the same
/// episode budget as the adaptive network, then evaluates it.
BaselineResult run_baseline(const BaselineConfig& base, const TrainConfig& train,
                            const SystemLayout& layout, const ModelConfig& model,
                            const EvalOptions& eval,
                            const std::function<void(const StepMetrics&)>& on_step = {});

// ------------------------------------------------------------ radio maps

struct RadioMap {
  std::size_t frame = 0;
  std::string subset;  // "ris1", "ris2", ..., "all"
  RssGrid rss;
};

struct RadioMapSet {
  Position ue;
  EpisodeTrace trace;
  std::vector<RadioMap> maps;
};

/// Vectors measured at frame t of a trace: the initial design for t = 0,
/// otherwise the design produced after frame t - 1.
BaselineSensing measured_vectors(const EpisodeTrace& trace, const ModelConfig& model);

/// Runs one noise-free episode on the LOS channel of `ue` and renders the RSS
/// for every frame: each RIS path alone and, for K >= 2, the full field of
/// all RISs plus the direct path.
RadioMapSet emit_radio_maps(const ModelParameters& params, const Codebooks* codebooks,
                            const ModelConfig& model, const SystemLayout& layout,
                            const PilotConfig& pilot, const Position& ue,
                            double resolution = 1.0);

/// Grid cell containing p (clamped to the grid).
std::pair<std::size_t, std::size_t> cell_of(const GridSpec& grid, const Position& p);

double median(std::vector<double> values);

}  // namespace vqc
