#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "vqc/model.hpp"

namespace vqc {

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  /// Fresh-sampling budget; ignored when dataset_size > 0.
  std::size_t episodes_total = 50000;
  /// Size of a fixed training pool cycled for `epochs` passes; 0 samples
  /// fresh episodes every step.
  std::size_t dataset_size = 0;
  std::size_t batch_size = 256;
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  /// cosine decays from learning_rate to learning_rate * lr_final_fraction
  /// over total_steps().
  LrSchedule lr_schedule = LrSchedule::constant;
  double lr_final_fraction = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double snr_db = 25.0;
  double noise_dbm = -100.0;
  double rician_factor = 10.0;
  std::uint64_t seed = 1;
  double commitment_weight = 1.0;
  std::size_t validation_episodes = 1000;
  /// Checkpoint cadence in epochs; the final state is always emitted.
  std::size_t checkpoint_every = 0;
  std::size_t threads = 1;
  /// Re-seed a codeword from a current pre-quantized design once it has not
  /// been selected for this many steps; 0 disables.
  std::size_t restart_after = 0;

  std::vector<std::string> problems() const;
  void validate() const;
  std::size_t total_steps() const;
  /// Learning rate for the update that follows `completed_steps` updates.
  double learning_rate_at(std::size_t completed_steps) const;
};

/// Adam moments for a list of tensors.
struct AdamState {
  std::vector<ad::Array> m;
  std::vector<ad::Array> v;
  std::uint64_t step = 0;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. When `column_mask` is given, only the
/// marked columns (and their moments) change.
void adam_update(std::span<ad::Array* const> params, std::span<const ad::Array> grads,
                 AdamState& state, const AdamConfig& cfg,
                 const std::vector<std::vector<bool>>* column_mask = nullptr);

/// Uniform over the service rectangle at its fixed height.
Position sample_ue(const SystemLayout& layout, Rng& rng);

/// Stream tags keep training, validation and evaluation draws disjoint.
enum class StreamTag : std::uint64_t { init = 0, train = 1, validation = 2, evaluation = 3 };

/// Position, channel and `frames` noise samples drawn from the episode's own
/// stream (seed, index, tag).
EpisodeInput make_episode(const SystemLayout& layout, const PilotConfig& pilot, double epsilon,
                          std::size_t frames, std::uint64_t seed, std::uint64_t index,
                          StreamTag tag);

std::vector<EpisodeInput> make_episodes(const SystemLayout& layout, const PilotConfig& pilot,
                                        double epsilon, std::size_t frames, std::uint64_t seed,
                                        std::uint64_t first_index, std::size_t count,
                                        StreamTag tag);

struct TrainState {
  ModelParameters params;
  Codebooks codebooks;
  AdamState adam_net;
  AdamState adam_ris;
  AdamState adam_bs;
  std::uint64_t step = 0;
  std::uint64_t episodes_seen = 0;
  /// Step at which each codeword was last selected (restart bookkeeping).
  std::vector<std::uint64_t> ris_last_used;
  std::vector<std::uint64_t> bs_last_used;
};

TrainState init_train_state(const ModelConfig& model, const SystemLayout& layout,
                            std::uint64_t seed);

struct StepMetrics {
  std::uint64_t step = 0;
  std::uint64_t episodes = 0;
  double loss = 0.0;
  double mse = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
};

/// Forward, composite loss, backward, Adam on all trainable tensors (only
/// the selected codebook columns move), then unit-modulus projection.
/// Throws NumericError on a non-finite loss.
StepMetrics train_step(TrainState& state, std::span<const EpisodeInput> batch,
                       const ModelConfig& model, const TrainConfig& train,
                       const PilotConfig& pilot);

/// sqrt(mean ||p_hat - p||^2) over the given episodes, forward only.
double model_rmse(const ModelParameters& params, const Codebooks* codebooks,
                  const ModelConfig& model, const PilotConfig& pilot,
                  std::span<const EpisodeInput> episodes, std::optional<std::size_t> frames = {},
                  std::size_t batch_size = 256);

struct ValidationMetrics {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double rmse = 0.0;
};

struct TrainCallbacks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const ValidationMetrics&)> on_validation;
  std::function<void(const TrainState&, std::size_t epoch)> on_checkpoint;
};

struct TrainResult {
  TrainState state;
  double validation_rmse = 0.0;
  std::vector<StepMetrics> history;
};

TrainResult train_loop(const TrainConfig& train, const SystemLayout& layout,
                       const ModelConfig& model, const TrainCallbacks& callbacks = {});

PilotConfig pilot_for(const TrainConfig& train);

}  // namespace vqc
