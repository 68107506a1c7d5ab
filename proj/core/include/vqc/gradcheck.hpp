#pragma once

// Finite-difference verification of the reverse-mode gradients: every
// differentiable tape operation on random inputs, and the full episode loss
// with respect to every network parameter and codebook entry.

#include <cstdint>
#include <string>
#include <vector>

#include "vqc/training.hpp"

namespace vqc {

struct GradCheckOptions {
  /// Central-difference step for single operations.
  double op_step = 1e-5;
  /// Step for the episode loss, whose long chains push round-off of the
  /// loss value well above single-operation levels.
  double episode_step = 1e-4;
  /// Largest accepted |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double tolerance = 1e-4;
  /// Denominator floor so coordinates with a vanishing gradient compare
  /// absolutely instead of amplifying round-off.
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

/// Relative error used by every check.
double relative_error(double analytic, double numeric, double floor);

struct OpCheck {
  std::string op;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
};

/// Every differentiable operation on `instances` random inputs each. ReLU
/// and sqrt inputs are kept away from their kinks.
std::vector<OpCheck> check_op_gradients(const GradCheckOptions& opts,
                                        std::size_t instances = 100);

/// A small model, its parameters and a batch of noise-free episodes.
struct GradCheckSetup {
  SystemLayout layout;
  ModelConfig model;
  PilotConfig pilot;
  TrainState state;
  std::vector<EpisodeInput> episodes;
  double commitment_weight = 1.0;
};

/// M = N = 2, K = 1, V = B = 4, T = 2, hidden = 4, zero noise. Biases are
/// randomized so no unit-modulus input starts at the origin.
GradCheckSetup tiny_setup(std::uint64_t seed = 7, std::size_t episodes = 4);

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  /// Coordinates whose perturbation changed a quantization choice.
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
};

struct EpisodeCheck {
  std::vector<TensorCheck> tensors;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  double loss = 0.0;
};

/// Composite-loss gradient of the whole episode batch against central
/// differences. Differences are taken with the straight-through offsets and
/// choices of the unperturbed pass held fixed; coordinates whose perturbed
/// pass would select different codewords are skipped and counted.
EpisodeCheck check_episode_gradients(const GradCheckSetup& setup, const GradCheckOptions& opts,
                                     bool mutate_commitment_sign = false);

struct IsolationCheck {
  /// d sum(SG(x)) / dx is exactly zero.
  bool stop_gradient_zero = false;
  /// sum(x - SG(x)) is 0 with gradient exactly one.
  bool straight_through_identity = false;
  /// Every selected vector equals its codebook column bit for bit.
  bool selected_is_codeword = false;
  /// Gradient reaching each pre-quantized vector equals the gradient at the
  /// selected vector, bit for bit, under the MSE term alone.
  bool gradient_copied = false;
  /// The MSE term leaves both codebooks with exactly zero gradient.
  bool mse_codebook_zero = false;
  /// Codebook gradient of the full loss vanishes exactly off the selected
  /// columns and not on all of them.
  bool codeword_loss_selected_only = false;

  bool passed() const {
    return stop_gradient_zero && straight_through_identity && selected_is_codeword &&
           gradient_copied && mse_codebook_zero && codeword_loss_selected_only;
  }
};

IsolationCheck check_gradient_isolation(const GradCheckSetup& setup);

struct GradCheckReport {
  std::vector<OpCheck> ops;
  EpisodeCheck episode;
  IsolationCheck isolation;
  /// Largest error of the run with the commitment gradient sign flipped;
  /// the check is only trusted if this one fails.
  double mutation_max_rel_error = 0.0;
  double tolerance = 0.0;

  bool ops_passed() const;
  bool episode_passed() const;
  bool mutation_detected() const { return mutation_max_rel_error > tolerance; }
  bool passed() const {
    return ops_passed() && episode_passed() && isolation.passed() && mutation_detected();
  }
};

GradCheckReport run_gradcheck(const GradCheckSetup& setup, const GradCheckOptions& opts,
                              std::size_t op_instances = 100);

}  // namespace vqc
