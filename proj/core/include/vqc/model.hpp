#pragma once

// The adaptive sensing network: an LSTM compresses the pilot history, a
// feedforward head designs the next BS beamformer and RIS configurations,
// vector quantization snaps them to codebook columns, and a position head
// maps the final cell state to a location estimate.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vqc/autodiff.hpp"
#include "vqc/codebook.hpp"
#include "vqc/geometry.hpp"

namespace vqc {

struct ModelConfig {
  std::size_t T = 3;
  std::size_t K = 1;
  std::size_t N = 16;
  std::size_t M = 1;
  std::size_t V = 64;
  std::size_t B = 1;
  std::size_t hidden = 32;
  std::size_t dnn_width = 64;
  std::size_t dnn_depth = 2;
  std::vector<std::size_t> pos_head_widths{64, 64, 3};
  /// Feed the designed vectors straight to the measurement, skipping quantization.
  bool codebook_free = false;
  /// Multiplier applied to pilot measurements before they enter the LSTM.
  double feature_scale = 1.0;
  /// Fixed affine map on the position head output: p = offset + scale * out.
  Position position_offset{};
  Position position_scale{1.0, 1.0, 1.0};

  std::vector<std::string> problems() const;
  void validate() const;
};

/// 1 / (sqrt(P_u) * direct path amplitude at the service-area center), which
/// puts the direct-path contribution of a measurement at order one.
double default_feature_scale(const SystemLayout& layout, const PilotConfig& pilot);

/// Sets position_offset/position_scale so a zero head output lands on the
/// area center and unit outputs reach its edges (z keeps scale 1).
void fit_position_frame(ModelConfig& cfg, const ServiceArea& area);

template <typename T>
struct Affine {
  T weight;  // out x in
  T bias;    // 1 x out
};

template <typename T>
struct LstmWeights {
  T r_i, r_f, r_o, r_c;  // hidden x 2
  T u_i, u_f, u_o, u_c;  // hidden x hidden
  T b_i, b_f, b_o, b_c;  // 1 x hidden
};

template <typename T>
struct SensingHead {
  std::vector<Affine<T>> hidden;  // A_1 .. A_L
  Affine<T> ris;                  // 2NK x width
  Affine<T> bs;                   // 2M x width
};

template <typename T>
struct PositionHead {
  std::vector<Affine<T>> layers;
};

template <typename T>
struct Network {
  LstmWeights<T> lstm;
  SensingHead<T> sensing;
  PositionHead<T> position;
};

using LstmParams = LstmWeights<ad::Array>;
using SensingHeadParams = SensingHead<ad::Array>;
using PositionHeadParams = PositionHead<ad::Array>;
using ModelParameters = Network<ad::Array>;
using BoundNetwork = Network<ad::Var>;

/// Calls f(name, member) for every tensor in a fixed order.
template <typename T, typename F>
void visit(Network<T>& net, F&& f);
template <typename T, typename F>
void visit(const Network<T>& net, F&& f);

/// Fan-in scaled uniform weights, zero biases.
ModelParameters init_parameters(const ModelConfig& cfg, const ServiceArea& area, Rng& rng);
ModelParameters zero_parameters(const ModelConfig& cfg);

struct Codebooks {
  Codebook ris;  // 2N x V
  Codebook bs;   // 2M x B
};

Codebooks init_codebooks(const ModelConfig& cfg, Rng& rng);

/// Tape view of the network and, unless running codebook-free, the codebooks.
struct BoundModel {
  BoundNetwork net;
  std::optional<ad::Var> ris_codebook;
  std::optional<ad::Var> bs_codebook;
};

BoundModel bind(ad::Tape& tape, const ModelParameters& params, const Codebooks* codebooks);

/// One episode's environment: channel, per-frame receiver noise, and truth.
struct EpisodeInput {
  Position ue;
  ChannelRealization channel;
  std::vector<Complex> noise;  // length >= T
};

/// Channels reshaped for fast batched measurement.
struct CompiledChannels {
  std::vector<CVector> h_d;                // per episode, M
  std::vector<std::vector<CMatrix>> H;     // per episode, K cascade matrices N x M
};

std::shared_ptr<const CompiledChannels> compile_channels(std::span<const EpisodeInput> episodes);

/// Differentiable pilot measurement for a batch: rows of `w` are 2M
/// beamformers, rows of thetas[k] are 2N RIS configurations. Returns B x 2
/// [Re y, Im y] including the frame's noise sample. Throws NumericError if
/// any measurement is non-finite.
ad::Var measure_batch(ad::Var w, std::span<const ad::Var> thetas,
                      const std::shared_ptr<const CompiledChannels>& channels,
                      const PilotConfig& pilot, std::span<const Complex> noise);

struct LstmState {
  ad::Var cell;
  ad::Var hidden;
};

LstmState lstm_step(ad::Var features, const LstmState& prev, const LstmWeights<ad::Var>& w);

struct SensingDesign {
  ad::Var w;                   // B x 2M
  std::vector<ad::Var> theta;  // K x (B x 2N)
};

SensingDesign design_sensing(ad::Var hidden, const SensingHead<ad::Var>& head, std::size_t K);

/// Applies position_offset/position_scale to a B x 3 head output.
ad::Var to_meters(ad::Var out, const ModelConfig& cfg);

/// B x 3 position in meters.
ad::Var estimate_position(ad::Var cell, const PositionHead<ad::Var>& head, const ModelConfig& cfg);

/// Sensing vectors chosen for one frame, with their quantization records.
struct FrameSelection {
  SensingDesign pre;   // pre-quantized designs
  SensingDesign used;  // vectors that reach the measurement
  std::vector<std::size_t> bs_index;                // per episode
  std::vector<std::vector<std::size_t>> ris_index;  // [k][episode]
  std::optional<Quantized> bs_q;
  std::vector<Quantized> ris_q;
};

struct FrameRecord {
  ad::Var measurement;  // B x 2, raw
  ad::Var features;     // B x 2, scaled
  LstmState state;
  FrameSelection next;  // designed from this frame's state
};

struct BatchTrace {
  std::size_t batch = 0;
  FrameSelection initial;  // designed from the zero state
  std::vector<FrameRecord> frames;
  ad::Var estimate;  // B x 3
};

struct RunOptions {
  PilotConfig pilot;
  /// Overrides cfg.T when set (evaluation sweeps).
  std::optional<std::size_t> frames;
};

BatchTrace run_batch(ad::Tape& tape, const BoundModel& model, const ModelConfig& cfg,
                     std::span<const EpisodeInput> episodes, const RunOptions& opts);

struct LossOptions {
  double commitment_weight = 1.0;
  /// Divides the summed per-episode losses; defaults to the batch size.
  std::optional<double> normalizer;
  /// Flips the gradient of the commitment term without changing its value.
  /// Used by the gradient checker's mutation self-test.
  bool mutate_commitment_sign = false;
};

struct LossTerms {
  ad::Var total;  // 1 x 1
  ad::Var mse;
  ad::Var alpha;
  ad::Var beta;
};

LossTerms composite_loss(const BatchTrace& trace, std::span<const Position> truth,
                         const LossOptions& opts);

// ------------------------------------------------------------ value traces

struct FrameValues {
  Complex measurement;
  std::vector<double> features;
  std::vector<double> cell;
  std::vector<double> hidden;
  std::vector<double> w_pre;
  std::vector<std::vector<double>> theta_pre;
  std::vector<double> w_used;
  std::vector<std::vector<double>> theta_used;
  std::size_t bs_index = 0;
  std::vector<std::size_t> ris_index;
  double alpha = 0.0;
  std::vector<double> beta;
};

/// Plain-value record of one episode.
struct EpisodeTrace {
  std::vector<double> initial_w;
  std::vector<std::vector<double>> initial_theta;
  std::size_t initial_bs_index = 0;
  std::vector<std::size_t> initial_ris_index;
  std::vector<FrameValues> frames;
  Position estimate;
};

EpisodeTrace extract_episode(const BatchTrace& trace, std::size_t b, double commitment_weight);

/// Convenience: runs a single episode on a scratch tape.
EpisodeTrace run_episode(const ModelParameters& params, const Codebooks* codebooks,
                         const ModelConfig& cfg, const EpisodeInput& episode,
                         const RunOptions& opts);

// ------------------------------------------------------------ visit impl

namespace detail {
template <typename Net, typename F>
void visit_impl(Net& net, F& f) {
  f("lstm.r_i", net.lstm.r_i);
  f("lstm.r_f", net.lstm.r_f);
  f("lstm.r_o", net.lstm.r_o);
  f("lstm.r_c", net.lstm.r_c);
  f("lstm.u_i", net.lstm.u_i);
  f("lstm.u_f", net.lstm.u_f);
  f("lstm.u_o", net.lstm.u_o);
  f("lstm.u_c", net.lstm.u_c);
  f("lstm.b_i", net.lstm.b_i);
  f("lstm.b_f", net.lstm.b_f);
  f("lstm.b_o", net.lstm.b_o);
  f("lstm.b_c", net.lstm.b_c);
  for (std::size_t l = 0; l < net.sensing.hidden.size(); ++l) {
    const std::string p = "sensing.hidden" + std::to_string(l + 1);
    f(p + ".weight", net.sensing.hidden[l].weight);
    f(p + ".bias", net.sensing.hidden[l].bias);
  }
  f("sensing.ris.weight", net.sensing.ris.weight);
  f("sensing.ris.bias", net.sensing.ris.bias);
  f("sensing.bs.weight", net.sensing.bs.weight);
  f("sensing.bs.bias", net.sensing.bs.bias);
  for (std::size_t l = 0; l < net.position.layers.size(); ++l) {
    const std::string p = "position.layer" + std::to_string(l + 1);
    f(p + ".weight", net.position.layers[l].weight);
    f(p + ".bias", net.position.layers[l].bias);
  }
}
}  // namespace detail

template <typename T, typename F>
void visit(Network<T>& net, F&& f) {
  detail::visit_impl(net, f);
}

template <typename T, typename F>
void visit(const Network<T>& net, F&& f) {
  detail::visit_impl(net, f);
}

}  // namespace vqc
