#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vqc/model.hpp"
#include "vqc/training.hpp"

namespace vqc {
namespace {

using ad::Array;
using ad::Tape;
using ad::Var;

Array random_array(std::size_t r, std::size_t c, Rng& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Array a(r, c);
  for (auto& x : a.data()) x = d(rng);
  return a;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar LSTM: each gate row computed with explicit loops.
void oracle_lstm(const LstmParams& p, const std::vector<double>& x, const std::vector<double>& s,
                 const std::vector<double>& c, std::vector<double>& c_out,
                 std::vector<double>& s_out) {
  const std::size_t H = s.size();
  auto gate = [&](const Array& r, const Array& u, const Array& b, std::size_t h) {
    double z = b[h];
    for (std::size_t j = 0; j < x.size(); ++j) z += r(h, j) * x[j];
    for (std::size_t j = 0; j < H; ++j) z += u(h, j) * s[j];
    return z;
  };
  c_out.assign(H, 0.0);
  s_out.assign(H, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    const double i = sigmoid(gate(p.r_i, p.u_i, p.b_i, h));
    const double f = sigmoid(gate(p.r_f, p.u_f, p.b_f, h));
    const double o = sigmoid(gate(p.r_o, p.u_o, p.b_o, h));
    const double g = std::tanh(gate(p.r_c, p.u_c, p.b_c, h));
    c_out[h] = f * c[h] + i * g;
    s_out[h] = o * std::tanh(c_out[h]);
  }
}

LstmParams random_lstm(std::size_t H, Rng& rng) {
  LstmParams p;
  for (Array* a : {&p.r_i, &p.r_f, &p.r_o, &p.r_c}) *a = random_array(H, 2, rng);
  for (Array* a : {&p.u_i, &p.u_f, &p.u_o, &p.u_c}) *a = random_array(H, H, rng);
  for (Array* a : {&p.b_i, &p.b_f, &p.b_o, &p.b_c}) *a = random_array(1, H, rng);
  return p;
}

LstmWeights<Var> bind_lstm(Tape& t, const LstmParams& p) {
  return {t.leaf(p.r_i), t.leaf(p.r_f), t.leaf(p.r_o), t.leaf(p.r_c),
          t.leaf(p.u_i), t.leaf(p.u_f), t.leaf(p.u_o), t.leaf(p.u_c),
          t.leaf(p.b_i), t.leaf(p.b_f), t.leaf(p.b_o), t.leaf(p.b_c)};
}

TEST(Model, LstmZeroWeightsAndStatesGiveZero) {
  Rng rng(1);
  Tape t;
  LstmParams p = random_lstm(4, rng);
  for (Array* a : {&p.r_i, &p.r_f, &p.r_o, &p.r_c, &p.u_i, &p.u_f, &p.u_o, &p.u_c, &p.b_i, &p.b_f,
                   &p.b_o, &p.b_c}) {
    a->fill(0.0);
  }
  const LstmState s = lstm_step(t.constant(Array::row({0.3, -0.7})),
                                {t.constant(Array(1, 4)), t.constant(Array(1, 4))},
                                bind_lstm(t, p));
  EXPECT_EQ(s.cell.value(), Array(1, 4));
  EXPECT_EQ(s.hidden.value(), Array(1, 4));
}

TEST(Model, LstmSaturatedGatesPassMemoryThrough) {
  Rng rng(2);
  LstmParams p = random_lstm(4, rng);
  p.b_f.fill(50.0);
  p.b_i.fill(-50.0);
  Tape t;
  const Array c_prev = random_array(1, 4, rng, 2.0);
  const LstmState s = lstm_step(t.constant(Array::row({0.1, 0.2})),
                                {t.constant(c_prev), t.constant(random_array(1, 4, rng))},
                                bind_lstm(t, p));
  for (std::size_t h = 0; h < 4; ++h) EXPECT_NEAR(s.cell.value()[h], c_prev[h], 1e-9);
}

TEST(Model, LstmMatchesScalarOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t H = 1 + trial % 7;
    const LstmParams p = random_lstm(H, rng);
    const Array x = random_array(1, 2, rng, 2.0);
    const Array s0 = random_array(1, H, rng);
    const Array c0 = random_array(1, H, rng);
    Tape t;
    const LstmState out =
        lstm_step(t.constant(x), {t.constant(c0), t.constant(s0)}, bind_lstm(t, p));
    std::vector<double> c_ref;
    std::vector<double> s_ref;
    oracle_lstm(p, x.data(), s0.data(), c0.data(), c_ref, s_ref);
    for (std::size_t h = 0; h < H; ++h) {
      EXPECT_NEAR(out.cell.value()[h], c_ref[h], 1e-14);
      EXPECT_NEAR(out.hidden.value()[h], s_ref[h], 1e-14);
    }
  }
  Tape t;
  const LstmParams p = random_lstm(3, rng);
  EXPECT_THROW(lstm_step(t.constant(Array(1, 3)), {t.constant(Array(1, 3)), t.constant(Array(1, 3))},
                         bind_lstm(t, p)),
               InvalidArgument);
}

ModelConfig small_model(std::size_t K = 1) {
  ModelConfig cfg;
  cfg.T = 3;
  cfg.K = K;
  cfg.N = 4;
  cfg.M = 2;
  cfg.V = 8;
  cfg.B = 4;
  cfg.hidden = 6;
  cfg.dnn_width = 10;
  cfg.dnn_depth = 2;
  cfg.pos_head_widths = {8, 3};
  return cfg;
}

ServiceArea test_area() { return {{20.0, 0.0, -20.0}, 15.0, 35.0}; }

TEST(Model, DesignSensingHasUnitModulusAndSplitsRisHead) {
  Rng rng(4);
  const ModelConfig cfg = small_model(2);
  ModelParameters params = init_parameters(cfg, test_area(), rng);
  Tape t;
  const BoundModel m = bind(t, params, nullptr);
  const Var hidden = t.constant(random_array(5, cfg.hidden, rng, 1.0));
  const SensingDesign d = design_sensing(hidden, m.net.sensing, 2);
  ASSERT_EQ(d.theta.size(), 2u);
  EXPECT_EQ(d.w.cols(), 2 * cfg.M);
  for (std::size_t b = 0; b < 5; ++b) {
    EXPECT_LE(max_modulus_error(d.w.value().row_span(b)), 1e-9);
    for (const Var& th : d.theta) EXPECT_LE(max_modulus_error(th.value().row_span(b)), 1e-9);
  }

  // Recompute the raw RIS head output and normalize each half separately.
  Tape t2;
  const BoundModel m2 = bind(t2, params, nullptr);
  Var h = t2.constant(hidden.value());
  for (const auto& layer : m2.net.sensing.hidden) h = ad::relu(ad::linear(h, layer.weight, layer.bias));
  const Array raw = ad::linear(h, m2.net.sensing.ris.weight, m2.net.sensing.ris.bias).value();
  const std::size_t chunk = 2 * cfg.N;
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t b = 0; b < 5; ++b) {
      std::vector<double> part(raw.row_span(b).begin() + k * chunk,
                               raw.row_span(b).begin() + (k + 1) * chunk);
      const NormalizeResult n = normalize_unit_modulus(part);
      const auto got = d.theta[k].value().row_span(b);
      for (std::size_t i = 0; i < chunk; ++i) EXPECT_NEAR(got[i], n.values[i], 1e-15);
    }
  }
}

TEST(Model, ZeroSensingHeadFallsBackToUnitPairs) {
  const ModelConfig cfg = small_model();
  const ModelParameters params = zero_parameters(cfg);
  Tape t;
  const BoundModel m = bind(t, params, nullptr);
  const SensingDesign d = design_sensing(t.constant(Array(1, cfg.hidden)), m.net.sensing, 1);
  const Array want_w(1, 4, {1.0, 1.0, 0.0, 0.0});
  EXPECT_EQ(d.w.value(), want_w);
  for (std::size_t i = 0; i < cfg.N; ++i) {
    EXPECT_EQ(d.theta[0].value()[i], 1.0);
    EXPECT_EQ(d.theta[0].value()[i + cfg.N], 0.0);
  }
}

TEST(Model, PositionHeadZeroAndOracle) {
  ModelConfig cfg = small_model();
  {
    const ModelParameters zero = zero_parameters(cfg);
    Tape t;
    const BoundModel m = bind(t, zero, nullptr);
    const Var p = estimate_position(t.constant(Array(2, cfg.hidden)), m.net.position, cfg);
    EXPECT_EQ(p.value(), Array(2, 3));
  }
  Rng rng(5);
  const ModelParameters params = init_parameters(cfg, test_area(), rng);
  fit_position_frame(cfg, test_area());
  const Array cell = random_array(1, cfg.hidden, rng, 1.0);
  Tape t;
  const BoundModel m = bind(t, params, nullptr);
  const Var p = estimate_position(t.constant(cell), m.net.position, cfg);
  ASSERT_EQ(p.cols(), 3u);

  std::vector<double> h = cell.data();
  const auto& layers = params.position.layers;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<double> next(layers[l].weight.rows());
    for (std::size_t o = 0; o < next.size(); ++o) {
      double z = layers[l].bias[o];
      for (std::size_t i = 0; i < h.size(); ++i) z += layers[l].weight(o, i) * h[i];
      next[o] = (l + 1 < layers.size()) ? std::max(z, 0.0) : z;
    }
    h = next;
  }
  const double want[3] = {cfg.position_offset.x + cfg.position_scale.x * h[0],
                          cfg.position_offset.y + cfg.position_scale.y * h[1],
                          cfg.position_offset.z + cfg.position_scale.z * h[2]};
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.value()[i], want[i], 1e-12);
}

TEST(Model, FitPositionFrameMapsZeroToCenter) {
  ModelConfig cfg;
  fit_position_frame(cfg, test_area());
  EXPECT_EQ(cfg.position_offset.x, 20.0);
  EXPECT_EQ(cfg.position_offset.y, 0.0);
  EXPECT_EQ(cfg.position_offset.z, -20.0);
  EXPECT_EQ(cfg.position_scale.x, 15.0);
  EXPECT_EQ(cfg.position_scale.y, 35.0);
}

struct EpisodeFixture {
  SystemLayout layout;
  ModelConfig cfg;
  PilotConfig pilot = PilotConfig::from_snr_db(25.0);
  ModelParameters params;
  Codebooks books;
  std::vector<EpisodeInput> episodes;

  explicit EpisodeFixture(std::size_t K = 1, bool zero_noise = false) {
    layout.ris_positions = {{-40.0, 40.0, 0.0}, {-40.0, -40.0, 0.0}};
    layout.ris_positions.resize(K);
    layout.M = 2;
    layout.N = 4;
    layout.C = 2;
    layout.service_area = test_area();
    cfg = small_model(K);
    cfg.feature_scale = default_feature_scale(layout, pilot);
    fit_position_frame(cfg, layout.service_area);
    Rng rng(6);
    params = init_parameters(cfg, layout.service_area, rng);
    books = init_codebooks(cfg, rng);
    episodes = make_episodes(layout, pilot, 10.0, cfg.T, 9, 0, 6, StreamTag::validation);
    if (zero_noise) {
      for (auto& e : episodes) std::fill(e.noise.begin(), e.noise.end(), Complex{});
    }
  }
};

TEST(Model, MeasureBatchMatchesMeasurePilot) {
  EpisodeFixture f(2);
  Rng rng(7);
  Tape t;
  const Array w = random_array(6, 4, rng, 1.0);
  std::vector<Var> th{t.constant(random_array(6, 8, rng, 1.0)),
                      t.constant(random_array(6, 8, rng, 1.0))};
  std::vector<Complex> noise;
  for (const auto& e : f.episodes) noise.push_back(e.noise[0]);
  const Var y = measure_batch(t.constant(w), th, compile_channels(f.episodes), f.pilot, noise);
  for (std::size_t b = 0; b < 6; ++b) {
    const CVector wc{{w(b, 0), w(b, 2)}, {w(b, 1), w(b, 3)}};
    std::vector<CVector> thetas;
    for (const Var& v : th) {
      CVector c(4);
      for (std::size_t n = 0; n < 4; ++n) c[n] = {v.value()(b, n), v.value()(b, n + 4)};
      thetas.push_back(c);
    }
    const Complex want = measure_pilot(f.episodes[b].channel, wc, thetas, f.pilot, noise[b]);
    EXPECT_NEAR(y.value()(b, 0), want.real(), 1e-12 * std::abs(want) + 1e-18);
    EXPECT_NEAR(y.value()(b, 1), want.imag(), 1e-12 * std::abs(want) + 1e-18);
  }
}

TEST(Model, EpisodeUsesCodebookColumnsWithUnitModulusEveryFrame) {
  EpisodeFixture f(2);
  for (const EpisodeInput& e : f.episodes) {
    const EpisodeTrace tr = run_episode(f.params, &f.books, f.cfg, e, {f.pilot, {}});
    ASSERT_EQ(tr.frames.size(), f.cfg.T);
    EXPECT_EQ(tr.initial_w, f.books.bs.column(tr.initial_bs_index));
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_EQ(tr.initial_theta[k], f.books.ris.column(tr.initial_ris_index[k]));
    }
    for (const FrameValues& fv : tr.frames) {
      EXPECT_EQ(fv.w_used, f.books.bs.column(fv.bs_index));
      EXPECT_LE(max_modulus_error(fv.w_pre), 1e-9);
      EXPECT_LE(max_modulus_error(fv.w_used), 1e-9);
      for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(fv.theta_used[k], f.books.ris.column(fv.ris_index[k]));
        EXPECT_LE(max_modulus_error(fv.theta_pre[k]), 1e-9);
        EXPECT_LE(max_modulus_error(fv.theta_used[k]), 1e-9);
      }
    }
  }
}

TEST(Model, SingleFrameEpisode) {
  EpisodeFixture f;
  const EpisodeTrace tr = run_episode(f.params, &f.books, f.cfg, f.episodes[0], {f.pilot, 1});
  ASSERT_EQ(tr.frames.size(), 1u);
  // The estimate is read from the only cell state.
  Tape t;
  const BoundModel m = bind(t, f.params, nullptr);
  const Var p = estimate_position(t.constant(Array(1, f.cfg.hidden, tr.frames[0].cell)),
                                  m.net.position, f.cfg);
  EXPECT_EQ(p.value()[0], tr.estimate.x);
  EXPECT_EQ(p.value()[1], tr.estimate.y);
  EXPECT_EQ(p.value()[2], tr.estimate.z);
}

TEST(Model, EpisodesAreDeterministicAndBatchInvariant) {
  EpisodeFixture f(1, true);
  Tape t;
  const BoundModel m = bind(t, f.params, &f.books);
  const BatchTrace batch = run_batch(t, m, f.cfg, f.episodes, {f.pilot, {}});
  for (std::size_t b = 0; b < f.episodes.size(); ++b) {
    const EpisodeTrace alone = run_episode(f.params, &f.books, f.cfg, f.episodes[b], {f.pilot, {}});
    const EpisodeTrace again = run_episode(f.params, &f.books, f.cfg, f.episodes[b], {f.pilot, {}});
    EXPECT_EQ(alone.estimate.x, again.estimate.x);
    const EpisodeTrace in_batch = extract_episode(batch, b, 1.0);
    EXPECT_NEAR(alone.estimate.x, in_batch.estimate.x, 1e-12);
    EXPECT_NEAR(alone.estimate.y, in_batch.estimate.y, 1e-12);
    EXPECT_NEAR(alone.estimate.z, in_batch.estimate.z, 1e-12);
    for (std::size_t i = 0; i < f.cfg.T; ++i) {
      EXPECT_EQ(alone.frames[i].bs_index, in_batch.frames[i].bs_index);
      EXPECT_EQ(alone.frames[i].ris_index, in_batch.frames[i].ris_index);
    }
  }
}

TEST(Model, CompositeLossMatchesTraceValues) {
  EpisodeFixture f(2);
  Tape t;
  const BoundModel m = bind(t, f.params, &f.books);
  const BatchTrace trace = run_batch(t, m, f.cfg, f.episodes, {f.pilot, {}});
  std::vector<Position> truth;
  for (const auto& e : f.episodes) truth.push_back(e.ue);
  LossOptions opts;
  opts.commitment_weight = 0.25;
  const LossTerms loss = composite_loss(trace, truth, opts);
  double want = 0.0;
  for (std::size_t b = 0; b < truth.size(); ++b) {
    const EpisodeTrace ep = extract_episode(trace, b, 0.25);
    want += std::pow(ep.estimate.x - truth[b].x, 2) + std::pow(ep.estimate.y - truth[b].y, 2) +
            std::pow(ep.estimate.z - truth[b].z, 2);
    for (const FrameValues& fv : ep.frames) {
      want += fv.alpha;
      for (double bt : fv.beta) want += bt;
    }
  }
  want /= static_cast<double>(truth.size());
  EXPECT_GE(loss.total.value().item(), 0.0);
  EXPECT_NEAR(loss.total.value().item(), want, 1e-10 * want);
  EXPECT_NEAR(loss.total.value().item(),
              loss.mse.value().item() + loss.alpha.value().item() + loss.beta.value().item(),
              1e-10 * want);
  truth.pop_back();
  EXPECT_THROW(composite_loss(trace, truth, opts), InvalidArgument);
}

TEST(Model, MseTermLeavesCodebooksAndAlphaLeavesLstmInputsUntouched) {
  EpisodeFixture f;
  Tape t;
  const BoundModel m = bind(t, f.params, &f.books);
  const BatchTrace trace = run_batch(t, m, f.cfg, f.episodes, {f.pilot, {}});
  std::vector<Position> truth;
  for (const auto& e : f.episodes) truth.push_back(e.ue);
  const LossTerms loss = composite_loss(trace, truth, {});
  t.backward(loss.mse);
  EXPECT_EQ(t.grad(*m.ris_codebook), Array(2 * f.cfg.N, f.cfg.V));
  EXPECT_EQ(t.grad(*m.bs_codebook), Array(2 * f.cfg.M, f.cfg.B));
  t.zero_grad();

  // The codeword part of alpha depends on the network only through SG.
  Var codeword_alpha = trace.frames[0].next.bs_q->codeword_loss;
  for (std::size_t i = 1; i < trace.frames.size(); ++i) {
    codeword_alpha = codeword_alpha + trace.frames[i].next.bs_q->codeword_loss;
  }
  t.backward(ad::sum(codeword_alpha));
  EXPECT_EQ(t.grad(m.net.lstm.r_i), Array(f.cfg.hidden, 2));
  EXPECT_EQ(t.grad(m.net.lstm.r_c), Array(f.cfg.hidden, 2));
}

TEST(Model, PerfectEstimateAndCodewordDesignsGiveZeroLoss) {
  // All-zero network: the designs fall back to (1, 0) pairs, which are
  // exactly the codewords of an all-ones codebook, and the estimate sits at
  // the zero-output point of the position frame.
  EpisodeFixture f;
  f.params = zero_parameters(f.cfg);
  f.books.ris.entries = Array(2 * f.cfg.N, f.cfg.V);
  f.books.bs.entries = Array(2 * f.cfg.M, f.cfg.B);
  for (std::size_t j = 0; j < f.cfg.V; ++j) {
    for (std::size_t i = 0; i < f.cfg.N; ++i) f.books.ris.entries(i, j) = 1.0;
  }
  for (std::size_t j = 0; j < f.cfg.B; ++j) {
    for (std::size_t i = 0; i < f.cfg.M; ++i) f.books.bs.entries(i, j) = 1.0;
  }
  Tape t;
  const BoundModel m = bind(t, f.params, &f.books);
  const BatchTrace trace = run_batch(t, m, f.cfg, std::span(f.episodes).first(1), {f.pilot, {}});
  const std::vector<Position> truth{f.cfg.position_offset};
  EXPECT_EQ(composite_loss(trace, truth, {}).total.value().item(), 0.0);
}

TEST(Model, CodebookFreeSkipsCodebooks) {
  EpisodeFixture f;
  f.cfg.codebook_free = true;
  const EpisodeTrace tr = run_episode(f.params, nullptr, f.cfg, f.episodes[0], {f.pilot, {}});
  for (const FrameValues& fv : tr.frames) {
    EXPECT_EQ(fv.w_used, fv.w_pre);
    EXPECT_EQ(fv.theta_used, fv.theta_pre);
  }
  f.cfg.codebook_free = false;
  EXPECT_THROW(run_episode(f.params, nullptr, f.cfg, f.episodes[0], {f.pilot, {}}),
               InvalidArgument);
}

}  // namespace
}  // namespace vqc
