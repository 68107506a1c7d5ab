#include "vqc/model.hpp"

#include <cmath>
#include <string>

namespace vqc {

using ad::Array;
using ad::Var;

std::vector<std::string> ModelConfig::problems() const {
  std::vector<std::string> p;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) p.push_back(std::string("model.") + name + ": must be >= 1");
  };
  positive(T, "T");
  positive(K, "K");
  positive(N, "N");
  positive(M, "M");
  positive(V, "V");
  positive(B, "B");
  positive(hidden, "hidden");
  positive(dnn_width, "dnn_width");
  positive(dnn_depth, "dnn_depth");
  if (pos_head_widths.empty() || pos_head_widths.back() != 3) {
    p.emplace_back("model.pos_head_widths: must end in 3");
  }
  for (std::size_t w : pos_head_widths) {
    if (w == 0) {
      p.emplace_back("model.pos_head_widths: entries must be >= 1");
      break;
    }
  }
  if (!(feature_scale > 0.0) || !std::isfinite(feature_scale)) {
    p.emplace_back("model.feature_scale: must be finite and > 0");
  }
  for (double v : {position_scale.x, position_scale.y, position_scale.z}) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      p.emplace_back("model.position_frame: scale entries must be finite and > 0");
      break;
    }
  }
  return p;
}

void ModelConfig::validate() const { throw_problems(problems()); }

double default_feature_scale(const SystemLayout& layout, const PilotConfig& pilot) {
  const double d = distance(layout.service_area.center, layout.bs_position);
  return 1.0 / (std::sqrt(pilot.p_u) * path_loss_amplitude(PathKind::direct, d));
}

void fit_position_frame(ModelConfig& cfg, const ServiceArea& area) {
  cfg.position_offset = area.center;
  cfg.position_scale = {area.half_x > 0.0 ? area.half_x : 1.0,
                        area.half_y > 0.0 ? area.half_y : 1.0, 1.0};
}

// ------------------------------------------------------------ parameters

namespace {

Array uniform(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Array a(rows, cols);
  for (double& v : a.data()) v = dist(rng);
  return a;
}

Affine<Array> affine_init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform(out, in, bound, rng), Array(1, out)};
}

Affine<Array> affine_zero(std::size_t in, std::size_t out) { return {Array(out, in), Array(1, out)}; }

template <typename T>
std::vector<T*> flatten(Network<T>& net) {
  std::vector<T*> out;
  visit(net, [&](const std::string&, T& v) { out.push_back(&v); });
  return out;
}

template <typename T>
std::vector<const T*> flatten(const Network<T>& net) {
  std::vector<const T*> out;
  visit(net, [&](const std::string&, const T& v) { out.push_back(&v); });
  return out;
}

}  // namespace

ModelParameters zero_parameters(const ModelConfig& cfg) {
  cfg.validate();
  ModelParameters p;
  const std::size_t H = cfg.hidden;
  for (Array* r : {&p.lstm.r_i, &p.lstm.r_f, &p.lstm.r_o, &p.lstm.r_c}) *r = Array(H, 2);
  for (Array* u : {&p.lstm.u_i, &p.lstm.u_f, &p.lstm.u_o, &p.lstm.u_c}) *u = Array(H, H);
  for (Array* b : {&p.lstm.b_i, &p.lstm.b_f, &p.lstm.b_o, &p.lstm.b_c}) *b = Array(1, H);

  std::size_t in = H;
  for (std::size_t l = 0; l < cfg.dnn_depth; ++l) {
    p.sensing.hidden.push_back(affine_zero(in, cfg.dnn_width));
    in = cfg.dnn_width;
  }
  p.sensing.ris = affine_zero(in, 2 * cfg.N * cfg.K);
  p.sensing.bs = affine_zero(in, 2 * cfg.M);

  in = H;
  for (std::size_t w : cfg.pos_head_widths) {
    p.position.layers.push_back(affine_zero(in, w));
    in = w;
  }
  return p;
}

ModelParameters init_parameters(const ModelConfig& cfg, const ServiceArea& area, Rng& rng) {
  cfg.validate();
  ModelParameters p;
  const std::size_t H = cfg.hidden;
  const double r_bound = 1.0 / std::sqrt(2.0);
  const double u_bound = 1.0 / std::sqrt(static_cast<double>(H));
  for (Array* r : {&p.lstm.r_i, &p.lstm.r_f, &p.lstm.r_o, &p.lstm.r_c}) {
    *r = uniform(H, 2, r_bound, rng);
  }
  for (Array* u : {&p.lstm.u_i, &p.lstm.u_f, &p.lstm.u_o, &p.lstm.u_c}) {
    *u = uniform(H, H, u_bound, rng);
  }
  for (Array* b : {&p.lstm.b_i, &p.lstm.b_f, &p.lstm.b_o, &p.lstm.b_c}) *b = Array(1, H);

  std::size_t in = H;
  for (std::size_t l = 0; l < cfg.dnn_depth; ++l) {
    p.sensing.hidden.push_back(affine_init(in, cfg.dnn_width, rng));
    in = cfg.dnn_width;
  }
  p.sensing.ris = affine_init(in, 2 * cfg.N * cfg.K, rng);
  p.sensing.bs = affine_init(in, 2 * cfg.M, rng);

  in = H;
  for (std::size_t w : cfg.pos_head_widths) {
    p.position.layers.push_back(affine_init(in, w, rng));
    in = w;
  }
  Array& out_bias = p.position.layers.back().bias;
  // Start every estimate at the area center.
  out_bias[0] = (area.center.x - cfg.position_offset.x) / cfg.position_scale.x;
  out_bias[1] = (area.center.y - cfg.position_offset.y) / cfg.position_scale.y;
  out_bias[2] = (area.center.z - cfg.position_offset.z) / cfg.position_scale.z;
  return p;
}

Codebooks init_codebooks(const ModelConfig& cfg, Rng& rng) {
  Codebooks cbs;
  cbs.ris = init_codebook(cfg.N, cfg.V, rng);
  cbs.bs = init_codebook(cfg.M, cfg.B, rng);
  return cbs;
}

BoundModel bind(ad::Tape& tape, const ModelParameters& params, const Codebooks* codebooks) {
  BoundModel m;
  m.net.sensing.hidden.resize(params.sensing.hidden.size());
  m.net.position.layers.resize(params.position.layers.size());
  const auto src = flatten(params);
  const auto dst = flatten(m.net);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = tape.leaf(*src[i]);
  if (codebooks != nullptr) {
    m.ris_codebook = tape.leaf(codebooks->ris.entries);
    m.bs_codebook = tape.leaf(codebooks->bs.entries);
  }
  return m;
}

// ------------------------------------------------------------ measurement

std::shared_ptr<const CompiledChannels> compile_channels(std::span<const EpisodeInput> episodes) {
  auto out = std::make_shared<CompiledChannels>();
  out->h_d.reserve(episodes.size());
  out->H.reserve(episodes.size());
  for (const EpisodeInput& e : episodes) {
    out->h_d.push_back(e.channel.h_d);
    std::vector<CMatrix> hs;
    for (std::size_t k = 0; k < e.channel.K(); ++k) {
      hs.push_back(cascade_channel(e.channel.h_r[k], e.channel.G_r[k]));
    }
    out->H.push_back(std::move(hs));
  }
  return out;
}

namespace {

CVector row_complex(const Array& a, std::size_t r) {
  const std::size_t E = a.cols() / 2;
  CVector z(E);
  for (std::size_t i = 0; i < E; ++i) z[i] = {a(r, i), a(r, i + E)};
  return z;
}

// Gradient of a real loss w.r.t. (Re u, Im u) when y = a * u and the loss
// gradient w.r.t. (Re y, Im y) is (gr, gi).
void scatter_complex(Array& g, std::size_t r, std::size_t i, std::size_t E, Complex a, double gr,
                     double gi) {
  g(r, i) += gr * a.real() + gi * a.imag();
  g(r, i + E) += -gr * a.imag() + gi * a.real();
}

}  // namespace

Var measure_batch(Var w, std::span<const Var> thetas,
                  const std::shared_ptr<const CompiledChannels>& channels,
                  const PilotConfig& pilot, std::span<const Complex> noise) {
  ad::Tape& tape = *w.tape;
  const std::size_t batch = w.value().rows();
  const std::size_t M = w.value().cols() / 2;
  const std::size_t K = thetas.size();
  if (channels->h_d.size() != batch || noise.size() != batch) {
    throw InvalidArgument("measure_batch: batch size mismatch between vectors, channels, noise");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (channels->h_d[b].size() != M || channels->H[b].size() != K) {
      throw InvalidArgument("measure_batch: channel shape does not match sensing vectors");
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (thetas[k].value().rows() != batch ||
          channels->H[b][k].rows() * 2 != thetas[k].value().cols() ||
          channels->H[b][k].cols() != M) {
        throw InvalidArgument("measure_batch: RIS configuration shape mismatch");
      }
    }
  }
  const Complex gain = std::sqrt(pilot.p_u) * pilot.pilot_symbol;

  Array out(batch, 2);
  for (std::size_t b = 0; b < batch; ++b) {
    const CVector wv = row_complex(w.value(), b);
    Complex acc{};
    for (std::size_t m = 0; m < M; ++m) acc += wv[m] * channels->h_d[b][m];
    for (std::size_t k = 0; k < K; ++k) {
      const CMatrix& H = channels->H[b][k];
      const CVector th = row_complex(thetas[k].value(), b);
      for (std::size_t n = 0; n < H.rows(); ++n) {
        Complex z{};
        for (std::size_t m = 0; m < M; ++m) z += H(n, m) * wv[m];
        acc += th[n] * z;
      }
    }
    const Complex y = gain * acc + noise[b];
    // Downstream relu and normalization would silently absorb a NaN here.
    if (!std::isfinite(y.real()) || !std::isfinite(y.imag())) {
      throw NumericError("measure_batch: non-finite measurement in batch row " +
                         std::to_string(b));
    }
    out(b, 0) = y.real();
    out(b, 1) = y.imag();
  }

  std::vector<Var> parents{w};
  parents.insert(parents.end(), thetas.begin(), thetas.end());
  std::vector<Var> ths(thetas.begin(), thetas.end());
  return tape.record(
      std::move(out), parents, [w, ths, channels, gain, M](ad::Tape& tp, const Array& g) {
        const std::size_t batch = g.rows();
        Array gw(batch, 2 * M);
        std::vector<Array> gth;
        for (const Var& t : ths) gth.emplace_back(batch, t.value().cols());
        for (std::size_t b = 0; b < batch; ++b) {
          const double gr = g(b, 0);
          const double gi = g(b, 1);
          const CVector wv = row_complex(tp.value(w), b);
          CVector eff = channels->h_d[b];  // h_d + sum_k H_k^T theta_k
          for (std::size_t k = 0; k < ths.size(); ++k) {
            const CMatrix& H = channels->H[b][k];
            const CVector th = row_complex(tp.value(ths[k]), b);
            const std::size_t N = H.rows();
            for (std::size_t n = 0; n < N; ++n) {
              Complex z{};
              for (std::size_t m = 0; m < M; ++m) {
                z += H(n, m) * wv[m];
                eff[m] += H(n, m) * th[n];
              }
              scatter_complex(gth[k], b, n, N, gain * z, gr, gi);
            }
          }
          for (std::size_t m = 0; m < M; ++m) scatter_complex(gw, b, m, M, gain * eff[m], gr, gi);
        }
        tp.accumulate(w, gw);
        for (std::size_t k = 0; k < ths.size(); ++k) tp.accumulate(ths[k], gth[k]);
      });
}

// ------------------------------------------------------------ network pieces

LstmState lstm_step(Var features, const LstmState& prev, const LstmWeights<Var>& w) {
  const std::size_t H = w.u_i.value().rows();
  if (features.value().cols() != w.r_i.value().cols() || prev.hidden.value().cols() != H ||
      prev.cell.value().cols() != H || prev.cell.value().rows() != features.value().rows()) {
    throw InvalidArgument("lstm_step: shape mismatch");
  }
  auto gate = [&](Var r, Var u, Var b) {
    return ad::linear(features, r, b) + ad::linear(prev.hidden, u);
  };
  const Var i = ad::sigmoid(gate(w.r_i, w.u_i, w.b_i));
  const Var f = ad::sigmoid(gate(w.r_f, w.u_f, w.b_f));
  const Var o = ad::sigmoid(gate(w.r_o, w.u_o, w.b_o));
  const Var g = ad::tanh(gate(w.r_c, w.u_c, w.b_c));
  const Var c = f * prev.cell + i * g;
  const Var s = o * ad::tanh(c);
  return {c, s};
}

SensingDesign design_sensing(Var hidden, const SensingHead<Var>& head, std::size_t K) {
  Var h = hidden;
  for (const Affine<Var>& layer : head.hidden) h = ad::relu(ad::linear(h, layer.weight, layer.bias));
  const Var ris_raw = ad::linear(h, head.ris.weight, head.ris.bias);
  const Var bs_raw = ad::linear(h, head.bs.weight, head.bs.bias);
  const std::size_t width = ris_raw.value().cols();
  if (K == 0 || width % (2 * K) != 0) {
    throw InvalidArgument("design_sensing: RIS head width not divisible by 2K");
  }
  const std::size_t chunk = width / K;
  SensingDesign d;
  d.w = ad::normalize_pairs(bs_raw);
  for (std::size_t k = 0; k < K; ++k) {
    d.theta.push_back(ad::normalize_pairs(ad::slice(ris_raw, k * chunk, (k + 1) * chunk, 1)));
  }
  return d;
}

Var estimate_position(Var cell, const PositionHead<Var>& head, const ModelConfig& cfg) {
  Var h = cell;
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    h = ad::linear(h, head.layers[l].weight, head.layers[l].bias);
    if (l + 1 < head.layers.size()) h = ad::relu(h);
  }
  return to_meters(h, cfg);
}

Var to_meters(Var h, const ModelConfig& cfg) {
  const Position& o = cfg.position_offset;
  const Position& s = cfg.position_scale;
  if (s.x == 1.0 && s.y == 1.0 && s.z == 1.0 && o.x == 0.0 && o.y == 0.0 && o.z == 0.0) return h;
  ad::Tape& tape = *h.tape;
  Array scale(h.rows(), 3);
  for (std::size_t b = 0; b < h.rows(); ++b) {
    scale(b, 0) = s.x;
    scale(b, 1) = s.y;
    scale(b, 2) = s.z;
  }
  h = h * tape.constant(std::move(scale));
  return ad::add_row(h, tape.constant(Array::row({o.x, o.y, o.z})));
}

// ------------------------------------------------------------ episode loop

namespace {

FrameSelection select(const SensingDesign& pre, const BoundModel& model, bool codebook_free) {
  FrameSelection sel;
  sel.pre = pre;
  if (codebook_free) {
    sel.used = pre;
    return sel;
  }
  if (!model.ris_codebook || !model.bs_codebook) {
    throw InvalidArgument("run_batch: codebooks are required unless running codebook-free");
  }
  Quantized bq = straight_through_select(pre.w, *model.bs_codebook);
  sel.used.w = bq.selected;
  sel.bs_index = bq.index;
  sel.bs_q = std::move(bq);
  for (const Var& th : pre.theta) {
    Quantized rq = straight_through_select(th, *model.ris_codebook);
    sel.used.theta.push_back(rq.selected);
    sel.ris_index.push_back(rq.index);
    sel.ris_q.push_back(std::move(rq));
  }
  return sel;
}

}  // namespace

BatchTrace run_batch(ad::Tape& tape, const BoundModel& model, const ModelConfig& cfg,
                     std::span<const EpisodeInput> episodes, const RunOptions& opts) {
  const std::size_t batch = episodes.size();
  if (batch == 0) throw InvalidArgument("run_batch: empty batch");
  const std::size_t T = opts.frames.value_or(cfg.T);
  if (T == 0) throw InvalidArgument("run_batch: T must be >= 1");
  for (const EpisodeInput& e : episodes) {
    if (e.noise.size() < T) throw InvalidArgument("run_batch: noise sequence shorter than T");
    if (e.channel.K() != cfg.K) throw InvalidArgument("run_batch: channel K differs from model K");
  }
  const auto channels = compile_channels(episodes);

  BatchTrace trace;
  trace.batch = batch;
  LstmState state{tape.constant(Array(batch, cfg.hidden)), tape.constant(Array(batch, cfg.hidden))};
  trace.initial = select(design_sensing(state.hidden, model.net.sensing, cfg.K), model,
                         cfg.codebook_free);
  SensingDesign current = trace.initial.used;

  std::vector<Complex> noise(batch);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < batch; ++b) noise[b] = episodes[b].noise[t];
    FrameRecord rec;
    rec.measurement = measure_batch(current.w, current.theta, channels, opts.pilot, noise);
    rec.features = ad::scale(rec.measurement, cfg.feature_scale);
    rec.state = lstm_step(rec.features, state, model.net.lstm);
    state = rec.state;
    rec.next = select(design_sensing(state.hidden, model.net.sensing, cfg.K), model,
                      cfg.codebook_free);
    current = rec.next.used;
    trace.frames.push_back(std::move(rec));
  }
  trace.estimate = estimate_position(state.cell, model.net.position, cfg);
  return trace;
}

LossTerms composite_loss(const BatchTrace& trace, std::span<const Position> truth,
                         const LossOptions& opts) {
  if (truth.size() != trace.batch) {
    throw InvalidArgument("composite_loss: " + std::to_string(truth.size()) +
                          " positions for a batch of " + std::to_string(trace.batch));
  }
  ad::Tape& tape = *trace.estimate.tape;
  Array p(trace.batch, 3);
  for (std::size_t b = 0; b < trace.batch; ++b) {
    p(b, 0) = truth[b].x;
    p(b, 1) = truth[b].y;
    p(b, 2) = truth[b].z;
  }
  const Var mse = ad::sum(ad::square(trace.estimate - tape.constant(std::move(p))), 1);

  auto vq_term = [&](const Quantized& q) {
    Var commit = q.commitment_loss;
    if (opts.mutate_commitment_sign) commit = ad::scale_grad(commit, -1.0);
    if (opts.commitment_weight != 1.0) commit = ad::scale(commit, opts.commitment_weight);
    return q.codeword_loss + commit;
  };

  std::optional<Var> alpha;
  std::optional<Var> beta;
  auto accumulate = [](std::optional<Var>& acc, Var term) { acc = acc ? *acc + term : term; };
  for (const FrameRecord& f : trace.frames) {
    if (f.next.bs_q) accumulate(alpha, vq_term(*f.next.bs_q));
    for (const Quantized& q : f.next.ris_q) accumulate(beta, vq_term(q));
  }
  const Var zeros = tape.constant(Array(trace.batch, 1));
  const Var a = alpha.value_or(zeros);
  const Var bt = beta.value_or(zeros);

  const double norm = opts.normalizer.value_or(static_cast<double>(trace.batch));
  LossTerms out;
  out.mse = ad::scale(ad::sum(mse), 1.0 / norm);
  out.alpha = ad::scale(ad::sum(a), 1.0 / norm);
  out.beta = ad::scale(ad::sum(bt), 1.0 / norm);
  out.total = ad::scale(ad::sum(mse + a + bt), 1.0 / norm);
  return out;
}

// ------------------------------------------------------------ value traces

namespace {

std::vector<double> row_of(Var v, std::size_t b) {
  const auto r = v.value().row_span(b);
  return {r.begin(), r.end()};
}

std::vector<std::vector<double>> rows_of(const std::vector<Var>& vs, std::size_t b) {
  std::vector<std::vector<double>> out;
  for (const Var& v : vs) out.push_back(row_of(v, b));
  return out;
}

std::vector<std::size_t> ris_column(const FrameSelection& sel, std::size_t b) {
  std::vector<std::size_t> out;
  for (const auto& idx : sel.ris_index) out.push_back(idx[b]);
  return out;
}

}  // namespace

EpisodeTrace extract_episode(const BatchTrace& trace, std::size_t b, double commitment_weight) {
  if (b >= trace.batch) throw InvalidArgument("extract_episode: index out of range");
  EpisodeTrace ep;
  ep.initial_w = row_of(trace.initial.used.w, b);
  ep.initial_theta = rows_of(trace.initial.used.theta, b);
  if (!trace.initial.bs_index.empty()) ep.initial_bs_index = trace.initial.bs_index[b];
  ep.initial_ris_index = ris_column(trace.initial, b);
  for (const FrameRecord& f : trace.frames) {
    FrameValues fv;
    const auto y = f.measurement.value().row_span(b);
    fv.measurement = {y[0], y[1]};
    fv.features = row_of(f.features, b);
    fv.cell = row_of(f.state.cell, b);
    fv.hidden = row_of(f.state.hidden, b);
    fv.w_pre = row_of(f.next.pre.w, b);
    fv.theta_pre = rows_of(f.next.pre.theta, b);
    fv.w_used = row_of(f.next.used.w, b);
    fv.theta_used = rows_of(f.next.used.theta, b);
    if (!f.next.bs_index.empty()) fv.bs_index = f.next.bs_index[b];
    fv.ris_index = ris_column(f.next, b);
    if (f.next.bs_q) {
      fv.alpha = f.next.bs_q->codeword_loss.value()(b, 0) +
                 commitment_weight * f.next.bs_q->commitment_loss.value()(b, 0);
    }
    for (const Quantized& q : f.next.ris_q) {
      fv.beta.push_back(q.codeword_loss.value()(b, 0) +
                        commitment_weight * q.commitment_loss.value()(b, 0));
    }
    ep.frames.push_back(std::move(fv));
  }
  const auto e = trace.estimate.value().row_span(b);
  ep.estimate = {e[0], e[1], e[2]};
  return ep;
}

EpisodeTrace run_episode(const ModelParameters& params, const Codebooks* codebooks,
                         const ModelConfig& cfg, const EpisodeInput& episode,
                         const RunOptions& opts) {
  ad::Tape tape;
  const BoundModel model = bind(tape, params, cfg.codebook_free ? nullptr : codebooks);
  const BatchTrace trace = run_batch(tape, model, cfg, std::span(&episode, 1), opts);
  return extract_episode(trace, 0, 1.0);
}

}  // namespace vqc
