#include "vqc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vqc {

using ad::Array;
using ad::Var;

namespace {

CVector to_complex(std::span<const double> pairs) {
  const std::size_t E = pairs.size() / 2;
  CVector v(E);
  for (std::size_t i = 0; i < E; ++i) v[i] = {pairs[i], pairs[i + E]};
  return v;
}

std::size_t max_frames(const ModelConfig& model, const EvalOptions& opts) {
  std::size_t t = model.T;
  for (std::size_t s : opts.sweep) t = std::max(t, s);
  return t;
}

constexpr std::uint64_t kDrawTagBase = 16;
constexpr std::uint64_t kBaselineShuffleTag = 10;

}  // namespace

std::vector<EpisodeInput> evaluation_episodes(const SystemLayout& layout, const PilotConfig& pilot,
                                              double epsilon, std::size_t frames,
                                              const EvalOptions& opts) {
  return make_episodes(layout, pilot, epsilon, frames, opts.seed, 0, opts.episodes,
                       StreamTag::evaluation);
}

double constant_predictor_rmse(std::span<const EpisodeInput> episodes, const Position& c) {
  if (episodes.empty()) throw InvalidArgument("constant_predictor_rmse: no episodes");
  double sq = 0.0;
  for (const EpisodeInput& e : episodes) {
    const double dx = e.ue.x - c.x;
    const double dy = e.ue.y - c.y;
    const double dz = e.ue.z - c.z;
    sq += dx * dx + dy * dy + dz * dz;
  }
  return std::sqrt(sq / static_cast<double>(episodes.size()));
}

EvalReport evaluate_rmse(const ModelParameters& params, const Codebooks* codebooks,
                         const ModelConfig& model, const SystemLayout& layout,
                         const PilotConfig& pilot, double epsilon, const EvalOptions& opts) {
  if (opts.episodes == 0) throw InvalidArgument("eval: episodes must be >= 1");
  if (!model.codebook_free && codebooks == nullptr) {
    throw InvalidArgument("eval: codebooks are required unless the model is codebook-free");
  }
  const auto episodes = evaluation_episodes(layout, pilot, epsilon, max_frames(model, opts), opts);
  EvalReport r;
  r.scheme = model.codebook_free ? "codebook-free" : "vqc";
  r.episodes = episodes.size();
  r.seed = opts.seed;
  r.rmse = model_rmse(params, codebooks, model, pilot, episodes, model.T, opts.batch_size);
  r.per_t.emplace_back(model.T, r.rmse);
  for (std::size_t t : opts.sweep) {
    if (t == 0) throw InvalidArgument("eval: sweep frame counts must be >= 1");
    if (t == model.T) continue;
    r.per_t.emplace_back(t, model_rmse(params, codebooks, model, pilot, episodes, t,
                                       opts.batch_size));
  }
  std::sort(r.per_t.begin(), r.per_t.end());
  return r;
}

EvalReport codebook_free_eval(const ModelParameters& params, const ModelConfig& model,
                              const SystemLayout& layout, const PilotConfig& pilot,
                              double epsilon, const EvalOptions& opts) {
  if (!model.codebook_free) {
    throw InvalidArgument("codebook_free_eval: model was not configured codebook-free");
  }
  return evaluate_rmse(params, nullptr, model, layout, pilot, epsilon, opts);
}

// ------------------------------------------------------------ baselines

BaselineState init_baseline(const BaselineConfig& base, const ModelConfig& model,
                            const SystemLayout& layout, std::uint64_t seed) {
  model.validate();
  if (base.widths.empty() || base.widths.back() != 3) {
    throw InvalidArgument("baseline: estimator widths must end in 3");
  }
  Rng rng = make_stream(seed, 1, static_cast<std::uint64_t>(StreamTag::init));
  BaselineState s;
  std::size_t in = 2 * model.T;
  for (std::size_t w : base.widths) {
    if (w == 0) throw InvalidArgument("baseline: estimator widths must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Affine<Array> a{Array(w, in), Array(1, w)};
    for (double& v : a.weight.data()) v = dist(rng);
    s.params.layers.push_back(std::move(a));
    in = w;
  }
  const ServiceArea& area = layout.service_area;
  Array& out_bias = s.params.layers.back().bias;
  out_bias[0] = (area.center.x - model.position_offset.x) / model.position_scale.x;
  out_bias[1] = (area.center.y - model.position_offset.y) / model.position_scale.y;
  out_bias[2] = (area.center.z - model.position_offset.z) / model.position_scale.z;

  if (base.mode == SensingMode::fixed) {
    for (std::size_t t = 0; t < model.T; ++t) {
      s.params.w.push_back(init_codebook(model.M, 1, rng).entries);
      std::vector<Array> th;
      for (std::size_t k = 0; k < model.K; ++k) th.push_back(init_codebook(model.N, 1, rng).entries);
      s.params.theta.push_back(std::move(th));
    }
    // Columns are stored as rows here.
    for (Array& a : s.params.w) a = Array(1, a.size(), a.data());
    for (auto& th : s.params.theta) {
      for (Array& a : th) a = Array(1, a.size(), a.data());
    }
  } else {
    s.codebooks = init_codebooks(model, rng);
  }
  return s;
}

RandomDraw random_draw(const ModelConfig& model, std::uint64_t seed, std::uint64_t index,
                       StreamTag tag) {
  Rng rng = make_stream(seed, index, kDrawTagBase + static_cast<std::uint64_t>(tag));
  std::uniform_int_distribution<std::size_t> bs(0, model.B - 1);
  std::uniform_int_distribution<std::size_t> ris(0, model.V - 1);
  RandomDraw d;
  for (std::size_t t = 0; t < model.T; ++t) {
    d.bs.push_back(bs(rng));
    std::vector<std::size_t> r;
    for (std::size_t k = 0; k < model.K; ++k) r.push_back(ris(rng));
    d.ris.push_back(std::move(r));
  }
  return d;
}

BaselineSensing baseline_sensing(const BaselineState& state, const BaselineConfig& base,
                                 const ModelConfig& model, const RandomDraw* draw) {
  BaselineSensing s;
  for (std::size_t t = 0; t < model.T; ++t) {
    if (base.mode == SensingMode::fixed) {
      s.w.push_back(to_complex(normalize_unit_modulus(state.params.w[t].data()).values));
      std::vector<CVector> th;
      for (const Array& a : state.params.theta[t]) {
        th.push_back(to_complex(normalize_unit_modulus(a.data()).values));
      }
      s.theta.push_back(std::move(th));
    } else {
      if (draw == nullptr) throw InvalidArgument("baseline_sensing: random mode needs a draw");
      s.w.push_back(state.codebooks.bs.codeword(draw->bs[t]));
      std::vector<CVector> th;
      for (std::size_t j : draw->ris[t]) th.push_back(state.codebooks.ris.codeword(j));
      s.theta.push_back(std::move(th));
    }
  }
  return s;
}

namespace {

struct BoundBaseline {
  std::vector<Affine<Var>> layers;
  std::vector<Var> w;
  std::vector<std::vector<Var>> theta;
};

BoundBaseline bind_baseline(ad::Tape& tape, const BaselineParams& p) {
  BoundBaseline b;
  for (const auto& l : p.layers) b.layers.push_back({tape.leaf(l.weight), tape.leaf(l.bias)});
  for (const Array& a : p.w) b.w.push_back(tape.leaf(a));
  for (const auto& th : p.theta) {
    std::vector<Var> v;
    for (const Array& a : th) v.push_back(tape.leaf(a));
    b.theta.push_back(std::move(v));
  }
  return b;
}

template <typename F>
void visit_baseline(BaselineParams& p, F&& f) {
  for (auto& l : p.layers) {
    f(l.weight);
    f(l.bias);
  }
  for (Array& a : p.w) f(a);
  for (auto& th : p.theta) {
    for (Array& a : th) f(a);
  }
}

template <typename F>
void visit_bound(BoundBaseline& p, F&& f) {
  for (auto& l : p.layers) {
    f(l.weight);
    f(l.bias);
  }
  for (Var& a : p.w) f(a);
  for (auto& th : p.theta) {
    for (Var& a : th) f(a);
  }
}

// Same row repeated for every episode in the batch.
Var broadcast_rows(ad::Tape& tape, Var row, std::size_t batch) {
  return ad::matmul(tape.constant(Array(batch, 1, 1.0)), row);
}

Var codeword_rows(ad::Tape& tape, const Codebook& cb, std::span<const std::size_t> index) {
  const std::size_t D = cb.entries.rows();
  Array a(index.size(), D);
  for (std::size_t b = 0; b < index.size(); ++b) {
    for (std::size_t i = 0; i < D; ++i) a(b, i) = cb.entries(i, index[b]);
  }
  return tape.constant(std::move(a));
}

Var baseline_forward(ad::Tape& tape, const BoundBaseline& net, const BaselineState& state,
                     const BaselineConfig& base, const ModelConfig& model,
                     const PilotConfig& pilot, std::span<const EpisodeInput> episodes,
                     std::span<const RandomDraw> draws) {
  const std::size_t B = episodes.size();
  if (base.mode == SensingMode::random && draws.size() != B) {
    throw InvalidArgument("baseline: one random draw per episode is required");
  }
  const auto channels = compile_channels(episodes);
  std::vector<Var> features;
  for (std::size_t t = 0; t < model.T; ++t) {
    Var w;
    std::vector<Var> thetas;
    if (base.mode == SensingMode::fixed) {
      w = broadcast_rows(tape, ad::normalize_pairs(net.w[t]), B);
      for (const Var& th : net.theta[t]) {
        thetas.push_back(broadcast_rows(tape, ad::normalize_pairs(th), B));
      }
    } else {
      std::vector<std::size_t> idx(B);
      for (std::size_t b = 0; b < B; ++b) idx[b] = draws[b].bs[t];
      w = codeword_rows(tape, state.codebooks.bs, idx);
      for (std::size_t k = 0; k < model.K; ++k) {
        for (std::size_t b = 0; b < B; ++b) idx[b] = draws[b].ris[t][k];
        thetas.push_back(codeword_rows(tape, state.codebooks.ris, idx));
      }
    }
    std::vector<Complex> noise(B);
    for (std::size_t b = 0; b < B; ++b) {
      if (episodes[b].noise.size() <= t) throw InvalidArgument("baseline: too few noise samples");
      noise[b] = episodes[b].noise[t];
    }
    const Var y = measure_batch(w, thetas, channels, pilot, noise);
    features.push_back(ad::scale(y, model.feature_scale));
  }
  Var h = ad::concat(features, 1);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    h = ad::linear(h, net.layers[l].weight, net.layers[l].bias);
    if (l + 1 < net.layers.size()) h = ad::relu(h);
  }
  return to_meters(h, model);
}

Array truth_array(std::span<const EpisodeInput> episodes) {
  Array p(episodes.size(), 3);
  for (std::size_t b = 0; b < episodes.size(); ++b) {
    p(b, 0) = episodes[b].ue.x;
    p(b, 1) = episodes[b].ue.y;
    p(b, 2) = episodes[b].ue.z;
  }
  return p;
}

}  // namespace

StepMetrics baseline_step(BaselineState& state, const BaselineConfig& base,
                          std::span<const EpisodeInput> batch, std::span<const RandomDraw> draws,
                          const ModelConfig& model, const TrainConfig& train,
                          const PilotConfig& pilot) {
  if (batch.empty()) throw InvalidArgument("baseline_step: empty batch");
  ad::Tape tape;
  BoundBaseline net = bind_baseline(tape, state.params);
  const Var est = baseline_forward(tape, net, state, base, model, pilot, batch, draws);
  const Var err = est - tape.constant(truth_array(batch));
  const Var loss = ad::mean(ad::sum(ad::square(err), 1));
  tape.backward(loss);
  const double value = loss.value().item();
  if (!std::isfinite(value)) {
    throw NumericError("non-finite baseline loss at step " + std::to_string(state.step + 1));
  }

  std::vector<Array*> ps;
  visit_baseline(state.params, [&](Array& a) { ps.push_back(&a); });
  std::vector<Array> gs;
  visit_bound(net, [&](Var& v) { gs.push_back(tape.grad(v)); });
  const AdamConfig adam{train.learning_rate_at(state.step), train.adam_beta1, train.adam_beta2,
                        train.adam_eps};
  adam_update(ps, gs, state.adam, adam);
  if (base.mode == SensingMode::fixed) {
    auto project = [](Array& a) { a.data() = normalize_unit_modulus(a.data()).values; };
    for (Array& a : state.params.w) project(a);
    for (auto& th : state.params.theta) {
      for (Array& a : th) project(a);
    }
  }
  ++state.step;
  state.episodes_seen += batch.size();
  return {state.step, state.episodes_seen, value, value, 0.0, 0.0};
}

double baseline_rmse(const BaselineState& state, const BaselineConfig& base,
                     const ModelConfig& model, const PilotConfig& pilot,
                     std::span<const EpisodeInput> episodes, std::span<const RandomDraw> draws) {
  if (episodes.empty()) throw InvalidArgument("baseline_rmse: no episodes");
  constexpr std::size_t kChunk = 256;
  double sq = 0.0;
  for (std::size_t begin = 0; begin < episodes.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, episodes.size() - begin);
    const auto chunk = episodes.subspan(begin, n);
    const auto dchunk = draws.empty() ? draws : draws.subspan(begin, n);
    ad::Tape tape;
    const BoundBaseline net = bind_baseline(tape, state.params);
    const Array& est =
        baseline_forward(tape, net, state, base, model, pilot, chunk, dchunk).value();
    for (std::size_t b = 0; b < n; ++b) {
      const double dx = est(b, 0) - chunk[b].ue.x;
      const double dy = est(b, 1) - chunk[b].ue.y;
      const double dz = est(b, 2) - chunk[b].ue.z;
      sq += dx * dx + dy * dy + dz * dz;
    }
  }
  return std::sqrt(sq / static_cast<double>(episodes.size()));
}

BaselineResult run_baseline(const BaselineConfig& base, const TrainConfig& train,
                            const SystemLayout& layout, const ModelConfig& model,
                            const EvalOptions& eval,
                            const std::function<void(const StepMetrics&)>& on_step) {
  train.validate();
  layout.validate();
  const PilotConfig pilot = pilot_for(train);
  BaselineResult result;
  result.state = init_baseline(base, model, layout, train.seed);
  BaselineState& state = result.state;

  auto draws_for = [&](std::uint64_t seed, std::uint64_t first, std::size_t count, StreamTag tag) {
    std::vector<RandomDraw> d;
    if (base.mode == SensingMode::random) {
      for (std::size_t i = 0; i < count; ++i) d.push_back(random_draw(model, seed, first + i, tag));
    }
    return d;
  };

  // Same episode budget and pool protocol as train_loop.
  std::vector<EpisodeInput> pool;
  std::vector<RandomDraw> pool_draws;
  if (train.dataset_size > 0) {
    pool = make_episodes(layout, pilot, train.rician_factor, model.T, train.seed, 0,
                         train.dataset_size, StreamTag::train);
    pool_draws = draws_for(train.seed, 0, pool.size(), StreamTag::train);
  }
  const std::size_t steps = train.total_steps();
  const std::size_t steps_per_epoch = (train.dataset_size + train.batch_size - 1) / train.batch_size;
  std::vector<std::size_t> order(pool.size());
  std::uint64_t fresh_index = 0;
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<EpisodeInput> batch;
    std::vector<RandomDraw> draws;
    if (!pool.empty()) {
      const std::size_t in_epoch = step % steps_per_epoch;
      if (in_epoch == 0) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_stream(train.seed, step / steps_per_epoch, kBaselineShuffleTag);
        std::shuffle(order.begin(), order.end(), rng);
      }
      const std::size_t begin = in_epoch * train.batch_size;
      const std::size_t end = std::min(pool.size(), begin + train.batch_size);
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(pool[order[i]]);
        if (!pool_draws.empty()) draws.push_back(pool_draws[order[i]]);
      }
    } else {
      const std::size_t count =
          std::min<std::size_t>(train.batch_size, train.episodes_total - fresh_index);
      batch = make_episodes(layout, pilot, train.rician_factor, model.T, train.seed, fresh_index,
                            count, StreamTag::train);
      draws = draws_for(train.seed, fresh_index, count, StreamTag::train);
      fresh_index += count;
    }
    const StepMetrics m = baseline_step(state, base, batch, draws, model, train, pilot);
    if (on_step) on_step(m);
  }

  const auto episodes = evaluation_episodes(layout, pilot, train.rician_factor, model.T, eval);
  const auto draws = draws_for(eval.seed, 0, episodes.size(), StreamTag::evaluation);
  EvalReport& r = result.report;
  r.scheme = base.mode == SensingMode::fixed ? "fixed" : "random";
  r.episodes = episodes.size();
  r.seed = eval.seed;
  r.rmse = baseline_rmse(state, base, model, pilot, episodes, draws);
  r.per_t.emplace_back(model.T, r.rmse);
  return result;
}

// ------------------------------------------------------------ radio maps

BaselineSensing measured_vectors(const EpisodeTrace& trace, const ModelConfig& model) {
  BaselineSensing s;
  s.w.push_back(to_complex(trace.initial_w));
  std::vector<CVector> th0;
  for (const auto& t : trace.initial_theta) th0.push_back(to_complex(t));
  s.theta.push_back(std::move(th0));
  for (std::size_t f = 0; f + 1 < trace.frames.size() && f + 1 < model.T; ++f) {
    s.w.push_back(to_complex(trace.frames[f].w_used));
    std::vector<CVector> th;
    for (const auto& t : trace.frames[f].theta_used) th.push_back(to_complex(t));
    s.theta.push_back(std::move(th));
  }
  return s;
}

RadioMapSet emit_radio_maps(const ModelParameters& params, const Codebooks* codebooks,
                            const ModelConfig& model, const SystemLayout& layout,
                            const PilotConfig& pilot, const Position& ue, double resolution) {
  if (!(resolution > 0.0)) throw InvalidArgument("radiomap: resolution must be > 0");
  EpisodeInput episode;
  episode.ue = ue;
  episode.channel = los_channel(layout, ue);
  episode.noise.assign(model.T, Complex{});
  RadioMapSet set;
  set.ue = ue;
  set.trace = run_episode(params, codebooks, model, episode, RunOptions{pilot, {}});
  const BaselineSensing used = measured_vectors(set.trace, model);
  const GridSpec grid = GridSpec::covering(layout.service_area, resolution);
  const std::size_t K = layout.K();
  for (std::size_t t = 0; t < used.w.size(); ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      PathSelection paths;
      paths.direct = false;
      paths.ris.assign(K, false);
      paths.ris[k] = true;
      set.maps.push_back({t, "ris" + std::to_string(k + 1),
                          rss_map(layout, used.w[t], used.theta[t], grid, pilot, paths)});
    }
    if (K >= 2) {
      PathSelection paths;
      set.maps.push_back({t, "all", rss_map(layout, used.w[t], used.theta[t], grid, pilot, paths)});
    }
  }
  return set;
}

std::pair<std::size_t, std::size_t> cell_of(const GridSpec& grid, const Position& p) {
  if (grid.nx == 0 || grid.ny == 0) throw InvalidArgument("cell_of: empty grid");
  auto index = [&](double v, double lo, std::size_t n) {
    const double f = std::floor((v - lo) / grid.resolution);
    if (!(f > 0.0)) return std::size_t{0};
    return std::min(static_cast<std::size_t>(f), n - 1);
  };
  return {index(p.x, grid.x_min, grid.nx), index(p.y, grid.y_min, grid.ny)};
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median: empty input");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

}  // namespace vqc
