#include "vqc/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace vqc {

using ad::Array;
using ad::Var;

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> p;
  if (batch_size == 0) p.emplace_back("train.batch_size: must be >= 1");
  if (epochs == 0) p.emplace_back("train.epochs: must be >= 1");
  if (dataset_size == 0 && episodes_total == 0) {
    p.emplace_back("train.episodes_total: must be >= 1 when dataset_size is 0");
  }
  if (!(learning_rate >= 0.0)) p.emplace_back("train.learning_rate: must be >= 0");
  if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0)) {
    p.emplace_back("train.lr_final_fraction: must lie in [0, 1]");
  }
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) p.emplace_back("train.adam_beta1: must lie in (0, 1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) p.emplace_back("train.adam_beta2: must lie in (0, 1)");
  if (!(adam_eps > 0.0)) p.emplace_back("train.adam_eps: must be > 0");
  if (!(rician_factor >= 0.0)) p.emplace_back("train.rician_factor: must be >= 0");
  if (!(commitment_weight >= 0.0)) p.emplace_back("train.commitment_weight: must be >= 0");
  if (threads == 0) p.emplace_back("train.threads: must be >= 1");
  return p;
}

void TrainConfig::validate() const { throw_problems(problems()); }

double TrainConfig::learning_rate_at(std::size_t completed_steps) const {
  if (lr_schedule == LrSchedule::constant) return learning_rate;
  const double total = static_cast<double>(std::max<std::size_t>(1, total_steps()));
  const double progress = std::min(1.0, static_cast<double>(completed_steps) / total);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return learning_rate * (lr_final_fraction + (1.0 - lr_final_fraction) * cosine);
}

std::size_t TrainConfig::total_steps() const {
  if (dataset_size > 0) return epochs * ((dataset_size + batch_size - 1) / batch_size);
  return (episodes_total + batch_size - 1) / batch_size;
}

PilotConfig pilot_for(const TrainConfig& train) {
  return PilotConfig::from_snr_db(train.snr_db, train.noise_dbm);
}

// ------------------------------------------------------------ Adam

void adam_update(std::span<Array* const> params, std::span<const Array> grads, AdamState& state,
                 const AdamConfig& cfg, const std::vector<std::vector<bool>>* column_mask) {
  if (params.size() != grads.size()) throw InvalidArgument("adam: parameter/gradient count");
  if (state.m.empty()) {
    for (const Array* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m.size() != params.size()) throw InvalidArgument("adam: state does not match params");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array& p = *params[i];
    const Array& g = grads[i];
    if (!g.same_shape(p)) throw InvalidArgument("adam: gradient shape mismatch");
    Array& m = state.m[i];
    Array& v = state.v[i];
    const std::vector<bool>* mask = column_mask != nullptr ? &(*column_mask)[i] : nullptr;
    for (std::size_t r = 0; r < p.rows(); ++r) {
      for (std::size_t c = 0; c < p.cols(); ++c) {
        if (mask != nullptr && !(*mask)[c]) continue;
        const double gv = g(r, c);
        m(r, c) = cfg.beta1 * m(r, c) + (1.0 - cfg.beta1) * gv;
        v(r, c) = cfg.beta2 * v(r, c) + (1.0 - cfg.beta2) * gv * gv;
        const double mh = m(r, c) / c1;
        const double vh = v(r, c) / c2;
        p(r, c) -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
      }
    }
  }
}

// ------------------------------------------------------------ episodes

Position sample_ue(const SystemLayout& layout, Rng& rng) {
  const ServiceArea& a = layout.service_area;
  std::uniform_real_distribution<double> ux(a.x_min(), a.x_max());
  std::uniform_real_distribution<double> uy(a.y_min(), a.y_max());
  const double x = ux(rng);
  const double y = uy(rng);
  return {x, y, a.center.z};
}

EpisodeInput make_episode(const SystemLayout& layout, const PilotConfig& pilot, double epsilon,
                          std::size_t frames, std::uint64_t seed, std::uint64_t index,
                          StreamTag tag) {
  Rng rng = make_stream(seed, index, static_cast<std::uint64_t>(tag));
  EpisodeInput e;
  e.ue = sample_ue(layout, rng);
  e.channel = sample_channel(layout, e.ue, epsilon, rng);
  e.noise.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) e.noise.push_back(complex_normal(rng, pilot.sigma2));
  return e;
}

std::vector<EpisodeInput> make_episodes(const SystemLayout& layout, const PilotConfig& pilot,
                                        double epsilon, std::size_t frames, std::uint64_t seed,
                                        std::uint64_t first_index, std::size_t count,
                                        StreamTag tag) {
  std::vector<EpisodeInput> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(make_episode(layout, pilot, epsilon, frames, seed, first_index + i, tag));
  }
  return out;
}

TrainState init_train_state(const ModelConfig& model, const SystemLayout& layout,
                            std::uint64_t seed) {
  Rng rng = make_stream(seed, 0, static_cast<std::uint64_t>(StreamTag::init));
  TrainState s;
  s.params = init_parameters(model, layout.service_area, rng);
  s.codebooks = init_codebooks(model, rng);
  return s;
}

// ------------------------------------------------------------ train step

namespace {

struct ChunkResult {
  std::vector<Array> net_grads;
  Array ris_grad;
  Array bs_grad;
  std::vector<bool> ris_used;
  std::vector<bool> bs_used;
  std::vector<std::vector<double>> ris_pre;  // pre-quantized designs, in order
  std::vector<std::vector<double>> bs_pre;
  double loss = 0.0;
  double mse = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
};

template <typename T>
std::vector<T*> flatten(Network<T>& net) {
  std::vector<T*> out;
  visit(net, [&](const std::string&, T& v) { out.push_back(&v); });
  return out;
}

ChunkResult run_chunk(const TrainState& state, std::span<const EpisodeInput> chunk,
                      const ModelConfig& model, const TrainConfig& train,
                      const PilotConfig& pilot, double normalizer) {
  ad::Tape tape;
  BoundModel bound = bind(tape, state.params, model.codebook_free ? nullptr : &state.codebooks);
  const BatchTrace trace = run_batch(tape, bound, model, chunk, RunOptions{pilot, {}});
  std::vector<Position> truth;
  for (const EpisodeInput& e : chunk) truth.push_back(e.ue);
  LossOptions lo;
  lo.commitment_weight = train.commitment_weight;
  lo.normalizer = normalizer;
  const LossTerms loss = composite_loss(trace, truth, lo);
  tape.backward(loss.total);

  ChunkResult r;
  for (Var* v : flatten(bound.net)) r.net_grads.push_back(tape.grad(*v));
  r.loss = loss.total.value().item();
  r.mse = loss.mse.value().item();
  r.alpha = loss.alpha.value().item();
  r.beta = loss.beta.value().item();
  if (!model.codebook_free) {
    r.ris_grad = tape.grad(*bound.ris_codebook);
    r.bs_grad = tape.grad(*bound.bs_codebook);
    r.ris_used.assign(model.V, false);
    r.bs_used.assign(model.B, false);
    // Frame-0 vectors and every per-frame design pick columns.
    const bool keep_pre = train.restart_after > 0;
    auto mark = [&](const FrameSelection& sel) {
      for (std::size_t j : sel.bs_index) r.bs_used[j] = true;
      for (const auto& idx : sel.ris_index) {
        for (std::size_t j : idx) r.ris_used[j] = true;
      }
      if (!keep_pre) return;
      const Array& w = sel.pre.w.value();
      for (std::size_t b = 0; b < w.rows(); ++b) {
        const auto row = w.row_span(b);
        r.bs_pre.emplace_back(row.begin(), row.end());
      }
      for (const Var& th : sel.pre.theta) {
        const Array& a = th.value();
        for (std::size_t b = 0; b < a.rows(); ++b) {
          const auto row = a.row_span(b);
          r.ris_pre.emplace_back(row.begin(), row.end());
        }
      }
    };
    mark(trace.initial);
    for (const FrameRecord& f : trace.frames) mark(f.next);
  }
  return r;
}

constexpr std::uint64_t kRestartTag = 8;
constexpr std::uint64_t kShuffleTag = 9;

void restart_dead(Codebook& cb, AdamState& adam, std::vector<std::uint64_t>& last_used,
                  const std::vector<bool>& used, const std::vector<std::vector<double>>& pre,
                  std::uint64_t step, std::size_t patience, Rng& rng) {
  if (last_used.empty()) last_used.assign(cb.size(), 0);
  for (std::size_t j = 0; j < cb.size(); ++j) {
    if (used[j]) last_used[j] = step;
  }
  if (pre.empty()) return;
  std::uniform_int_distribution<std::size_t> pick(0, pre.size() - 1);
  const std::size_t D = cb.entries.rows();
  for (std::size_t j = 0; j < cb.size(); ++j) {
    if (step - last_used[j] < patience) continue;
    const std::vector<double> v = normalize_unit_modulus(pre[pick(rng)]).values;
    for (std::size_t i = 0; i < D; ++i) {
      cb.entries(i, j) = v[i];
      if (!adam.m.empty()) {
        adam.m[0](i, j) = 0.0;
        adam.v[0](i, j) = 0.0;
      }
    }
    last_used[j] = step;
  }
}

}  // namespace

StepMetrics train_step(TrainState& state, std::span<const EpisodeInput> batch,
                       const ModelConfig& model, const TrainConfig& train,
                       const PilotConfig& pilot) {
  if (batch.empty()) throw InvalidArgument("train_step: empty batch");
  const std::size_t workers = std::min(train.threads, batch.size());
  const double normalizer = static_cast<double>(batch.size());

  std::vector<ChunkResult> results(workers);
  std::vector<std::span<const EpisodeInput>> chunks;
  const std::size_t per = (batch.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(batch.size(), w * per);
    const std::size_t end = std::min(batch.size(), begin + per);
    chunks.push_back(batch.subspan(begin, end - begin));
  }
  if (workers == 1) {
    results[0] = run_chunk(state, chunks[0], model, train, pilot, normalizer);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          if (!chunks[w].empty()) {
            results[w] = run_chunk(state, chunks[w], model, train, pilot, normalizer);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Fixed-order reduction.
  ChunkResult total = std::move(results[0]);
  for (std::size_t w = 1; w < workers; ++w) {
    ChunkResult& r = results[w];
    if (r.net_grads.empty()) continue;
    for (std::size_t i = 0; i < total.net_grads.size(); ++i) total.net_grads[i] += r.net_grads[i];
    total.loss += r.loss;
    total.mse += r.mse;
    total.alpha += r.alpha;
    total.beta += r.beta;
    if (!model.codebook_free) {
      total.ris_grad += r.ris_grad;
      total.bs_grad += r.bs_grad;
      for (std::size_t j = 0; j < total.ris_used.size(); ++j) {
        total.ris_used[j] = total.ris_used[j] || r.ris_used[j];
      }
      for (std::size_t j = 0; j < total.bs_used.size(); ++j) {
        total.bs_used[j] = total.bs_used[j] || r.bs_used[j];
      }
      for (auto& v : r.ris_pre) total.ris_pre.push_back(std::move(v));
      for (auto& v : r.bs_pre) total.bs_pre.push_back(std::move(v));
    }
  }

  if (!std::isfinite(total.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step + 1 << ": total=" << total.loss
        << " mse=" << total.mse << " alpha=" << total.alpha << " beta=" << total.beta;
    throw NumericError(msg.str());
  }

  const AdamConfig adam{train.learning_rate_at(state.step), train.adam_beta1, train.adam_beta2,
                        train.adam_eps};
  {
    const std::vector<Array*> ps = flatten(state.params);
    adam_update(ps, total.net_grads, state.adam_net, adam);
  }
  if (!model.codebook_free) {
    Array* ris = &state.codebooks.ris.entries;
    Array* bs = &state.codebooks.bs.entries;
    const std::vector<std::vector<bool>> ris_mask{total.ris_used};
    const std::vector<std::vector<bool>> bs_mask{total.bs_used};
    adam_update(std::span<Array* const>(&ris, 1), std::span<const Array>(&total.ris_grad, 1),
                state.adam_ris, adam, &ris_mask);
    adam_update(std::span<Array* const>(&bs, 1), std::span<const Array>(&total.bs_grad, 1),
                state.adam_bs, adam, &bs_mask);
    state.codebooks.ris = project_codebook(state.codebooks.ris);
    state.codebooks.bs = project_codebook(state.codebooks.bs);
    if (train.restart_after > 0) {
      Rng rng = make_stream(train.seed, state.step + 1, kRestartTag);
      restart_dead(state.codebooks.ris, state.adam_ris, state.ris_last_used, total.ris_used,
                   total.ris_pre, state.step + 1, train.restart_after, rng);
      restart_dead(state.codebooks.bs, state.adam_bs, state.bs_last_used, total.bs_used,
                   total.bs_pre, state.step + 1, train.restart_after, rng);
    }
  }

  ++state.step;
  state.episodes_seen += batch.size();
  return {state.step, state.episodes_seen, total.loss, total.mse, total.alpha, total.beta};
}

// ------------------------------------------------------------ evaluation helper

double model_rmse(const ModelParameters& params, const Codebooks* codebooks,
                  const ModelConfig& model, const PilotConfig& pilot,
                  std::span<const EpisodeInput> episodes, std::optional<std::size_t> frames,
                  std::size_t batch_size) {
  if (episodes.empty()) throw InvalidArgument("model_rmse: no episodes");
  if (batch_size == 0) throw InvalidArgument("model_rmse: batch_size must be >= 1");
  double sq = 0.0;
  for (std::size_t begin = 0; begin < episodes.size(); begin += batch_size) {
    const auto chunk = episodes.subspan(begin, std::min(batch_size, episodes.size() - begin));
    ad::Tape tape;
    const BoundModel bound = bind(tape, params, model.codebook_free ? nullptr : codebooks);
    const BatchTrace trace = run_batch(tape, bound, model, chunk, RunOptions{pilot, frames});
    const Array& est = trace.estimate.value();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const double dx = est(b, 0) - chunk[b].ue.x;
      const double dy = est(b, 1) - chunk[b].ue.y;
      const double dz = est(b, 2) - chunk[b].ue.z;
      sq += dx * dx + dy * dy + dz * dz;
    }
  }
  return std::sqrt(sq / static_cast<double>(episodes.size()));
}

// ------------------------------------------------------------ loop

TrainResult train_loop(const TrainConfig& train, const SystemLayout& layout,
                       const ModelConfig& model, const TrainCallbacks& callbacks) {
  train.validate();
  layout.validate();
  model.validate();
  if (model.K != layout.K() || model.N != layout.N || model.M != layout.M) {
    throw InvalidArgument("train_loop: model K/N/M do not match the layout");
  }
  const PilotConfig pilot = pilot_for(train);

  TrainResult result;
  result.state = init_train_state(model, layout, train.seed);
  TrainState& state = result.state;

  const std::vector<EpisodeInput> validation =
      make_episodes(layout, pilot, train.rician_factor, model.T, train.seed, 0,
                    train.validation_episodes, StreamTag::validation);

  // Fixed pool: reshuffled every epoch. Otherwise every step draws fresh
  // episodes and epochs only mark validation points.
  std::vector<EpisodeInput> pool;
  if (train.dataset_size > 0) {
    pool = make_episodes(layout, pilot, train.rician_factor, model.T, train.seed, 0,
                         train.dataset_size, StreamTag::train);
  }
  const std::size_t steps = train.total_steps();
  const std::size_t epochs = std::min(train.epochs, steps);
  const std::size_t steps_per_epoch = (train.dataset_size + train.batch_size - 1) / train.batch_size;
  std::size_t next_epoch_end = 1;
  auto epoch_boundary = [&](std::size_t epoch) { return (steps * epoch) / epochs; };
  std::vector<std::size_t> order(pool.size());
  std::uint64_t fresh_index = 0;

  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<EpisodeInput> batch;
    if (!pool.empty()) {
      const std::size_t in_epoch = step % steps_per_epoch;
      if (in_epoch == 0) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_stream(train.seed, step / steps_per_epoch, kShuffleTag);
        std::shuffle(order.begin(), order.end(), rng);
      }
      const std::size_t begin = in_epoch * train.batch_size;
      const std::size_t end = std::min(pool.size(), begin + train.batch_size);
      for (std::size_t i = begin; i < end; ++i) batch.push_back(pool[order[i]]);
    } else {
      const std::size_t count =
          std::min<std::size_t>(train.batch_size, train.episodes_total - fresh_index);
      batch = make_episodes(layout, pilot, train.rician_factor, model.T, train.seed, fresh_index,
                            count, StreamTag::train);
      fresh_index += count;
    }
    const StepMetrics m = train_step(state, batch, model, train, pilot);
    result.history.push_back(m);
    if (callbacks.on_step) callbacks.on_step(m);

    if (step + 1 == epoch_boundary(next_epoch_end)) {
      const std::size_t epoch = next_epoch_end++;
      if (!validation.empty()) {
        result.validation_rmse =
            model_rmse(state.params, &state.codebooks, model, pilot, validation);
        if (callbacks.on_validation) {
          callbacks.on_validation({state.step, epoch, result.validation_rmse});
        }
      }
      const bool last = epoch == epochs;
      if (callbacks.on_checkpoint &&
          (last || (train.checkpoint_every > 0 && epoch % train.checkpoint_every == 0))) {
        callbacks.on_checkpoint(state, epoch);
      }
    }
  }
  return result;
}

}  // namespace vqc
