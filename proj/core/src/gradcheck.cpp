#include "vqc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

namespace vqc {

using ad::Array;
using ad::Var;

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// ------------------------------------------------------------ operations

namespace {

struct Shape {
  std::size_t rows;
  std::size_t cols;
};

using Sampler = std::function<double(Rng&)>;

struct OpCase {
  std::string name;
  /// Input shapes for one instance.
  std::function<std::vector<Shape>(Rng&)> shapes;
  std::function<Var(ad::Tape&, std::span<const Var>)> apply;
  /// Per-input value distributions; the last one repeats.
  std::vector<Sampler> samplers;
};

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double plain(Rng& rng) { return uniform(rng, -2.0, 2.0); }

/// Magnitude in [lo, 2] with a random sign.
Sampler away_from_zero(double lo) {
  return [lo](Rng& rng) {
    const double m = uniform(rng, lo, 2.0);
    return std::bernoulli_distribution(0.5)(rng) ? m : -m;
  };
}

double positive(Rng& rng) { return uniform(rng, 0.5, 3.0); }

std::vector<OpCase> op_cases() {
  auto same2 = [](Rng& r) {
    const Shape s{dim(r, 1, 3), dim(r, 1, 4)};
    return std::vector<Shape>{s, s};
  };
  auto one = [](Rng& r) { return std::vector<Shape>{{dim(r, 1, 3), dim(r, 1, 4)}}; };
  auto with_scalar = [](Rng& r) {
    return std::vector<Shape>{{dim(r, 1, 3), dim(r, 1, 4)}, {1, 1}};
  };
  auto unary = [](Var (*f)(Var)) {
    return [f](ad::Tape&, std::span<const Var> x) { return f(x[0]); };
  };
  auto binary = [](Var (*f)(Var, Var)) {
    return [f](ad::Tape&, std::span<const Var> x) { return f(x[0], x[1]); };
  };

  std::vector<OpCase> cases;
  cases.push_back({"add", same2, binary(&ad::add), {plain}});
  cases.push_back({"add_scalar", with_scalar, binary(&ad::add), {plain}});
  cases.push_back({"sub", same2, binary(&ad::sub), {plain}});
  cases.push_back({"mul", same2, binary(&ad::mul), {plain}});
  cases.push_back({"mul_scalar", with_scalar, binary(&ad::mul), {plain}});
  cases.push_back({"div", same2, binary(&ad::div), {plain, away_from_zero(0.5)}});
  cases.push_back({"neg", one, unary(&ad::neg), {plain}});
  cases.push_back({"square", one, unary(&ad::square), {plain}});
  cases.push_back({"sqrt", one, unary(&ad::sqrt), {positive}});
  cases.push_back(
      {"scale", one, [](ad::Tape&, std::span<const Var> x) { return ad::scale(x[0], -1.7); },
       {plain}});
  cases.push_back({"matmul",
                   [](Rng& r) {
                     const std::size_t a = dim(r, 1, 3), k = dim(r, 1, 4), b = dim(r, 1, 3);
                     return std::vector<Shape>{{a, k}, {k, b}};
                   },
                   binary(&ad::matmul),
                   {plain}});
  cases.push_back({"linear",
                   [](Rng& r) {
                     const std::size_t b = dim(r, 1, 3), in = dim(r, 1, 4), out = dim(r, 1, 4);
                     return std::vector<Shape>{{b, in}, {out, in}, {1, out}};
                   },
                   [](ad::Tape&, std::span<const Var> x) { return ad::linear(x[0], x[1], x[2]); },
                   {plain}});
  cases.push_back({"linear_nobias",
                   [](Rng& r) {
                     const std::size_t b = dim(r, 1, 3), in = dim(r, 1, 4), out = dim(r, 1, 4);
                     return std::vector<Shape>{{b, in}, {out, in}};
                   },
                   [](ad::Tape&, std::span<const Var> x) { return ad::linear(x[0], x[1]); },
                   {plain}});
  cases.push_back({"add_row",
                   [](Rng& r) {
                     const std::size_t b = dim(r, 1, 3), n = dim(r, 1, 4);
                     return std::vector<Shape>{{b, n}, {1, n}};
                   },
                   binary(&ad::add_row),
                   {plain}});
  cases.push_back({"tanh", one, unary(&ad::tanh), {plain}});
  cases.push_back({"sigmoid", one, unary(&ad::sigmoid), {plain}});
  cases.push_back({"relu", one, unary(&ad::relu), {away_from_zero(0.05)}});
  cases.push_back({"sum", one, [](ad::Tape&, std::span<const Var> x) { return ad::sum(x[0]); },
                   {plain}});
  cases.push_back({"mean", one, [](ad::Tape&, std::span<const Var> x) { return ad::mean(x[0]); },
                   {plain}});
  for (int axis : {0, 1}) {
    const std::string a = std::to_string(axis);
    cases.push_back({"sum_axis" + a, one,
                     [axis](ad::Tape&, std::span<const Var> x) { return ad::sum(x[0], axis); },
                     {plain}});
    cases.push_back({"mean_axis" + a, one,
                     [axis](ad::Tape&, std::span<const Var> x) { return ad::mean(x[0], axis); },
                     {plain}});
    cases.push_back({"concat_axis" + a,
                     [axis](Rng& r) {
                       const std::size_t fixed = dim(r, 1, 3);
                       std::vector<Shape> s;
                       for (int i = 0; i < 3; ++i) {
                         const std::size_t var = dim(r, 1, 3);
                         s.push_back(axis == 0 ? Shape{var, fixed} : Shape{fixed, var});
                       }
                       return s;
                     },
                     [axis](ad::Tape&, std::span<const Var> x) { return ad::concat(x, axis); },
                     {plain}});
    cases.push_back({"slice_axis" + a,
                     [](Rng& r) { return std::vector<Shape>{{dim(r, 3, 5), dim(r, 3, 5)}}; },
                     [axis](ad::Tape&, std::span<const Var> x) {
                       const std::size_t n = axis == 0 ? x[0].rows() : x[0].cols();
                       return ad::slice(x[0], 1, n - 1, axis);
                     },
                     {plain}});
  }
  cases.push_back({"gather_columns",
                   [](Rng& r) { return std::vector<Shape>{{dim(r, 2, 4), dim(r, 2, 5)}}; },
                   [](ad::Tape&, std::span<const Var> x) {
                     // Repeated indices exercise gradient accumulation.
                     const std::size_t w = x[0].cols();
                     const std::vector<std::size_t> index{0, w - 1, 0, w / 2};
                     return ad::gather_columns(x[0], index);
                   },
                   {plain}});
  cases.push_back({"normalize_pairs",
                   [](Rng& r) { return std::vector<Shape>{{dim(r, 1, 3), 2 * dim(r, 1, 4)}}; },
                   [](ad::Tape&, std::span<const Var> x) { return ad::normalize_pairs(x[0]); },
                   {away_from_zero(0.3)}});
  return cases;
}

/// sum(f(inputs) * weights) on a fresh tape; fills grads when requested.
double weighted_output(const OpCase& c, const std::vector<Array>& inputs, const Array* weights,
                       Array* weights_out, std::vector<Array>* grads) {
  ad::Tape tape;
  std::vector<Var> vars;
  for (const Array& a : inputs) vars.push_back(tape.leaf(a));
  const Var out = c.apply(tape, vars);
  if (weights_out != nullptr) {
    Rng rng = make_stream(out.rows(), out.cols(), 99);
    *weights_out = Array(out.rows(), out.cols());
    for (double& w : weights_out->data()) w = uniform(rng, -1.0, 1.0);
    weights = weights_out;
  }
  const Var loss = ad::sum(ad::mul(out, tape.constant(*weights)));
  if (grads != nullptr) {
    tape.backward(loss);
    grads->clear();
    for (const Var& v : vars) grads->push_back(tape.grad(v));
  }
  return loss.value().item();
}

}  // namespace

std::vector<OpCheck> check_op_gradients(const GradCheckOptions& opts, std::size_t instances) {
  std::vector<OpCheck> out;
  std::uint64_t case_index = 0;
  for (const OpCase& c : op_cases()) {
    OpCheck check;
    check.op = c.name;
    Rng rng = make_stream(opts.seed, case_index++, 31);
    for (std::size_t inst = 0; inst < instances; ++inst) {
      std::vector<Array> inputs;
      const auto shapes = c.shapes(rng);
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        const Sampler& s = c.samplers[std::min(i, c.samplers.size() - 1)];
        Array a(shapes[i].rows, shapes[i].cols);
        for (double& v : a.data()) v = s(rng);
        inputs.push_back(std::move(a));
      }
      Array weights;
      std::vector<Array> grads;
      weighted_output(c, inputs, nullptr, &weights, &grads);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
          auto probe = inputs;
          probe[i][j] = inputs[i][j] + opts.op_step;
          const double up = weighted_output(c, probe, &weights, nullptr, nullptr);
          probe[i][j] = inputs[i][j] - opts.op_step;
          const double down = weighted_output(c, probe, &weights, nullptr, nullptr);
          const double numeric = (up - down) / (2.0 * opts.op_step);
          check.max_rel_error =
              std::max(check.max_rel_error, relative_error(grads[i][j], numeric, opts.floor));
          ++check.coordinates;
        }
      }
      ++check.instances;
    }
    out.push_back(std::move(check));
  }
  return out;
}

// ------------------------------------------------------------ episode

GradCheckSetup tiny_setup(std::uint64_t seed, std::size_t episodes) {
  GradCheckSetup s;
  s.layout.bs_position = {0.0, 0.0, 0.0};
  s.layout.ris_positions = {{-4.0, 4.0, 0.0}};
  s.layout.M = 2;
  s.layout.N = 2;
  s.layout.C = 2;
  s.layout.service_area = {{2.0, 0.0, -2.0}, 1.0, 2.0};
  s.pilot = PilotConfig::from_snr_db(25.0);

  s.model.T = 2;
  s.model.K = 1;
  s.model.N = 2;
  s.model.M = 2;
  s.model.V = 4;
  s.model.B = 4;
  s.model.hidden = 4;
  s.model.dnn_width = 6;
  s.model.dnn_depth = 2;
  s.model.pos_head_widths = {6, 3};
  s.model.feature_scale = default_feature_scale(s.layout, s.pilot);
  fit_position_frame(s.model, s.layout.service_area);

  s.state = init_train_state(s.model, s.layout, seed);
  Rng rng = make_stream(seed, 0, 32);
  visit(s.state.params, [&](const std::string& name, Array& a) {
    const bool bias = name.ends_with(".bias") || name.starts_with("lstm.b_");
    if (!bias) return;
    for (double& v : a.data()) v = uniform(rng, -0.5, 0.5);
  });

  s.episodes = make_episodes(s.layout, s.pilot, 10.0, s.model.T, seed, 0, episodes,
                             StreamTag::validation);
  for (EpisodeInput& e : s.episodes) std::fill(e.noise.begin(), e.noise.end(), Complex{});
  return s;
}

namespace {

/// Parameter tensors of a state in checking order, with their names.
std::vector<std::pair<std::string, Array*>> named_tensors(TrainState& s, bool codebooks) {
  std::vector<std::pair<std::string, Array*>> out;
  visit(s.params, [&](const std::string& name, Array& a) { out.emplace_back(name, &a); });
  if (codebooks) {
    out.emplace_back("codebook.ris", &s.codebooks.ris.entries);
    out.emplace_back("codebook.bs", &s.codebooks.bs.entries);
  }
  return out;
}

struct Pass {
  double loss = 0.0;
  std::vector<Array> grads;  // same order as named_tensors
};

/// Forward (and optionally backward) of the composite loss.
Pass episode_pass(const GradCheckSetup& setup, const TrainState& state, ad::Freeze* freeze,
                  bool with_grads, bool mutate) {
  ad::Tape tape;
  tape.set_freeze(freeze);
  const bool cb = !setup.model.codebook_free;
  BoundModel bound = bind(tape, state.params, cb ? &state.codebooks : nullptr);
  const BatchTrace trace =
      run_batch(tape, bound, setup.model, setup.episodes, RunOptions{setup.pilot, {}});
  std::vector<Position> truth;
  for (const EpisodeInput& e : setup.episodes) truth.push_back(e.ue);
  LossOptions lo;
  lo.commitment_weight = setup.commitment_weight;
  lo.mutate_commitment_sign = mutate;
  const LossTerms loss = composite_loss(trace, truth, lo);
  Pass p;
  p.loss = loss.total.value().item();
  if (!with_grads) return p;
  tape.backward(loss.total);
  visit(bound.net, [&](const std::string&, Var& v) { p.grads.push_back(tape.grad(v)); });
  if (cb) {
    p.grads.push_back(tape.grad(*bound.ris_codebook));
    p.grads.push_back(tape.grad(*bound.bs_codebook));
  }
  return p;
}

}  // namespace

EpisodeCheck check_episode_gradients(const GradCheckSetup& setup, const GradCheckOptions& opts,
                                     bool mutate_commitment_sign) {
  const bool cb = !setup.model.codebook_free;
  ad::Freeze base;
  base.mode = ad::Freeze::Mode::record;
  TrainState state = setup.state;
  const Pass analytic = episode_pass(setup, state, &base, true, mutate_commitment_sign);

  EpisodeCheck out;
  out.loss = analytic.loss;
  auto tensors = named_tensors(state, cb);
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& [name, array] = tensors[t];
    TensorCheck tc;
    tc.name = name;
    for (std::size_t j = 0; j < array->size(); ++j) {
      const double x = (*array)[j];
      double values[2];
      bool flipped = false;
      for (int side = 0; side < 2; ++side) {
        (*array)[j] = side == 0 ? x + opts.episode_step : x - opts.episode_step;
        ad::Freeze probe;
        probe.mode = ad::Freeze::Mode::record;
        episode_pass(setup, state, &probe, false, false);
        if (probe.choices != base.choices) flipped = true;
        ad::Freeze replay = base;
        replay.start_replay();
        values[side] = episode_pass(setup, state, &replay, false, false).loss;
      }
      (*array)[j] = x;
      if (flipped) {
        ++tc.skipped;
        continue;
      }
      const double numeric = (values[0] - values[1]) / (2.0 * opts.episode_step);
      tc.max_rel_error =
          std::max(tc.max_rel_error, relative_error(analytic.grads[t][j], numeric, opts.floor));
      ++tc.checked;
    }
    out.checked += tc.checked;
    out.skipped += tc.skipped;
    out.max_rel_error = std::max(out.max_rel_error, tc.max_rel_error);
    out.tensors.push_back(std::move(tc));
  }
  return out;
}

// ------------------------------------------------------------ isolation

namespace {

bool all_zero(const Array& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return v == 0.0; });
}

struct QuantizedSite {
  Var pre;
  const Quantized* q;
  const Codebook* book;
};

std::vector<QuantizedSite> sites(const FrameSelection& sel, const Codebooks& books) {
  std::vector<QuantizedSite> out;
  if (sel.bs_q) out.push_back({sel.pre.w, &*sel.bs_q, &books.bs});
  for (std::size_t k = 0; k < sel.ris_q.size(); ++k) {
    out.push_back({sel.pre.theta[k], &sel.ris_q[k], &books.ris});
  }
  return out;
}

}  // namespace

IsolationCheck check_gradient_isolation(const GradCheckSetup& setup) {
  IsolationCheck r;
  {
    ad::Tape tape;
    const Var x = tape.leaf(Array::row({0.3, -1.2, 2.5}));
    const Var y = ad::tanh(x) * x;
    tape.backward(ad::sum(ad::stop_gradient(y)));
    r.stop_gradient_zero = all_zero(tape.grad(x));
  }
  {
    ad::Tape tape;
    const Var x = tape.leaf(Array::row({0.3, -1.2, 2.5}));
    const Var loss = ad::sum(x - ad::stop_gradient(x));
    tape.backward(loss);
    const Array& g = tape.grad(x);
    r.straight_through_identity =
        loss.value().item() == 0.0 &&
        std::all_of(g.data().begin(), g.data().end(), [](double v) { return v == 1.0; });
  }
  if (setup.model.codebook_free) return r;

  const Codebooks& books = setup.state.codebooks;
  LossOptions loss_options;
  loss_options.commitment_weight = setup.commitment_weight;
  std::vector<Position> truth;
  for (const EpisodeInput& e : setup.episodes) truth.push_back(e.ue);

  // MSE term alone: bit-exact copies and untouched codebooks.
  {
    ad::Tape tape;
    BoundModel bound = bind(tape, setup.state.params, &books);
    const BatchTrace trace =
        run_batch(tape, bound, setup.model, setup.episodes, RunOptions{setup.pilot, {}});
    const LossTerms loss = composite_loss(trace, truth, loss_options);
    tape.backward(loss.mse);

    std::vector<QuantizedSite> all = sites(trace.initial, books);
    for (const FrameRecord& f : trace.frames) {
      const auto more = sites(f.next, books);
      all.insert(all.end(), more.begin(), more.end());
    }
    bool exact = !all.empty();
    bool copied = !all.empty();
    for (const QuantizedSite& s : all) {
      const Array& sel = s.q->selected.value();
      for (std::size_t b = 0; b < sel.rows(); ++b) {
        const std::vector<double> col = s.book->column(s.q->index[b]);
        const auto row = sel.row_span(b);
        exact = exact && std::equal(row.begin(), row.end(), col.begin(), col.end());
      }
      copied = copied && tape.grad(s.pre) == tape.grad(s.q->selected);
    }
    r.selected_is_codeword = exact;
    r.gradient_copied = copied;
    r.mse_codebook_zero =
        all_zero(tape.grad(*bound.ris_codebook)) && all_zero(tape.grad(*bound.bs_codebook));
  }

  // Full loss: codebook gradient lives on the columns the loss selected.
  {
    ad::Tape tape;
    BoundModel bound = bind(tape, setup.state.params, &books);
    const BatchTrace trace =
        run_batch(tape, bound, setup.model, setup.episodes, RunOptions{setup.pilot, {}});
    const LossTerms loss = composite_loss(trace, truth, loss_options);
    tape.backward(loss.total);

    std::set<std::size_t> ris_cols;
    std::set<std::size_t> bs_cols;
    for (const FrameRecord& f : trace.frames) {
      bs_cols.insert(f.next.bs_index.begin(), f.next.bs_index.end());
      for (const auto& idx : f.next.ris_index) ris_cols.insert(idx.begin(), idx.end());
    }
    auto check = [](const Array& g, const std::set<std::size_t>& cols) {
      for (std::size_t c = 0; c < g.cols(); ++c) {
        bool nonzero = false;
        for (std::size_t i = 0; i < g.rows(); ++i) nonzero = nonzero || g(i, c) != 0.0;
        if (nonzero != cols.contains(c)) return false;
      }
      return true;
    };
    r.codeword_loss_selected_only = check(tape.grad(*bound.ris_codebook), ris_cols) &&
                                    check(tape.grad(*bound.bs_codebook), bs_cols);
  }
  return r;
}

// ------------------------------------------------------------ report

bool GradCheckReport::ops_passed() const {
  if (ops.empty()) return false;
  return std::all_of(ops.begin(), ops.end(), [&](const OpCheck& c) {
    return c.coordinates > 0 && c.max_rel_error <= tolerance;
  });
}

bool GradCheckReport::episode_passed() const {
  return episode.checked > 0 && episode.max_rel_error <= tolerance;
}

GradCheckReport run_gradcheck(const GradCheckSetup& setup, const GradCheckOptions& opts,
                              std::size_t op_instances) {
  GradCheckReport r;
  r.tolerance = opts.tolerance;
  r.ops = check_op_gradients(opts, op_instances);
  r.episode = check_episode_gradients(setup, opts, false);
  r.isolation = check_gradient_isolation(setup);
  r.mutation_max_rel_error = check_episode_gradients(setup, opts, true).max_rel_error;
  return r;
}

}  // namespace vqc
