#include "vqc/commands.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "vqc/artifacts.hpp"
#include "vqc/gradcheck.hpp"

namespace vqc {

namespace fs = std::filesystem;

std::optional<std::size_t> parse_thread_count(const char* value) {
  if (value == nullptr) return std::nullopt;
  const char* end = value + std::strlen(value);
  std::size_t n = 0;
  const auto res = std::from_chars(value, end, n);
  if (res.ec != std::errc() || res.ptr != end || n == 0) return std::nullopt;
  return n;
}

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

void apply_threads(RunConfig& cfg, const CommandContext& ctx) {
  if (ctx.threads) cfg.train.threads = *ctx.threads;
  if (ctx.deterministic) cfg.train.threads = 1;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::out | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write '" + path.string() + "'");
  out << text;
}

void export_codebooks(const Codebooks& books, const fs::path& dir) {
  for (const auto& [name, book] : {std::pair{"codebook_ris.csv", &books.ris},
                                   std::pair{"codebook_bs.csv", &books.bs}}) {
    std::ofstream out(dir / name, std::ios::out | std::ios::trunc);
    if (!out) throw InvalidArgument("cannot write '" + (dir / name).string() + "'");
    write_codebook_csv(*book, out);
  }
}

std::string epoch_dir(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch-%04zu", epoch);
  return buf;
}

std::string meters(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v << " m";
  return s.str();
}

}  // namespace

TrainArtifacts train_to_directory(const RunConfig& cfg, const fs::path& dir,
                                  std::ostream* progress) {
  cfg.validate();
  fs::create_directories(dir);
  write_text(dir / "config.json", run_config_to_json(cfg) + "\n");
  MetricsWriter metrics(dir / "metrics.jsonl");

  const std::size_t total = cfg.train.total_steps();
  const std::size_t epochs = std::min(cfg.train.epochs, total);
  TrainCallbacks cb;
  cb.on_step = [&](const StepMetrics& m) {
    if (m.step % cfg.output.log_every == 0 || m.step == total) metrics.step(m);
  };
  cb.on_validation = [&](const ValidationMetrics& v) {
    metrics.validation(v);
    if (progress != nullptr) {
      *progress << "epoch " << v.epoch << "/" << epochs << "  step " << v.step
                << "  validation RMSE " << meters(v.rmse) << '\n';
    }
  };
  TrainArtifacts art;
  art.checkpoint_dir = dir / "checkpoint";
  cb.on_checkpoint = [&](const TrainState& state, std::size_t epoch) {
    const Checkpoint ckpt = make_checkpoint(cfg, state);
    if (epoch == epochs) {
      save_checkpoint(ckpt, art.checkpoint_dir);
      art.checkpoint = ckpt;
    } else {
      save_checkpoint(ckpt, dir / "checkpoints" / epoch_dir(epoch));
    }
  };

  const TrainResult result = train_loop(cfg.train, cfg.layout, cfg.model, cb);
  art.validation_rmse = result.validation_rmse;
  if (!cfg.model.codebook_free) export_codebooks(result.state.codebooks, dir);
  return art;
}

int cmd_train(const fs::path& config, const CommandContext& ctx) {
  return run_guarded(
      [&] {
        RunConfig cfg = load_run_config(config);
        apply_threads(cfg, ctx);
        const fs::path dir = cfg.output.dir;
        ctx.out << "training '" << cfg.name << "': " << cfg.train.total_steps() << " steps, "
                << cfg.train.threads << " thread(s), output " << dir.string() << '\n';
        const auto start = std::chrono::steady_clock::now();
        const TrainArtifacts art = train_to_directory(cfg, dir, &ctx.out);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        ctx.out << "final validation RMSE: " << meters(art.validation_rmse) << '\n'
                << "checkpoint: " << art.checkpoint_dir.string() << '\n'
                << "elapsed: " << std::fixed << std::setprecision(1) << seconds << " s\n";
        return static_cast<int>(kExitOk);
      },
      ctx.err);
}

// ------------------------------------------------------------ eval

RunConfig effective_eval_config(const Checkpoint& ckpt, const EvalRequest& req) {
  RunConfig cfg = ckpt.config;
  if (req.config) {
    const RunConfig requested = load_run_config(*req.config);
    check_compatible(ckpt.config, requested);
    // The trained network keeps its own input scaling and output frame.
    ModelConfig model = ckpt.config.model;
    model.T = requested.model.T;
    cfg = requested;
    cfg.model = model;
  }
  if (!req.sweep.empty()) cfg.eval.sweep = req.sweep;
  if (req.episodes) cfg.eval.episodes = *req.episodes;
  if (req.seed) cfg.eval.seed = *req.seed;
  cfg.validate();
  return cfg;
}

EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const RunConfig& effective) {
  const Codebooks* books = effective.model.codebook_free ? nullptr : &ckpt.codebooks;
  EvalReport r = evaluate_rmse(ckpt.params, books, effective.model, effective.layout,
                               effective.pilot(), effective.train.rician_factor, effective.eval);
  r.config = run_config_to_json(effective, -1);
  return r;
}

int cmd_eval(const EvalRequest& req, const CommandContext& ctx) {
  return run_guarded(
      [&] {
        const Checkpoint ckpt = load_checkpoint(req.checkpoint);
        const RunConfig cfg = effective_eval_config(ckpt, req);
        const EvalReport report = evaluate_checkpoint(ckpt, cfg);
        ctx.out << report_to_json(report) << '\n';
        if (req.report) write_report(report, *req.report);
        return static_cast<int>(kExitOk);
      },
      ctx.err);
}

// ------------------------------------------------------------ radio maps

int cmd_radiomap(const RadioMapRequest& req, const CommandContext& ctx) {
  return run_guarded(
      [&] {
        const Checkpoint ckpt = load_checkpoint(req.checkpoint);
        const RunConfig& cfg = ckpt.config;
        if (!cfg.layout.service_area.contains(req.ue)) {
          throw InvalidArgument("UE position lies outside the service area");
        }
        const double resolution = req.resolution.value_or(cfg.radiomap_resolution);
        const Codebooks* books = cfg.model.codebook_free ? nullptr : &ckpt.codebooks;
        const RadioMapSet set = emit_radio_maps(ckpt.params, books, cfg.model, cfg.layout,
                                                cfg.pilot(), req.ue, resolution);
        const fs::path dir = req.out_dir.value_or(fs::path(cfg.output.dir) / "radiomaps");
        fs::create_directories(dir);
        for (const RadioMap& map : set.maps) {
          const fs::path file =
              dir / ("frame" + std::to_string(map.frame) + "_" + map.subset + ".csv");
          std::ofstream out(file, std::ios::out | std::ios::trunc);
          if (!out) throw InvalidArgument("cannot write '" + file.string() + "'");
          write_radio_map_csv(map, req.ue, out);
          const auto [ix, iy] = cell_of(map.rss.grid, req.ue);
          const double at_ue = map.rss.at(ix, iy);
          ctx.out << file.string() << "  rss at UE / grid median = "
                  << at_ue / median(map.rss.values) << '\n';
        }
        ctx.out << "estimate: (" << set.trace.estimate.x << ", " << set.trace.estimate.y << ", "
                << set.trace.estimate.z << ")\n";
        return static_cast<int>(kExitOk);
      },
      ctx.err);
}

// ------------------------------------------------------------ gradcheck

int cmd_gradcheck(const GradCheckRequest& req, const CommandContext& ctx) {
  return run_guarded(
      [&] {
        GradCheckOptions opts;
        opts.seed = req.seed;
        opts.tolerance = req.tolerance;
        const GradCheckSetup setup = tiny_setup(req.seed);
        const GradCheckReport r = run_gradcheck(setup, opts, req.op_instances);
        std::ostream& o = ctx.out;
        o << std::scientific << std::setprecision(2);
        o << "operations (" << req.op_instances << " random instances each)\n";
        for (const OpCheck& c : r.ops) {
          o << "  " << std::left << std::setw(18) << c.op << std::right
            << " max rel err " << c.max_rel_error << (c.max_rel_error <= opts.tolerance ? "" : "  FAIL")
            << '\n';
        }
        o << "episode (M=N=2, K=1, V=B=4, T=2, hidden=4, zero noise), loss "
          << r.episode.loss << '\n';
        for (const TensorCheck& t : r.episode.tensors) {
          o << "  " << std::left << std::setw(22) << t.name << std::right << " checked "
            << std::setw(4) << t.checked << "  flips skipped " << std::setw(3) << t.skipped
            << "  max rel err " << t.max_rel_error << '\n';
        }
        const IsolationCheck& iso = r.isolation;
        auto flag = [](bool ok) { return ok ? "ok" : "FAIL"; };
        o << "gradient isolation\n"
          << "  stop_gradient leaves exact zeros       " << flag(iso.stop_gradient_zero) << '\n'
          << "  x - SG(x): value 0, gradient 1         " << flag(iso.straight_through_identity)
          << '\n'
          << "  selected vector is a codebook column   " << flag(iso.selected_is_codeword) << '\n'
          << "  gradient copied to pre-quantized input " << flag(iso.gradient_copied) << '\n'
          << "  MSE term gives zero codebook gradient  " << flag(iso.mse_codebook_zero) << '\n'
          << "  codeword loss touches selected columns " << flag(iso.codeword_loss_selected_only)
          << '\n';
        o << "mutation self-test (commitment gradient sign flipped): max rel err "
          << r.mutation_max_rel_error << (r.mutation_detected() ? " detected" : " NOT DETECTED")
          << '\n';
        o << "max relative error: ops "
          << std::max_element(r.ops.begin(), r.ops.end(),
                              [](const OpCheck& a, const OpCheck& b) {
                                return a.max_rel_error < b.max_rel_error;
                              })->max_rel_error
          << ", episode " << r.episode.max_rel_error << " (tolerance " << opts.tolerance << ")\n";
        o << (r.passed() ? "PASS" : "FAIL") << '\n';
        o << std::defaultfloat;
        return static_cast<int>(r.passed() ? kExitOk : kExitNumeric);
      },
      ctx.err);
}

// ------------------------------------------------------------ baselines

std::optional<BaselineKind> parse_baseline_kind(const std::string& name) {
  if (name == "random") return BaselineKind::random;
  if (name == "fixed") return BaselineKind::fixed;
  if (name == "codebook-free") return BaselineKind::codebook_free;
  return std::nullopt;
}

std::string baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::random: return "random";
    case BaselineKind::fixed: return "fixed";
    case BaselineKind::codebook_free: return "codebook-free";
  }
  return "unknown";
}

int cmd_baseline(const BaselineRequest& req, const CommandContext& ctx) {
  return run_guarded(
      [&] {
        RunConfig cfg = load_run_config(req.config);
        apply_threads(cfg, ctx);
        const std::string name = baseline_name(req.kind);
        const fs::path dir = fs::path(cfg.output.dir) / ("baseline-" + name);
        fs::create_directories(dir);
        ctx.out << "baseline '" << name << "' on '" << cfg.name << "', output " << dir.string()
                << '\n';

        EvalReport report;
        if (req.kind == BaselineKind::codebook_free) {
          cfg.model.codebook_free = true;
          cfg.output.dir = dir.string();
          const TrainArtifacts art = train_to_directory(cfg, dir, &ctx.out);
          report = codebook_free_eval(art.checkpoint.params, cfg.model, cfg.layout, cfg.pilot(),
                                      cfg.train.rician_factor, cfg.eval);
        } else {
          BaselineConfig base;
          base.mode = req.kind == BaselineKind::random ? SensingMode::random : SensingMode::fixed;
          MetricsWriter metrics(dir / "metrics.jsonl");
          const std::size_t total = cfg.train.total_steps();
          const BaselineResult res =
              run_baseline(base, cfg.train, cfg.layout, cfg.model, cfg.eval,
                           [&](const StepMetrics& m) {
                             if (m.step % cfg.output.log_every == 0 || m.step == total) {
                               metrics.step(m);
                             }
                           });
          report = res.report;
        }
        report.config = run_config_to_json(cfg, -1);
        const fs::path report_path = req.report.value_or(dir / "report.json");
        write_report(report, report_path);
        ctx.out << report_to_json(report) << '\n' << "report: " << report_path.string() << '\n';
        return static_cast<int>(kExitOk);
      },
      ctx.err);
}

}  // namespace vqc
