// Command-line front end: argument parsing only, the work lives in vqc::core.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "vqc/commands.hpp"

namespace {

/// Parses "x,y,z" into a position.
bool parse_position(const std::string& text, vqc::Position& out) {
  double v[3];
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lf,%lf,%lf%c", &v[0], &v[1], &v[2], &tail) != 3) return false;
  out = {v[0], v[1], v[2]};
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active sensing with learned RIS and BS codebooks"};
  app.require_subcommand(1);

  std::size_t threads = 0;
  bool deterministic = false;
  app.add_option("--threads", threads, "Worker threads (default: VQC_THREADS or the config)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", deterministic, "Force single-threaded, bit-reproducible runs");

  std::string config;
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("config", config, "Run config (JSON)")->required();

  vqc::EvalRequest eval_req;
  std::string eval_ckpt;
  std::string eval_config;
  std::string eval_report;
  std::size_t eval_episodes = 0;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--config", eval_config, "Evaluate under this config instead");
  eval->add_option("--report", eval_report, "Also write the report to this file");
  eval->add_option("--sweep", eval_req.sweep, "Extra frame counts to evaluate")->delimiter(',');
  auto* episodes_opt = eval->add_option("--episodes", eval_episodes, "Evaluation episodes")
                           ->check(CLI::PositiveNumber);
  auto* seed_opt = eval->add_option("--seed", eval_seed, "Evaluation seed");

  vqc::RadioMapRequest map_req;
  std::string map_ckpt;
  std::string map_ue;
  std::string map_out;
  double map_resolution = 0.0;
  auto* radiomap = app.add_subcommand("radiomap", "Write per-frame RSS maps for one UE position");
  radiomap->add_option("checkpoint", map_ckpt, "Checkpoint directory")->required();
  radiomap->add_option("--ue", map_ue, "UE position as x,y,z")->required();
  radiomap->add_option("--out", map_out, "Output directory");
  auto* res_opt = radiomap->add_option("--resolution", map_resolution, "Grid cell size (m)")
                      ->check(CLI::PositiveNumber);

  vqc::GradCheckRequest grad_req;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--seed", grad_req.seed, "Seed for the tiny model and inputs");
  gradcheck->add_option("--instances", grad_req.op_instances, "Random instances per operation")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", grad_req.tolerance, "Maximum relative error")
      ->check(CLI::PositiveNumber);

  std::string baseline_kind;
  std::string baseline_report;
  auto* baseline = app.add_subcommand("baseline", "Train and evaluate a comparison scheme");
  baseline->add_option("kind", baseline_kind, "random | fixed | codebook-free")
      ->required()
      ->check(CLI::IsMember({"random", "fixed", "codebook-free"}));
  baseline->add_option("config", config, "Run config (JSON)")->required();
  baseline->add_option("--report", baseline_report, "Report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? vqc::kExitOk : vqc::kExitUsage;
  }

  vqc::CommandContext ctx{std::cout, std::cerr, vqc::parse_thread_count(std::getenv("VQC_THREADS")),
                          deterministic};
  if (threads > 0) ctx.threads = threads;

  if (*train) return vqc::cmd_train(config, ctx);
  if (*eval) {
    eval_req.checkpoint = eval_ckpt;
    if (!eval_config.empty()) eval_req.config = eval_config;
    if (!eval_report.empty()) eval_req.report = eval_report;
    if (*episodes_opt) eval_req.episodes = eval_episodes;
    if (*seed_opt) eval_req.seed = eval_seed;
    return vqc::cmd_eval(eval_req, ctx);
  }
  if (*radiomap) {
    if (!parse_position(map_ue, map_req.ue)) {
      std::cerr << "error: --ue expects x,y,z, got '" << map_ue << "'\n";
      return vqc::kExitUsage;
    }
    map_req.checkpoint = map_ckpt;
    if (!map_out.empty()) map_req.out_dir = map_out;
    if (*res_opt) map_req.resolution = map_resolution;
    return vqc::cmd_radiomap(map_req, ctx);
  }
  if (*gradcheck) return vqc::cmd_gradcheck(grad_req, ctx);
  if (*baseline) {
    vqc::BaselineRequest req;
    req.kind = *vqc::parse_baseline_kind(baseline_kind);
    req.config = config;
    if (!baseline_report.empty()) req.report = baseline_report;
    return vqc::cmd_baseline(req, ctx);
  }
  return vqc::kExitUsage;
}
