#include "vqc/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace vqc {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

std::string join_diagnostics(const std::string& origin, const std::vector<std::string>& d) {
  std::string msg = "invalid configuration " + origin + ":";
  for (const auto& line : d) msg += "\n  " + line;
  return msg;
}

/// Collects typed reads from a JSON document and every problem on the way.
class Reader {
 public:
  std::vector<std::string> errors;

  void fail(const std::string& path, const std::string& what) {
    errors.push_back(path + ": " + what);
  }

  /// Returns nullptr (with a diagnostic) unless j is an object; flags keys
  /// outside `allowed`.
  const json* object(const json& j, const std::string& path,
                     std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) {
      fail(path.empty() ? "<root>" : path, "expected an object");
      return nullptr;
    }
    const std::set<std::string_view> known(allowed);
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) fail(join(path, key), "unknown field");
    }
    return &j;
  }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

  void read(const json& j, const std::string& path, std::size_t& out) {
    if (j.is_number_unsigned()) {
      out = j.get<std::size_t>();
    } else if (j.is_number_integer()) {
      fail(path, "must be >= 0, got " + j.dump());
    } else {
      fail(path, "expected a non-negative integer, got " + j.dump());
    }
  }

  void read(const json& j, const std::string& path, double& out) {
    if (!j.is_number()) {
      fail(path, "expected a number, got " + j.dump());
      return;
    }
    const double v = j.get<double>();
    if (!std::isfinite(v)) {
      fail(path, "must be finite");
      return;
    }
    out = v;
  }

  void read(const json& j, const std::string& path, bool& out) {
    if (!j.is_boolean()) {
      fail(path, "expected true or false, got " + j.dump());
      return;
    }
    out = j.get<bool>();
  }

  void read(const json& j, const std::string& path, std::string& out) {
    if (!j.is_string()) {
      fail(path, "expected a string, got " + j.dump());
      return;
    }
    out = j.get<std::string>();
  }

  void read(const json& j, const std::string& path, Position& out) {
    if (!j.is_array() || j.size() != 3) {
      fail(path, "expected [x, y, z], got " + j.dump());
      return;
    }
    double c[3] = {0.0, 0.0, 0.0};
    const std::size_t before = errors.size();
    for (std::size_t i = 0; i < 3; ++i) read(j[i], path + "[" + std::to_string(i) + "]", c[i]);
    if (errors.size() == before) out = {c[0], c[1], c[2]};
  }

  template <typename T>
  void read(const json& j, const std::string& path, std::vector<T>& out) {
    if (!j.is_array()) {
      fail(path, "expected an array, got " + j.dump());
      return;
    }
    std::vector<T> v(j.size());
    const std::size_t before = errors.size();
    for (std::size_t i = 0; i < j.size(); ++i) {
      read(j[i], path + "[" + std::to_string(i) + "]", v[i]);
    }
    if (errors.size() == before) out = std::move(v);
  }

  /// Reads obj[key] into out when present.
  template <typename T>
  void field(const json& obj, const std::string& path, const char* key, T& out) {
    const auto it = obj.find(key);
    if (it != obj.end()) read(*it, join(path, key), out);
  }
};

void parse_layout(Reader& r, const json& j, SystemLayout& layout) {
  const std::string p = "layout";
  if (!r.object(j, p, {"bs", "ris", "M", "N", "C", "spacing_ris", "spacing_bs", "area"})) return;
  r.field(j, p, "bs", layout.bs_position);
  r.field(j, p, "ris", layout.ris_positions);
  r.field(j, p, "M", layout.M);
  r.field(j, p, "N", layout.N);
  r.field(j, p, "C", layout.C);
  r.field(j, p, "spacing_ris", layout.spacing_ris);
  r.field(j, p, "spacing_bs", layout.spacing_bs);
  if (const auto it = j.find("area"); it != j.end()) {
    const std::string ap = "layout.area";
    if (r.object(*it, ap, {"center", "half_x", "half_y"})) {
      r.field(*it, ap, "center", layout.service_area.center);
      r.field(*it, ap, "half_x", layout.service_area.half_x);
      r.field(*it, ap, "half_y", layout.service_area.half_y);
    }
  }
}

enum class FrameMode { area, identity, explicit_values };

struct ModelExtras {
  bool auto_feature_scale = true;
  FrameMode frame = FrameMode::area;
};

void parse_model(Reader& r, const json& j, ModelConfig& m, ModelExtras& extras) {
  const std::string p = "model";
  if (!r.object(j, p,
                {"T", "V", "B", "hidden", "dnn_width", "dnn_depth", "pos_head_widths",
                 "codebook_free", "feature_scale", "position_frame"})) {
    return;
  }
  r.field(j, p, "T", m.T);
  r.field(j, p, "V", m.V);
  r.field(j, p, "B", m.B);
  r.field(j, p, "hidden", m.hidden);
  r.field(j, p, "dnn_width", m.dnn_width);
  r.field(j, p, "dnn_depth", m.dnn_depth);
  r.field(j, p, "pos_head_widths", m.pos_head_widths);
  r.field(j, p, "codebook_free", m.codebook_free);

  if (const auto it = j.find("feature_scale"); it != j.end()) {
    if (it->is_string() && it->get<std::string>() == "auto") {
      extras.auto_feature_scale = true;
    } else if (it->is_number()) {
      extras.auto_feature_scale = false;
      r.read(*it, "model.feature_scale", m.feature_scale);
    } else {
      r.fail("model.feature_scale", "expected \"auto\" or a number, got " + it->dump());
    }
  }

  if (const auto it = j.find("position_frame"); it != j.end()) {
    const std::string fp = "model.position_frame";
    if (it->is_string() && it->get<std::string>() == "area") {
      extras.frame = FrameMode::area;
    } else if (it->is_string() && it->get<std::string>() == "identity") {
      extras.frame = FrameMode::identity;
    } else if (it->is_object()) {
      extras.frame = FrameMode::explicit_values;
      if (r.object(*it, fp, {"offset", "scale"})) {
        r.field(*it, fp, "offset", m.position_offset);
        r.field(*it, fp, "scale", m.position_scale);
      }
    } else {
      r.fail(fp, "expected \"area\", \"identity\" or {offset, scale}, got " + it->dump());
    }
  }
}

void parse_train(Reader& r, const json& j, TrainConfig& t) {
  const std::string p = "train";
  if (!r.object(j, p,
                {"episodes_total", "dataset_size", "batch_size", "epochs", "learning_rate",
                 "lr_schedule", "lr_final_fraction", "adam_beta1", "adam_beta2", "adam_eps", "snr_db", "noise_dbm", "rician_factor",
                 "seed", "commitment_weight", "validation_episodes", "checkpoint_every",
                 "threads", "restart_after"})) {
    return;
  }
  r.field(j, p, "episodes_total", t.episodes_total);
  r.field(j, p, "dataset_size", t.dataset_size);
  r.field(j, p, "batch_size", t.batch_size);
  r.field(j, p, "epochs", t.epochs);
  r.field(j, p, "learning_rate", t.learning_rate);
  if (const auto it = j.find("lr_schedule"); it != j.end()) {
    if (*it == "constant") {
      t.lr_schedule = LrSchedule::constant;
    } else if (*it == "cosine") {
      t.lr_schedule = LrSchedule::cosine;
    } else {
      r.fail(p + ".lr_schedule", "expected \"constant\" or \"cosine\", got " + it->dump());
    }
  }
  r.field(j, p, "lr_final_fraction", t.lr_final_fraction);
  r.field(j, p, "adam_beta1", t.adam_beta1);
  r.field(j, p, "adam_beta2", t.adam_beta2);
  r.field(j, p, "adam_eps", t.adam_eps);
  r.field(j, p, "snr_db", t.snr_db);
  r.field(j, p, "noise_dbm", t.noise_dbm);
  r.field(j, p, "rician_factor", t.rician_factor);
  r.field(j, p, "seed", t.seed);
  r.field(j, p, "commitment_weight", t.commitment_weight);
  r.field(j, p, "validation_episodes", t.validation_episodes);
  r.field(j, p, "checkpoint_every", t.checkpoint_every);
  r.field(j, p, "threads", t.threads);
  r.field(j, p, "restart_after", t.restart_after);
}

void parse_eval(Reader& r, const json& j, RunConfig& cfg) {
  const std::string p = "eval";
  if (!r.object(j, p, {"episodes", "seed", "sweep", "batch_size", "radiomap_resolution"})) return;
  r.field(j, p, "episodes", cfg.eval.episodes);
  r.field(j, p, "seed", cfg.eval.seed);
  r.field(j, p, "sweep", cfg.eval.sweep);
  r.field(j, p, "batch_size", cfg.eval.batch_size);
  r.field(j, p, "radiomap_resolution", cfg.radiomap_resolution);
}

void parse_output(Reader& r, const json& j, OutputConfig& out) {
  const std::string p = "output";
  if (!r.object(j, p, {"dir", "log_every"})) return;
  r.field(j, p, "dir", out.dir);
  r.field(j, p, "log_every", out.log_every);
}

/// Runs a component's validate() and turns its exception into a diagnostic.
template <typename F>
void check(std::vector<std::string>& errors, F&& f) {
  try {
    f();
  } catch (const InvalidArgument& e) {
    errors.emplace_back(e.what());
  }
}

std::vector<std::string> validation_errors(const RunConfig& cfg) {
  std::vector<std::string> errors = cfg.layout.problems();
  for (auto& p : cfg.model.problems()) errors.push_back(std::move(p));
  for (auto& p : cfg.train.problems()) errors.push_back(std::move(p));
  check(errors, [&] { cfg.pilot().validate(); });
  const ModelConfig& m = cfg.model;
  if (m.K != cfg.layout.K() || m.N != cfg.layout.N || m.M != cfg.layout.M) {
    errors.emplace_back("model: K, N and M must match the layout");
  }
  if (cfg.eval.episodes == 0) errors.emplace_back("eval.episodes: must be >= 1");
  if (cfg.eval.batch_size == 0) errors.emplace_back("eval.batch_size: must be >= 1");
  for (std::size_t t : cfg.eval.sweep) {
    if (t == 0) errors.emplace_back("eval.sweep: frame counts must be >= 1");
  }
  if (!(cfg.radiomap_resolution > 0.0) || !std::isfinite(cfg.radiomap_resolution)) {
    errors.emplace_back("eval.radiomap_resolution: must be a finite number > 0");
  }
  if (cfg.output.dir.empty()) errors.emplace_back("output.dir: must not be empty");
  if (cfg.output.log_every == 0) errors.emplace_back("output.log_every: must be >= 1");
  return errors;
}

ojson position_json(const Position& p) { return ojson::array({p.x, p.y, p.z}); }

}  // namespace

ConfigError::ConfigError(std::string origin, std::vector<std::string> diagnostics)
    : InvalidArgument(join_diagnostics(origin, diagnostics)),
      diagnostics_(std::move(diagnostics)) {}

SystemLayout default_layout() {
  SystemLayout layout;
  layout.bs_position = {0.0, 0.0, 0.0};
  layout.ris_positions = {{-40.0, 40.0, 0.0}};
  layout.M = 1;
  layout.N = 16;
  layout.C = 4;
  layout.service_area = {{20.0, 0.0, -20.0}, 15.0, 35.0};
  return layout;
}

void RunConfig::validate() const {
  auto errors = validation_errors(*this);
  if (!errors.empty()) throw ConfigError("'" + name + "'", std::move(errors));
}

RunConfig parse_run_config(std::string_view json_text, std::string_view origin) {
  const std::string where(origin);
  json doc;
  try {
    doc = json::parse(json_text.begin(), json_text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(where, {std::string("malformed JSON: ") + e.what()});
  }

  RunConfig cfg;
  cfg.layout = default_layout();
  ModelExtras extras;
  Reader r;
  if (r.object(doc, "", {"name", "layout", "model", "train", "eval", "output"})) {
    r.field(doc, "", "name", cfg.name);
    if (const auto it = doc.find("layout"); it != doc.end()) parse_layout(r, *it, cfg.layout);
    if (const auto it = doc.find("model"); it != doc.end()) {
      parse_model(r, *it, cfg.model, extras);
    }
    if (const auto it = doc.find("train"); it != doc.end()) parse_train(r, *it, cfg.train);
    if (const auto it = doc.find("eval"); it != doc.end()) parse_eval(r, *it, cfg);
    if (const auto it = doc.find("output"); it != doc.end()) parse_output(r, *it, cfg.output);
  }
  cfg.model.K = cfg.layout.K();
  cfg.model.N = cfg.layout.N;
  cfg.model.M = cfg.layout.M;

  // Fields with the wrong type keep their defaults, so range checks on the
  // rest still run and every problem is reported at once.
  if (!r.errors.empty()) {
    for (auto& e : validation_errors(cfg)) r.errors.push_back(std::move(e));
    throw ConfigError(where, std::move(r.errors));
  }

  // Structural validation first: the derived values below need a sane layout.
  auto errors = validation_errors(cfg);
  if (errors.empty()) {
    if (extras.auto_feature_scale) {
      cfg.model.feature_scale = default_feature_scale(cfg.layout, cfg.pilot());
    }
    switch (extras.frame) {
      case FrameMode::area: fit_position_frame(cfg.model, cfg.layout.service_area); break;
      case FrameMode::identity:
        cfg.model.position_offset = {};
        cfg.model.position_scale = {1.0, 1.0, 1.0};
        break;
      case FrameMode::explicit_values: break;
    }
    errors = validation_errors(cfg);
  }
  if (!errors.empty()) throw ConfigError(where, std::move(errors));
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError(path.string(), {"cannot open config file '" + path.string() + "'"});
  }
  std::ostringstream text;
  text << in.rdbuf();
  if (in.bad()) {
    throw ConfigError(path.string(), {"cannot read config file '" + path.string() + "'"});
  }
  return parse_run_config(text.str(), path.string());
}

std::string run_config_to_json(const RunConfig& cfg, int indent) {
  const SystemLayout& l = cfg.layout;
  const ModelConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;

  ojson ris = ojson::array();
  for (const auto& p : l.ris_positions) ris.push_back(position_json(p));

  ojson doc;
  doc["name"] = cfg.name;
  doc["layout"] = {{"bs", position_json(l.bs_position)},
                   {"ris", ris},
                   {"M", l.M},
                   {"N", l.N},
                   {"C", l.C},
                   {"spacing_ris", l.spacing_ris},
                   {"spacing_bs", l.spacing_bs},
                   {"area",
                    {{"center", position_json(l.service_area.center)},
                     {"half_x", l.service_area.half_x},
                     {"half_y", l.service_area.half_y}}}};
  doc["model"] = {{"T", m.T},
                  {"V", m.V},
                  {"B", m.B},
                  {"hidden", m.hidden},
                  {"dnn_width", m.dnn_width},
                  {"dnn_depth", m.dnn_depth},
                  {"pos_head_widths", m.pos_head_widths},
                  {"codebook_free", m.codebook_free},
                  {"feature_scale", m.feature_scale},
                  {"position_frame",
                   {{"offset", position_json(m.position_offset)},
                    {"scale", position_json(m.position_scale)}}}};
  doc["train"] = {{"episodes_total", t.episodes_total},
                  {"dataset_size", t.dataset_size},
                  {"batch_size", t.batch_size},
                  {"epochs", t.epochs},
                  {"learning_rate", t.learning_rate},
                  {"lr_schedule", t.lr_schedule == LrSchedule::cosine ? "cosine" : "constant"},
                  {"lr_final_fraction", t.lr_final_fraction},
                  {"adam_beta1", t.adam_beta1},
                  {"adam_beta2", t.adam_beta2},
                  {"adam_eps", t.adam_eps},
                  {"snr_db", t.snr_db},
                  {"noise_dbm", t.noise_dbm},
                  {"rician_factor", t.rician_factor},
                  {"seed", t.seed},
                  {"commitment_weight", t.commitment_weight},
                  {"validation_episodes", t.validation_episodes},
                  {"checkpoint_every", t.checkpoint_every},
                  {"threads", t.threads},
                  {"restart_after", t.restart_after}};
  doc["eval"] = {{"episodes", cfg.eval.episodes},
                 {"seed", cfg.eval.seed},
                 {"sweep", cfg.eval.sweep},
                 {"batch_size", cfg.eval.batch_size},
                 {"radiomap_resolution", cfg.radiomap_resolution}};
  doc["output"] = {{"dir", cfg.output.dir}, {"log_every", cfg.output.log_every}};
  return doc.dump(indent);
}

void check_compatible(const RunConfig& trained, const RunConfig& requested) {
  std::vector<std::string> problems;
  auto cmp = [&](const char* name, std::size_t a, std::size_t b) {
    if (a != b) {
      problems.push_back(std::string(name) + " is " + std::to_string(a) +
                         " in the checkpoint but " + std::to_string(b) + " in the config");
    }
  };
  const ModelConfig& a = trained.model;
  const ModelConfig& b = requested.model;
  cmp("N", a.N, b.N);
  cmp("M", a.M, b.M);
  cmp("K", a.K, b.K);
  cmp("V", a.V, b.V);
  cmp("B", a.B, b.B);
  cmp("hidden", a.hidden, b.hidden);
  cmp("dnn_width", a.dnn_width, b.dnn_width);
  cmp("dnn_depth", a.dnn_depth, b.dnn_depth);
  if (a.pos_head_widths != b.pos_head_widths) {
    problems.emplace_back("pos_head_widths differ between checkpoint and config");
  }
  if (a.codebook_free != b.codebook_free) {
    problems.emplace_back("codebook_free differs between checkpoint and config");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not fit the configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InvalidArgument(msg);
  }
}

}  // namespace vqc
