#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "support.hpp"
#include "vqc/artifacts.hpp"
#include "vqc/checkpoint.hpp"

namespace vqc {
namespace {

using json = nlohmann::json;

std::vector<std::string> diagnostics_of(const std::string& text) {
  try {
    parse_run_config(text, "inline");
  } catch (const ConfigError& e) {
    return e.diagnostics();
  }
  return {};
}

bool any_contains(const std::vector<std::string>& lines, const std::string& needle) {
  for (const auto& l : lines) {
    if (l.find(needle) != std::string::npos) return true;
  }
  return false;
}

TEST(Config, EmptyDocumentUsesDefaults) {
  const RunConfig cfg = parse_run_config("{}");
  EXPECT_EQ(cfg.layout.N, 16u);
  EXPECT_EQ(cfg.layout.C, 4u);
  EXPECT_EQ(cfg.model.N, cfg.layout.N);
  EXPECT_EQ(cfg.model.K, 1u);
  EXPECT_EQ(cfg.model.feature_scale, default_feature_scale(cfg.layout, cfg.pilot()));
  EXPECT_EQ(cfg.model.position_offset.x, 20.0);
  EXPECT_EQ(cfg.model.position_scale.y, 35.0);
}

TEST(Config, CollectsEveryProblem) {
  const auto d = diagnostics_of(R"({
    "bogus": 1,
    "layout": {"N": 6, "C": 4},
    "model": {"T": "three", "V": 0},
    "train": {"learning_rate": -1}
  })");
  EXPECT_TRUE(any_contains(d, "bogus")) << d.size();
  EXPECT_TRUE(any_contains(d, "model.T"));
  EXPECT_TRUE(any_contains(d, "model.V"));
  EXPECT_TRUE(any_contains(d, "train.learning_rate"));
  EXPECT_TRUE(any_contains(d, "layout"));
  EXPECT_GE(d.size(), 5u);
}

TEST(Config, LearningRateSchedule) {
  const RunConfig cfg =
      parse_run_config(R"({"train": {"lr_schedule": "cosine", "lr_final_fraction": 0.25}})");
  EXPECT_EQ(cfg.train.lr_schedule, LrSchedule::cosine);
  EXPECT_EQ(cfg.train.lr_final_fraction, 0.25);
  EXPECT_EQ(parse_run_config(run_config_to_json(cfg)).train.lr_schedule, LrSchedule::cosine);
  EXPECT_EQ(parse_run_config("{}").train.lr_schedule, LrSchedule::constant);
  EXPECT_TRUE(any_contains(diagnostics_of(R"({"train": {"lr_schedule": "step"}})"),
                           "train.lr_schedule"));
  EXPECT_TRUE(any_contains(diagnostics_of(R"({"train": {"lr_final_fraction": 2}})"),
                           "train.lr_final_fraction"));
}

TEST(Config, MalformedJsonIsDiagnosedNotCrashed) {
  for (const char* text : {"{", "[1,2]", "null", "{\"layout\": 5}", "{\"model\": {\"T\": -1}}",
                           "{\"model\": {\"feature_scale\": \"sometimes\"}}",
                           "{\"layout\": {\"ris\": []}}", "{\"train\": {\"seed\": 1.5}}"}) {
    EXPECT_THROW(parse_run_config(text), ConfigError) << text;
  }
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_run_config("/nonexistent/dir/run.json");
    FAIL() << "no error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/run.json"), std::string::npos);
  }
}

TEST(Config, CanonicalJsonRoundTrips) {
  const RunConfig cfg = test::smoke_config("runs/x");
  const std::string once = run_config_to_json(cfg);
  const RunConfig again = parse_run_config(once);
  EXPECT_EQ(run_config_to_json(again), once);
  EXPECT_EQ(again.model.feature_scale, cfg.model.feature_scale);
  EXPECT_EQ(again.output.dir, "runs/x");
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"smoke.json", "desk_single_ris.json", "desk_single_ris_t6.json",
                           "desk_two_ris.json", "full_single_ris.json", "full_two_ris.json"}) {
    const RunConfig cfg = load_run_config(std::filesystem::path(VQC_SOURCE_DIR) / "configs" / name);
    EXPECT_NO_THROW(cfg.validate()) << name;
  }
}

TEST(Config, CompatibilityCheckNamesShapeFields) {
  const RunConfig a = test::smoke_config();
  RunConfig b = a;
  b.model.T = 6;  // frame count is not a shape
  EXPECT_NO_THROW(check_compatible(a, b));
  b.layout.N = 8;
  b.layout.C = 2;
  b.model.N = 8;
  try {
    check_compatible(a, b);
    FAIL() << "no error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("N"), std::string::npos);
  }
}

Checkpoint trained_checkpoint() {
  const RunConfig cfg = test::smoke_config();
  TrainState state = init_train_state(cfg.model, cfg.layout, 3);
  const auto batch = make_episodes(cfg.layout, cfg.pilot(), 10.0, cfg.model.T, 3, 0, 8,
                                   StreamTag::train);
  train_step(state, batch, cfg.model, cfg.train, cfg.pilot());
  return make_checkpoint(cfg, state);
}

std::vector<ad::Array> flat(const Checkpoint& c) {
  std::vector<ad::Array> out;
  visit(c.params, [&](const std::string&, const ad::Array& a) { out.push_back(a); });
  out.push_back(c.codebooks.ris.entries);
  out.push_back(c.codebooks.bs.entries);
  return out;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  test::TempDir dir;
  const Checkpoint c = trained_checkpoint();
  save_checkpoint(c, dir.path());
  const Checkpoint back = load_checkpoint(dir.path());
  EXPECT_EQ(flat(back), flat(c));
  EXPECT_EQ(back.kind, "vqc");
  EXPECT_EQ(back.step, 1u);
  EXPECT_EQ(back.episodes_seen, 8u);
  EXPECT_EQ(run_config_to_json(back.config), run_config_to_json(c.config));

  EvalOptions opts;
  opts.episodes = 50;
  const EvalReport a = evaluate_rmse(c.params, &c.codebooks, c.config.model, c.config.layout,
                                     c.config.pilot(), 10.0, opts);
  const EvalReport b = evaluate_rmse(back.params, &back.codebooks, back.config.model,
                                     back.config.layout, back.config.pilot(), 10.0, opts);
  EXPECT_EQ(a.rmse, b.rmse);
}

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
}

TEST(Checkpoint, ManifestDescribesTensors) {
  test::TempDir dir;
  save_checkpoint(trained_checkpoint(), dir.path());
  const json m = read_json(dir / "manifest.json");
  EXPECT_EQ(m["format"], "vqc-checkpoint");
  EXPECT_EQ(m["version"], kCheckpointVersion);
  EXPECT_EQ(m["byte_order"], "little");
  std::size_t total = 0;
  for (const auto& t : m["tensors"]) {
    EXPECT_EQ(t["offset"].get<std::size_t>(), total);
    total += t["count"].get<std::size_t>();
  }
  EXPECT_EQ(std::filesystem::file_size(dir / "params.bin"), total * 8);
}

TEST(Checkpoint, RejectsNewerVersion) {
  test::TempDir dir;
  save_checkpoint(trained_checkpoint(), dir.path());
  json m = read_json(dir / "manifest.json");
  m["version"] = kCheckpointVersion + 1;
  write_json(dir / "manifest.json", m);
  try {
    load_checkpoint(dir.path());
    FAIL() << "no error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("newer"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RejectsDamage) {
  test::TempDir dir;
  save_checkpoint(trained_checkpoint(), dir.path());
  const json good = read_json(dir / "manifest.json");

  json m = good;
  m["tensors"][0]["shape"] = {1, 1};
  write_json(dir / "manifest.json", m);
  EXPECT_THROW(load_checkpoint(dir.path()), InvalidArgument);

  m = good;
  m["kind"] = "codebook-free";
  write_json(dir / "manifest.json", m);
  EXPECT_THROW(load_checkpoint(dir.path()), InvalidArgument);

  write_json(dir / "manifest.json", good);
  std::filesystem::resize_file(dir / "params.bin", 16);
  EXPECT_THROW(load_checkpoint(dir.path()), InvalidArgument);

  std::filesystem::remove(dir / "params.bin");
  EXPECT_THROW(load_checkpoint(dir.path()), InvalidArgument);
  EXPECT_THROW(load_checkpoint(dir / "missing"), InvalidArgument);
}

TEST(Artifacts, ReportRoundTrips) {
  test::TempDir dir;
  EvalReport r;
  r.scheme = "vqc";
  r.rmse = 12.345678901234567;
  r.per_t = {{1, 20.1}, {3, 12.345678901234567}, {6, 9.75}};
  r.episodes = 1000;
  r.seed = 77;
  r.config = run_config_to_json(test::smoke_config(), -1);
  write_report(r, dir / "report.json");
  const EvalReport back = read_report(dir / "report.json");
  EXPECT_EQ(back.scheme, r.scheme);
  EXPECT_EQ(back.rmse, r.rmse);
  EXPECT_EQ(back.per_t, r.per_t);
  EXPECT_EQ(back.episodes, r.episodes);
  EXPECT_EQ(back.seed, r.seed);
  EXPECT_EQ(json::parse(back.config), json::parse(r.config));
}

TEST(Artifacts, MetricLinesAreJson) {
  const json s = json::parse(step_line({3, 96, 1.5, 1.0, 0.25, 0.25}));
  EXPECT_EQ(s["type"], "step");
  EXPECT_EQ(s["step"], 3);
  EXPECT_EQ(s["episodes"], 96);
  EXPECT_EQ(s["loss"], 1.5);
  const json v = json::parse(validation_line({10, 2, 7.5}));
  EXPECT_EQ(v["type"], "validation");
  EXPECT_EQ(v["epoch"], 2);
  EXPECT_EQ(v["rmse"], 7.5);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  return out;
}

TEST(Artifacts, RadioMapCsvParsesBack) {
  RadioMap map;
  map.frame = 2;
  map.subset = "ris1";
  map.rss.grid = GridSpec::covering({{20.0, 0.0, -20.0}, 15.0, 35.0}, 1.0);
  for (std::size_t i = 0; i < 30 * 70; ++i) map.rss.values.push_back(1e-9 * static_cast<double>(i) / 7.0);
  std::stringstream out;
  write_radio_map_csv(map, {20.5, 0.5, -20.0}, out);

  std::string line;
  std::getline(out, line);
  EXPECT_NE(line.find("resolution=1 "), std::string::npos) << line;
  EXPECT_NE(line.find("x_range=5:35"), std::string::npos) << line;
  EXPECT_NE(line.find("y_range=-35:35"), std::string::npos) << line;
  EXPECT_NE(line.find("frame=2"), std::string::npos);
  EXPECT_NE(line.find("subset=ris1"), std::string::npos);
  std::getline(out, line);
  const auto header = split(line, ',');
  ASSERT_EQ(header.size(), 31u);
  EXPECT_EQ(std::stod(header[1]), 5.5);
  std::size_t rows = 0;
  while (std::getline(out, line)) {
    const auto cells = split(line, ',');
    ASSERT_EQ(cells.size(), 31u);
    EXPECT_EQ(std::stod(cells[0]), -34.5 + static_cast<double>(rows));
    for (std::size_t ix = 0; ix < 30; ++ix) EXPECT_EQ(std::stod(cells[ix + 1]), map.rss.at(ix, rows));
    ++rows;
  }
  EXPECT_EQ(rows, 70u);
}

TEST(Artifacts, CodebookCsvShape) {
  Rng rng(1);
  const Codebook cb = init_codebook(3, 5, rng);
  std::stringstream out;
  write_codebook_csv(cb, out);
  std::string line;
  std::getline(out, line);
  EXPECT_EQ(split(line, ',').size(), 5u);
  std::size_t rows = 0;
  while (std::getline(out, line)) {
    const auto cells = split(line, ',');
    ASSERT_EQ(cells.size(), 5u);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(std::stod(cells[c]), cb.entries(rows, c));
    ++rows;
  }
  EXPECT_EQ(rows, 6u);
}

TEST(Artifacts, FormatDoubleRoundTrips) {
  Rng rng(2);
  std::uniform_real_distribution<double> d(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = d(rng) * std::pow(10.0, i % 20 - 10);
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(1.0), "1");
}

}  // namespace
}  // namespace vqc
