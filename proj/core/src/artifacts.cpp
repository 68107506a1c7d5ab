#include "vqc/artifacts.hpp"

#include <charconv>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace vqc {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ------------------------------------------------------------ metrics

MetricsWriter::MetricsWriter(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::out | std::ios::trunc);
  if (!out_) throw InvalidArgument("cannot write metrics file '" + path.string() + "'");
}

std::string step_line(const StepMetrics& m) {
  ojson j;
  j["type"] = "step";
  j["step"] = m.step;
  j["episodes"] = m.episodes;
  j["loss"] = m.loss;
  j["mse"] = m.mse;
  j["alpha"] = m.alpha;
  j["beta"] = m.beta;
  return j.dump();
}

std::string validation_line(const ValidationMetrics& m) {
  ojson j;
  j["type"] = "validation";
  j["step"] = m.step;
  j["epoch"] = m.epoch;
  j["rmse"] = m.rmse;
  return j.dump();
}

void MetricsWriter::step(const StepMetrics& m) { out_ << step_line(m) << '\n' << std::flush; }

void MetricsWriter::validation(const ValidationMetrics& m) {
  out_ << validation_line(m) << '\n' << std::flush;
}

// ------------------------------------------------------------ reports

std::string report_to_json(const EvalReport& r, int indent) {
  ojson j;
  j["scheme"] = r.scheme;
  j["rmse"] = r.rmse;
  ojson curve = ojson::array();
  for (const auto& [t, rmse] : r.per_t) curve.push_back({{"T", t}, {"rmse", rmse}});
  j["per_t"] = std::move(curve);
  j["episodes"] = r.episodes;
  j["seed"] = r.seed;
  j["config"] = r.config.empty() ? ojson(nullptr) : ojson::parse(r.config);
  return j.dump(indent);
}

EvalReport report_from_json(std::string_view text) {
  try {
    const ojson j = ojson::parse(text.begin(), text.end());
    EvalReport r;
    r.scheme = j.at("scheme").get<std::string>();
    r.rmse = j.at("rmse").get<double>();
    for (const auto& point : j.at("per_t")) {
      r.per_t.emplace_back(point.at("T").get<std::size_t>(), point.at("rmse").get<double>());
    }
    r.episodes = j.at("episodes").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    const auto& cfg = j.at("config");
    r.config = cfg.is_null() ? std::string() : cfg.dump();
    return r;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed report: ") + e.what());
  }
}

void write_report(const EvalReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::out | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write report '" + path.string() + "'");
  out << report_to_json(r) << '\n';
  if (!out) throw InvalidArgument("cannot write report '" + path.string() + "'");
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open report '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return report_from_json(s.str());
}

// ------------------------------------------------------------ CSV

void write_radio_map_csv(const RadioMap& map, const Position& ue, std::ostream& out) {
  const GridSpec& g = map.rss.grid;
  const double x_max = g.x_min + static_cast<double>(g.nx) * g.resolution;
  const double y_max = g.y_min + static_cast<double>(g.ny) * g.resolution;
  out << "# x_range=" << format_double(g.x_min) << ':' << format_double(x_max)
      << " y_range=" << format_double(g.y_min) << ':' << format_double(y_max)
      << " resolution=" << format_double(g.resolution) << " frame=" << map.frame
      << " subset=" << map.subset << " ue=" << format_double(ue.x) << ':'
      << format_double(ue.y) << ':' << format_double(ue.z) << '\n';
  out << "y\\x";
  for (std::size_t ix = 0; ix < g.nx; ++ix) out << ',' << format_double(g.cell_center(ix, 0).x);
  out << '\n';
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    out << format_double(g.cell_center(0, iy).y);
    for (std::size_t ix = 0; ix < g.nx; ++ix) out << ',' << format_double(map.rss.at(ix, iy));
    out << '\n';
  }
}

void write_codebook_csv(const Codebook& cb, std::ostream& out) {
  const ad::Array& e = cb.entries;
  for (std::size_t c = 0; c < e.cols(); ++c) out << (c ? "," : "") << "codeword" << c;
  out << '\n';
  for (std::size_t r = 0; r < e.rows(); ++r) {
    for (std::size_t c = 0; c < e.cols(); ++c) out << (c ? "," : "") << format_double(e(r, c));
    out << '\n';
  }
}

}  // namespace vqc
