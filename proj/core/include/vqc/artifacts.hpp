#pragma once

// On-disk artifacts besides checkpoints: the JSONL metric stream, evaluation
// reports, radio-map grids and codebook tables.

#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <string>
#include <string_view>

#include "vqc/evaluation.hpp"

namespace vqc {

/// Appends one JSON object per line: {"type":"step",...} for training steps
/// and {"type":"validation",...} for validation passes.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void step(const StepMetrics& m);
  void validation(const ValidationMetrics& m);

 private:
  std::ofstream out_;
};

std::string step_line(const StepMetrics& m);
std::string validation_line(const ValidationMetrics& m);

std::string report_to_json(const EvalReport& r, int indent = 2);
EvalReport report_from_json(std::string_view text);
void write_report(const EvalReport& r, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

/// Grid CSV: a "# key=value ..." metadata line (x_range, y_range,
/// resolution, frame, subset, ue), a header row of cell-center x values,
/// then one row per cell-center y with the linear RSS (pilot power units).
void write_radio_map_csv(const RadioMap& map, const Position& ue, std::ostream& out);

/// One codeword per column, 2E rows: real parts then imaginary parts.
void write_codebook_csv(const Codebook& cb, std::ostream& out);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace vqc
