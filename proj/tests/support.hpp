#pragma once

// Shared fixtures for the unit tests.

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include "vqc/config.hpp"

namespace vqc::test {

/// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("vqc-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small single-RIS run that trains in well under a second.
inline RunConfig smoke_config(const std::filesystem::path& out_dir = "runs/test") {
  const std::string text = R"({
    "name": "smoke",
    "layout": {"M": 1, "N": 4, "C": 2},
    "model": {"T": 2, "V": 8, "B": 1, "hidden": 8, "dnn_width": 16, "dnn_depth": 2,
              "pos_head_widths": [16, 3]},
    "train": {"episodes_total": 2000, "batch_size": 32, "epochs": 2, "learning_rate": 0.003,
              "seed": 3, "validation_episodes": 100, "checkpoint_every": 1, "threads": 1},
    "eval": {"episodes": 100, "seed": 1000}
  })";
  RunConfig cfg = parse_run_config(text, "smoke");
  cfg.output.dir = out_dir.string();
  return cfg;
}

}  // namespace vqc::test
