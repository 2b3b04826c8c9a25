#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mudpt/cli/config.hpp"

namespace mudpt {

/// Outcome of one experiment. `report` is the machine-readable report
/// (see README for its fields); traces and tuned prompts are kept per
/// learning mode.
struct ExperimentReport {
  static constexpr int kVersion = 1;
  static constexpr const char* kWallTimeField = "wall_time_seconds";

  nlohmann::json report;
  std::map<std::string, std::vector<StepRecord>> traces;
  std::map<std::string, Checkpoint> prompts;
};

/// Loads the configured backbone checkpoint if it exists, otherwise builds
/// and contrastively pretrains one (writing the checkpoint when a path is set).
Backbone prepare_backbone(const ExperimentConfig& config, std::ostream* log = nullptr);

/// Runs every configured mode under the configured protocol against one
/// shared backbone. Errors propagate as mudpt exceptions.
ExperimentReport run_experiment(const ExperimentConfig& config, std::ostream* log = nullptr);

/// Writes report.json, report.txt, traces/<mode>.jsonl and prompts/<mode>.json
/// under `dir`.
void emit_report(const ExperimentReport& report, const std::filesystem::path& dir);

/// Plain-text table: one row per mode, one column per accuracy entry plus the
/// protocol's summary columns, then a delta row (first mode minus each other mode).
std::string render_table(const nlohmann::json& report);

/// Copy of `report` without the wall-time field.
nlohmann::json strip_wall_time(const nlohmann::json& report);

/// Human-readable differences between two reports, ignoring wall time.
/// Empty when they agree.
std::vector<std::string> report_diff(const nlohmann::json& a, const nlohmann::json& b);

}  // namespace mudpt
