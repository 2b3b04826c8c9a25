#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mudpt/datagen/datagen.hpp"
#include "mudpt/encoders/backbone.hpp"
#include "mudpt/numerics/optim.hpp"
#include "mudpt/objective/objective.hpp"
#include "mudpt/prompting/prompts.hpp"

namespace mudpt {

enum class Protocol { kFewShot, kBaseToNew, kCrossDataset, kDomainGen };
std::string_view protocol_name(Protocol protocol);
Protocol parse_protocol(std::string_view name);

struct PromptSettings {
  std::size_t length = 4;  // n, shared by both modalities
  std::size_t depth = 4;   // L
  std::size_t joint_width = 32;
  std::size_t joint_heads = 2;

  PromptConfig for_mode(Mode mode) const;
  bool operator==(const PromptSettings&) const = default;
};

struct PretrainSettings {
  PretrainSchedule schedule;
  /// Loaded when the file exists, otherwise written after pretraining. Empty
  /// means always pretrain and keep the result in memory.
  std::string checkpoint;
};

struct ShiftSpec {
  ShiftKind kind = ShiftKind::kNoiseBoost;
  double severity = 0.5;
  bool operator==(const ShiftSpec&) const = default;
};

struct EvaluationSettings {
  std::size_t shots = 16;
  std::vector<std::size_t> datasets{1, 2};  // cross_dataset targets
  std::vector<ShiftSpec> shifts{{ShiftKind::kNoiseBoost, 0.5},
                                {ShiftKind::kPatchPermute, 0.5},
                                {ShiftKind::kPrototypeDrift, 0.5},
                                {ShiftKind::kContrastScale, 0.5}};
};

struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::vector<Mode> modes{Mode::kMudpt};
  Protocol protocol = Protocol::kFewShot;
  std::uint64_t seed = 0;
  ModelDims model;
  PromptSettings prompt;
  SgdSchedule schedule;
  PretrainSettings pretrain;
  DataConfig data;
  EvaluationSettings evaluation;
  std::string output = "out";

  /// Cross-field checks (mode/protocol compatibility, model vs. data shapes,
  /// prompt depth and lengths). Throws ConfigError.
  void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& config);
/// Strict: unknown fields and unknown versions raise ConfigError. Missing
/// sections keep their defaults. The result is validated.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace mudpt
