#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mudpt/encoders/backbone.hpp"

namespace mudpt {

/// On-disk parameter container, one JSON document:
///
///   {
///     "format": "mudpt-checkpoint",
///     "version": 1,
///     "kind": "backbone" | "prompts",
///     "hash": "<content_hash of tensors>",
///     "metadata": { ... kind-specific ... },
///     "tensors": { "<path>": { "shape": [..], "values": [.. row-major ..] }, ... }
///   }
///
/// Values are written in shortest round-trip form, so a write/read cycle is
/// bitwise lossless. Readers reject other formats, versions, and hash mismatches.
struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string kind;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

nlohmann::json checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json dims_to_json(const ModelDims& dims);
ModelDims dims_from_json(const nlohmann::json& j);

/// Backbone checkpoints carry the model dims in their metadata.
Checkpoint backbone_checkpoint(const Backbone& backbone);
Backbone backbone_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace mudpt
