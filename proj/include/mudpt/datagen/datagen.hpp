#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mudpt/numerics/tensor.hpp"
#include "mudpt/objective/objective.hpp"

namespace mudpt {

/// Reserved layout of the synthetic vocabulary:
///   0                      eos
///   1, 2, 3                "a", "photo", "of" (the template is 1 2 3 1)
///   4 .. 4+A-1             attribute words
///   4+A .. 4+A+O-1         object words
struct Vocabulary {
  static constexpr int kEos = 0;
  static constexpr int kFirstWord = 4;

  std::size_t attributes = 16;
  std::size_t objects = 16;

  static std::vector<int> template_tokens() { return {1, 2, 3, 1}; }
  int attribute_token(std::size_t a) const { return kFirstWord + static_cast<int>(a); }
  int object_token(std::size_t o) const { return kFirstWord + static_cast<int>(attributes + o); }
  std::size_t size() const { return static_cast<std::size_t>(kFirstWord) + attributes + objects; }
};

/// `template ++ name ++ eos`, the caption used for pretraining and zero-shot text.
std::vector<int> caption_tokens(std::span<const int> name);

struct DataConfig {
  std::size_t classes = 16;             // m, downstream classes per dataset
  std::size_t pretrain_classes = 160;   // combinations reserved for pretraining
  std::size_t patches = 16;             // M
  std::size_t patch_dim = 8;
  std::size_t attributes = 16;
  std::size_t objects = 16;
  std::size_t vocab_size = 64;          // must hold the reserved layout
  std::size_t train_per_class = 16;
  std::size_t val_per_class = 4;
  std::size_t test_per_class = 32;
  std::size_t pretrain_per_class = 24;  // pretraining pairs per combination (plus 4 held out)
  double noise_sigma = 0.1;
  double detail_scale = 0.5;            // class-specific term not explained by the name
  double style_scale = 2.0;             // dataset-level offset unseen in pretraining
  std::size_t dataset = 0;              // which disjoint slice of the downstream pool

  Vocabulary vocabulary() const { return {attributes, objects}; }
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

nlohmann::json data_config_to_json(const DataConfig& config);
/// Unknown fields raise ConfigError; missing fields keep their defaults.
DataConfig data_config_from_json(const nlohmann::json& j);

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ClassInfo {
  int class_id = 0;
  std::vector<int> name;  // (attribute token, object token)
  Tensor prototype;       // M x patch_dim; undefined for corpora read from disk
};

struct Example {
  Tensor image;  // M x patch_dim
  int class_id = 0;
  Split split = Split::kTrain;
};

struct SyntheticCorpus {
  DataConfig config;
  std::uint64_t seed = 0;
  std::vector<ClassInfo> classes;
  std::vector<Example> examples;

  std::vector<std::vector<int>> class_names() const;
  std::vector<std::size_t> indices(Split split) const;
};

/// Downstream corpus: `config.classes` unseen attribute/object combinations,
/// taken from slice `config.dataset` of the downstream pool. Everything is a
/// pure function of (config, seed); the seed also fixes the attribute and
/// object patterns, so corpora sharing a seed share one visual world.
SyntheticCorpus gen_corpus(const DataConfig& config, std::uint64_t seed);

/// Pretraining corpus over the `pretrain_classes` reserved combinations:
/// `pretrain_per_class` train pairs and 4 test pairs per combination.
SyntheticCorpus gen_pretrain_corpus(const DataConfig& config, std::uint64_t seed);

/// Caption pairs for contrastive pretraining from the examples tagged `split`.
std::vector<CaptionedImage> captioned_pairs(const SyntheticCorpus& corpus, Split split);

struct FewShotSplit {
  std::vector<std::size_t> train;  // indices into corpus.examples, `shots` per class
  std::vector<std::size_t> test;   // every test-tagged example
};

/// Draws `shots` train-tagged examples per class without replacement.
FewShotSplit few_shot_sample(const SyntheticCorpus& corpus, std::size_t shots, std::uint64_t seed);

struct BaseNewSplit {
  std::vector<int> base;
  std::vector<int> fresh;  // the "new" classes
};

/// Seeded shuffle, then halve; base takes the extra class on odd counts.
BaseNewSplit base_new_split(std::span<const int> class_ids, std::uint64_t seed);

enum class ShiftKind { kNoiseBoost, kPatchPermute, kPrototypeDrift, kContrastScale };
std::string_view shift_name(ShiftKind kind);
ShiftKind parse_shift(std::string_view name);

/// Label-preserving image transform. Severity 0 is an exact copy.
SyntheticCorpus domain_shift(const SyntheticCorpus& corpus, ShiftKind kind, double severity, std::uint64_t seed);

/// Line-delimited JSON; see README for the record layout.
void write_corpus(const std::filesystem::path& path, const SyntheticCorpus& corpus);
SyntheticCorpus read_corpus(const std::filesystem::path& path);

}  // namespace mudpt
