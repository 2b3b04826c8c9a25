#include "mudpt/datagen/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "mudpt/errors.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

namespace {

constexpr const char* kCorpusFormat = "mudpt-corpus";
constexpr int kCorpusVersion = 1;
constexpr std::size_t kPretrainHeldOut = 4;

// Shift magnitudes at severity 1.
constexpr double kNoiseBoostSigma = 1.0;
constexpr double kDriftScale = 1.0;
constexpr double kMinContrast = 0.1;

Tensor normal_grid(std::uint64_t seed, std::size_t rows, std::size_t cols, double stddev) {
  Rng rng(seed);
  return Tensor({rows, cols}, rng.normal_vector(rows * cols, stddev));
}

/// Attribute and object patterns plus the split of all combinations into a
/// pretraining pool and a downstream pool.
struct World {
  std::vector<std::vector<double>> attribute;  // patch_dim each, broadcast over patches
  std::vector<Tensor> object;                  // M x patch_dim each
  std::vector<std::size_t> pretrain_pool;      // combination = a * objects + o
  std::vector<std::size_t> downstream_pool;

  World(const DataConfig& c, std::uint64_t seed) {
    for (std::size_t a = 0; a < c.attributes; ++a) {
      Rng rng(derive_seed(seed, "world/attribute", a));
      attribute.push_back(rng.normal_vector(c.patch_dim, 1.0));
    }
    for (std::size_t o = 0; o < c.objects; ++o) {
      object.push_back(normal_grid(derive_seed(seed, "world/object", o), c.patches, c.patch_dim, 1.0));
    }
    std::vector<std::size_t> combos(c.attributes * c.objects);
    std::iota(combos.begin(), combos.end(), 0);
    Rng rng(derive_seed(seed, "world/combinations"));
    rng.shuffle(combos.begin(), combos.end());
    pretrain_pool.assign(combos.begin(), combos.begin() + static_cast<std::ptrdiff_t>(c.pretrain_classes));
    downstream_pool.assign(combos.begin() + static_cast<std::ptrdiff_t>(c.pretrain_classes), combos.end());
  }

  Tensor prototype(const DataConfig& c, std::uint64_t seed, std::size_t combo) const {
    const std::size_t a = combo / c.objects;
    const std::size_t o = combo % c.objects;
    const Tensor detail = normal_grid(derive_seed(seed, "world/detail", combo), c.patches, c.patch_dim, c.detail_scale);
    Tensor out({c.patches, c.patch_dim});
    auto v = out.mutable_values();
    const auto obj = object[o].values();
    const auto det = detail.values();
    for (std::size_t p = 0; p < c.patches; ++p) {
      for (std::size_t j = 0; j < c.patch_dim; ++j) {
        const std::size_t k = p * c.patch_dim + j;
        v[k] = attribute[a][j] + obj[k] + det[k];
      }
    }
    return out;
  }
};

std::vector<int> combo_name(const DataConfig& c, std::size_t combo) {
  const Vocabulary vocab = c.vocabulary();
  return {vocab.attribute_token(combo / c.objects), vocab.object_token(combo % c.objects)};
}

void add_examples(SyntheticCorpus& corpus, const ClassInfo& cls, Split split, std::size_t count, Rng& rng) {
  const double sigma = corpus.config.noise_sigma;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor image({corpus.config.patches, corpus.config.patch_dim});
    auto v = image.mutable_values();
    const auto proto = cls.prototype.values();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = proto[k] + (sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0);
    corpus.examples.push_back({image, cls.class_id, split});
  }
}

}  // namespace

std::vector<int> caption_tokens(std::span<const int> name) {
  std::vector<int> out = Vocabulary::template_tokens();
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(Vocabulary::kEos);
  return out;
}

void DataConfig::validate() const {
  if (classes < 4) throw ConfigError("data: classes must be at least 4");
  if (patches < 4) throw ConfigError("data: patches must be at least 4");
  if (patch_dim == 0) throw ConfigError("data: patch_dim must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("data: noise_sigma must be non-negative");
  if (!(detail_scale >= 0.0) || !(style_scale >= 0.0)) throw ConfigError("data: scales must be non-negative");
  if (train_per_class == 0 || test_per_class == 0) throw ConfigError("data: every class needs train and test examples");
  if (attributes == 0 || objects == 0) throw ConfigError("data: attributes and objects must be positive");
  if (vocabulary().size() > vocab_size) {
    throw ConfigError("data: " + std::to_string(attributes) + " attributes and " + std::to_string(objects) +
                      " objects do not fit a vocabulary of " + std::to_string(vocab_size));
  }
  const std::size_t needed = pretrain_classes + (dataset + 1) * classes;
  if (attributes * objects < needed) {
    throw ConfigError("data: vocabulary yields " + std::to_string(attributes * objects) +
                      " distinct class names, dataset " + std::to_string(dataset) + " needs " + std::to_string(needed));
  }
}

nlohmann::json data_config_to_json(const DataConfig& c) {
  return {{"classes", c.classes},
          {"pretrain_classes", c.pretrain_classes},
          {"patches", c.patches},
          {"patch_dim", c.patch_dim},
          {"attributes", c.attributes},
          {"objects", c.objects},
          {"vocab_size", c.vocab_size},
          {"train_per_class", c.train_per_class},
          {"val_per_class", c.val_per_class},
          {"test_per_class", c.test_per_class},
          {"pretrain_per_class", c.pretrain_per_class},
          {"noise_sigma", c.noise_sigma},
          {"detail_scale", c.detail_scale},
          {"style_scale", c.style_scale},
          {"dataset", c.dataset}};
}

DataConfig data_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("data: expected an object");
  DataConfig c;
  const nlohmann::json known = data_config_to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("data: unknown field '" + key + "'");
  }
  try {
    c.classes = j.value("classes", c.classes);
    c.pretrain_classes = j.value("pretrain_classes", c.pretrain_classes);
    c.patches = j.value("patches", c.patches);
    c.patch_dim = j.value("patch_dim", c.patch_dim);
    c.attributes = j.value("attributes", c.attributes);
    c.objects = j.value("objects", c.objects);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.train_per_class = j.value("train_per_class", c.train_per_class);
    c.val_per_class = j.value("val_per_class", c.val_per_class);
    c.test_per_class = j.value("test_per_class", c.test_per_class);
    c.pretrain_per_class = j.value("pretrain_per_class", c.pretrain_per_class);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.detail_scale = j.value("detail_scale", c.detail_scale);
    c.style_scale = j.value("style_scale", c.style_scale);
    c.dataset = j.value("dataset", c.dataset);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  return c;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  throw InternalError("unknown split");
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    if (split_name(s) == name) return s;
  }
  throw DataError("unknown split tag '" + std::string(name) + "'");
}

std::vector<std::vector<int>> SyntheticCorpus::class_names() const {
  std::vector<std::vector<int>> out;
  for (const ClassInfo& c : classes) out.push_back(c.name);
  return out;
}

std::vector<std::size_t> SyntheticCorpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].split == split) out.push_back(i);
  }
  return out;
}

SyntheticCorpus gen_corpus(const DataConfig& config, std::uint64_t seed) {
  config.validate();
  const World world(config, seed);
  const Tensor style =
      normal_grid(derive_seed(seed, "style", config.dataset), config.patches, config.patch_dim, config.style_scale);

  SyntheticCorpus corpus;
  corpus.config = config;
  corpus.seed = seed;
  for (std::size_t k = 0; k < config.classes; ++k) {
    const std::size_t combo = world.downstream_pool[config.dataset * config.classes + k];
    ClassInfo cls{static_cast<int>(k), combo_name(config, combo), ops::add(world.prototype(config, seed, combo), style)};
    Rng rng(derive_seed(seed, "examples/" + std::to_string(config.dataset), k));
    add_examples(corpus, cls, Split::kTrain, config.train_per_class, rng);
    add_examples(corpus, cls, Split::kVal, config.val_per_class, rng);
    add_examples(corpus, cls, Split::kTest, config.test_per_class, rng);
    corpus.classes.push_back(std::move(cls));
  }
  return corpus;
}

SyntheticCorpus gen_pretrain_corpus(const DataConfig& config, std::uint64_t seed) {
  config.validate();
  const World world(config, seed);
  SyntheticCorpus corpus;
  corpus.config = config;
  corpus.seed = seed;
  for (std::size_t k = 0; k < config.pretrain_classes; ++k) {
    const std::size_t combo = world.pretrain_pool[k];
    ClassInfo cls{static_cast<int>(k), combo_name(config, combo), world.prototype(config, seed, combo)};
    Rng rng(derive_seed(seed, "examples/pretrain", k));
    add_examples(corpus, cls, Split::kTrain, config.pretrain_per_class, rng);
    add_examples(corpus, cls, Split::kTest, kPretrainHeldOut, rng);
    corpus.classes.push_back(std::move(cls));
  }
  return corpus;
}

std::vector<CaptionedImage> captioned_pairs(const SyntheticCorpus& corpus, Split split) {
  std::vector<CaptionedImage> out;
  for (const Example& e : corpus.examples) {
    if (e.split != split) continue;
    out.push_back({e.image, caption_tokens(corpus.classes[static_cast<std::size_t>(e.class_id)].name), e.class_id});
  }
  return out;
}

FewShotSplit few_shot_sample(const SyntheticCorpus& corpus, std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw InvalidInputError("few_shot_sample: shots must be positive");
  std::map<int, std::vector<std::size_t>> pool;
  for (const ClassInfo& c : corpus.classes) pool[c.class_id];
  for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
    if (corpus.examples[i].split == Split::kTrain) pool[corpus.examples[i].class_id].push_back(i);
  }
  FewShotSplit split;
  for (auto& [cls, candidates] : pool) {
    if (candidates.size() < shots) {
      throw DataError("few_shot_sample: class " + std::to_string(cls) + " has " + std::to_string(candidates.size()) +
                      " train examples, " + std::to_string(shots) + " requested");
    }
    Rng rng(derive_seed(seed, "few_shot", static_cast<std::uint64_t>(cls)));
    rng.shuffle(candidates.begin(), candidates.end());
    std::vector<std::size_t> chosen(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(shots));
    std::sort(chosen.begin(), chosen.end());
    split.train.insert(split.train.end(), chosen.begin(), chosen.end());
  }
  split.test = corpus.indices(Split::kTest);
  return split;
}

BaseNewSplit base_new_split(std::span<const int> class_ids, std::uint64_t seed) {
  if (class_ids.size() < 2) throw ConfigError("base_new_split: needs at least two classes");
  std::vector<int> ids(class_ids.begin(), class_ids.end());
  if (std::set<int>(ids.begin(), ids.end()).size() != ids.size()) {
    throw InvalidInputError("base_new_split: duplicate class ids");
  }
  Rng rng(derive_seed(seed, "base_new"));
  rng.shuffle(ids.begin(), ids.end());
  const std::size_t base_count = (ids.size() + 1) / 2;
  BaseNewSplit split;
  split.base.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(base_count));
  split.fresh.assign(ids.begin() + static_cast<std::ptrdiff_t>(base_count), ids.end());
  std::sort(split.base.begin(), split.base.end());
  std::sort(split.fresh.begin(), split.fresh.end());
  return split;
}

std::string_view shift_name(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::kNoiseBoost:
      return "noise_boost";
    case ShiftKind::kPatchPermute:
      return "patch_permute";
    case ShiftKind::kPrototypeDrift:
      return "prototype_drift";
    case ShiftKind::kContrastScale:
      return "contrast_scale";
  }
  throw InternalError("unknown shift kind");
}

ShiftKind parse_shift(std::string_view name) {
  for (ShiftKind k : {ShiftKind::kNoiseBoost, ShiftKind::kPatchPermute, ShiftKind::kPrototypeDrift,
                      ShiftKind::kContrastScale}) {
    if (shift_name(k) == name) return k;
  }
  throw ConfigError("unknown domain shift '" + std::string(name) + "'");
}

SyntheticCorpus domain_shift(const SyntheticCorpus& corpus, ShiftKind kind, double severity, std::uint64_t seed) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw ConfigError("domain_shift: severity must lie in [0, 1]");
  SyntheticCorpus out = corpus;
  for (Example& e : out.examples) e.image = e.image.detach();
  if (severity == 0.0) return out;

  const std::size_t M = corpus.config.patches;
  const std::size_t D = corpus.config.patch_dim;
  std::map<int, Tensor> drift;
  if (kind == ShiftKind::kPrototypeDrift) {
    for (const ClassInfo& c : corpus.classes) {
      drift[c.class_id] =
          normal_grid(derive_seed(seed, "shift/drift", static_cast<std::uint64_t>(c.class_id)), M, D, kDriftScale);
    }
  }
  for (std::size_t i = 0; i < out.examples.size(); ++i) {
    Example& e = out.examples[i];
    auto v = e.image.mutable_values();
    Rng rng(derive_seed(seed, std::string("shift/") + std::string(shift_name(kind)), i));
    switch (kind) {
      case ShiftKind::kNoiseBoost:
        for (double& x : v) x += rng.normal(0.0, severity * kNoiseBoostSigma);
        break;
      case ShiftKind::kPatchPermute: {
        // Shuffle a severity-sized subset of patch slots among themselves.
        std::vector<std::size_t> slots(M);
        std::iota(slots.begin(), slots.end(), 0);
        rng.shuffle(slots.begin(), slots.end());
        const auto moved = static_cast<std::size_t>(std::llround(severity * static_cast<double>(M)));
        std::vector<std::size_t> chosen(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(moved));
        std::vector<std::size_t> targets = chosen;
        rng.shuffle(targets.begin(), targets.end());
        const std::vector<double> original(v.begin(), v.end());
        for (std::size_t s = 0; s < chosen.size(); ++s) {
          std::copy_n(original.begin() + static_cast<std::ptrdiff_t>(chosen[s] * D), D,
                      v.begin() + static_cast<std::ptrdiff_t>(targets[s] * D));
        }
        break;
      }
      case ShiftKind::kPrototypeDrift: {
        const auto d = drift.at(e.class_id).values();
        for (std::size_t k = 0; k < v.size(); ++k) v[k] += severity * d[k];
        break;
      }
      case ShiftKind::kContrastScale: {
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        const double factor = 1.0 - severity * (1.0 - kMinContrast);
        for (double& x : v) x = mean + factor * (x - mean);
        break;
      }
    }
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const SyntheticCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const nlohmann::json header = {{"format", kCorpusFormat},
                                 {"version", kCorpusVersion},
                                 {"config", data_config_to_json(corpus.config)},
                                 {"seed", corpus.seed}};
  out << header.dump() << '\n';
  const std::size_t M = corpus.config.patches;
  const std::size_t D = corpus.config.patch_dim;
  for (const Example& e : corpus.examples) {
    const auto v = e.image.values();
    nlohmann::json patches = nlohmann::json::array();
    for (std::size_t p = 0; p < M; ++p) {
      patches.push_back(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(p * D),
                                            v.begin() + static_cast<std::ptrdiff_t>((p + 1) * D)));
    }
    const nlohmann::json record = {{"class_id", e.class_id},
                                   {"name_tokens", corpus.classes[static_cast<std::size_t>(e.class_id)].name},
                                   {"split", split_name(e.split)},
                                   {"patches", std::move(patches)}};
    out << record.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

SyntheticCorpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string where = "corpus " + path.string();
  std::string line;
  if (!std::getline(in, line)) throw DataError(where + ": missing header");

  SyntheticCorpus corpus;
  std::size_t line_no = 1;
  try {
    const nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != kCorpusFormat) throw DataError("unknown format");
    if (header.at("version").get<int>() != kCorpusVersion) {
      throw DataError("unsupported version " + header.at("version").dump());
    }
    corpus.config = data_config_from_json(header.at("config"));
    corpus.seed = header.at("seed").get<std::uint64_t>();

    std::map<int, std::vector<int>> names;
    const std::size_t M = corpus.config.patches;
    const std::size_t D = corpus.config.patch_dim;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const nlohmann::json r = nlohmann::json::parse(line);
      Example e;
      e.class_id = r.at("class_id").get<int>();
      e.split = parse_split(r.at("split").get<std::string>());
      const auto name = r.at("name_tokens").get<std::vector<int>>();
      const auto [it, fresh] = names.emplace(e.class_id, name);
      if (!fresh && it->second != name) throw DataError("class " + std::to_string(e.class_id) + " has two names");
      const auto rows = r.at("patches").get<std::vector<std::vector<double>>>();
      if (rows.size() != M) throw DataError("expected " + std::to_string(M) + " patches");
      std::vector<double> values;
      for (const auto& row : rows) {
        if (row.size() != D) throw DataError("expected patches of width " + std::to_string(D));
        values.insert(values.end(), row.begin(), row.end());
      }
      e.image = Tensor({M, D}, std::move(values));
      corpus.examples.push_back(std::move(e));
    }
    int expected = 0;
    for (auto& [id, name] : names) {
      if (id != expected++) throw DataError("class ids are not contiguous from 0");
      corpus.classes.push_back({id, std::move(name), Tensor()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + " line " + std::to_string(line_no) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(where + " line " + std::to_string(line_no) + ": " + e.what());
  }
  return corpus;
}

}  // namespace mudpt
