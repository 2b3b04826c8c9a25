#include "mudpt/cli/config.hpp"

#include <fstream>
#include <set>

#include "mudpt/encoders/checkpoint.hpp"
#include "mudpt/errors.hpp"

namespace mudpt {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::string_view section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(std::string(section) + ": expected an object");
  const std::set<std::string> names(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!names.count(key)) throw ConfigError(std::string(section) + ": unknown field '" + key + "'");
  }
}

/// Reads `key` into `out` when present, reporting type errors as ConfigError.
template <typename T>
void read(const json& j, std::string_view section, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(section) + "." + key + ": wrong type " + j.at(key).dump());
  }
}

json shift_to_json(const ShiftSpec& s) { return {{"kind", shift_name(s.kind)}, {"severity", s.severity}}; }

ShiftSpec shift_from_json(const json& j) {
  reject_unknown(j, "evaluation.shifts", {"kind", "severity"});
  ShiftSpec s;
  std::string kind = std::string(shift_name(s.kind));
  read(j, "evaluation.shifts", "kind", kind);
  s.kind = parse_shift(kind);
  read(j, "evaluation.shifts", "severity", s.severity);
  return s;
}

}  // namespace

std::string_view protocol_name(Protocol protocol) {
  switch (protocol) {
    case Protocol::kFewShot:
      return "few_shot";
    case Protocol::kBaseToNew:
      return "base_to_new";
    case Protocol::kCrossDataset:
      return "cross_dataset";
    case Protocol::kDomainGen:
      return "domain_gen";
  }
  throw InternalError("unknown protocol");
}

Protocol parse_protocol(std::string_view name) {
  for (Protocol p : {Protocol::kFewShot, Protocol::kBaseToNew, Protocol::kCrossDataset, Protocol::kDomainGen}) {
    if (protocol_name(p) == name) return p;
  }
  throw ConfigError("unknown protocol '" + std::string(name) + "'");
}

PromptConfig PromptSettings::for_mode(Mode mode) const {
  PromptConfig c = PromptConfig::for_mode(mode, length, depth);
  c.joint_width = joint_width;
  c.joint_heads = joint_heads;
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  schedule.validate();
  pretrain.schedule.validate();
  if (modes.empty()) throw ConfigError("mode: at least one mode is required");
  if (std::set<Mode>(modes.begin(), modes.end()).size() != modes.size()) throw ConfigError("mode: duplicate modes");
  for (Mode m : modes) prompt.for_mode(m).validate(model);

  if (model.patches != data.patches || model.patch_dim != data.patch_dim) {
    throw ConfigError("model and data disagree on the patch grid");
  }
  if (data.vocabulary().size() > model.vocab_size) {
    throw ConfigError("data vocabulary needs " + std::to_string(data.vocabulary().size()) + " ids, model has " +
                      std::to_string(model.vocab_size));
  }
  if (model.eos_token != Vocabulary::kEos) throw ConfigError("model.eos_token must match the data vocabulary");
  const std::size_t longest = std::max(prompt.length, Vocabulary::template_tokens().size()) + 3;
  if (longest > model.max_text_length) {
    throw ConfigError("model.max_text_length " + std::to_string(model.max_text_length) + " cannot hold " +
                      std::to_string(longest) + " text positions");
  }
  if (evaluation.shots == 0) throw ConfigError("evaluation.shots must be positive");
  if (evaluation.shots > data.train_per_class) {
    throw ConfigError("evaluation.shots " + std::to_string(evaluation.shots) + " exceeds data.train_per_class " +
                      std::to_string(data.train_per_class));
  }

  switch (protocol) {
    case Protocol::kFewShot:
      break;
    case Protocol::kBaseToNew:
      if (data.classes < 2) throw ConfigError("base_to_new needs at least two classes");
      break;
    case Protocol::kCrossDataset: {
      if (evaluation.datasets.empty()) throw ConfigError("cross_dataset needs evaluation.datasets");
      for (std::size_t d : evaluation.datasets) {
        if (d == data.dataset) throw ConfigError("cross_dataset target equals the source dataset");
        DataConfig target = data;
        target.dataset = d;
        target.validate();
      }
      break;
    }
    case Protocol::kDomainGen:
      if (evaluation.shifts.empty()) throw ConfigError("domain_gen needs evaluation.shifts");
      for (const ShiftSpec& s : evaluation.shifts) {
        if (!(s.severity >= 0.0 && s.severity <= 1.0)) throw ConfigError("shift severity must lie in [0, 1]");
      }
      break;
  }
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  json modes = json::array();
  for (Mode m : c.modes) modes.push_back(mode_name(m));
  json shifts = json::array();
  for (const ShiftSpec& s : c.evaluation.shifts) shifts.push_back(shift_to_json(s));
  return {
      {"version", ExperimentConfig::kVersion},
      {"mode", c.modes.size() == 1 ? modes[0] : modes},
      {"protocol", protocol_name(c.protocol)},
      {"seed", c.seed},
      {"model", dims_to_json(c.model)},
      {"prompt",
       {{"length", c.prompt.length},
        {"depth", c.prompt.depth},
        {"joint_width", c.prompt.joint_width},
        {"joint_heads", c.prompt.joint_heads}}},
      {"schedule",
       {{"learning_rate", c.schedule.learning_rate},
        {"epochs", c.schedule.epochs},
        {"batch_size", c.schedule.batch_size},
        {"max_steps", c.schedule.max_steps}}},
      {"pretrain",
       {{"steps", c.pretrain.schedule.steps},
        {"batch_size", c.pretrain.schedule.batch_size},
        {"learning_rate", c.pretrain.schedule.learning_rate},
        {"checkpoint", c.pretrain.checkpoint}}},
      {"data", data_config_to_json(c.data)},
      {"evaluation", {{"shots", c.evaluation.shots}, {"datasets", c.evaluation.datasets}, {"shifts", shifts}}},
      {"output", c.output},
  };
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
  reject_unknown(doc, "config",
                 {"version", "mode", "protocol", "seed", "model", "prompt", "schedule", "pretrain", "data", "evaluation",
                  "output"});
  if (!doc.contains("version")) throw ConfigError("config: missing version");
  int version = 0;
  read(doc, "config", "version", version);
  if (version != ExperimentConfig::kVersion) throw ConfigError("config: unsupported version " + doc["version"].dump());

  ExperimentConfig c;
  if (doc.contains("mode")) {
    const json& m = doc.at("mode");
    std::vector<std::string> names;
    if (m.is_string()) {
      names.push_back(m.get<std::string>());
    } else {
      read(doc, "config", "mode", names);
    }
    c.modes.clear();
    for (const std::string& n : names) c.modes.push_back(parse_mode(n));
  }
  std::string protocol(protocol_name(c.protocol));
  read(doc, "config", "protocol", protocol);
  c.protocol = parse_protocol(protocol);
  read(doc, "config", "seed", c.seed);
  if (doc.contains("model")) c.model = dims_from_json(doc.at("model"));

  if (doc.contains("prompt")) {
    const json& p = doc.at("prompt");
    reject_unknown(p, "prompt", {"length", "depth", "joint_width", "joint_heads"});
    read(p, "prompt", "length", c.prompt.length);
    read(p, "prompt", "depth", c.prompt.depth);
    read(p, "prompt", "joint_width", c.prompt.joint_width);
    read(p, "prompt", "joint_heads", c.prompt.joint_heads);
  }
  if (doc.contains("schedule")) {
    const json& s = doc.at("schedule");
    reject_unknown(s, "schedule", {"learning_rate", "epochs", "batch_size", "max_steps"});
    read(s, "schedule", "learning_rate", c.schedule.learning_rate);
    read(s, "schedule", "epochs", c.schedule.epochs);
    read(s, "schedule", "batch_size", c.schedule.batch_size);
    read(s, "schedule", "max_steps", c.schedule.max_steps);
  }
  if (doc.contains("pretrain")) {
    const json& p = doc.at("pretrain");
    reject_unknown(p, "pretrain", {"steps", "batch_size", "learning_rate", "checkpoint"});
    read(p, "pretrain", "steps", c.pretrain.schedule.steps);
    read(p, "pretrain", "batch_size", c.pretrain.schedule.batch_size);
    read(p, "pretrain", "learning_rate", c.pretrain.schedule.learning_rate);
    read(p, "pretrain", "checkpoint", c.pretrain.checkpoint);
  }
  if (doc.contains("data")) c.data = data_config_from_json(doc.at("data"));
  if (doc.contains("evaluation")) {
    const json& e = doc.at("evaluation");
    reject_unknown(e, "evaluation", {"shots", "datasets", "shifts"});
    read(e, "evaluation", "shots", c.evaluation.shots);
    read(e, "evaluation", "datasets", c.evaluation.datasets);
    if (e.contains("shifts")) {
      if (!e.at("shifts").is_array()) throw ConfigError("evaluation.shifts: expected an array");
      c.evaluation.shifts.clear();
      for (const json& s : e.at("shifts")) c.evaluation.shifts.push_back(shift_from_json(s));
    }
  }
  read(doc, "config", "output", c.output);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

}  // namespace mudpt
