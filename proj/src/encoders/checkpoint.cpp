#include "mudpt/encoders/checkpoint.hpp"

#include <fstream>
#include <set>

#include "mudpt/errors.hpp"

namespace mudpt {

namespace {

constexpr const char* kFormat = "mudpt-checkpoint";

}  // namespace

nlohmann::json checkpoint_to_json(const Checkpoint& checkpoint) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const NamedTensor& t : checkpoint.tensors) {
    const auto v = t.tensor.values();
    tensors[t.name] = {{"shape", t.tensor.shape()}, {"values", std::vector<double>(v.begin(), v.end())}};
  }
  return {{"format", kFormat},
          {"version", Checkpoint::kVersion},
          {"kind", checkpoint.kind},
          {"hash", content_hash(checkpoint.tensors)},
          {"metadata", checkpoint.metadata},
          {"tensors", std::move(tensors)}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format").get<std::string>() != kFormat) throw DataError("checkpoint: unknown format");
    if (doc.at("version").get<int>() != Checkpoint::kVersion) {
      throw DataError("checkpoint: unsupported version " + doc.at("version").dump());
    }
    Checkpoint c;
    c.kind = doc.at("kind").get<std::string>();
    c.metadata = doc.at("metadata");
    for (const auto& [name, entry] : doc.at("tensors").items()) {
      c.tensors.push_back({name, Tensor(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>())});
    }
    if (content_hash(c.tensors) != doc.at("hash").get<std::string>()) {
      throw DataError("checkpoint: content hash mismatch");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed document: ") + e.what());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << checkpoint_to_json(checkpoint).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(doc);
}

nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"text_width", d.text_width}, {"image_width", d.image_width},         {"embed_dim", d.embed_dim},
          {"layers", d.layers},         {"heads", d.heads},                     {"vocab_size", d.vocab_size},
          {"patches", d.patches},       {"patch_dim", d.patch_dim},             {"max_text_length", d.max_text_length},
          {"mlp_ratio", d.mlp_ratio},   {"eos_token", d.eos_token}};
}

ModelDims dims_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKnown{"text_width", "image_width", "embed_dim",       "layers",
                                            "heads",      "vocab_size",  "patches",         "patch_dim",
                                            "max_text_length", "mlp_ratio", "eos_token"};
  if (!j.is_object()) throw ConfigError("model: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!kKnown.count(key)) throw ConfigError("model: unknown field '" + key + "'");
  }
  ModelDims d;
  try {
    d.text_width = j.value("text_width", d.text_width);
    d.image_width = j.value("image_width", d.image_width);
    d.embed_dim = j.value("embed_dim", d.embed_dim);
    d.layers = j.value("layers", d.layers);
    d.heads = j.value("heads", d.heads);
    d.vocab_size = j.value("vocab_size", d.vocab_size);
    d.patches = j.value("patches", d.patches);
    d.patch_dim = j.value("patch_dim", d.patch_dim);
    d.max_text_length = j.value("max_text_length", d.max_text_length);
    d.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    d.eos_token = j.value("eos_token", d.eos_token);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  d.validate();
  return d;
}

Checkpoint backbone_checkpoint(const Backbone& backbone) {
  Checkpoint c;
  c.kind = "backbone";
  c.metadata = {{"dims", dims_to_json(backbone.dims())}};
  for (const NamedTensor& p : backbone.named_parameters()) c.tensors.push_back({p.name, p.tensor.detach()});
  return c;
}

Backbone backbone_from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "backbone") throw DataError("checkpoint: expected a backbone, got '" + checkpoint.kind + "'");
  Backbone b = Backbone::init(dims_from_json(checkpoint.metadata.at("dims")), 0);
  b.load_values(checkpoint.tensors);
  return b;
}

}  // namespace mudpt
