#include "mudpt/prompting/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "mudpt/errors.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

namespace {

constexpr double kPromptInitStd = 0.02;

Tensor normal_tensor(std::uint64_t seed, const std::string& path, Shape shape, double stddev) {
  Rng rng(derive_seed(seed, path));
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev));
}

Tensor fan_in_tensor(std::uint64_t seed, const std::string& path, std::size_t rows, std::size_t cols) {
  return normal_tensor(seed, path, {rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)));
}

void require_depth(std::size_t depth, std::size_t layers) {
  if (depth > layers) {
    throw ConfigError("prompt depth " + std::to_string(depth) + " exceeds the " + std::to_string(layers) +
                      " encoder layers");
  }
}

}  // namespace

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::kMudpt:
      return "mudpt";
    case Mode::kTextOnly:
      return "text_only";
    case Mode::kVisualOnly:
      return "visual_only";
    case Mode::kIndependentMultimodal:
      return "independent_multimodal";
    case Mode::kZeroShot:
      return "zero_shot";
  }
  throw InternalError("unknown mode");
}

Mode parse_mode(std::string_view name) {
  for (Mode m : {Mode::kMudpt, Mode::kTextOnly, Mode::kVisualOnly, Mode::kIndependentMultimodal, Mode::kZeroShot}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

bool mode_learns(Mode mode) { return mode != Mode::kZeroShot; }

PromptConfig PromptConfig::for_mode(Mode mode, std::size_t length, std::size_t depth) {
  PromptConfig c;
  c.depth = depth;
  const bool text = mode == Mode::kMudpt || mode == Mode::kTextOnly || mode == Mode::kIndependentMultimodal;
  const bool visual = mode == Mode::kMudpt || mode == Mode::kVisualOnly || mode == Mode::kIndependentMultimodal;
  c.text_length = text ? length : 0;
  c.visual_length = visual ? length : 0;
  c.injection = mode == Mode::kMudpt;
  return c;
}

void PromptConfig::validate(const ModelDims& dims) const {
  if (depth == 0) throw ConfigError("prompt depth must be at least 1");
  require_depth(depth, dims.layers);
  if (injection) {
    if (text_length == 0 || visual_length == 0) throw ConfigError("injection needs both text and visual prompts");
    if (text_length != visual_length) throw ConfigError("injection needs equal text and visual prompt lengths");
    if (joint_width == 0 || joint_heads == 0 || joint_width % joint_heads != 0) {
      throw ConfigError("injection joint_width must be a positive multiple of joint_heads");
    }
  }
}

void PromptConfig::check_mode(Mode mode) const {
  const bool text = text_length > 0;
  const bool visual = visual_length > 0;
  bool ok = false;
  switch (mode) {
    case Mode::kMudpt:
      ok = text && visual && injection;
      break;
    case Mode::kTextOnly:
      ok = text && !visual && !injection;
      break;
    case Mode::kVisualOnly:
      ok = !text && visual && !injection;
      break;
    case Mode::kIndependentMultimodal:
      ok = text && visual && !injection;
      break;
    case Mode::kZeroShot:
      ok = !text && !visual && !injection;
      break;
  }
  if (!ok) {
    throw ConfigError("prompt configuration (text " + std::to_string(text_length) + ", visual " +
                      std::to_string(visual_length) + ", injection " + (injection ? "on" : "off") +
                      ") contradicts mode " + std::string(mode_name(mode)));
  }
}

std::vector<NamedTensor> InjectionParams::named_parameters() const {
  return {{"injection/text_in", text_in},
          {"injection/visual_in", visual_in},
          {"injection/attn/query", attention.query},
          {"injection/attn/key", attention.key},
          {"injection/attn/value", attention.value},
          {"injection/attn/output", attention.output},
          {"injection/to_text", to_text},
          {"injection/to_visual", to_visual}};
}

PromptParams PromptParams::init(const PromptConfig& config, const Backbone& backbone,
                                std::span<const int> init_tokens, std::uint64_t seed) {
  const ModelDims& dims = backbone.dims();
  config.validate(dims);
  PromptParams p;
  p.config_ = config;
  const std::size_t L = config.depth;

  if (config.text_length > 0) {
    const std::size_t n = config.text_length;
    p.stack_.text = normal_tensor(seed, "prompts/text", {L, n, dims.text_width}, kPromptInitStd);
    const std::size_t copied = std::min(n, init_tokens.size());
    const Tensor& table = backbone.text().token_embedding;
    auto dst = p.stack_.text.mutable_values();
    for (std::size_t r = 0; r < copied; ++r) {
      const int id = init_tokens[r];
      if (id < 0 || static_cast<std::size_t>(id) >= dims.vocab_size) {
        throw VocabularyError("prompt init token " + std::to_string(id) + " outside vocabulary");
      }
      for (std::size_t c = 0; c < dims.text_width; ++c) {
        dst[r * dims.text_width + c] = table.at(static_cast<std::size_t>(id), c);
      }
    }
  }
  if (config.visual_length > 0) {
    p.stack_.visual =
        normal_tensor(seed, "prompts/visual", {L, config.visual_length, dims.image_width}, kPromptInitStd);
  }
  if (config.injection) {
    const std::size_t dj = config.joint_width;
    InjectionParams inj;
    inj.text_in = fan_in_tensor(seed, "injection/text_in", dims.text_width, dj);
    inj.visual_in = fan_in_tensor(seed, "injection/visual_in", dims.image_width, dj);
    inj.attention = {fan_in_tensor(seed, "injection/attn/query", dj, dj),
                     fan_in_tensor(seed, "injection/attn/key", dj, dj),
                     fan_in_tensor(seed, "injection/attn/value", dj, dj),
                     fan_in_tensor(seed, "injection/attn/output", dj, dj), config.joint_heads};
    inj.to_text = fan_in_tensor(seed, "injection/to_text", dj, dims.text_width);
    inj.to_visual = fan_in_tensor(seed, "injection/to_visual", dj, dims.image_width);
    p.injection_ = std::move(inj);
  }
  return p;
}

std::vector<NamedTensor> PromptParams::named_parameters() const {
  std::vector<NamedTensor> out;
  if (stack_.text.defined()) out.push_back({"prompts/text", stack_.text});
  if (stack_.visual.defined()) out.push_back({"prompts/visual", stack_.visual});
  if (injection_) {
    for (NamedTensor& t : injection_->named_parameters()) out.push_back(std::move(t));
  }
  return out;
}

std::size_t PromptParams::parameter_count() const {
  std::size_t n = 0;
  for (const NamedTensor& t : named_parameters()) n += t.tensor.size();
  return n;
}

void PromptParams::set_trainable(bool on) {
  for (NamedTensor& t : named_parameters()) {
    t.tensor.set_requires_grad(on);
    t.tensor.zero_grad();
  }
}

void PromptParams::load_values(std::span<const NamedTensor> params) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& p : params) by_name[p.name] = &p.tensor;
  auto own = named_parameters();
  if (own.size() != by_name.size()) throw DataError("prompt checkpoint: tensor set does not match the configuration");
  for (NamedTensor& p : own) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("prompt checkpoint: missing tensor " + p.name);
    if (it->second->shape() != p.tensor.shape()) throw DataError("prompt checkpoint: shape mismatch for " + p.name);
    auto src = it->second->values();
    std::copy(src.begin(), src.end(), p.tensor.mutable_values().begin());
  }
}

CrossPrompts inject(const Tensor& text, const Tensor& visual, const InjectionParams& params) {
  if (text.rank() != 3 || visual.rank() != 3) throw ShapeError("inject: prompt stacks must be L x n x d");
  if (text.dim(0) != visual.dim(0) || text.dim(1) != visual.dim(1)) {
    throw ShapeError("inject: stacks " + shape_string(text.shape()) + " and " + shape_string(visual.shape()) +
                     " differ in depth or length");
  }
  std::vector<Tensor> text_derived, visual_derived;
  for (std::size_t i = 0; i < text.dim(0); ++i) {
    const Tensor t = ops::matmul(ops::select(text, i), params.text_in);
    const Tensor v = ops::matmul(ops::select(visual, i), params.visual_in);
    visual_derived.push_back(ops::matmul(multi_head_attention(t, v, v, params.attention), params.to_text));
    text_derived.push_back(ops::matmul(multi_head_attention(v, t, t, params.attention), params.to_visual));
  }
  return {ops::stack(text_derived), ops::stack(visual_derived)};
}

FusedPrompts fuse(const Tensor& text, const Tensor& visual, const Tensor& text_derived, const Tensor& visual_derived) {
  return {ops::add(text, visual_derived), ops::add(visual, text_derived)};
}

PromptContext prepare_prompts(const PromptParams& params) {
  const PromptStack& s = params.stack();
  const std::size_t L = params.config().depth;
  Tensor text = s.text;
  Tensor visual = s.visual;
  if (params.injection()) {
    const CrossPrompts cross = inject(s.text, s.visual, *params.injection());
    const FusedPrompts fused = fuse(s.text, s.visual, cross.text_derived, cross.visual_derived);
    text = fused.text;
    visual = fused.visual;
  }
  PromptContext ctx;
  for (std::size_t i = 0; i < L; ++i) {
    // Layer 0 always consumes the raw learnable block; the fused block 0 is unused.
    if (s.text.defined()) ctx.text.push_back(ops::select(i == 0 ? s.text : text, i));
    if (s.visual.defined()) ctx.visual.push_back(ops::select(i == 0 ? s.visual : visual, i));
  }
  return ctx;
}

Tensor prompted_encode_text(const TextEncoder& encoder, const PromptContext& prompts, std::span<const int> class_tokens,
                            ForwardProbe* probe) {
  const std::size_t n = prompts.text_length();
  if (n == 0) return encode_text(encoder, embed_text(encoder, class_tokens), probe);
  const std::size_t L = prompts.text.size();
  require_depth(L, encoder.layers.size());

  const Tensor words = embed_text(encoder, class_tokens, n);
  const std::size_t word_rows = words.rows();
  std::vector<Tensor> parts{prompts.text[0], words};
  Tensor x = ops::concat_rows(parts);
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    if (i >= 1 && i < L) {
      parts = {prompts.text[i], ops::slice_rows(x, n, word_rows)};
      x = ops::concat_rows(parts);
      if (probe) ++probe->prompt_replacements;
    }
    x = apply_layer_probed(encoder.layers[i], i, x, probe);
  }
  return project_text(encoder, x);
}

Tensor prompted_encode_image(const ImageEncoder& encoder, const PromptContext& prompts, const Tensor& raw_patches,
                             std::size_t patches, ForwardProbe* probe) {
  const ImageTokens tokens = embed_image(encoder, raw_patches, patches);
  const std::size_t n = prompts.visual_length();
  if (n == 0) return encode_image(encoder, tokens, probe);
  const std::size_t L = prompts.visual.size();
  require_depth(L, encoder.layers.size());

  std::vector<Tensor> parts{tokens.class_token, prompts.visual[0], tokens.patches};
  Tensor x = ops::concat_rows(parts);
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    if (i >= 1 && i < L) {
      parts = {ops::slice_rows(x, 0, 1), prompts.visual[i], ops::slice_rows(x, 1 + n, patches)};
      x = ops::concat_rows(parts);
      if (probe) ++probe->prompt_replacements;
    }
    x = apply_layer_probed(encoder.layers[i], i, x, probe);
  }
  return project_image(encoder, x);
}

std::size_t ParamPartition::trainable_count() const {
  std::size_t n = 0;
  for (const NamedTensor& t : trainable) n += t.tensor.size();
  return n;
}

ParamPartition trainable_mask(const Backbone& backbone, const PromptParams& prompts) {
  ParamPartition part;
  part.frozen = backbone.named_parameters();
  part.trainable = prompts.named_parameters();
  std::set<std::string> names;
  std::set<const detail::Node*> storage;
  for (const auto* set : {&part.frozen, &part.trainable}) {
    for (const NamedTensor& t : *set) {
      if (!names.insert(t.name).second) throw InternalError("parameter " + t.name + " classified twice");
      if (!storage.insert(t.tensor.node().get()).second) {
        throw InternalError("parameter " + t.name + " shares storage with another parameter");
      }
    }
  }
  for (const NamedTensor& t : part.frozen) {
    if (t.tensor.requires_grad()) throw InternalError("backbone parameter " + t.name + " is marked trainable");
  }
  return part;
}

namespace {

nlohmann::json prompt_config_to_json(const PromptConfig& c) {
  return {{"text_length", c.text_length}, {"visual_length", c.visual_length}, {"depth", c.depth},
          {"injection", c.injection},     {"joint_width", c.joint_width},     {"joint_heads", c.joint_heads}};
}

PromptConfig prompt_config_from_json(const nlohmann::json& j) {
  PromptConfig c;
  c.text_length = j.at("text_length").get<std::size_t>();
  c.visual_length = j.at("visual_length").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.injection = j.at("injection").get<bool>();
  c.joint_width = j.at("joint_width").get<std::size_t>();
  c.joint_heads = j.at("joint_heads").get<std::size_t>();
  return c;
}

}  // namespace

Checkpoint prompts_checkpoint(const PromptParams& prompts, const Backbone& backbone) {
  Checkpoint c;
  c.kind = "prompts";
  c.metadata = {{"config", prompt_config_to_json(prompts.config())}, {"backbone_hash", snapshot(backbone).hash}};
  for (const NamedTensor& t : prompts.named_parameters()) c.tensors.push_back({t.name, t.tensor.detach()});
  return c;
}

PromptParams prompts_from_checkpoint(const Checkpoint& checkpoint, const Backbone& backbone) {
  if (checkpoint.kind != "prompts") throw DataError("checkpoint: expected prompts, got '" + checkpoint.kind + "'");
  PromptConfig config;
  std::string recorded;
  try {
    config = prompt_config_from_json(checkpoint.metadata.at("config"));
    recorded = checkpoint.metadata.at("backbone_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("prompt checkpoint: malformed metadata: ") + e.what());
  }
  const std::string actual = snapshot(backbone).hash;
  if (recorded != actual) {
    throw DataError("prompt checkpoint was tuned against backbone " + recorded + ", not " + actual);
  }
  PromptParams p = PromptParams::init(config, backbone, {}, 0);
  p.load_values(checkpoint.tensors);
  return p;
}

}  // namespace mudpt
