#include "mudpt/encoders/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "mudpt/errors.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

void ModelDims::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model: ") + name + " must be positive");
  };
  positive(text_width, "text_width");
  positive(image_width, "image_width");
  positive(embed_dim, "embed_dim");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(vocab_size, "vocab_size");
  positive(patches, "patches");
  positive(patch_dim, "patch_dim");
  positive(max_text_length, "max_text_length");
  positive(mlp_ratio, "mlp_ratio");
  if (text_width % heads != 0 || image_width % heads != 0) {
    throw ConfigError("model: text_width and image_width must be divisible by heads");
  }
  if (eos_token < 0 || static_cast<std::size_t>(eos_token) >= vocab_size) {
    throw ConfigError("model: eos_token outside the vocabulary");
  }
}

namespace {

constexpr double kInitStd = 0.02;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : seed_(seed) {}

  Tensor normal(const std::string& path, Shape shape, double stddev = kInitStd) const {
    Rng rng(derive_seed(seed_, path));
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), rng.normal_vector(n, stddev));
  }

  /// Layer weights scale with 1/sqrt(fan_in) so tokens mix from the first step.
  Tensor fan_in(const std::string& path, std::size_t rows, std::size_t cols) const {
    return normal(path, {rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)));
  }

 private:
  std::uint64_t seed_;
};

TransformerLayer make_layer(const Initializer& init, const std::string& prefix, std::size_t width, std::size_t heads,
                            std::size_t ratio) {
  TransformerLayer l;
  l.ln1_gamma = Tensor({width}, 1.0);
  l.ln1_beta = Tensor({width}, 0.0);
  l.attention = {init.fan_in(prefix + "/attn/query", width, width), init.fan_in(prefix + "/attn/key", width, width),
                 init.fan_in(prefix + "/attn/value", width, width), init.fan_in(prefix + "/attn/output", width, width),
                 heads};
  l.ln2_gamma = Tensor({width}, 1.0);
  l.ln2_beta = Tensor({width}, 0.0);
  l.mlp_in = init.fan_in(prefix + "/mlp/in", width, ratio * width);
  l.mlp_in_bias = Tensor({ratio * width}, 0.0);
  l.mlp_out = init.fan_in(prefix + "/mlp/out", ratio * width, width);
  l.mlp_out_bias = Tensor({width}, 0.0);
  return l;
}

void append_layer(std::vector<NamedTensor>& out, const std::string& prefix, const TransformerLayer& l) {
  out.push_back({prefix + "/ln1/gamma", l.ln1_gamma});
  out.push_back({prefix + "/ln1/beta", l.ln1_beta});
  out.push_back({prefix + "/attn/query", l.attention.query});
  out.push_back({prefix + "/attn/key", l.attention.key});
  out.push_back({prefix + "/attn/value", l.attention.value});
  out.push_back({prefix + "/attn/output", l.attention.output});
  out.push_back({prefix + "/ln2/gamma", l.ln2_gamma});
  out.push_back({prefix + "/ln2/beta", l.ln2_beta});
  out.push_back({prefix + "/mlp/in", l.mlp_in});
  out.push_back({prefix + "/mlp/in_bias", l.mlp_in_bias});
  out.push_back({prefix + "/mlp/out", l.mlp_out});
  out.push_back({prefix + "/mlp/out_bias", l.mlp_out_bias});
}

Tensor run_layers(const std::vector<TransformerLayer>& layers, Tensor x, ForwardProbe* probe) {
  for (std::size_t i = 0; i < layers.size(); ++i) x = apply_layer_probed(layers[i], i, x, probe);
  return x;
}

}  // namespace

Tensor apply_layer(const TransformerLayer& layer, const Tensor& x) {
  const Tensor h = ops::layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
  const Tensor attended = ops::add(x, multi_head_attention(h, h, h, layer.attention));
  const Tensor h2 = ops::layer_norm(attended, layer.ln2_gamma, layer.ln2_beta);
  const Tensor hidden = ops::gelu(ops::add_row(ops::matmul(h2, layer.mlp_in), layer.mlp_in_bias));
  return ops::add(attended, ops::add_row(ops::matmul(hidden, layer.mlp_out), layer.mlp_out_bias));
}

Tensor apply_layer_probed(const TransformerLayer& layer, std::size_t index, const Tensor& x, ForwardProbe* probe) {
  if (!probe) return apply_layer(layer, x);
  ++probe->layer_applications;
  probe->sequence_lengths.push_back(x.rows());
  Tensor out = apply_layer(layer, x);
  if (probe->tap) out = probe->tap(index, out);
  if (probe->capture_outputs) probe->outputs.push_back(out);
  return out;
}

Backbone Backbone::init(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  const Initializer init(seed);
  Backbone b;
  b.dims_ = dims;

  TextEncoder& t = b.text_;
  t.token_embedding = init.normal("text/token_embedding", {dims.vocab_size, dims.text_width});
  t.positional = init.normal("text/positional", {dims.max_text_length, dims.text_width});
  for (std::size_t i = 0; i < dims.layers; ++i) {
    t.layers.push_back(
        make_layer(init, "text/layer" + std::to_string(i), dims.text_width, dims.heads, dims.mlp_ratio));
  }
  t.final_gamma = Tensor({dims.text_width}, 1.0);
  t.final_beta = Tensor({dims.text_width}, 0.0);
  t.projection = init.normal("text/projection", {dims.text_width, dims.embed_dim});
  t.eos_token = dims.eos_token;

  ImageEncoder& v = b.image_;
  v.patch_projection = init.normal("image/patch_projection", {dims.patch_dim, dims.image_width});
  v.class_embedding = init.normal("image/class_embedding", {1, dims.image_width});
  v.positional = init.normal("image/positional", {1 + dims.patches, dims.image_width});
  for (std::size_t i = 0; i < dims.layers; ++i) {
    v.layers.push_back(
        make_layer(init, "image/layer" + std::to_string(i), dims.image_width, dims.heads, dims.mlp_ratio));
  }
  v.post_gamma = Tensor({dims.image_width}, 1.0);
  v.post_beta = Tensor({dims.image_width}, 0.0);
  v.projection = init.normal("image/projection", {dims.image_width, dims.embed_dim});

  b.log_temperature_ = Tensor({1}, {std::log(kInitTemperature)});
  return b;
}

double Backbone::temperature() const { return std::exp(log_temperature_.item()); }

void Backbone::clamp_temperature() {
  auto v = log_temperature_.mutable_values();
  v[0] = std::clamp(v[0], std::log(kMinTemperature), std::log(kMaxTemperature));
}

std::vector<NamedTensor> Backbone::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"text/token_embedding", text_.token_embedding});
  out.push_back({"text/positional", text_.positional});
  for (std::size_t i = 0; i < text_.layers.size(); ++i) {
    append_layer(out, "text/layer" + std::to_string(i), text_.layers[i]);
  }
  out.push_back({"text/final_norm/gamma", text_.final_gamma});
  out.push_back({"text/final_norm/beta", text_.final_beta});
  out.push_back({"text/projection", text_.projection});
  out.push_back({"image/patch_projection", image_.patch_projection});
  out.push_back({"image/class_embedding", image_.class_embedding});
  out.push_back({"image/positional", image_.positional});
  for (std::size_t i = 0; i < image_.layers.size(); ++i) {
    append_layer(out, "image/layer" + std::to_string(i), image_.layers[i]);
  }
  out.push_back({"image/post_norm/gamma", image_.post_gamma});
  out.push_back({"image/post_norm/beta", image_.post_beta});
  out.push_back({"image/projection", image_.projection});
  out.push_back({"log_temperature", log_temperature_});
  return out;
}

void Backbone::set_trainable(bool on) {
  for (NamedTensor& p : named_parameters()) {
    p.tensor.set_requires_grad(on);
    p.tensor.zero_grad();
  }
}

void Backbone::load_values(std::span<const NamedTensor> params) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& p : params) {
    if (!by_name.emplace(p.name, &p.tensor).second) throw DataError("checkpoint: duplicate tensor " + p.name);
  }
  auto own = named_parameters();
  if (own.size() != by_name.size()) {
    throw DataError("checkpoint: expected " + std::to_string(own.size()) + " tensors, found " +
                    std::to_string(by_name.size()));
  }
  for (NamedTensor& p : own) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint: missing tensor " + p.name);
    if (it->second->shape() != p.tensor.shape()) {
      throw DataError("checkpoint: tensor " + p.name + " has shape " + shape_string(it->second->shape()) +
                      ", expected " + shape_string(p.tensor.shape()));
    }
    auto src = it->second->values();
    std::copy(src.begin(), src.end(), p.tensor.mutable_values().begin());
  }
}

bool BackboneSnapshot::bitwise_equal(const BackboneSnapshot& other) const {
  if (params.size() != other.params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto a = params[i].tensor.values();
    const auto b = other.params[i].tensor.values();
    if (params[i].name != other.params[i].name || params[i].tensor.shape() != other.params[i].tensor.shape() ||
        std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) {
      return false;
    }
  }
  return true;
}

BackboneSnapshot snapshot(const Backbone& backbone) {
  BackboneSnapshot s;
  for (const NamedTensor& p : backbone.named_parameters()) s.params.push_back({p.name, p.tensor.detach()});
  s.hash = content_hash(s.params);
  return s;
}

std::string content_hash(std::span<const NamedTensor> params) {
  std::vector<const NamedTensor*> sorted;
  for (const NamedTensor& p : params) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->name < b->name; });

  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const NamedTensor* p : sorted) {
    mix(p->name.data(), p->name.size());
    for (std::size_t d : p->tensor.shape()) {
      const std::uint64_t d64 = d;
      mix(&d64, sizeof d64);
    }
    const auto v = p->tensor.values();
    mix(v.data(), v.size_bytes());
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
    h >>= 4;
  }
  return out;
}

Tensor embed_text(const TextEncoder& encoder, std::span<const int> token_ids, std::size_t position_offset) {
  if (token_ids.empty()) throw InvalidInputError("embed_text: empty token sequence");
  if (token_ids.back() != encoder.eos_token) throw InvalidInputError("embed_text: sequence must end with eos");
  const std::size_t vocab = encoder.token_embedding.dim(0);
  const std::size_t width = encoder.token_embedding.dim(1);
  const std::size_t max_len = encoder.positional.dim(0);
  if (position_offset + token_ids.size() > max_len) {
    throw InvalidInputError("embed_text: sequence of " + std::to_string(position_offset + token_ids.size()) +
                            " positions exceeds max length " + std::to_string(max_len));
  }
  std::vector<Tensor> rows;
  rows.reserve(token_ids.size());
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    const int id = token_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("embed_text: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    rows.push_back(ops::add(ops::select(encoder.token_embedding, static_cast<std::size_t>(id)),
                            ops::select(encoder.positional, position_offset + i)));
  }
  return ops::reshape(ops::concat_rows(rows), {token_ids.size(), width});
}

Tensor project_text(const TextEncoder& encoder, const Tensor& sequence) {
  const Tensor last = ops::slice_rows(sequence, sequence.rows() - 1, 1);
  return ops::matmul(ops::layer_norm(last, encoder.final_gamma, encoder.final_beta), encoder.projection);
}

Tensor encode_text(const TextEncoder& encoder, const Tensor& embedded, ForwardProbe* probe) {
  if (embedded.rank() != 2 || embedded.cols() != encoder.token_embedding.dim(1)) {
    throw ShapeError("encode_text: expected N x d_t input, got " + shape_string(embedded.shape()));
  }
  return project_text(encoder, run_layers(encoder.layers, embedded, probe));
}

ImageTokens embed_image(const ImageEncoder& encoder, const Tensor& raw_patches, std::size_t expected_patches) {
  const std::size_t patch_dim = encoder.patch_projection.dim(0);
  if (raw_patches.rank() != 2 || raw_patches.dim(0) != expected_patches || raw_patches.dim(1) != patch_dim) {
    throw ShapeError("embed_image: expected " + std::to_string(expected_patches) + " x " + std::to_string(patch_dim) +
                     " patches, got " + shape_string(raw_patches.shape()));
  }
  const Tensor projected = ops::matmul(raw_patches, encoder.patch_projection);
  const Tensor positions = ops::slice_rows(encoder.positional, 1, expected_patches);
  return {ops::add(encoder.class_embedding, ops::slice_rows(encoder.positional, 0, 1)), ops::add(projected, positions)};
}

Tensor project_image(const ImageEncoder& encoder, const Tensor& sequence) {
  const Tensor cls = ops::slice_rows(sequence, 0, 1);
  return ops::matmul(ops::layer_norm(cls, encoder.post_gamma, encoder.post_beta), encoder.projection);
}

Tensor encode_image(const ImageEncoder& encoder, const ImageTokens& tokens, ForwardProbe* probe) {
  const std::vector<Tensor> parts{tokens.class_token, tokens.patches};
  return project_image(encoder, run_layers(encoder.layers, ops::concat_rows(parts), probe));
}

}  // namespace mudpt
