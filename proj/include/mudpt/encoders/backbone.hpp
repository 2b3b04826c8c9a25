#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mudpt/numerics/ops.hpp"
#include "mudpt/numerics/tensor.hpp"

namespace mudpt {

/// Widths and sizes of the dual-encoder backbone. Defaults are the desk-scale
/// configuration; text and image widths differ on purpose.
struct ModelDims {
  std::size_t text_width = 32;   // d_t
  std::size_t image_width = 48;  // d_v
  std::size_t embed_dim = 16;    // d_c
  std::size_t layers = 4;        // K, per branch
  std::size_t heads = 4;
  std::size_t vocab_size = 64;
  std::size_t patches = 16;      // M
  std::size_t patch_dim = 8;
  std::size_t max_text_length = 12;
  std::size_t mlp_ratio = 4;
  int eos_token = 0;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

/// Pre-LayerNorm Transformer block: x + attn(ln1(x)), then + mlp(ln2(x)).
struct TransformerLayer {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams attention;
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_in, mlp_in_bias;    // width x ratio*width
  Tensor mlp_out, mlp_out_bias;  // ratio*width x width
};

Tensor apply_layer(const TransformerLayer& layer, const Tensor& x);

/// Optional instrumentation threaded through a single forward pass. Not
/// shared between threads.
struct ForwardProbe {
  std::size_t layer_applications = 0;
  /// Number of layers whose prompt positions were replaced by fresh prompts.
  std::size_t prompt_replacements = 0;
  /// Input sequence length seen by each applied layer, in order.
  std::vector<std::size_t> sequence_lengths;
  bool capture_outputs = false;
  std::vector<Tensor> outputs;
  /// When set, the output of layer `index` (0-based) is replaced by tap(index, output).
  std::function<Tensor(std::size_t index, const Tensor& output)> tap;
};

/// Applies layer `index`, recording into `probe` when given.
Tensor apply_layer_probed(const TransformerLayer& layer, std::size_t index, const Tensor& x, ForwardProbe* probe);

struct TextEncoder {
  Tensor token_embedding;  // vocab x d_t
  Tensor positional;       // max_text_length x d_t
  std::vector<TransformerLayer> layers;
  Tensor final_gamma, final_beta;
  Tensor projection;  // d_t x d_c
  int eos_token = 0;
};

struct ImageEncoder {
  Tensor patch_projection;  // patch_dim x d_v
  Tensor class_embedding;   // 1 x d_v
  Tensor positional;        // (1 + M) x d_v; row 0 belongs to the class token
  std::vector<TransformerLayer> layers;
  Tensor post_gamma, post_beta;
  Tensor projection;  // d_v x d_c
};

/// Frozen dual-encoder: both branches plus the log-parameterized temperature.
class Backbone {
 public:
  static constexpr double kMinTemperature = 0.01;
  static constexpr double kMaxTemperature = 1.0;
  static constexpr double kInitTemperature = 0.07;

  /// Random initialization: normal(0, 0.02) tables and projections, unit
  /// LayerNorm gains, zero biases. Each tensor draws from its own stream
  /// derived from `seed` and its path.
  static Backbone init(const ModelDims& dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  const TextEncoder& text() const { return text_; }
  const ImageEncoder& image() const { return image_; }
  TextEncoder& text() { return text_; }
  ImageEncoder& image() { return image_; }

  Tensor& log_temperature() { return log_temperature_; }
  const Tensor& log_temperature() const { return log_temperature_; }
  double temperature() const;
  /// Clamps log_temperature into [ln 0.01, ln 1].
  void clamp_temperature();

  /// Every parameter under a stable path name, aliasing the live storage.
  std::vector<NamedTensor> named_parameters() const;
  void set_trainable(bool on);

  /// Replaces all values from `params`; names and shapes must match exactly.
  void load_values(std::span<const NamedTensor> params);

 private:
  ModelDims dims_;
  TextEncoder text_;
  ImageEncoder image_;
  Tensor log_temperature_;
};

/// Deep copy of all backbone parameters plus their content hash.
struct BackboneSnapshot {
  std::string hash;
  std::vector<NamedTensor> params;

  bool bitwise_equal(const BackboneSnapshot& other) const;
};

BackboneSnapshot snapshot(const Backbone& backbone);

/// FNV-1a over names, shapes and raw value bytes, with tensors visited in
/// name order. Returned as 16 lowercase hex digits.
std::string content_hash(std::span<const NamedTensor> params);

// ---- text branch ------------------------------------------------------------

/// Token lookup plus positional rows; `position_offset` shifts the positional
/// rows used (prompted text places class tokens after the prompt block).
/// The last id must be the eos token.
Tensor embed_text(const TextEncoder& encoder, std::span<const int> token_ids, std::size_t position_offset = 0);

/// Runs all K layers over `embedded` and projects the final (eos) position.
/// Returns a 1 x d_c row.
Tensor encode_text(const TextEncoder& encoder, const Tensor& embedded, ForwardProbe* probe = nullptr);

/// Final LayerNorm and projection of the last row of a text sequence.
Tensor project_text(const TextEncoder& encoder, const Tensor& sequence);

// ---- image branch -----------------------------------------------------------

struct ImageTokens {
  Tensor class_token;  // 1 x d_v
  Tensor patches;      // M x d_v
};

/// raw_patches (M x patch_dim) times the patch projection, plus positional rows.
ImageTokens embed_image(const ImageEncoder& encoder, const Tensor& raw_patches, std::size_t expected_patches);

/// Runs all K layers over [class, patches] and projects position 0.
Tensor encode_image(const ImageEncoder& encoder, const ImageTokens& tokens, ForwardProbe* probe = nullptr);

/// Post LayerNorm and projection of row 0 of an image sequence.
Tensor project_image(const ImageEncoder& encoder, const Tensor& sequence);

}  // namespace mudpt
