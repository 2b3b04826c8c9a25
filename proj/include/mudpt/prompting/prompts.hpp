#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mudpt/encoders/backbone.hpp"
#include "mudpt/encoders/checkpoint.hpp"

namespace mudpt {

/// Which parts of the prompt machinery a run learns.
enum class Mode {
  kMudpt,                  // text + visual deep prompts fused through the injection model
  kTextOnly,               // deep text prompts; L = 1 is context optimization on the embedding layer
  kVisualOnly,             // deep visual prompts; text side uses the hand-written template
  kIndependentMultimodal,  // text + visual deep prompts, no cross-modal terms
  kZeroShot,               // nothing learned
};

std::string_view mode_name(Mode mode);
Mode parse_mode(std::string_view name);
bool mode_learns(Mode mode);

struct PromptConfig {
  std::size_t text_length = 4;    // 0 disables text prompts
  std::size_t visual_length = 4;  // 0 disables visual prompts
  std::size_t depth = 4;          // L, layers receiving fresh prompts
  bool injection = true;
  std::size_t joint_width = 32;
  std::size_t joint_heads = 2;

  /// Canonical configuration for `mode` with prompt length `length` and depth `depth`.
  static PromptConfig for_mode(Mode mode, std::size_t length, std::size_t depth);
  void validate(const ModelDims& dims) const;
  /// Throws ConfigError if this configuration contradicts `mode`.
  void check_mode(Mode mode) const;
};

/// The transformative network between the two prompt stacks. Both modalities
/// are adapted into a shared joint width, attend to each other through one
/// attention block, and are adapted back out in the *other* modality's width.
struct InjectionParams {
  Tensor text_in;    // d_t x d_j
  Tensor visual_in;  // d_v x d_j
  AttentionParams attention;
  Tensor to_text;    // d_j x d_t, produces the visual-derived prompts V'
  Tensor to_visual;  // d_j x d_v, produces the text-derived prompts T'

  std::vector<NamedTensor> named_parameters() const;
};

/// Learnable deep prompts: text L x n x d_t and visual L x n x d_v. Either
/// stack may be undefined when its modality is disabled.
struct PromptStack {
  Tensor text;
  Tensor visual;
};

class PromptParams {
 public:
  /// Random normal(0, 0.02) prompts. The first rows of the text stack's
  /// embedding-layer block copy the word embeddings of `init_tokens`.
  /// Injection weights use normal(0, 1/sqrt(fan_in)).
  static PromptParams init(const PromptConfig& config, const Backbone& backbone, std::span<const int> init_tokens,
                           std::uint64_t seed);

  const PromptConfig& config() const { return config_; }
  const PromptStack& stack() const { return stack_; }
  PromptStack& stack() { return stack_; }
  const std::optional<InjectionParams>& injection() const { return injection_; }
  std::optional<InjectionParams>& injection() { return injection_; }

  std::vector<NamedTensor> named_parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool on);
  void load_values(std::span<const NamedTensor> params);

 private:
  PromptConfig config_;
  PromptStack stack_;
  std::optional<InjectionParams> injection_;
};

/// Cross-modality prompts. `text_derived` (T') lives in the visual width and
/// `visual_derived` (V') in the text width.
struct CrossPrompts {
  Tensor text_derived;    // L x n x d_v
  Tensor visual_derived;  // L x n x d_t
};

/// Per depth i, with weights shared across depths:
///   V'_i = to_text(attn(q = text_in(T_i), k = v = visual_in(V_i)))
///   T'_i = to_visual(attn(q = visual_in(V_i), k = v = text_in(T_i)))
CrossPrompts inject(const Tensor& text, const Tensor& visual, const InjectionParams& params);

struct FusedPrompts {
  Tensor text;    // T + V'
  Tensor visual;  // V + T'
};

FusedPrompts fuse(const Tensor& text, const Tensor& visual, const Tensor& text_derived, const Tensor& visual_derived);

/// Prompt blocks for one forward step: `text[i]` / `visual[i]` is the n x d
/// block fed into layer i (0-based) for i < L. Block 0 is always the raw
/// learnable prompt; blocks i >= 1 are fused when injection is on. The
/// injection model runs once here and is shared by every encoder call that
/// uses this context.
struct PromptContext {
  std::vector<Tensor> text;
  std::vector<Tensor> visual;

  std::size_t text_length() const { return text.empty() ? 0 : text[0].rows(); }
  std::size_t visual_length() const { return visual.empty() ? 0 : visual[0].rows(); }
};

PromptContext prepare_prompts(const PromptParams& params);

/// Text branch with deep prompts. `class_tokens` (ending in eos) are embedded
/// at positions n.. so they sit where a hand-written template of length n
/// would leave them. Layer 0 sees [P_0, W]; layers 1..L-1 discard the previous
/// prompt outputs and see [P_i, W_i]; later layers propagate the full sequence.
/// Without text prompts this is exactly encode_text(embed_text(class_tokens)).
Tensor prompted_encode_text(const TextEncoder& encoder, const PromptContext& prompts, std::span<const int> class_tokens,
                            ForwardProbe* probe = nullptr);

/// Image branch with deep prompts placed between the class token and the
/// patches: [c, P_i, patches]. Without visual prompts this is exactly
/// encode_image(embed_image(raw_patches)).
Tensor prompted_encode_image(const ImageEncoder& encoder, const PromptContext& prompts, const Tensor& raw_patches,
                             std::size_t patches, ForwardProbe* probe = nullptr);

struct ParamPartition {
  std::vector<NamedTensor> trainable;
  std::vector<NamedTensor> frozen;

  std::size_t trainable_count() const;
};

/// Splits model parameters into the learned prompt/injection set and the
/// frozen backbone. Fails with InternalError if a backbone tensor is marked
/// trainable or a tensor appears in both sets.
ParamPartition trainable_mask(const Backbone& backbone, const PromptParams& prompts);

/// Tuned-prompt checkpoint: trainable tensors plus the config and the content
/// hash of the backbone they were tuned against.
Checkpoint prompts_checkpoint(const PromptParams& prompts, const Backbone& backbone);
/// Fails with DataError when `backbone` does not match the recorded hash.
PromptParams prompts_from_checkpoint(const Checkpoint& checkpoint, const Backbone& backbone);

}  // namespace mudpt
