#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mudpt/encoders/backbone.hpp"
#include "mudpt/numerics/optim.hpp"
#include "mudpt/prompting/prompts.hpp"

namespace mudpt {

/// Class embeddings synthesized by the (prompted) text encoder. `weights`
/// stays connected to the prompt graph so the loss can reach the prompts.
struct ClassifierHead {
  Tensor weights;  // m x d_c
  std::vector<std::vector<int>> class_names;
  double temperature = Backbone::kInitTemperature;

  std::size_t classes() const { return class_names.size(); }
};

struct Prediction {
  std::vector<double> logits;         // cosine / temperature
  std::vector<double> probabilities;  // softmax(logits)
  std::size_t label = 0;              // argmax, lowest index on ties
};

/// Token sequence fed to the text encoder for one class. With learned text
/// prompts it is `name + eos` (the prompts take the template's place);
/// otherwise the hand-written template precedes the name.
std::vector<int> class_text_tokens(std::span<const int> name, std::span<const int> template_tokens,
                                   bool has_text_prompts, int eos_token);

/// One row per class name, each the prompted text embedding of that class.
ClassifierHead synthesize_classifier(std::span<const std::vector<int>> class_names, const Backbone& backbone,
                                     const PromptContext& prompts, std::span<const int> template_tokens);

/// Prompted image embeddings stacked into a B x d_c matrix.
Tensor encode_images(const Backbone& backbone, const PromptContext& prompts, std::span<const Tensor> images);

/// B x m matrix of cos(image_b, class_k) / temperature.
Tensor cosine_logits(const Tensor& image_embeddings, const Tensor& class_embeddings, double temperature);

/// Prediction for a single image embedding (d_c values). Zero-norm inputs
/// raise NumericError.
Prediction predict(std::span<const double> image_embedding, const ClassifierHead& head);

/// Mean cross-entropy of the batch under `head`, differentiable with respect
/// to whatever in `prompts` and `head` requires a gradient.
Tensor tuning_loss(std::span<const Tensor> images, std::span<const int> labels, const Backbone& backbone,
                   const PromptContext& prompts, const ClassifierHead& head);

/// Copy of `prompts` with every block detached, for tape-free evaluation.
PromptContext detached(const PromptContext& prompts);

/// Predicted labels for `images`, computed in parallel without a tape.
std::vector<std::size_t> classify(const Backbone& backbone, const PromptContext& prompts, const ClassifierHead& head,
                                  std::span<const Tensor> images);

// ---- contrastive pretraining -------------------------------------------------

struct CaptionedImage {
  Tensor image;              // M x patch_dim
  std::vector<int> caption;  // ends with eos
  int concept_id = 0;        // pairs sharing a concept are never batched together
};

struct PretrainSchedule {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;

  void validate() const;
};

struct PretrainResult {
  std::vector<double> losses;
  double temperature = 0.0;
};

/// Symmetric in-batch contrastive loss: the mean of image-to-text and
/// text-to-image cross-entropy over the B x B cosine matrix scaled by
/// exp(-log_temperature). Needs B >= 2.
Tensor contrastive_loss(const Tensor& image_embeddings, const Tensor& text_embeddings, const Tensor& log_temperature);

/// Trains every backbone parameter (Adam) and the temperature, clamped to
/// [0.01, 1] after each step. The backbone is left frozen on return.
PretrainResult contrastive_pretrain(std::span<const CaptionedImage> corpus, Backbone& backbone,
                                    const PretrainSchedule& schedule, std::uint64_t seed);

/// Mean cosine similarity of matched and of mismatched image/caption pairs.
struct AlignmentGap {
  double matched = 0.0;
  double mismatched = 0.0;
  double gap() const { return matched - mismatched; }
};
AlignmentGap alignment_gap(std::span<const CaptionedImage> pairs, const Backbone& backbone);

// ---- prompt tuning -------------------------------------------------------------

struct TrainItem {
  const Tensor* image = nullptr;
  int label = 0;  // index into the class-name list given to train()
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // batch accuracy in percent, before the update
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::string backbone_hash;
};

/// Prompt tuning with plain SGD on the mean cross-entropy. Only the
/// trainable partition is updated; the backbone hash is checked before and
/// after, and a mismatch raises InternalError. Shuffling is derived from
/// `seed`. `on_access(i)` is called whenever items[i].image is read.
TrainResult train(const Backbone& backbone, PromptParams& prompts, Mode mode, std::span<const TrainItem> items,
                  std::span<const std::vector<int>> class_names, std::span<const int> template_tokens,
                  const SgdSchedule& schedule, std::uint64_t seed,
                  const std::function<void(std::size_t)>& on_access = {});

}  // namespace mudpt
