#include "mudpt/objective/objective.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "mudpt/errors.hpp"
#include "mudpt/numerics/parallel.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

std::vector<int> class_text_tokens(std::span<const int> name, std::span<const int> template_tokens,
                                   bool has_text_prompts, int eos_token) {
  std::vector<int> out;
  if (!has_text_prompts) out.assign(template_tokens.begin(), template_tokens.end());
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(eos_token);
  return out;
}

ClassifierHead synthesize_classifier(std::span<const std::vector<int>> class_names, const Backbone& backbone,
                                     const PromptContext& prompts, std::span<const int> template_tokens) {
  if (class_names.size() < 2) throw InvalidInputError("classifier needs at least two classes");
  const bool text_prompts = prompts.text_length() > 0;
  std::vector<Tensor> rows(class_names.size());
  parallel_for(class_names.size(), [&](std::size_t k) {
    const auto tokens = class_text_tokens(class_names[k], template_tokens, text_prompts, backbone.text().eos_token);
    rows[k] = prompted_encode_text(backbone.text(), prompts, tokens);
  });
  ClassifierHead head;
  head.weights = ops::concat_rows(rows);
  head.class_names.assign(class_names.begin(), class_names.end());
  head.temperature = backbone.temperature();
  return head;
}

Tensor encode_images(const Backbone& backbone, const PromptContext& prompts, std::span<const Tensor> images) {
  if (images.empty()) throw InvalidInputError("encode_images: no images");
  std::vector<Tensor> rows(images.size());
  parallel_for(images.size(), [&](std::size_t b) {
    rows[b] = prompted_encode_image(backbone.image(), prompts, images[b], backbone.dims().patches);
  });
  return ops::concat_rows(rows);
}

Tensor cosine_logits(const Tensor& image_embeddings, const Tensor& class_embeddings, double temperature) {
  if (!(temperature > 0.0)) throw InvalidInputError("temperature must be positive");
  return ops::scale(
      ops::matmul_nt(ops::l2_normalize_rows(image_embeddings), ops::l2_normalize_rows(class_embeddings)),
      1.0 / temperature);
}

Prediction predict(std::span<const double> image_embedding, const ClassifierHead& head) {
  const std::size_t d = head.weights.cols();
  if (image_embedding.size() != d) {
    throw ShapeError("predict: embedding has " + std::to_string(image_embedding.size()) + " entries, expected " +
                     std::to_string(d));
  }
  if (!(head.temperature > 0.0)) throw InvalidInputError("predict: temperature must be positive");
  const auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const double xn = norm(image_embedding);
  if (!(xn > 0.0)) throw NumericError("predict: image embedding has zero norm");

  Prediction p;
  const auto w = head.weights.values();
  for (std::size_t k = 0; k < head.weights.rows(); ++k) {
    const auto row = w.subspan(k * d, d);
    const double zn = norm(row);
    if (!(zn > 0.0)) throw NumericError("predict: class " + std::to_string(k) + " embedding has zero norm");
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += image_embedding[j] * row[j];
    p.logits.push_back(std::clamp(dot / (xn * zn), -1.0, 1.0) / head.temperature);
  }
  const Tensor probs = ops::softmax(Tensor({p.logits.size()}, p.logits));
  p.probabilities.assign(probs.values().begin(), probs.values().end());
  p.label = static_cast<std::size_t>(std::distance(p.logits.begin(), std::max_element(p.logits.begin(), p.logits.end())));
  return p;
}

Tensor tuning_loss(std::span<const Tensor> images, std::span<const int> labels, const Backbone& backbone,
                   const PromptContext& prompts, const ClassifierHead& head) {
  if (images.empty()) throw InvalidInputError("tuning_loss: empty batch");
  if (images.size() != labels.size()) throw ShapeError("tuning_loss: images and labels differ in count");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= head.classes()) {
      throw InvalidInputError("tuning_loss: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(head.classes()) + ")");
    }
  }
  const Tensor x = encode_images(backbone, prompts, images);
  return ops::cross_entropy(cosine_logits(x, head.weights, head.temperature), labels);
}

PromptContext detached(const PromptContext& prompts) {
  PromptContext out;
  for (const Tensor& t : prompts.text) out.text.push_back(t.detach());
  for (const Tensor& t : prompts.visual) out.visual.push_back(t.detach());
  return out;
}

std::vector<std::size_t> classify(const Backbone& backbone, const PromptContext& prompts, const ClassifierHead& head,
                                  std::span<const Tensor> images) {
  const PromptContext frozen = detached(prompts);
  ClassifierHead fixed = head;
  fixed.weights = head.weights.detach();
  std::vector<std::size_t> labels(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const Tensor x = prompted_encode_image(backbone.image(), frozen, images[i], backbone.dims().patches);
    labels[i] = predict(x.values(), fixed).label;
  });
  return labels;
}

// ---- contrastive pretraining -------------------------------------------------

void PretrainSchedule::validate() const {
  if (steps == 0) throw ConfigError("pretrain: steps must be positive");
  if (batch_size < 2) throw ConfigError("pretrain: batch_size must be at least 2");
  if (!(learning_rate > 0.0)) throw ConfigError("pretrain: learning_rate must be positive");
}

Tensor contrastive_loss(const Tensor& image_embeddings, const Tensor& text_embeddings, const Tensor& log_temperature) {
  const std::size_t b = image_embeddings.rows();
  if (b < 2) throw InvalidInputError("contrastive loss needs at least two pairs");
  if (text_embeddings.rows() != b) throw ShapeError("contrastive loss: image and text batches differ");
  const Tensor sims =
      ops::matmul_nt(ops::l2_normalize_rows(image_embeddings), ops::l2_normalize_rows(text_embeddings));
  const Tensor logits = ops::scale_by(sims, ops::exp(ops::scale(log_temperature, -1.0)));
  std::vector<int> targets(b);
  std::iota(targets.begin(), targets.end(), 0);
  return ops::scale(
      ops::add(ops::cross_entropy(logits, targets), ops::cross_entropy(ops::transpose(logits), targets)), 0.5);
}

PretrainResult contrastive_pretrain(std::span<const CaptionedImage> corpus, Backbone& backbone,
                                    const PretrainSchedule& schedule, std::uint64_t seed) {
  schedule.validate();
  std::map<int, std::vector<std::size_t>> by_concept;
  for (std::size_t i = 0; i < corpus.size(); ++i) by_concept[corpus[i].concept_id].push_back(i);
  if (by_concept.size() < 2) throw InvalidInputError("pretrain: corpus needs at least two concepts");
  std::vector<int> concepts;
  for (const auto& [c, _] : by_concept) concepts.push_back(c);
  const std::size_t batch = std::min(schedule.batch_size, concepts.size());

  std::vector<Tensor> params;
  for (NamedTensor& p : backbone.named_parameters()) params.push_back(p.tensor);
  backbone.set_trainable(true);
  Adam adam(schedule.learning_rate);
  Rng rng(derive_seed(seed, "pretrain/batches"));
  const PromptContext none;

  PretrainResult result;
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    // Distinct concepts per batch so no in-batch negative is a true match.
    std::vector<int> picked = concepts;
    rng.shuffle(picked.begin(), picked.end());
    picked.resize(batch);
    std::vector<std::size_t> members(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& pool = by_concept[picked[b]];
      members[b] = pool[rng.uniform_index(pool.size())];
    }

    std::vector<Tensor> image_rows(batch), text_rows(batch);
    parallel_for(batch, [&](std::size_t b) {
      const CaptionedImage& pair = corpus[members[b]];
      image_rows[b] = prompted_encode_image(backbone.image(), none, pair.image, backbone.dims().patches);
      text_rows[b] = prompted_encode_text(backbone.text(), none, pair.caption);
    });
    const Tensor loss =
        contrastive_loss(ops::concat_rows(image_rows), ops::concat_rows(text_rows), backbone.log_temperature());
    if (!std::isfinite(loss.item())) {
      backbone.set_trainable(false);
      throw NumericError("contrastive_pretrain: non-finite loss at step " + std::to_string(step));
    }
    result.losses.push_back(loss.item());
    backward(loss);
    adam.step(params);
    backbone.clamp_temperature();
  }
  backbone.set_trainable(false);
  result.temperature = backbone.temperature();
  return result;
}

AlignmentGap alignment_gap(std::span<const CaptionedImage> pairs, const Backbone& backbone) {
  if (pairs.empty()) throw InvalidInputError("alignment_gap: no pairs");
  std::map<int, std::size_t> caption_of;  // concept -> index of a pair carrying its caption
  for (std::size_t i = 0; i < pairs.size(); ++i) caption_of.emplace(pairs[i].concept_id, i);
  if (caption_of.size() < 2) throw InvalidInputError("alignment_gap: needs at least two concepts");

  const PromptContext none;
  std::vector<int> concepts;
  for (const auto& [c, _] : caption_of) concepts.push_back(c);
  std::vector<Tensor> text(concepts.size());
  parallel_for(concepts.size(), [&](std::size_t k) {
    text[k] = prompted_encode_text(backbone.text(), none, pairs[caption_of[concepts[k]]].caption);
  });
  const Tensor z = ops::l2_normalize_rows(ops::concat_rows(text));

  std::vector<Tensor> images(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    images[i] = prompted_encode_image(backbone.image(), none, pairs[i].image, backbone.dims().patches);
  });
  const Tensor sims = ops::matmul_nt(ops::l2_normalize_rows(ops::concat_rows(images)), z);

  AlignmentGap gap;
  std::size_t matched = 0, mismatched = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (std::size_t k = 0; k < concepts.size(); ++k) {
      if (concepts[k] == pairs[i].concept_id) {
        gap.matched += sims.at(i, k);
        ++matched;
      } else {
        gap.mismatched += sims.at(i, k);
        ++mismatched;
      }
    }
  }
  gap.matched /= static_cast<double>(matched);
  gap.mismatched /= static_cast<double>(mismatched);
  return gap;
}

// ---- prompt tuning -------------------------------------------------------------

TrainResult train(const Backbone& backbone, PromptParams& prompts, Mode mode, std::span<const TrainItem> items,
                  std::span<const std::vector<int>> class_names, std::span<const int> template_tokens,
                  const SgdSchedule& schedule, std::uint64_t seed,
                  const std::function<void(std::size_t)>& on_access) {
  if (!mode_learns(mode)) throw ConfigError("train: mode zero_shot has nothing to tune");
  prompts.config().check_mode(mode);
  schedule.validate();
  if (items.empty()) throw InvalidInputError("train: no training examples");
  for (const TrainItem& item : items) {
    if (item.label < 0 || static_cast<std::size_t>(item.label) >= class_names.size()) {
      throw InvalidInputError("train: label outside the class list");
    }
  }

  const std::string before = snapshot(backbone).hash;
  prompts.set_trainable(true);
  const ParamPartition partition = trainable_mask(backbone, prompts);
  std::vector<Tensor> trainable;
  for (const NamedTensor& t : partition.trainable) trainable.push_back(t.tensor);

  TrainResult result;
  Rng rng(derive_seed(seed, "train/shuffle"));
  std::vector<std::size_t> order(items.size());
  std::size_t step = 0;
  const auto done = [&] { return schedule.max_steps != 0 && step >= schedule.max_steps; };
  for (std::size_t epoch = 0; epoch < schedule.epochs && !done(); ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size() && !done(); start += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), start + schedule.batch_size);
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        if (on_access) on_access(order[i]);
        images.push_back(*items[order[i]].image);
        labels.push_back(items[order[i]].label);
      }

      const PromptContext ctx = prepare_prompts(prompts);
      const ClassifierHead head = synthesize_classifier(class_names, backbone, ctx, template_tokens);
      const Tensor x = encode_images(backbone, ctx, images);
      const Tensor logits = cosine_logits(x, head.weights, head.temperature);
      const Tensor loss = ops::cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) {
        prompts.set_trainable(false);
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      }
      std::size_t correct = 0;
      for (std::size_t b = 0; b < labels.size(); ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.cols(); ++k) {
          if (logits.at(b, k) > logits.at(b, best)) best = k;
        }
        correct += best == static_cast<std::size_t>(labels[b]);
      }
      result.trace.push_back(
          {step, loss.item(), 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size())});

      backward(loss);
      sgd_update(trainable, schedule.learning_rate);
      ++step;
    }
  }
  prompts.set_trainable(false);

  result.backbone_hash = snapshot(backbone).hash;
  if (result.backbone_hash != before) throw InternalError("train: backbone changed during prompt tuning");
  return result;
}

}  // namespace mudpt
