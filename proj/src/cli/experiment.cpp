#include "mudpt/cli/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mudpt/cli/metrics.hpp"
#include "mudpt/encoders/checkpoint.hpp"
#include "mudpt/errors.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

namespace {

using nlohmann::json;

struct Seeds {
  std::uint64_t data, backbone, pretrain, few_shot, base_new, prompts, train;

  explicit Seeds(std::uint64_t root)
      : data(derive_seed(root, "data")),
        backbone(derive_seed(root, "backbone")),
        pretrain(derive_seed(root, "pretrain")),
        few_shot(derive_seed(root, "few_shot")),
        base_new(derive_seed(root, "base_new")),
        prompts(derive_seed(root, "prompts")),
        train(derive_seed(root, "train")) {}
};

void say(std::ostream* log, const std::string& line) {
  if (log) *log << line << '\n' << std::flush;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

/// Accuracy on the test examples of `classes`, with the classifier built
/// from exactly those class names in that order.
double evaluate(const Backbone& backbone, const PromptContext& prompts, const SyntheticCorpus& corpus,
                const std::vector<int>& classes) {
  std::vector<std::vector<int>> names;
  for (int c : classes) names.push_back(corpus.classes[static_cast<std::size_t>(c)].name);
  const PromptContext frozen = detached(prompts);
  const ClassifierHead head = synthesize_classifier(names, backbone, frozen, Vocabulary::template_tokens());

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (const Example& e : corpus.examples) {
    if (e.split != Split::kTest) continue;
    const auto it = std::find(classes.begin(), classes.end(), e.class_id);
    if (it == classes.end()) continue;
    images.push_back(e.image);
    labels.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  const auto predictions = classify(backbone, frozen, head, images);
  return accuracy(predictions, labels);
}

struct Tuned {
  PromptContext prompts;
  std::vector<StepRecord> trace;
  json audit;
  Checkpoint checkpoint;
};

/// Tunes prompts for `mode` on the few-shot examples of `classes`. Every image
/// read goes through the audit counters.
Tuned tune(Mode mode, const ExperimentConfig& config, const Seeds& seeds, const Backbone& backbone,
           const SyntheticCorpus& corpus, const std::vector<std::size_t>& few_shot, const std::vector<int>& classes) {
  Tuned out;
  if (!mode_learns(mode)) return out;

  PromptParams params =
      PromptParams::init(config.prompt.for_mode(mode), backbone, Vocabulary::template_tokens(), seeds.prompts);
  std::vector<TrainItem> items;
  std::vector<std::size_t> source;
  for (std::size_t idx : few_shot) {
    const Example& e = corpus.examples[idx];
    const auto it = std::find(classes.begin(), classes.end(), e.class_id);
    if (it == classes.end()) continue;
    items.push_back({&e.image, static_cast<int>(it - classes.begin())});
    source.push_back(idx);
  }
  std::vector<std::vector<int>> names;
  for (int c : classes) names.push_back(corpus.classes[static_cast<std::size_t>(c)].name);

  std::size_t reads = 0, held_out_class_reads = 0, non_train_reads = 0;
  const auto on_access = [&](std::size_t i) {
    const Example& e = corpus.examples[source[i]];
    ++reads;
    held_out_class_reads += !contains(classes, e.class_id);
    non_train_reads += e.split != Split::kTrain;
  };
  TrainResult result = train(backbone, params, mode, items, names, Vocabulary::template_tokens(), config.schedule,
                             seeds.train, on_access);
  const bool passed = held_out_class_reads == 0 && non_train_reads == 0;
  out.audit = {{"image_reads", reads},
               {"held_out_class_reads", held_out_class_reads},
               {"non_train_split_reads", non_train_reads},
               {"passed", passed}};
  if (!passed) throw InternalError("protocol hygiene violated: tuning read held-out images");
  out.prompts = detached(prepare_prompts(params));
  out.checkpoint = prompts_checkpoint(params, backbone);
  out.trace = std::move(result.trace);
  return out;
}

std::vector<int> all_classes(const SyntheticCorpus& corpus) {
  std::vector<int> ids;
  for (const ClassInfo& c : corpus.classes) ids.push_back(c.class_id);
  return ids;
}

std::string shift_key(const ShiftSpec& s) {
  return std::string(shift_name(s.kind)) + "@" + json(s.severity).dump();
}

}  // namespace

Backbone prepare_backbone(const ExperimentConfig& config, std::ostream* log) {
  const Seeds seeds(config.seed);
  const std::filesystem::path path = config.pretrain.checkpoint;
  if (!path.empty() && std::filesystem::exists(path)) {
    Backbone b = backbone_from_checkpoint(read_checkpoint(path));
    if (!(b.dims() == config.model)) throw ConfigError("backbone checkpoint " + path.string() + " has other dims");
    say(log, "loaded backbone " + path.string());
    return b;
  }
  Backbone b = Backbone::init(config.model, seeds.backbone);
  const SyntheticCorpus corpus = gen_pretrain_corpus(config.data, seeds.data);
  const PretrainResult result =
      contrastive_pretrain(captioned_pairs(corpus, Split::kTrain), b, config.pretrain.schedule, seeds.pretrain);
  char line[160];
  std::snprintf(line, sizeof line, "pretrained %zu steps: loss %.4f -> %.4f, temperature %.4f",
                result.losses.size(), result.losses.front(), result.losses.back(), result.temperature);
  say(log, line);
  if (!path.empty()) {
    write_checkpoint(path, backbone_checkpoint(b));
    say(log, "wrote backbone " + path.string());
  }
  return b;
}

ExperimentReport run_experiment(const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const Seeds seeds(config.seed);

  const Backbone backbone = prepare_backbone(config, log);
  const SyntheticCorpus source = gen_corpus(config.data, seeds.data);
  const FewShotSplit few_shot = few_shot_sample(source, config.evaluation.shots, seeds.few_shot);

  std::vector<int> tuning_classes = all_classes(source);
  BaseNewSplit base_new;
  if (config.protocol == Protocol::kBaseToNew) {
    base_new = base_new_split(tuning_classes, seeds.base_new);
    tuning_classes = base_new.base;
  }
  std::vector<std::pair<std::string, SyntheticCorpus>> targets;
  if (config.protocol == Protocol::kCrossDataset) {
    for (std::size_t d : config.evaluation.datasets) {
      DataConfig data = config.data;
      data.dataset = d;
      targets.emplace_back("dataset" + std::to_string(d), gen_corpus(data, seeds.data));
    }
  } else if (config.protocol == Protocol::kDomainGen) {
    for (std::size_t k = 0; k < config.evaluation.shifts.size(); ++k) {
      const ShiftSpec& s = config.evaluation.shifts[k];
      targets.emplace_back(shift_key(s),
                           domain_shift(source, s.kind, s.severity, derive_seed(config.seed, "shift", k)));
    }
  }

  ExperimentReport out;
  json results = json::object();
  json mode_names = json::array();
  for (Mode mode : config.modes) {
    const std::string name(mode_name(mode));
    mode_names.push_back(name);
    say(log, "mode " + name);
    Tuned tuned = tune(mode, config, seeds, backbone, source, few_shot.train, tuning_classes);

    json r = json::object();
    json acc = json::object();
    switch (config.protocol) {
      case Protocol::kFewShot:
        acc["test"] = evaluate(backbone, tuned.prompts, source, tuning_classes);
        r["average"] = acc["test"];
        break;
      case Protocol::kBaseToNew: {
        const double base = evaluate(backbone, tuned.prompts, source, base_new.base);
        const double fresh = evaluate(backbone, tuned.prompts, source, base_new.fresh);
        acc["base"] = base;
        acc["new"] = fresh;
        r["base_acc"] = base;
        r["new_acc"] = fresh;
        // 2bn/(b+n) tends to 0 when either side does.
        r["harmonic_mean"] = base > 0.0 && fresh > 0.0 ? harmonic_mean(base, fresh) : 0.0;
        const std::vector<double> pair{base, fresh};
        r["arith_mean"] = round2(arith_mean(pair));
        r["base_classes"] = base_new.base;
        r["new_classes"] = base_new.fresh;
        break;
      }
      case Protocol::kCrossDataset:
      case Protocol::kDomainGen: {
        acc["source"] = evaluate(backbone, tuned.prompts, source, tuning_classes);
        std::vector<double> values;
        for (const auto& [key, corpus] : targets) {
          const double a = evaluate(backbone, tuned.prompts, corpus, all_classes(corpus));
          acc[key] = a;
          values.push_back(a);
        }
        r["average"] = round2(arith_mean(values));
        break;
      }
    }
    r["accuracies"] = acc;
    if (mode_learns(mode)) {
      r["training"] = {{"steps", tuned.trace.size()},
                       {"initial_loss", tuned.trace.front().loss},
                       {"final_loss", tuned.trace.back().loss},
                       {"loss_trace", "traces/" + name + ".jsonl"},
                       {"checkpoint", "prompts/" + name + ".json"}};
      r["audit"] = tuned.audit;
      out.traces[name] = std::move(tuned.trace);
      out.prompts[name] = std::move(tuned.checkpoint);
    }
    say(log, "  " + acc.dump());
    results[name] = std::move(r);
  }

  // The output directory says where the report lives, not what produced it.
  json echo = config_to_json(config);
  echo.erase("output");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.report = {{"version", ExperimentReport::kVersion},
                {"protocol", protocol_name(config.protocol)},
                {"seed", config.seed},
                {"modes", mode_names},
                {"config", echo},
                {"backbone", {{"hash", snapshot(backbone).hash}, {"temperature", backbone.temperature()}}},
                {"results", results},
                {ExperimentReport::kWallTimeField, seconds}};
  return out;
}

json strip_wall_time(const json& report) {
  json copy = report;
  if (copy.is_object()) copy.erase(ExperimentReport::kWallTimeField);
  return copy;
}

std::vector<std::string> report_diff(const json& a, const json& b) {
  std::vector<std::string> lines;
  const json sa = strip_wall_time(a);
  const json sb = strip_wall_time(b);
  for (const json& op : json::diff(sa, sb)) {
    const json::json_pointer ptr(op.at("path").get<std::string>());
    const std::string verb = op.at("op").get<std::string>();
    std::string line = verb + " " + ptr.to_string();
    if (verb == "replace") line += ": " + sa.at(ptr).dump() + " -> " + op.at("value").dump();
    if (verb == "add") line += ": " + op.at("value").dump();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::string render_table(const json& report) {
  const std::string protocol = report.at("protocol").get<std::string>();
  const json& results = report.at("results");
  const auto modes = report.at("modes").get<std::vector<std::string>>();

  std::vector<std::string> columns;
  for (const auto& [key, _] : results.at(modes.front()).at("accuracies").items()) columns.push_back(key);
  std::vector<std::string> summary;
  if (protocol == "base_to_new") {
    summary = {"harmonic_mean", "arith_mean"};
  } else if (protocol != "few_shot") {
    summary = {"average"};
  }

  auto value = [&](const std::string& mode, const std::string& column, bool is_summary) {
    const json& r = results.at(mode);
    return is_summary ? r.at(column).get<double>() : r.at("accuracies").at(column).get<double>();
  };

  std::size_t label_width = 4;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    label_width = std::max(label_width, i == 0 ? modes[i].size() : modes.front().size() + 5 + modes[i].size());
  }
  label_width += 2;
  std::size_t cell = 9;
  for (const std::string& c : columns) cell = std::max(cell, c.size() + 2);
  for (const std::string& c : summary) cell = std::max(cell, c.size() + 2);

  std::ostringstream out;
  char buf[64];
  auto pad_right = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
  auto pad_left = [](const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };

  out << "protocol: " << protocol << "  seed: " << report.at("seed").dump() << "  backbone: "
      << report.at("backbone").at("hash").get<std::string>() << '\n';
  out << pad_right("mode", label_width);
  for (const std::string& c : columns) out << pad_left(c, cell);
  for (const std::string& c : summary) out << pad_left(c, cell);
  out << '\n';
  for (const std::string& m : modes) {
    out << pad_right(m, label_width);
    for (const std::string& c : columns) {
      std::snprintf(buf, sizeof buf, "%.2f", value(m, c, false));
      out << pad_left(buf, cell);
    }
    for (const std::string& c : summary) {
      std::snprintf(buf, sizeof buf, "%.2f", value(m, c, true));
      out << pad_left(buf, cell);
    }
    out << '\n';
  }
  for (std::size_t i = 1; i < modes.size(); ++i) {
    out << pad_right(modes.front() + " vs. " + modes[i], label_width);
    for (const std::string& c : columns) {
      std::snprintf(buf, sizeof buf, "%+.2f", round2(value(modes.front(), c, false) - value(modes[i], c, false)));
      out << pad_left(buf, cell);
    }
    for (const std::string& c : summary) {
      std::snprintf(buf, sizeof buf, "%+.2f", round2(value(modes.front(), c, true) - value(modes[i], c, true)));
      out << pad_left(buf, cell);
    }
    out << '\n';
  }
  return out.str();
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  for (const char* sub : {"traces", "prompts"}) {
    std::filesystem::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }

  const auto write = [](const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
  };
  write(dir / "report.json", report.report.dump(2) + "\n");
  write(dir / "report.txt", render_table(report.report));
  for (const auto& [mode, trace] : report.traces) {
    std::string lines;
    for (const StepRecord& r : trace) {
      lines += json{{"step", r.step}, {"loss", r.loss}, {"accuracy", r.accuracy}}.dump() + "\n";
    }
    write(dir / "traces" / (mode + ".jsonl"), lines);
  }
  for (const auto& [mode, checkpoint] : report.prompts) write_checkpoint(dir / "prompts" / (mode + ".json"), checkpoint);
}

}  // namespace mudpt
