#include "mudpt/cli/cli.hpp"

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mudpt/cli/experiment.hpp"
#include "mudpt/encoders/checkpoint.hpp"
#include "mudpt/errors.hpp"
#include "mudpt/numerics/grad_check.hpp"
#include "mudpt/numerics/random.hpp"

namespace mudpt {

namespace {

using nlohmann::json;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> modes;
};

json read_json(const std::string& path, bool config) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    json doc;
    in >> doc;
    return doc;
  } catch (const json::exception& e) {
    if (config) throw ConfigError(path + ": " + e.what());
    throw DataError(path + ": " + e.what());
  }
}

ExperimentConfig load_with_overrides(const std::string& path, const Overrides& o) {
  json doc = read_json(path, true);
  if (!doc.is_object()) throw ConfigError(path + ": expected a JSON object");
  if (o.seed) doc["seed"] = *o.seed;
  if (o.out) doc["output"] = *o.out;
  if (!o.modes.empty()) doc["mode"] = o.modes;
  return config_from_json(doc);
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

int cmd_run(const ExperimentConfig& config, std::ostream& out, std::ostream& err) {
  const ExperimentReport report = run_experiment(config, &err);
  emit_report(report, config.output);
  out << render_table(report.report);
  return kExitOk;
}

int cmd_gen_data(const ExperimentConfig& config, std::ostream& out) {
  const std::uint64_t seed = derive_seed(config.seed, "data");
  make_dir(config.output);
  const std::filesystem::path dir = config.output;
  write_corpus(dir / "corpus.jsonl", gen_corpus(config.data, seed));
  write_corpus(dir / "pretrain_corpus.jsonl", gen_pretrain_corpus(config.data, seed));
  out << "wrote " << (dir / "corpus.jsonl").string() << " and " << (dir / "pretrain_corpus.jsonl").string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const ExperimentConfig& config, std::ostream& out, std::ostream& err) {
  const Backbone backbone = prepare_backbone(config, &err);
  make_dir(config.output);
  const std::filesystem::path path = std::filesystem::path(config.output) / "backbone.json";
  write_checkpoint(path, backbone_checkpoint(backbone));
  const SyntheticCorpus corpus = gen_pretrain_corpus(config.data, derive_seed(config.seed, "data"));
  const AlignmentGap gap = alignment_gap(captioned_pairs(corpus, Split::kTest), backbone);
  out << json{{"checkpoint", path.string()},
              {"hash", snapshot(backbone).hash},
              {"temperature", backbone.temperature()},
              {"held_out_matched", gap.matched},
              {"held_out_mismatched", gap.mismatched},
              {"held_out_gap", gap.gap()}}
             .dump(2)
      << '\n';
  return kExitOk;
}

/// Central-difference check of the tuning loss over every trainable tensor of
/// the first learning mode, on a freshly initialized backbone.
int cmd_grad_check(const ExperimentConfig& config, std::size_t coords, double eps, double tolerance,
                   std::ostream& out) {
  Mode mode = Mode::kMudpt;
  for (Mode m : config.modes) {
    if (mode_learns(m)) {
      mode = m;
      break;
    }
  }
  const Backbone backbone = Backbone::init(config.model, derive_seed(config.seed, "backbone"));
  const SyntheticCorpus corpus = gen_corpus(config.data, derive_seed(config.seed, "data"));
  PromptParams prompts = PromptParams::init(config.prompt.for_mode(mode), backbone, Vocabulary::template_tokens(),
                                            derive_seed(config.seed, "prompts"));
  const FewShotSplit split = few_shot_sample(corpus, config.evaluation.shots, derive_seed(config.seed, "few_shot"));

  // One batch spread over different classes.
  std::vector<Tensor> images;
  std::vector<int> labels;
  const std::size_t stride = std::max<std::size_t>(1, split.train.size() / config.schedule.batch_size);
  for (std::size_t b = 0; b < config.schedule.batch_size && b * stride < split.train.size(); ++b) {
    const Example& e = corpus.examples[split.train[b * stride]];
    images.push_back(e.image);
    labels.push_back(e.class_id);
  }
  const auto names = corpus.class_names();
  const auto loss_fn = [&] {
    const PromptContext ctx = prepare_prompts(prompts);
    const ClassifierHead head = synthesize_classifier(names, backbone, ctx, Vocabulary::template_tokens());
    return tuning_loss(images, labels, backbone, ctx, head);
  };
  prompts.set_trainable(true);
  std::vector<NamedTensor> params = prompts.named_parameters();
  GradCheckOptions options;
  options.eps = eps;
  options.max_coords_per_tensor = coords;
  options.seed = derive_seed(config.seed, "grad_check");
  const GradCheckResult r = grad_check(loss_fn, params, options);
  const bool passed = r.max_rel_error <= tolerance;
  out << json{{"mode", mode_name(mode)},
              {"parameters", prompts.parameter_count()},
              {"coordinates", r.coordinates},
              {"max_rel_error", r.max_rel_error},
              {"worst", r.worst_tensor + "[" + std::to_string(r.worst_index) + "]"},
              {"worst_analytic", r.worst_analytic},
              {"worst_numeric", r.worst_numeric},
              {"tolerance", tolerance},
              {"passed", passed}}
             .dump(2)
      << '\n';
  return passed ? kExitOk : kExitFailure;
}

int cmd_report_diff(const std::string& a, const std::string& b, std::ostream& out) {
  const auto lines = report_diff(read_json(a, false), read_json(b, false));
  for (const std::string& l : lines) out << l << '\n';
  if (lines.empty()) out << "reports match (ignoring " << ExperimentReport::kWallTimeField << ")\n";
  return lines.empty() ? kExitOk : kExitFailure;
}

int exit_code_for(const Error& e) {
  const std::string kind = e.kind();
  if (kind == "config" || kind == "vocabulary") return kExitConfig;
  if (kind == "numeric") return kExitNumeric;
  if (kind == "io") return kExitIo;
  return kExitFailure;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-modal deep prompt tuning experiments on a synthetic image-text world"};
  app.require_subcommand(1);

  Overrides overrides;
  const auto add_overrides = [&overrides](CLI::App* cmd) {
    cmd->add_option("--seed", overrides.seed, "Root seed");
    cmd->add_option("--out", overrides.out, "Output directory");
    cmd->add_option("--mode", overrides.modes, "Mode to run (repeatable)");
  };

  std::string config_path;
  CLI::App* run = app.add_subcommand("run", "Pretrain if needed, tune and evaluate; write reports");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  add_overrides(run);

  CLI::App* gen = app.add_subcommand("gen-data", "Write the downstream and pretraining corpora as JSONL");
  gen->add_option("config", config_path, "Experiment config (JSON)")->required();
  add_overrides(gen);

  CLI::App* pre = app.add_subcommand("pretrain", "Contrastively pretrain the backbone and save it");
  pre->add_option("config", config_path, "Experiment config (JSON)")->required();
  add_overrides(pre);

  std::size_t coords = 256;
  double eps = 1e-4;
  double tolerance = 1e-3;
  CLI::App* grad = app.add_subcommand("grad-check", "Finite-difference check of the tuning loss gradient");
  grad->add_option("config", config_path, "Experiment config (JSON)")->required();
  grad->add_option("--coords", coords, "Coordinates sampled per tensor");
  grad->add_option("--eps", eps, "Central-difference step");
  grad->add_option("--tolerance", tolerance, "Largest accepted relative error");
  add_overrides(grad);

  std::string report_a, report_b;
  CLI::App* diff = app.add_subcommand("report-diff", "Compare two report.json files, ignoring wall time");
  diff->add_option("a", report_a)->required();
  diff->add_option("b", report_b)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (diff->parsed()) return cmd_report_diff(report_a, report_b, out);
    const ExperimentConfig config = load_with_overrides(config_path, overrides);
    if (run->parsed()) return cmd_run(config, out, err);
    if (gen->parsed()) return cmd_gen_data(config, out);
    if (pre->parsed()) return cmd_pretrain(config, out, err);
    if (grad->parsed()) return cmd_grad_check(config, coords, eps, tolerance, out);
  } catch (const Error& e) {
    err << "error [" << e.kind() << "]: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace mudpt
