// pneumolens command-line tool: synthesize | train | evaluate | explain | config

#include <CLI11.hpp>
#include <iostream>
#include <optional>

#include "pneumolens/commands.hpp"

namespace pl = pneumolens;

namespace {

struct Flags {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out;
  std::vector<std::string> overrides;
  // per-command
  std::string dataset, preset, checkpoint, split, scores, name, image, method, layer;
  std::optional<double> threshold;
};

/// config file → explicit flags → --set overrides, then validation.
pl::RunConfig resolve(const Flags& f) {
  nlohmann::json doc = f.config_file.empty() ? nlohmann::json::object() : pl::read_json_file(f.config_file);
  std::vector<std::string> sets;
  if (f.seed) sets.push_back("seed=" + std::to_string(*f.seed));
  if (f.threads) sets.push_back("threads=" + std::to_string(*f.threads));
  auto str = [&](const std::string& key, const std::string& v) {
    if (!v.empty()) pl::apply_override(doc, key + "=" + nlohmann::json(v).dump());
  };
  str("out", f.out);
  str("dataset", f.dataset);
  str("preset", f.preset);
  str("evaluate.checkpoint", f.checkpoint);
  str("explain.checkpoint", f.checkpoint);
  str("evaluate.split", f.split);
  str("evaluate.scores", f.scores);
  str("evaluate.name", f.name);
  str("explain.image", f.image);
  str("explain.method", f.method);
  str("explain.target_layer", f.layer);
  if (f.threshold) sets.push_back("evaluate.threshold=" + nlohmann::json(*f.threshold).dump());
  for (const auto& s : sets) pl::apply_override(doc, s);
  for (const auto& s : f.overrides) pl::apply_override(doc, s);
  return pl::run_config_from_json(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pneumonia classification toolkit: synthetic data, training, metrics, Grad-CAM and LIME"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config_file, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "top-level seed (every submodule seed derives from it)");
  app.add_option("--out", f.out, "output directory");
  app.add_option("--threads", f.threads, "worker threads (1 = deterministic reference mode)")->check(CLI::PositiveNumber);
  app.add_option("--set", f.overrides, "dotted override, e.g. train.learning_rate=3e-4 (repeatable)");

  auto* synth = app.add_subcommand("synthesize", "write the planted-blob dataset");
  auto* train = app.add_subcommand("train", "train a preset network");
  train->add_option("--dataset", f.dataset, "dataset root with train/val/test splits");
  train->add_option("--preset", f.preset, "mini-dense | mini-effnet");
  auto* eval = app.add_subcommand("evaluate", "metrics report for a checkpoint or a score file");
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  eval->add_option("--dataset", f.dataset, "dataset root");
  eval->add_option("--split", f.split, "split to score (default test)");
  eval->add_option("--threshold", f.threshold, "decision threshold (default 0.5)");
  eval->add_option("--scores", f.scores, "label,score CSV (bypasses the model)");
  eval->add_option("--name", f.name, "row label for the summary");
  auto* expl = app.add_subcommand("explain", "Grad-CAM and/or LIME for one image");
  expl->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  expl->add_option("--image", f.image, "PNG or JPEG image");
  expl->add_option("--method", f.method, "gradcam | lime | both");
  expl->add_option("--layer", f.layer, "Grad-CAM target layer (default: network's)");
  auto* show = app.add_subcommand("config", "print the resolved configuration");

  CLI11_PARSE(app, argc, argv);
  try {
    const auto cfg = resolve(f);
    if (synth->parsed()) {
      const auto out = pl::prepare_out_dir(cfg.out);
      const auto truth = pl::cmd_synthesize(cfg.synthetic, out);
      pl::write_config_echo(out, "synthesize", cfg);
      pl::validate_artifact(out / "ground_truth.json");
      std::cout << "wrote " << cfg.synthetic.train + cfg.synthetic.val + cfg.synthetic.test << " images ("
                << truth["positives"].size() << " positive) to " << out.string() << "\n";
    } else if (train->parsed()) {
      pl::cmd_train(cfg);
    } else if (eval->parsed()) {
      pl::cmd_evaluate(cfg);
    } else if (expl->parsed()) {
      pl::cmd_explain(cfg);
    } else if (show->parsed()) {
      std::cout << pl::to_json(cfg).dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
