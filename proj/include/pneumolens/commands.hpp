#pragma once

// Command implementations behind the CLI: synthesize, train, evaluate, explain.
// Every command writes a config echo (config.json) next to its artifacts and
// re-reads each artifact before reporting success.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pneumolens/data.hpp"
#include "pneumolens/gradcam.hpp"
#include "pneumolens/lime.hpp"
#include "pneumolens/metrics.hpp"
#include "pneumolens/model.hpp"
#include "pneumolens/train.hpp"

namespace pneumolens {

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kRunConfigVersion = 1;

// ---------------------------------------------------------------------------
// Synthetic planted-blob dataset

enum class Quadrant { kTopLeft, kTopRight, kBottomLeft, kBottomRight };

inline const char* quadrant_name(Quadrant q) {
  switch (q) {
    case Quadrant::kTopLeft: return "top_left";
    case Quadrant::kTopRight: return "top_right";
    case Quadrant::kBottomLeft: return "bottom_left";
    default: return "bottom_right";
  }
}

inline Quadrant parse_quadrant(const std::string& s) {
  for (auto q : {Quadrant::kTopLeft, Quadrant::kTopRight, Quadrant::kBottomLeft, Quadrant::kBottomRight})
    if (s == quadrant_name(q)) return q;
  throw std::invalid_argument("unknown quadrant '" + s + "' (valid: top_left, top_right, bottom_left, bottom_right)");
}

/// Quadrant containing pixel (x, y) of a width×height image.
inline Quadrant quadrant_of(double x, double y, double width, double height) {
  const bool right = x >= width / 2, bottom = y >= height / 2;
  return bottom ? (right ? Quadrant::kBottomRight : Quadrant::kBottomLeft)
                : (right ? Quadrant::kTopRight : Quadrant::kTopLeft);
}

struct SyntheticSpec {
  std::size_t image_size = 64;
  Quadrant quadrant = Quadrant::kTopLeft;
  std::array<double, 2> amplitude{110.0, 160.0};  // blob peak added to the background, gray levels
  std::array<double, 2> sigma{2.5, 4.5};          // blob radius, pixels
  double background = 60.0;                        // mean gray level
  double noise = 8.0;                              // σ of the smooth background texture, gray levels
  double grain = 2.0;                              // σ of per-pixel noise, gray levels
  std::size_t train = 100, val = 20, test = 40;    // images per split, half positive
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 8) throw std::invalid_argument("synthetic: image_size must be >= 8");
    if (!(amplitude[0] > 0 && amplitude[0] <= amplitude[1])) throw std::invalid_argument("synthetic: bad amplitude range");
    if (!(sigma[0] > 0 && sigma[0] <= sigma[1])) throw std::invalid_argument("synthetic: bad sigma range");
    if (!(noise >= 0) || !(grain >= 0) || !(background >= 0 && background <= 255)) {
      throw std::invalid_argument("synthetic: bad noise/grain/background");
    }
    for (std::size_t n : {train, val, test})
      if (n < 2 || n % 2) throw std::invalid_argument("synthetic: split counts must be even and >= 2");
  }

  /// Blob centres are drawn from the middle half of the quadrant.
  std::array<double, 4> center_box() const {
    const double s = static_cast<double>(image_size);
    const double x0 = (quadrant == Quadrant::kTopLeft || quadrant == Quadrant::kBottomLeft) ? s / 8 : s / 2 + s / 8;
    const double y0 = (quadrant == Quadrant::kTopLeft || quadrant == Quadrant::kTopRight) ? s / 8 : s / 2 + s / 8;
    return {x0, y0, x0 + s / 4, y0 + s / 4};
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"image_size", s.image_size}, {"quadrant", quadrant_name(s.quadrant)},
       {"amplitude", s.amplitude},   {"sigma", s.sigma},
       {"background", s.background}, {"noise", s.noise},
       {"grain", s.grain},
       {"train", s.train},           {"val", s.val},
       {"test", s.test},             {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.image_size = j.value("image_size", s.image_size);
  if (j.contains("quadrant")) s.quadrant = parse_quadrant(j["quadrant"].get<std::string>());
  s.amplitude = j.value("amplitude", s.amplitude);
  s.sigma = j.value("sigma", s.sigma);
  s.background = j.value("background", s.background);
  s.noise = j.value("noise", s.noise);
  s.grain = j.value("grain", s.grain);
  s.train = j.value("train", s.train);
  s.val = j.value("val", s.val);
  s.test = j.value("test", s.test);
  s.seed = j.value("seed", s.seed);
  s.validate();
}

struct BlobTruth {
  double x = 0, y = 0, sigma = 0, amplitude = 0;
};

/// One grayscale image: background level + vertical shading + smooth
/// texture (coarse gaussian grid, bilinearly upsampled) + fine grain, with a
/// gaussian blob added when `truth` is given. The texture is kept low
/// frequency so resampling augmentations barely change pixel statistics.
inline ImageBuffer render_synthetic(const SyntheticSpec& spec, Rng& rng, const BlobTruth* truth) {
  const std::size_t S = spec.image_size, G = S / 8 + 2;
  const double tilt = uniform(rng, -10.0, 10.0);
  ImageF coarse(G, G, 1);
  for (auto& v : coarse.pixels) v = static_cast<float>(spec.noise * standard_normal(rng));
  ImageBuffer img(S, S, 1);
  const double scale = static_cast<double>(G - 1) / static_cast<double>(S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      double v = spec.background + tilt * (static_cast<double>(y) / static_cast<double>(S) - 0.5) +
                 sample_bilinear(coarse, (static_cast<double>(x) + 0.5) * scale, (static_cast<double>(y) + 0.5) * scale, 0) +
                 spec.grain * standard_normal(rng);
      if (truth) {
        const double dx = static_cast<double>(x) + 0.5 - truth->x, dy = static_cast<double>(y) + 0.5 - truth->y;
        v += truth->amplitude * std::exp(-(dx * dx + dy * dy) / (2 * truth->sigma * truth->sigma));
      }
      img.at(x, y, 0) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return img;
}

/// Writes root/{train,val,test}/{NORMAL,PNEUMONIA}/*.png plus
/// ground_truth.json mapping each positive image (relative path) to its blob.
inline nlohmann::json cmd_synthesize(const SyntheticSpec& spec, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  spec.validate();
  nlohmann::json truth_json;
  truth_json["image_size"] = spec.image_size;
  truth_json["quadrant"] = quadrant_name(spec.quadrant);
  truth_json["positives"] = nlohmann::json::object();
  const auto box = spec.center_box();
  const std::vector<std::pair<std::string, std::size_t>> splits{{"train", spec.train}, {"val", spec.val}, {"test", spec.test}};
  try {
    for (std::size_t si = 0; si < splits.size(); ++si) {
      const auto& [split, count] = splits[si];
      for (const char* cls : {"NORMAL", "PNEUMONIA"}) fs::create_directories(root / split / cls);
      for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(spec.seed, {0x53594e54ULL, si, i}));
        const bool positive = i % 2 == 1;
        BlobTruth t;
        if (positive) {
          t.x = uniform(rng, box[0], box[2]);
          t.y = uniform(rng, box[1], box[3]);
          t.sigma = uniform(rng, spec.sigma[0], spec.sigma[1]);
          t.amplitude = uniform(rng, spec.amplitude[0], spec.amplitude[1]);
        }
        const auto img = render_synthetic(spec, rng, positive ? &t : nullptr);
        char name[32];
        std::snprintf(name, sizeof name, "img_%05zu.png", i);
        const fs::path rel = fs::path(split) / (positive ? "PNEUMONIA" : "NORMAL") / name;
        write_png(root / rel, img);
        if (positive) {
          truth_json["positives"][rel.generic_string()] = {
              {"x", t.x}, {"y", t.y}, {"sigma", t.sigma}, {"amplitude", t.amplitude}};
        }
      }
    }
    std::ofstream(root / "ground_truth.json") << truth_json.dump(2) << "\n";
  } catch (const fs::filesystem_error& e) {
    throw CommandError("cannot write synthetic dataset to " + root.string() + ": " + e.what());
  } catch (const ImageError& e) {
    throw CommandError("cannot write synthetic dataset to " + root.string() + ": " + e.what());
  }
  if (!fs::is_regular_file(root / "ground_truth.json")) {
    throw CommandError("cannot write " + (root / "ground_truth.json").string());
  }
  return truth_json;
}

// ---------------------------------------------------------------------------
// Run configuration

struct EvaluateOptions {
  std::string checkpoint;
  std::string split = "test";
  double threshold = kDefaultThreshold;
  std::string scores;  // fixture mode: CSV of label,score instead of a model
  std::string name;    // row label of the printed summary
};

struct ExplainOptions {
  std::string checkpoint;
  std::string image;
  std::string method = "both";
  std::string target_layer;
  double alpha = 0.5;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string dataset;
  std::string out = "out";
  std::string preset = "mini-dense";
  TrainConfig train;
  PreprocessConfig preprocess;
  LimeConfig lime;
  SyntheticSpec synthetic;
  EvaluateOptions evaluate;
  ExplainOptions explain;

  /// Submodule seeds derived from the top-level seed; submodule seed fields
  /// in the input are overwritten.
  void propagate_seed() {
    train.seed = derive_seed(seed, {0x545241494eULL});
    preprocess.seed = derive_seed(seed, {0x50524550ULL});
    lime.seed = derive_seed(seed, {0x4c494d45ULL});
    synthetic.seed = derive_seed(seed, {0x53594e54ULL});
  }
  std::uint64_t init_seed() const { return derive_seed(seed, {0x494e4954ULL}); }
};

inline RunConfig default_run_config() {
  RunConfig c;
  c.preprocess.target_size = 64;
  c.propagate_seed();
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["format_version"] = kRunConfigVersion;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["dataset"] = c.dataset;
  j["out"] = c.out;
  j["preset"] = c.preset;
  j["train"] = c.train;
  j["preprocess"] = c.preprocess;
  j["lime"] = c.lime;
  j["synthetic"] = c.synthetic;
  j["evaluate"] = {{"checkpoint", c.evaluate.checkpoint}, {"split", c.evaluate.split},
                   {"threshold", c.evaluate.threshold},   {"scores", c.evaluate.scores},
                   {"name", c.evaluate.name}};
  j["explain"] = {{"checkpoint", c.explain.checkpoint},
                  {"image", c.explain.image},
                  {"method", c.explain.method},
                  {"target_layer", c.explain.target_layer},
                  {"alpha", c.explain.alpha}};
  return j;
}

/// Missing keys keep defaults; unknown top-level keys are rejected so typos
/// in configs and overrides surface.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"format_version", "seed",     "threads",   "dataset",  "out",
                                           "preset",         "train",    "preprocess", "lime",    "synthetic",
                                           "evaluate",       "explain"};
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown config key '" + k + "'");
  if (j.value("format_version", kRunConfigVersion) != kRunConfigVersion) {
    throw std::invalid_argument("unsupported config format_version " + j["format_version"].dump());
  }
  RunConfig c = default_run_config();
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.dataset = j.value("dataset", c.dataset);
  c.out = j.value("out", c.out);
  c.preset = j.value("preset", c.preset);
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  if (j.contains("preprocess")) {
    nlohmann::json p = c.preprocess;
    p.update(j["preprocess"]);
    c.preprocess = p.get<PreprocessConfig>();
  }
  if (j.contains("lime")) {
    nlohmann::json p = c.lime;
    p.update(j["lime"]);
    c.lime = p.get<LimeConfig>();
  }
  if (j.contains("synthetic")) c.synthetic = j["synthetic"].get<SyntheticSpec>();
  if (j.contains("evaluate")) {
    const auto& e = j["evaluate"];
    c.evaluate.checkpoint = e.value("checkpoint", c.evaluate.checkpoint);
    c.evaluate.split = e.value("split", c.evaluate.split);
    c.evaluate.threshold = e.value("threshold", c.evaluate.threshold);
    c.evaluate.scores = e.value("scores", c.evaluate.scores);
    c.evaluate.name = e.value("name", c.evaluate.name);
  }
  if (j.contains("explain")) {
    const auto& e = j["explain"];
    c.explain.checkpoint = e.value("checkpoint", c.explain.checkpoint);
    c.explain.image = e.value("image", c.explain.image);
    c.explain.method = e.value("method", c.explain.method);
    c.explain.target_layer = e.value("target_layer", c.explain.target_layer);
    c.explain.alpha = e.value("alpha", c.explain.alpha);
  }
  if (c.threads < 1) throw std::invalid_argument("threads must be >= 1");
  c.train.validate();
  c.preprocess.validate();
  c.propagate_seed();
  return c;
}

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' must look like key.path=value");
  }
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty path segment");
    if (!node->is_object()) throw std::invalid_argument("override '" + assignment + "': '" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CommandError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CommandError("cannot parse " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Artifact helpers

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CommandError("cannot write " + path.string());
  out << text;
  if (!out) throw CommandError("write failed for " + path.string());
}

inline std::filesystem::path prepare_out_dir(const std::string& out) {
  namespace fs = std::filesystem;
  if (out.empty()) throw CommandError("output directory not set (--out)");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw CommandError("cannot create output directory " + out + ": " + ec.message());
  return out;
}

/// config.json: the resolved configuration plus command name; rerunning
/// with it reproduces the run.
inline void write_config_echo(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = to_json(cfg);
  write_text(dir / "config.json", j.dump(2) + "\n");
}

/// Re-reads an artifact: PNGs must decode, JSON must parse (JSONL line by
/// line), anything else must be nonempty.
inline void validate_artifact(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::is_regular_file(path) || fs::file_size(path) == 0) throw CommandError("artifact missing or empty: " + path.string());
  const auto ext = path.extension().string();
  try {
    if (ext == ".png") {
      read_image(path);
    } else if (ext == ".json") {
      read_json_file(path);
    } else if (ext == ".jsonl") {
      std::ifstream in(path);
      for (std::string line; std::getline(in, line);) {
        [[maybe_unused]] const auto row = nlohmann::json::parse(line);
      }
    }
  } catch (const std::exception& e) {
    throw CommandError("artifact failed validation: " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  TrainLog log;
  std::filesystem::path checkpoint;
  double best_val_accuracy = 0;
};

inline constexpr const char* kCheckpointName = "model.ckpt";

/// Trains the preset on dataset/{train,val}; writes model.ckpt (best
/// epoch), trainlog.jsonl and config.json into cfg.out.
inline TrainOutcome cmd_train(const RunConfig& cfg, std::ostream& log = std::cout) {
  if (cfg.dataset.empty()) throw CommandError("dataset root not set");
  if (!std::filesystem::is_directory(cfg.dataset)) throw CommandError("dataset root " + cfg.dataset + " does not exist");
  const auto manifest = scan_dataset(cfg.dataset);
  const auto out = prepare_out_dir(cfg.out);
  write_config_echo(out, "train", cfg);
  auto net = Network<float>::build(preset_spec(cfg.preset, cfg.preprocess.target_size), cfg.init_seed());
  const BatchLoader train(manifest.split("train"), cfg.preprocess, cfg.train.batch_size, true, true, cfg.threads);
  const BatchLoader val(manifest.split("val"), cfg.preprocess.without_augmentation(), cfg.train.batch_size, false, false,
                        cfg.threads);
  std::string jsonl;
  const auto trainlog = fit(net, train, val, cfg.train, [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << "  train_loss " << format4(r.train_loss) << "  val_loss " << format4(r.val_loss)
        << "  val_acc " << format4(r.val_accuracy) << "  lr " << r.learning_rate << (r.improved ? "  *" : "") << "\n";
  });
  TrainOutcome res;
  res.log = trainlog;
  for (const auto& r : trainlog.epochs)
    if (r.epoch == trainlog.best_epoch) res.best_val_accuracy = r.val_accuracy;
  res.checkpoint = out / kCheckpointName;
  save_checkpoint(net, res.checkpoint);
  write_text(out / "trainlog.jsonl", to_jsonl(trainlog));
  for (const char* f : {kCheckpointName, "trainlog.jsonl", "config.json"}) validate_artifact(out / f);
  load_checkpoint(res.checkpoint, net.spec());
  log << "best epoch " << trainlog.best_epoch << " (val_loss " << format4(trainlog.best_val_loss) << ", val_acc "
      << format4(res.best_val_accuracy) << "), stopped: " << trainlog.stop_reason << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

/// Eval-mode scores for every sample, in sample order.
inline std::vector<ScoredPrediction> score_samples(const Network<float>& net, const std::vector<Sample>& samples,
                                                   const PreprocessConfig& pre, std::size_t threads,
                                                   std::size_t batch_size = 32) {
  const BatchLoader loader(samples, pre.without_augmentation(), batch_size, false, false, threads);
  std::vector<ScoredPrediction> out;
  for (std::size_t b = 0; b < loader.num_batches(); ++b) {
    const auto batch = loader.load(0, b);
    const auto probs = net.predict(batch.images);
    for (std::size_t i = 0; i < batch.indices.size(); ++i)
      out.push_back({static_cast<double>(probs[i]), static_cast<int>(batch.labels[i])});
  }
  return out;
}

/// "label,score" CSV with a header line.
inline std::vector<ScoredPrediction> read_score_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CommandError("cannot open score file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("label,score", 0) != 0) throw CommandError("score file " + path.string() + " must start with 'label,score'");
  std::vector<ScoredPrediction> out;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    int label = -1;
    double score = 0;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%d,%lf%c", &label, &score, &tail) != 2) {
      throw CommandError("score file " + path.string() + " line " + std::to_string(n) + ": expected label,score");
    }
    out.push_back({score, label});
  }
  if (out.empty()) throw CommandError("score file " + path.string() + " has no rows");
  return out;
}

inline std::string score_csv(const std::vector<ScoredPrediction>& preds) {
  std::string out = "label,score\n";
  char buf[48];
  for (const auto& p : preds) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", p.label, p.score);
    out += buf;
  }
  return out;
}

/// Scores realizing a confusion matrix exactly at threshold 0.5.
inline std::vector<ScoredPrediction> scores_for_confusion(const ConfusionMatrix& cm) {
  std::vector<ScoredPrediction> out;
  out.insert(out.end(), cm.tp, {0.9, 1});
  out.insert(out.end(), cm.fn, {0.1, 1});
  out.insert(out.end(), cm.fp, {0.8, 0});
  out.insert(out.end(), cm.tn, {0.2, 0});
  return out;
}

inline std::string summary_header() {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %9s %9s %9s %9s %9s %9s %9s %9s", "Model", "Accuracy", "Precision", "Recall",
                "F1-Score", "MCC", "Kappa", "ROC-AUC", "Brier");
  return buf;
}

/// One Table-1-style row, 4 decimals; "n/a" for undefined entries.
inline std::string summary_row(const std::string& name, const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format4(*v) : std::string("n/a"); };
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-16s %9s %9s %9s %9s %9s %9s %9s %9s", name.c_str(), format4(r.basic.accuracy).c_str(),
                format4(r.basic.precision).c_str(), format4(r.basic.recall).c_str(), format4(r.basic.f1).c_str(),
                format4(r.mcc).c_str(), format4(r.kappa).c_str(), opt(r.roc_auc).c_str(), opt(r.brier).c_str());
  return buf;
}

/// metrics.json document: the full report plus a reason for each null.
inline nlohmann::json metrics_document(const MetricsReport& r, const std::string& source) {
  auto j = to_json(r);
  j["source"] = source;
  j["null_reasons"] = nlohmann::json::object();
  if (!r.roc_auc) j["null_reasons"]["roc_auc"] = "single-class split: ROC needs both labels";
  if (r.pr_points.empty()) j["null_reasons"]["pr_curve"] = "no positive labels: precision-recall curve undefined";
  if (r.basic.precision_undefined) j["null_reasons"]["precision"] = "no positive predictions; reported as 0";
  if (r.basic.recall_undefined) j["null_reasons"]["recall"] = "no positive labels; reported as 0";
  return j;
}

/// Writes metrics.json, roc.csv, pr.csv, confusion.json (+ scores.csv in
/// model mode) and prints the summary. Model mode reads evaluate.checkpoint
/// and dataset/evaluate.split; fixture mode reads evaluate.scores.
inline MetricsReport cmd_evaluate(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto& ev = cfg.evaluate;
  std::vector<ScoredPrediction> preds;
  std::string source, name = ev.name;
  if (!ev.scores.empty()) {
    preds = read_score_file(ev.scores);
    source = "scores:" + ev.scores;
    if (name.empty()) name = std::filesystem::path(ev.scores).stem().string();
  } else {
    if (ev.checkpoint.empty()) throw CommandError("evaluate needs a checkpoint (or a score file)");
    if (cfg.dataset.empty()) throw CommandError("dataset root not set");
    const auto net = load_checkpoint(ev.checkpoint);
    const auto manifest = scan_dataset(cfg.dataset, {ev.split});
    preds = score_samples(net, manifest.split(ev.split), cfg.preprocess, cfg.threads);
    source = "checkpoint:" + ev.checkpoint + " split:" + ev.split;
    if (name.empty()) name = net.spec().preset.empty() ? "model" : net.spec().preset;
  }
  const auto report = evaluate_predictions(preds, ev.threshold);
  const auto out = prepare_out_dir(cfg.out);
  write_config_echo(out, "evaluate", cfg);
  write_text(out / "metrics.json", metrics_document(report, source).dump(2) + "\n");
  write_text(out / "roc.csv", curve_csv(report.roc_points, "fpr", "tpr"));
  write_text(out / "pr.csv", curve_csv(report.pr_points, "recall", "precision"));
  write_text(out / "confusion.json", confusion_json(report.confusion, ev.threshold).dump(2) + "\n");
  std::vector<std::string> files{"metrics.json", "roc.csv", "pr.csv", "confusion.json", "config.json"};
  if (ev.scores.empty()) {
    write_text(out / "scores.csv", score_csv(preds));
    files.push_back("scores.csv");
  }
  for (const auto& f : files) validate_artifact(out / f);
  log << summary_header() << "\n" << summary_row(name, report) << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// explain

inline const std::vector<std::string>& explain_methods() {
  static const std::vector<std::string> kMethods{"gradcam", "lime", "both"};
  return kMethods;
}

/// decode → RGB → resize, rounded back to 8 bits (the image LIME perturbs).
inline ImageBuffer load_model_image(const std::filesystem::path& path, std::size_t size) {
  return convert<std::uint8_t>(load_resized(path, size));
}

/// Black box for LIME: masked RGB images → Pneumonia probabilities.
inline PredictFn model_predict_fn(const Network<float>& net, const PreprocessConfig& pre) {
  return [&net, pre](const std::vector<ImageBuffer>& imgs) {
    const std::size_t S = pre.target_size;
    Tensor<float> batch({imgs.size(), 3, S, S});
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const auto t = normalize(imgs[i], pre);
      std::copy(t.data().begin(), t.data().end(), batch.data().begin() + i * t.size());
    }
    const auto p = net.predict(batch);
    return std::vector<double>(p.begin(), p.end());
  };
}

struct ExplainOutcome {
  double probability = 0;
  std::optional<Heatmap> gradcam;
  std::optional<LimeExplanation> lime;
};

inline ExplainOutcome cmd_explain(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto& ex = cfg.explain;
  const auto& methods = explain_methods();
  if (std::find(methods.begin(), methods.end(), ex.method) == methods.end()) {
    throw CommandError("unknown explain method '" + ex.method + "' (valid: gradcam, lime, both)");
  }
  if (ex.checkpoint.empty()) throw CommandError("explain needs a checkpoint");
  if (ex.image.empty()) throw CommandError("explain needs an image");
  const auto net = load_checkpoint(ex.checkpoint);
  const std::size_t S = net.spec().input.height;
  PreprocessConfig pre = cfg.preprocess.without_augmentation();
  pre.target_size = S;
  const ImageBuffer original = read_image(ex.image);
  const ImageBuffer model_img = load_model_image(ex.image, S);
  const auto out = prepare_out_dir(cfg.out);
  write_config_echo(out, "explain", cfg);
  std::vector<std::string> files{"config.json"};
  ExplainOutcome res;
  const auto x = normalize(model_img, pre);
  res.probability = net.predict(x.reshaped({1, 3, S, S}))[0];
  log << "P(pneumonia) = " << format4(res.probability) << "\n";
  if (ex.method == "gradcam" || ex.method == "both") {
    auto hm = gradcam(net, x, ex.target_layer);
    write_png(out / "heatmap.png", heatmap_image(hm.normalized));
    write_png(out / "overlay.png", overlay(hm, original, ex.alpha));
    const auto [ax, ay] = argmax(hm.normalized);
    log << "grad-cam layer " << hm.target_layer << ", peak at (" << ax << ", " << ay << ")\n";
    files.insert(files.end(), {"heatmap.png", "overlay.png"});
    res.gradcam = std::move(hm);
  }
  if (ex.method == "lime" || ex.method == "both") {
    LimeConfig lc = cfg.lime;
    lc.threads = cfg.threads;
    auto [expl, sp] = explain(model_predict_fn(net, pre), model_img, lc);
    auto doc = to_json(expl, lc);
    doc["image_size"] = S;
    doc["segments"] = sp.labels;
    write_text(out / "lime.json", doc.dump(2) + "\n");
    const ImageBuffer display = (original.width == S && original.height == S) ? original : model_img;
    write_png(out / "lime_overlay.png", lime_overlay(display, sp, expl, std::min(lc.top_k, sp.count)));
    log << "lime: " << sp.count << " segments, local R2 " << format4(expl.local_r2) << ", top segments:";
    for (const auto& [s, w] : expl.top_k) log << " " << s << " (" << format4(w) << ")";
    log << "\n";
    files.insert(files.end(), {"lime.json", "lime_overlay.png"});
    res.lime = std::move(expl);
  }
  for (const auto& f : files) validate_artifact(out / f);
  return res;
}

// ---------------------------------------------------------------------------
// Localization check against synthetic ground truth

struct LocalizationResult {
  std::size_t hits = 0, total = 0;
  double rate() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

/// Grad-CAM argmax quadrant vs ground_truth.json for every positive image of
/// `split` (paths are relative to the dataset root).
inline LocalizationResult gradcam_localization(const Network<float>& net, const std::filesystem::path& dataset,
                                               const std::string& split, const PreprocessConfig& pre_in,
                                               std::size_t threads = 1) {
  const auto truth = read_json_file(dataset / "ground_truth.json");
  const double size = truth.at("image_size").get<double>();
  std::vector<std::pair<std::filesystem::path, Quadrant>> items;
  for (const auto& item : truth.at("positives").items()) {
    const std::string rel = item.key();
    const auto& t = item.value();
    if (std::filesystem::path(rel).begin()->string() != split) continue;
    items.emplace_back(dataset / rel, quadrant_of(t.at("x").get<double>(), t.at("y").get<double>(), size, size));
  }
  PreprocessConfig pre = pre_in.without_augmentation();
  pre.target_size = net.spec().input.height;
  std::vector<int> hit(items.size(), 0);
  parallel_for(items.size(), threads, [&](std::size_t i) {
    const auto img = load_model_image(items[i].first, pre.target_size);
    const auto hm = gradcam(net, normalize(img, pre));
    const auto [x, y] = argmax(hm.normalized);
    const double s = static_cast<double>(pre.target_size);
    hit[i] = quadrant_of(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, s, s) == items[i].second;
  });
  LocalizationResult r;
  r.total = items.size();
  for (int h : hit) r.hits += static_cast<std::size_t>(h);
  return r;
}

}  // namespace pneumolens
