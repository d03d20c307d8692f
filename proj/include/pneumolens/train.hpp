#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pneumolens/data.hpp"
#include "pneumolens/model.hpp"

namespace pneumolens {

/// Strict decrease needed for a validation loss to count as an improvement.
inline constexpr double kImprovementDelta = 1e-8;

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::size_t early_stop_patience = 3;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 1;
  double min_lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool class_weighting = false;  // inverse class frequency weights on the BCE terms
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (max_epochs == 0) fail("max_epochs must be >= 1");
    if (early_stop_patience == 0) fail("early_stop_patience must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must be in (0,1)");
    if (plateau_patience == 0) fail("plateau_patience must be >= 1");
    if (!(min_lr >= 0.0) || min_lr > learning_rate) fail("min_lr must be in [0, learning_rate]");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0,1)");
    if (!(eps > 0.0)) fail("eps must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},   {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},         {"early_stop_patience", c.early_stop_patience},
       {"plateau_factor", c.plateau_factor}, {"plateau_patience", c.plateau_patience},
       {"min_lr", c.min_lr},                 {"beta1", c.beta1},
       {"beta2", c.beta2},                   {"eps", c.eps},
       {"class_weighting", c.class_weighting}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.class_weighting = j.value("class_weighting", c.class_weighting);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;
};

/// One Adam update over `params` using their accumulated grads (a missing
/// grad counts as zero). All grads are checked before anything is written.
template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState<T>& st, double lr, const TrainConfig& cfg) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad())
      if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient for parameter '" + p.name + "'");
  }
  if (st.m.empty()) {
    for (auto& p : params) {
      st.m.emplace_back(p.tensor.size(), T{0});
      st.v.emplace_back(p.tensor.size(), T{0});
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameter list");
  ++st.t;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != p.size()) throw ShapeError("adam_step: moment size mismatch for '" + params[k].name + "'");
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = has ? static_cast<double>(p.grad()[i]) : 0.0;
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Epochs

/// Per-sample BCE weights: with class weighting, w_c = N / (2 · N_c) from
/// the training label counts; otherwise empty (uniform).
inline std::vector<float> class_weights(const std::vector<Sample>& train, bool enabled) {
  if (!enabled) return {};
  double counts[2] = {0, 0};
  for (const auto& s : train) counts[static_cast<int>(s.label)] += 1;
  const double n = counts[0] + counts[1];
  return {static_cast<float>(counts[0] > 0 ? n / (2 * counts[0]) : 1.0),
          static_cast<float>(counts[1] > 0 ? n / (2 * counts[1]) : 1.0)};
}

/// forward → bce → zero-grad → backward → adam per batch; returns the
/// batch-size-weighted mean loss.
template <typename Batches>
double train_epoch(Network<float>& net, const Batches& batches, AdamState<float>& st, double lr,
                   const TrainConfig& cfg, const std::vector<float>& label_weights = {}) {
  double total = 0;
  std::size_t count = 0;
  for (const Batch& b : batches) {
    Graph<float> g;
    auto r = net.forward(g, g.constant(b.images), Mode::kTrain);
    std::vector<float> w;
    if (!label_weights.empty())
      for (float y : b.labels.data()) w.push_back(label_weights[y > 0.5f ? 1 : 0]);
    const NodeId loss = bce_loss(g, r.probability, g.constant(b.labels), std::move(w));
    net.zero_grad();
    g.backward(loss);
    adam_step(net.parameters(), st, lr, cfg);
    const std::size_t n = b.labels.size();
    total += static_cast<double>(g.value(loss)[0]) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw std::invalid_argument("train_epoch: no batches");
  return total / static_cast<double>(count);
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  bool operator==(const EvalResult&) const = default;
};

/// Eval-mode mean BCE and accuracy (probability ≥ 0.5 is positive).
template <typename Batches>
EvalResult evaluate_loss(const Network<float>& net, const Batches& batches) {
  double total = 0;
  std::size_t count = 0, correct = 0;
  for (const Batch& b : batches) {
    const auto probs = net.predict(b.images);
    Graph<double> g;
    Tensor<double> p({probs.size()}), y = b.labels.cast<double>();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      p[i] = probs[i];
      correct += ((probs[i] >= 0.5f) == (b.labels[i] > 0.5f)) ? 1 : 0;
    }
    total += g.value(bce_loss(g, g.constant(p), g.constant(y)))[0] * static_cast<double>(probs.size());
    count += probs.size();
  }
  if (count == 0) throw std::invalid_argument("evaluate_loss: no batches");
  return {total / static_cast<double>(count), static_cast<double>(correct) / static_cast<double>(count)};
}

// ---------------------------------------------------------------------------
// Schedule

/// Number of trailing epochs since the last strict improvement of the
/// running best (0 when the latest epoch improved).
inline std::size_t epochs_since_improvement(const std::vector<double>& history) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t since = 0;
  for (double v : history) {
    if (v < best - kImprovementDelta) {
      best = v;
      since = 0;
    } else {
      ++since;
    }
  }
  return since;
}

/// Plateau rule: after every plateau_patience consecutive non-improving
/// epochs, lr ← max(lr · factor, min_lr). The counter restarts after each
/// reduction.
inline double reduce_lr_on_plateau(const std::vector<double>& history, double lr, const TrainConfig& cfg) {
  if (history.empty()) throw std::invalid_argument("reduce_lr_on_plateau: empty history");
  const std::size_t since = epochs_since_improvement(history);
  if (since > 0 && since % cfg.plateau_patience == 0) return std::max(lr * cfg.plateau_factor, cfg.min_lr);
  return lr;
}

// ---------------------------------------------------------------------------
// Fit

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double learning_rate = 0;  // in effect during this epoch
  bool improved = false;
  std::size_t best_epoch = 0;
  std::optional<std::string> stop_reason;  // set on the final record
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string stop_reason;  // "max_epochs" | "early_stop"
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},
                   {"train_loss", r.train_loss},
                   {"val_loss", r.val_loss},
                   {"val_accuracy", r.val_accuracy},
                   {"learning_rate", r.learning_rate},
                   {"improved", r.improved},
                   {"best_epoch", r.best_epoch}};
  j["stop_reason"] = r.stop_reason ? nlohmann::json(*r.stop_reason) : nlohmann::json(nullptr);
  return j;
}

inline std::string to_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& r : log.epochs) out += to_json(r).dump() + "\n";
  return out;
}

/// Protocol hooks for fit_loop. `run_epoch(epoch, lr)` trains one epoch and
/// returns its mean loss; `validate()` returns the validation result;
/// `snapshot()` keeps the current weights as best; `restore()` reloads them.
struct FitHooks {
  std::function<double(std::size_t, double)> run_epoch;
  std::function<EvalResult()> validate;
  std::function<void()> snapshot = [] {};
  std::function<void()> restore = [] {};
  std::function<void(const EpochRecord&)> on_epoch = [](const EpochRecord&) {};
};

/// Early stopping on validation loss with plateau LR reduction and
/// best-epoch restoration.
inline TrainLog fit_loop(const TrainConfig& cfg, const FitHooks& hooks) {
  cfg.validate();
  TrainLog log;
  std::vector<double> history;
  double lr = cfg.learning_rate;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.train_loss = hooks.run_epoch(epoch, lr);
    const EvalResult val = hooks.validate();
    if (!std::isfinite(val.loss)) throw NonFiniteError("validation loss is not finite at epoch " + std::to_string(epoch));
    rec.val_loss = val.loss;
    rec.val_accuracy = val.accuracy;
    history.push_back(val.loss);
    rec.improved = val.loss < log.best_val_loss - kImprovementDelta;
    if (rec.improved) {
      log.best_val_loss = val.loss;
      log.best_epoch = epoch;
      hooks.snapshot();
    }
    rec.best_epoch = log.best_epoch;
    const bool stop = epochs_since_improvement(history) >= cfg.early_stop_patience;
    if (stop) {
      rec.stop_reason = "early_stop";
    } else if (epoch == cfg.max_epochs) {
      rec.stop_reason = "max_epochs";
    }
    log.epochs.push_back(rec);
    hooks.on_epoch(rec);
    if (rec.stop_reason) {
      log.stop_reason = *rec.stop_reason;
      break;
    }
    lr = reduce_lr_on_plateau(history, lr, cfg);
  }
  hooks.restore();
  return log;
}

/// Trains `net` in place; on return it holds the best-epoch weights.
/// `on_epoch` sees each record as soon as the epoch ends.
inline TrainLog fit(Network<float>& net, const BatchLoader& train, const BatchLoader& val, const TrainConfig& cfg,
                    const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  AdamState<float> st;
  const auto weights = class_weights(train.samples(), cfg.class_weighting);
  auto best_params = net.parameters();
  auto best_buffers = net.buffers();
  FitHooks hooks;
  hooks.run_epoch = [&](std::size_t epoch, double lr) {
    return train_epoch(net, train.epoch_batches(epoch - 1), st, lr, cfg, weights);
  };
  const auto val_batches = val.epoch_batches(0);
  hooks.validate = [&] { return evaluate_loss(net, val_batches); };
  hooks.snapshot = [&] {
    best_params = net.parameters();
    best_buffers = net.buffers();
  };
  hooks.restore = [&] {
    for (std::size_t i = 0; i < best_params.size(); ++i) net.parameters()[i].tensor = best_params[i].tensor;
    for (std::size_t i = 0; i < best_buffers.size(); ++i) net.buffers()[i].tensor = best_buffers[i].tensor;
    net.zero_grad();
  };
  if (on_epoch) hooks.on_epoch = on_epoch;
  return fit_loop(cfg, hooks);
}

}  // namespace pneumolens
