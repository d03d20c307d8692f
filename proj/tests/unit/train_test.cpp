#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pneumolens/image.hpp"
#include "pneumolens/train.hpp"
#include "support/temp_dir.hpp"

namespace pl = pneumolens;
using pl::AdamState;
using pl::Batch;
using pl::EvalResult;
using pl::Graph;
using pl::NamedTensor;
using pl::Tensor;
using pl::TrainConfig;

namespace {

using Params = std::vector<NamedTensor<float>>;

Params scalar_param(float w) { return {{"w", Tensor<float>({1}, w)}}; }

void square_loss_grad(Params& ps) {
  Graph<float> g;
  auto w = g.parameter(ps[0].tensor);
  ps[0].tensor.zero_grad();
  auto r = pl::reshape(g, w, {1, 1});
  g.backward(pl::sum(g, pl::dense(g, r, r, g.constant(Tensor<float>({1}, 0.0f)))));  // w²
}

// Two classes separable by mean brightness of channel 0.
std::vector<Batch> separable_batches(std::size_t batches, std::size_t per_batch, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.3f);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < batches; ++b) {
    Batch batch{Tensor<float>({per_batch, 3, size, size}), Tensor<float>({per_batch}), {}};
    for (std::size_t n = 0; n < per_batch; ++n) {
      const float y = static_cast<float>((n + b) % 2);
      batch.labels[n] = y;
      for (std::size_t i = 0; i < 3 * size * size; ++i)
        batch.images[n * 3 * size * size + i] = noise(rng) + (i < size * size ? (y > 0 ? 1.0f : -1.0f) : 0.0f);
      batch.indices.push_back(b * per_batch + n);
    }
    out.push_back(std::move(batch));
  }
  return out;
}

pl::FitHooks injected(const std::vector<double>& losses, std::vector<double>* lrs = nullptr,
                      std::vector<std::size_t>* snapshots = nullptr, int* restores = nullptr) {
  auto epoch = std::make_shared<std::size_t>(0);
  pl::FitHooks h;
  h.run_epoch = [epoch, lrs](std::size_t e, double lr) {
    *epoch = e;
    if (lrs) lrs->push_back(lr);
    return 0.0;
  };
  h.validate = [epoch, losses] { return EvalResult{losses.at(*epoch - 1), 0.5}; };
  h.snapshot = [epoch, snapshots] {
    if (snapshots) snapshots->push_back(*epoch);
  };
  h.restore = [restores] {
    if (restores) ++*restores;
  };
  return h;
}

}  // namespace

TEST(Adam, OneStepOnSquareLoss) {
  auto ps = scalar_param(1.0f);
  square_loss_grad(ps);
  ASSERT_FLOAT_EQ(ps[0].tensor.grad()[0], 2.0f);
  AdamState<float> st;
  pl::adam_step(ps, st, 1e-4, TrainConfig{});
  EXPECT_NEAR(ps[0].tensor[0], 1.0 - 1e-4 * (2.0 / (2.0 + 1e-8)), 1e-7);
  EXPECT_NEAR(ps[0].tensor[0], 0.9999, 1e-7);
  EXPECT_EQ(st.t, 1u);
  EXPECT_FLOAT_EQ(st.m[0][0], 0.2f);
  EXPECT_FLOAT_EQ(st.v[0][0], 0.004f);
}

TEST(Adam, MatchesHandRolledUpdateOverManySteps) {
  TrainConfig cfg;
  auto ps = scalar_param(1.5f);
  AdamState<float> st;
  double w = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 50; ++t) {
    square_loss_grad(ps);
    pl::adam_step(ps, st, 1e-2, cfg);
    const double g = 2 * w;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 1e-2 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(ps[0].tensor[0], w, 1e-5);
  EXPECT_EQ(st.t, 50u);
}

TEST(Adam, ZeroGradientLeavesParametersButAdvancesStep) {
  auto ps = scalar_param(3.0f);
  ps[0].tensor.zero_grad();
  AdamState<float> st;
  pl::adam_step(ps, st, 1e-3, TrainConfig{});
  pl::adam_step(ps, st, 1e-3, TrainConfig{});
  EXPECT_EQ(ps[0].tensor[0], 3.0f);
  EXPECT_EQ(st.t, 2u);
}

TEST(Adam, ZeroLearningRateStillUpdatesMoments) {
  auto ps = scalar_param(1.0f);
  square_loss_grad(ps);
  AdamState<float> st;
  pl::adam_step(ps, st, 0.0, TrainConfig{});
  EXPECT_EQ(ps[0].tensor[0], 1.0f);
  EXPECT_GT(st.m[0][0], 0.0f);
  EXPECT_GT(st.v[0][0], 0.0f);
}

TEST(Adam, NonFiniteGradientAbortsWithoutWriting) {
  Params ps{{"a", Tensor<float>({2}, 1.0f)}, {"b.weight", Tensor<float>({2}, 1.0f)}};
  ps[0].tensor.grad() = {0.5f, 0.5f};
  ps[1].tensor.grad() = {0.5f, std::numeric_limits<float>::quiet_NaN()};
  AdamState<float> st;
  try {
    pl::adam_step(ps, st, 1e-2, TrainConfig{});
    FAIL();
  } catch (const pl::NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("b.weight"), std::string::npos);
  }
  EXPECT_EQ(st.t, 0u);
  EXPECT_EQ(ps[0].tensor[0], 1.0f);
}

TEST(Adam, MomentsMirrorParametersAndSecondMomentNonNegative) {
  auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 1);
  auto batches = separable_batches(2, 4, 16, 3);
  AdamState<float> st;
  pl::train_epoch(net, batches, st, 1e-3, TrainConfig{});
  ASSERT_EQ(st.m.size(), net.parameters().size());
  EXPECT_EQ(st.t, 2u);
  for (std::size_t k = 0; k < st.m.size(); ++k) {
    EXPECT_EQ(st.m[k].size(), net.parameters()[k].tensor.size());
    EXPECT_EQ(st.v[k].size(), net.parameters()[k].tensor.size());
    for (float v : st.v[k]) EXPECT_GE(v, 0.0f);
  }
}

TEST(TrainEpoch, FrozenOptimizerRepeatsLoss) {
  auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 2);
  auto batches = separable_batches(3, 4, 16, 4);
  AdamState<float> st;
  const double a = pl::train_epoch(net, batches, st, 0.0, TrainConfig{});
  const double b = pl::train_epoch(net, batches, st, 0.0, TrainConfig{});
  EXPECT_EQ(a, b);
}

TEST(TrainEpoch, SingleBatchMeanIsThatBatchLoss) {
  auto net = pl::Network<float>::build(pl::mini_effnet_spec(16), 2);
  auto batches = separable_batches(1, 5, 16, 5);
  auto copy = net;
  Graph<float> g;
  auto r = copy.forward(g, g.constant(batches[0].images), pl::Mode::kTrain);
  const double expected = g.value(pl::bce_loss(g, r.probability, g.constant(batches[0].labels)))[0];
  AdamState<float> st;
  EXPECT_DOUBLE_EQ(pl::train_epoch(net, batches, st, 1e-3, TrainConfig{}), expected);
}

TEST(TrainEpoch, BatchSizeWeightedMean) {
  auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 2);
  auto batches = separable_batches(2, 3, 16, 6);
  batches.push_back(separable_batches(1, 1, 16, 7)[0]);
  std::vector<double> losses;
  for (const auto& b : batches) {
    Graph<float> g;
    auto r = net.forward(g, g.constant(b.images), pl::Mode::kTrain);
    losses.push_back(g.value(pl::bce_loss(g, r.probability, g.constant(b.labels)))[0]);
  }
  AdamState<float> st;
  EXPECT_NEAR(pl::train_epoch(net, batches, st, 0.0, TrainConfig{}), (3 * losses[0] + 3 * losses[1] + losses[2]) / 7,
              1e-12);
  EXPECT_THROW(pl::train_epoch(net, std::vector<Batch>{}, st, 0.0, TrainConfig{}), std::invalid_argument);
}

TEST(TrainEpoch, LossFallsOnSeparableData) {
  auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 3);
  auto batches = separable_batches(4, 8, 16, 8);
  AdamState<float> st;
  std::vector<double> losses;
  for (int e = 0; e < 3; ++e) losses.push_back(pl::train_epoch(net, batches, st, 1e-3, TrainConfig{}));
  EXPECT_LT(losses[2], losses[0]);
}

TEST(EvaluateLoss, ConstantHalfPredictor) {
  auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 3);
  auto& w = net.parameter("head.dense.weight");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  auto batches = separable_batches(2, 4, 16, 9);
  const auto before = net.checksum();
  const auto r = pl::evaluate_loss(net, batches);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-7);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);  // 0.5 counts as positive
  EXPECT_EQ(pl::evaluate_loss(net, batches), r);
  EXPECT_EQ(net.checksum(), before);
}

TEST(EvaluateLoss, ConfidentPerfectPredictor) {
  auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 3);
  auto& w = net.parameter("head.dense.weight");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  net.parameter("head.dense.bias")[0] = 30.0f;
  auto batches = separable_batches(1, 4, 16, 9);
  std::fill(batches[0].labels.data().begin(), batches[0].labels.data().end(), 1.0f);
  const auto r = pl::evaluate_loss(net, batches);
  EXPECT_LT(r.loss, 1e-6);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
}

TEST(Plateau, Examples) {
  TrainConfig cfg;
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 0.8}, 1e-4, cfg), 1e-4);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0}, 1e-4, cfg), 5e-5);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0, 1.0}, 1e-6, cfg), 1e-6);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0, 1.0}, 1.5e-6, cfg), 1e-6);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0 - 1e-9}, 1e-4, cfg), 5e-5);  // below the improvement delta
  EXPECT_THROW(pl::reduce_lr_on_plateau({}, 1e-4, cfg), std::invalid_argument);
  cfg.plateau_patience = 2;
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0}, 1e-4, cfg), 1e-4);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0, 1.1}, 1e-4, cfg), 5e-5);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0, 1.1, 1.2}, 5e-5, cfg), 5e-5);
  EXPECT_EQ(pl::reduce_lr_on_plateau({1.0, 1.0, 1.1, 1.2, 1.0}, 5e-5, cfg), 2.5e-5);
}

TEST(FitLoop, InjectedLossesStopAfterEpochFive) {
  std::vector<double> lrs;
  std::vector<std::size_t> snaps;
  int restores = 0;
  const auto log = pl::fit_loop(TrainConfig{}, injected({1.0, 0.9, 0.91, 0.92, 0.93, 0.5, 0.4}, &lrs, &snaps, &restores));
  ASSERT_EQ(log.epochs.size(), 5u);
  EXPECT_EQ(log.best_epoch, 2u);
  EXPECT_EQ(log.stop_reason, "early_stop");
  EXPECT_EQ(log.epochs.back().stop_reason, "early_stop");
  EXPECT_EQ(snaps, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(restores, 1);
  EXPECT_EQ(lrs, (std::vector<double>{1e-4, 1e-4, 1e-4, 5e-5, 2.5e-5}));
  for (std::size_t i = 0; i + 1 < log.epochs.size(); ++i) EXPECT_FALSE(log.epochs[i].stop_reason);
}

TEST(FitLoop, ImprovingLossesRunAllEpochs) {
  std::vector<double> losses;
  for (int i = 0; i < 12; ++i) losses.push_back(1.0 / (i + 1));
  std::vector<double> lrs;
  const auto log = pl::fit_loop(TrainConfig{}, injected(losses, &lrs));
  EXPECT_EQ(log.epochs.size(), 10u);
  EXPECT_EQ(log.stop_reason, "max_epochs");
  EXPECT_EQ(log.best_epoch, 10u);
  for (double lr : lrs) EXPECT_EQ(lr, 1e-4);
}

TEST(FitLoop, ProtocolInvariantsOnRandomSequences) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    TrainConfig cfg;
    cfg.max_epochs = 1 + trial % 10;
    cfg.early_stop_patience = 1 + trial % 4;
    cfg.plateau_patience = 1 + trial % 3;
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(std::round(u(rng) * 8) / 8);  // ties are common
    std::vector<double> lrs;
    const auto log = pl::fit_loop(cfg, injected(losses, &lrs));
    ASSERT_LE(log.epochs.size(), cfg.max_epochs);
    for (std::size_t i = 1; i < lrs.size(); ++i) ASSERT_LE(lrs[i], lrs[i - 1]);
    for (double lr : lrs) ASSERT_GE(lr, cfg.min_lr);
    double best = 1e9;
    std::size_t best_epoch = 0, since = 0, first_stop = 0;
    for (std::size_t e = 0; e < losses.size() && e < cfg.max_epochs; ++e) {
      if (losses[e] < best - 1e-8) {
        best = losses[e];
        best_epoch = e + 1;
        since = 0;
      } else if (++since == cfg.early_stop_patience && !first_stop) {
        first_stop = e + 1;
      }
      if (first_stop) break;
    }
    const std::size_t expected_epochs = first_stop ? first_stop : cfg.max_epochs;
    ASSERT_EQ(log.epochs.size(), expected_epochs) << trial;
    ASSERT_EQ(log.best_epoch, best_epoch);
    ASSERT_EQ(log.stop_reason, first_stop ? "early_stop" : "max_epochs");
    double min_logged = 1e9;
    for (const auto& r : log.epochs) min_logged = std::min(min_logged, r.val_loss);
    ASSERT_EQ(log.epochs[log.best_epoch - 1].val_loss, min_logged);
  }
}

TEST(FitLoop, NonFiniteValidationLossAborts) {
  EXPECT_THROW(pl::fit_loop(TrainConfig{}, injected({1.0, std::nan("")})), pl::NonFiniteError);
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.max_epochs, 10u);
  EXPECT_EQ(c.early_stop_patience, 3u);
  auto bad = [](auto mutate) {
    TrainConfig t;
    mutate(t);
    return t;
  };
  EXPECT_THROW(bad([](TrainConfig& t) { t.plateau_factor = 1.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& t) { t.plateau_factor = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& t) { t.plateau_patience = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& t) { t.early_stop_patience = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& t) { t.learning_rate = 0; }).validate(), std::invalid_argument);
  c.seed = 99;
  c.class_weighting = true;
  nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
}

TEST(ClassWeights, InverseFrequency) {
  std::vector<pl::Sample> s;
  for (int i = 0; i < 30; ++i) s.push_back({"p" + std::to_string(i), pl::Label::kPneumonia});
  for (int i = 0; i < 10; ++i) s.push_back({"n" + std::to_string(i), pl::Label::kNormal});
  EXPECT_TRUE(pl::class_weights(s, false).empty());
  const auto w = pl::class_weights(s, true);
  EXPECT_FLOAT_EQ(w[0], 2.0f);
  EXPECT_FLOAT_EQ(w[1], 40.0f / 60.0f);
}

namespace {

// Small on-disk dataset: positives carry a bright square, negatives don't.
std::vector<pl::Sample> write_dataset(const std::filesystem::path& dir, std::size_t n, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(60, 100);
  std::vector<pl::Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i % 2 == 0;
    pl::ImageBuffer img(16, 16, 1);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        img.pixels[y * 16 + x] = static_cast<std::uint8_t>(noise(rng) + (pos && x >= 4 && x < 12 && y >= 4 && y < 12 ? 120 : 0));
    const auto path = dir / ("img" + std::to_string(i) + ".png");
    pl::write_png(path, img);
    out.push_back({path, pos ? pl::Label::kPneumonia : pl::Label::kNormal});
  }
  return out;
}

}  // namespace

TEST(Fit, RestoresBestWeightsAndIsDeterministic) {
  pl::testing::TempDir dir;
  const auto train = write_dataset(dir.path() / "train", 24, 1);
  const auto val = write_dataset(dir.path() / "val", 8, 2);
  pl::PreprocessConfig pre;
  pre.target_size = 16;
  pre.seed = 5;
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 4;
  cfg.learning_rate = 3e-3;
  auto run = [&](std::size_t threads) {
    auto net = pl::Network<float>::build(pl::mini_dense_spec(16), 7);
    pl::BatchLoader tl(train, pre, cfg.batch_size, true, true, threads);
    pl::BatchLoader vl(val, pre.without_augmentation(), cfg.batch_size, false, false, threads);
    std::string streamed;
    auto log = pl::fit(net, tl, vl, cfg, [&](const pl::EpochRecord& r) { streamed += pl::to_json(r).dump() + "\n"; });
    EXPECT_EQ(streamed, pl::to_jsonl(log));
    const auto again = pl::evaluate_loss(net, vl.epoch_batches(0));
    EXPECT_EQ(again.loss, log.best_val_loss);
    EXPECT_EQ(again.loss, log.epochs[log.best_epoch - 1].val_loss);
    return std::make_pair(pl::to_jsonl(log), net.checksum());
  };
  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_NE(a.first.find("\"stop_reason\""), std::string::npos);
}
