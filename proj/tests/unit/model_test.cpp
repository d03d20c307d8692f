#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pneumolens/image.hpp"
#include "pneumolens/model.hpp"
#include "pneumolens/parallel.hpp"
#include "support/gradcheck.hpp"
#include "support/netcheck.hpp"
#include "support/temp_dir.hpp"

namespace pl = pneumolens;
using pl::Graph;
using pl::Mode;
using pl::NetworkSpec;
using pl::NodeId;
using pl::Tensor;
using pl::testing::random_tensor;

namespace {

using Net = pl::Network<float>;

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k; }
std::size_t bn_params(std::size_t c) { return 2 * c; }

std::size_t dense_block_params(std::size_t c, std::size_t k, std::size_t layers) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layers; ++l) n += bn_params(c + l * k) + conv_params(c + l * k, k, 3);
  return n;
}

std::size_t mbconv_params(std::size_t in, std::size_t out, std::size_t e, std::size_t dw_k) {
  const std::size_t x = in * e, r = static_cast<std::size_t>(std::ceil(x * 0.25));
  return conv_params(in, x, 1) + bn_params(x) + x * dw_k * dw_k + bn_params(x) + (x * r + r) + (r * x + x) +
         conv_params(x, out, 1) + bn_params(out);
}

NetworkSpec single_block(pl::BlockSpec b, pl::FeatureShape in) {
  NetworkSpec s;
  s.input = in;
  s.blocks = {std::move(b)};
  return s;
}

Tensor<float> images(std::size_t n, const pl::FeatureShape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor<float>({n, s.channels, s.height, s.width}, rng, -1.0, 1.0);
}

Tensor<float> labels(std::size_t n) {
  Tensor<float> t({n});
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<float>(i % 2);
  return t;
}

struct Run {
  Graph<float> g;
  pl::ForwardResult<float> r;
};

std::unique_ptr<Run> run(Net& net, const Tensor<float>& x, Mode mode = Mode::kEval, pl::ForwardOptions opt = {}) {
  auto out = std::make_unique<Run>();
  out->r = net.forward(out->g, out->g.constant(x), mode, opt);
  return out;
}

}  // namespace

TEST(Presets, MiniDenseParameterCountMatchesHandFormula) {
  const std::size_t expected = conv_params(3, 16, 4) + bn_params(16)      // stem
                               + dense_block_params(16, 8, 4)             // dense1 → 48
                               + bn_params(48) + conv_params(48, 24, 1)   // trans1
                               + dense_block_params(24, 8, 4)             // dense2 → 56
                               + 56 + 1;                                  // head
  EXPECT_EQ(expected, 21049u);
  EXPECT_EQ(Net::build(pl::mini_dense_spec(), 1).parameter_count(), expected);
  EXPECT_EQ(Net::build(pl::mini_dense_spec(32), 1).parameter_count(), expected);
}

TEST(Presets, MiniEffnetParameterCountMatchesHandFormula) {
  const std::size_t expected = conv_params(3, 16, 4) + bn_params(16) + mbconv_params(16, 16, 1, 3) +
                               mbconv_params(16, 24, 4, 4) + mbconv_params(24, 24, 4, 3) +
                               mbconv_params(24, 40, 4, 4) + conv_params(40, 64, 1) + bn_params(64) + 64 + 1;
  EXPECT_EQ(expected, 33973u);
  EXPECT_EQ(Net::build(pl::mini_effnet_spec(), 1).parameter_count(), expected);
}

TEST(Presets, SymbolicShapesMatchObservedShapes) {
  for (const auto& name : pl::preset_names()) {
    for (std::size_t size : {16u, 32u, 64u}) {
      auto net = Net::build(pl::preset_spec(name, size), 3);
      auto x = images(2, net.spec().input, 5);
      auto r = run(net, x, Mode::kTrain);
      for (std::size_t i = 0; i < net.spec().blocks.size(); ++i) {
        const auto& b = net.spec().blocks[i];
        const auto& s = net.block_shapes()[i];
        EXPECT_EQ(r->g.shape(r->r.activations.at(b.name)), (pl::Shape{2, s.channels, s.height, s.width}))
            << name << " " << size << " " << b.name;
      }
      EXPECT_EQ(r->g.shape(r->r.probability), (pl::Shape{2}));
    }
  }
}

TEST(Presets, GradcamTargetIsCachedAndUnique) {
  for (const auto& name : pl::preset_names()) {
    auto net = Net::build(pl::preset_spec(name), 3);
    const auto& target = net.spec().gradcam_target;
    ASSERT_FALSE(target.empty());
    auto r = run(net, images(1, net.spec().input, 1));
    ASSERT_TRUE(r->r.activations.count(target));
    EXPECT_EQ(r->g.shape(r->r.activations.at(target)).size(), 4u);
    const auto names = net.layer_names();
    EXPECT_EQ(std::count(names.begin(), names.end(), target), 1);
  }
  EXPECT_EQ(Net::build(pl::mini_dense_spec(), 1).spec().gradcam_target, "dense2");
}

TEST(Presets, GradcamTargetDefaultsToLastBlockAndIsValidated) {
  auto spec = pl::mini_dense_spec();
  spec.gradcam_target.clear();
  EXPECT_EQ(Net::build(spec, 1).spec().gradcam_target, "dense2");
  spec.gradcam_target = "nope";
  EXPECT_THROW(Net::build(spec, 1), pl::SpecError);
  spec.gradcam_target = "dense1";
  EXPECT_EQ(Net::build(spec, 1).spec().gradcam_target, "dense1");
}

TEST(Presets, UnknownPresetRejected) { EXPECT_THROW(pl::preset_spec("resnet"), pl::SpecError); }

TEST(Build, SameSeedIsBitwiseIdentical) {
  auto a = Net::build(pl::mini_effnet_spec(), 42);
  auto b = Net::build(pl::mini_effnet_spec(), 42);
  auto c = Net::build(pl::mini_effnet_spec(), 43);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_EQ(a.parameters()[i].tensor.data(), b.parameters()[i].tensor.data());
}

TEST(Build, InitializationFollowsConventions) {
  auto net = Net::build(pl::mini_dense_spec(), 7);
  for (const auto& p : net.parameters()) {
    const auto& d = p.tensor.data();
    if (p.name.ends_with(".gamma")) {
      EXPECT_TRUE(std::all_of(d.begin(), d.end(), [](float v) { return v == 1.0f; })) << p.name;
    } else if (p.name.ends_with(".beta") || p.name.ends_with(".bias")) {
      EXPECT_TRUE(std::all_of(d.begin(), d.end(), [](float v) { return v == 0.0f; })) << p.name;
    }
  }
  // He fan-in: dense1 layer3 conv has fan-in 40·9, std sqrt(2/360)
  const auto& w = net.parameter("dense1.layer3.conv.weight").data();
  double ss = 0;
  for (float v : w) ss += double(v) * v;
  const double sd = std::sqrt(ss / w.size());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 360.0), 0.1 * std::sqrt(2.0 / 360.0));
  for (const auto& b : net.buffers()) {
    const float want = b.name.ends_with("running_var") ? 1.0f : 0.0f;
    for (float v : b.tensor.data()) EXPECT_EQ(v, want);
  }
}

TEST(Build, ChannelMismatchNamesBoundary) {
  auto spec = pl::mini_dense_spec();
  spec.blocks[2].in_channels = 40;  // dense1 emits 48
  try {
    Net::build(spec, 1);
    FAIL() << "expected SpecError";
  } catch (const pl::SpecError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'dense1' -> 'trans1'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("40"), std::string::npos) << msg;
  }
  spec = pl::mini_dense_spec();
  spec.blocks[0].in_channels = 1;
  try {
    Net::build(spec, 1);
    FAIL() << "expected SpecError";
  } catch (const pl::SpecError& e) {
    EXPECT_NE(std::string(e.what()).find("input -> 'stem'"), std::string::npos) << e.what();
  }
}

TEST(Build, InvalidBlockParametersRejected) {
  const pl::FeatureShape in{8, 8, 8};
  EXPECT_THROW(Net::build(single_block({"d", pl::DenseBlockSpec{0, 2}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"t", pl::TransitionSpec{0.0}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"t", pl::TransitionSpec{1.5}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"m", pl::MBConvSpec{8, 0, 0.25, 1}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"m", pl::MBConvSpec{8, 2, 0.0, 1}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"m", pl::MBConvSpec{8, 2, 1.5, 1}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"m", pl::MBConvSpec{8, 2, 0.25, 3}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"c", pl::ConvBlockSpec{8, 3, 2, 1}}, in), 1), pl::SpecError);
  EXPECT_THROW(Net::build(single_block({"t", pl::TransitionSpec{0.5}}, {8, 7, 8}), 1), pl::SpecError);
  NetworkSpec dup = single_block({"a", pl::ConvBlockSpec{}}, in);
  dup.blocks.push_back({"a", pl::ConvBlockSpec{}});
  EXPECT_THROW(Net::build(dup, 1), pl::SpecError);
  NetworkSpec empty;
  EXPECT_THROW(Net::build(empty, 1), pl::SpecError);
}

TEST(DenseBlock, ChannelArithmetic) {
  auto net = Net::build(single_block({"d", pl::DenseBlockSpec{8, 4}}, {16, 6, 6}), 1);
  EXPECT_EQ(net.block_shapes()[0], (pl::FeatureShape{48, 6, 6}));
  auto r = run(net, images(2, {16, 6, 6}, 2), Mode::kTrain);
  EXPECT_EQ(r->g.shape(r->r.activations.at("d")), (pl::Shape{2, 48, 6, 6}));
}

TEST(DenseBlock, ZeroLayersIsIdentity) {
  auto net = Net::build(single_block({"d", pl::DenseBlockSpec{8, 0}}, {4, 5, 5}), 1);
  const auto x = images(2, {4, 5, 5}, 3);
  auto r = run(net, x);
  EXPECT_EQ(r->g.value(r->r.activations.at("d")).data(), x.data());
}

TEST(DenseBlock, LeadingChannelsEqualInput) {
  const pl::FeatureShape in{5, 6, 6};
  auto net = Net::build(single_block({"d", pl::DenseBlockSpec{3, 3}}, in), 1);
  const auto x = images(2, in, 4);
  auto r = run(net, x, Mode::kTrain);
  const auto& y = r->g.value(r->r.activations.at("d"));
  const std::size_t hw = 36, cout = 5 + 9;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t i = 0; i < hw; ++i) ASSERT_EQ(y[(n * cout + c) * hw + i], x[(n * 5 + c) * hw + i]);
}

TEST(DenseBlock, AblationHookChangesOutputs) {
  auto net = Net::build(pl::mini_dense_spec(32), 11);
  const auto x = images(2, net.spec().input, 12);
  auto full = run(net, x);
  auto ablated = run(net, x, Mode::kEval, {.dense_feature_reuse = false});
  const auto& a = full->g.value(full->r.activations.at("dense1")).data();
  const auto& b = ablated->g.value(ablated->r.activations.at("dense1")).data();
  ASSERT_EQ(a.size(), b.size());
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 1e-3);
  // the first layer sees the block input either way
  const auto& stem = full->g.value(full->r.activations.at("stem")).data();
  const std::size_t first = 16 * 16 * 16;  // stem channels
  for (std::size_t i = 0; i < first; ++i) ASSERT_EQ(a[i], stem[i]);
}

TEST(Transition, ChannelsAndSpatialHalved) {
  auto net = Net::build(single_block({"t", pl::TransitionSpec{0.5}}, {48, 8, 8}), 1);
  EXPECT_EQ(net.block_shapes()[0], (pl::FeatureShape{24, 4, 4}));
  auto r = run(net, images(1, {48, 8, 8}, 1));
  EXPECT_EQ(r->g.shape(r->r.activations.at("t")), (pl::Shape{1, 24, 4, 4}));
  auto odd = Net::build(single_block({"t", pl::TransitionSpec{0.5}}, {5, 4, 4}), 1);
  EXPECT_EQ(odd.block_shapes()[0].channels, 2u);  // floor(2.5)
}

TEST(Transition, IdentityConvIsAveragePoolOfNormalizedFeatures) {
  const pl::FeatureShape in{3, 4, 4};
  auto net = Net::build(single_block({"t", pl::TransitionSpec{1.0}}, in), 1);
  auto& w = net.parameter("t.conv.weight");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
  const auto x = images(1, in, 9);
  auto r = run(net, x);
  const auto& y = r->g.value(r->r.activations.at("t"));
  const double inv = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) acc += x[c * 16 + (2 * i + di) * 4 + 2 * j + dj] * inv;
        EXPECT_NEAR(y[c * 4 + i * 2 + j], acc / 4, 1e-6);
      }
}

TEST(Transition, GradientsReachEveryParameter) {
  const pl::FeatureShape in{6, 4, 4};
  auto spec = single_block({"t", pl::TransitionSpec{0.5}}, in);
  auto net = Net::build(spec, 2);
  auto res = pl::testing::network_gradient_check(net, images(3, in, 3), labels(3), Mode::kTrain, 4, 4);
  EXPECT_LE(res.relative_error, 1e-4);
  EXPECT_EQ(res.zero_grad_tensors, 0u);
}

TEST(MBConv, ZeroProjectionWithOpenGatesIsIdentity) {
  const pl::FeatureShape in{8, 6, 6};
  auto net = Net::build(single_block({"m", pl::MBConvSpec{8, 4, 0.25, 1}}, in), 5);
  auto& proj = net.parameter("m.project.conv.weight");
  std::fill(proj.data().begin(), proj.data().end(), 0.0f);
  auto& gate_bias = net.parameter("m.se.expand.bias");
  std::fill(gate_bias.data().begin(), gate_bias.data().end(), 40.0f);
  const auto x = images(2, in, 6);
  for (Mode mode : {Mode::kEval, Mode::kTrain}) {
    auto r = run(net, x, mode);
    for (float v : r->g.value(r->r.activations.at("m.se_gate")).data()) EXPECT_FLOAT_EQ(v, 1.0f);
    EXPECT_EQ(r->g.value(r->r.activations.at("m")).data(), x.data());
  }
}

TEST(MBConv, StrideTwoHalvesWithoutResidual) {
  const pl::FeatureShape in{8, 8, 8};
  auto net = Net::build(single_block({"m", pl::MBConvSpec{8, 2, 0.25, 2}}, in), 5);
  EXPECT_EQ(net.block_shapes()[0], (pl::FeatureShape{8, 4, 4}));
  auto& proj = net.parameter("m.project.conv.weight");
  std::fill(proj.data().begin(), proj.data().end(), 0.0f);
  auto r = run(net, images(1, in, 1));
  for (float v : r->g.value(r->r.activations.at("m")).data()) EXPECT_EQ(v, 0.0f);  // nothing added back
}

TEST(MBConv, DepthwiseStageIsPerChannel) {
  // Identity expansion (e = 1) so channel c of the block input feeds only
  // channel c of the depthwise stage.
  const pl::FeatureShape in{4, 6, 6};
  auto net = Net::build(single_block({"m", pl::MBConvSpec{4, 1, 0.5, 1}}, in), 8);
  auto& w = net.parameter("m.expand.conv.weight");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  for (std::size_t c = 0; c < 4; ++c) w[c * 4 + c] = 1.0f;
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({1, 4, 6, 6}, rng, 0.1, 1.0);
  auto perturbed = x;
  for (std::size_t i = 0; i < 36; ++i) perturbed[i] += 0.5f;
  auto a = run(net, x);
  auto b = run(net, perturbed);
  const auto& da = a->g.value(a->r.activations.at("m.dw"));
  const auto& db = b->g.value(b->r.activations.at("m.dw"));
  double changed = 0;
  for (std::size_t i = 0; i < 36; ++i) changed += std::abs(da[i] - db[i]);
  EXPECT_GT(changed, 0.0);
  for (std::size_t i = 36; i < da.size(); ++i) ASSERT_EQ(da[i], db[i]) << i;
}

TEST(MBConv, SqueezeWidthIsCeilOfRatio) {
  auto net = Net::build(single_block({"m", pl::MBConvSpec{5, 3, 0.3, 1}}, {5, 4, 4}), 1);
  EXPECT_EQ(net.parameter("m.se.reduce.weight").shape(), (pl::Shape{15, 5}));  // ceil(4.5)
  EXPECT_EQ(net.parameter("m.dw.conv.weight").shape(), (pl::Shape{15, 1, 3, 3}));
}

TEST(Head, ZeroWeightsGiveOneHalf) {
  auto net = Net::build(pl::mini_dense_spec(16), 3);
  auto& w = net.parameter("head.dense.weight");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  for (float p : net.predict(images(4, net.spec().input, 2))) EXPECT_EQ(p, 0.5f);
}

TEST(Head, ProbabilityIncreasesWithLogit) {
  auto net = Net::build(pl::mini_effnet_spec(16), 3);
  const auto x = images(3, net.spec().input, 4);
  auto before = net.predict(x);
  net.parameter("head.dense.bias")[0] += 0.5f;
  auto after = net.predict(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GT(after[i], before[i]);
}

TEST(Forward, RejectsWrongInputShape) {
  auto net = Net::build(pl::mini_dense_spec(16), 3);
  EXPECT_THROW(net.predict(images(1, {3, 32, 32}, 1)), pl::ShapeError);
  EXPECT_THROW(net.predict(images(1, {1, 16, 16}, 1)), pl::ShapeError);
}

TEST(Forward, EvalDoesNotMutateAndTrainUpdatesRunningStats) {
  auto net = Net::build(pl::mini_dense_spec(16), 3);
  const auto x = images(2, net.spec().input, 4);
  const auto before = net.checksum();
  net.predict(x);
  EXPECT_EQ(net.checksum(), before);
  run(net, x, Mode::kTrain);
  EXPECT_NE(net.checksum(), before);
}

TEST(Forward, ConcurrentPredictMatchesSerial) {
  const auto net = Net::build(pl::mini_effnet_spec(16), 3);
  std::vector<Tensor<float>> xs;
  for (int i = 0; i < 6; ++i) xs.push_back(images(2, net.spec().input, 100 + i));
  std::vector<std::vector<float>> serial, threaded(xs.size());
  for (const auto& x : xs) serial.push_back(net.predict(x));
  pl::parallel_for(xs.size(), 3, [&](std::size_t i) { threaded[i] = net.predict(xs[i]); });
  EXPECT_EQ(serial, threaded);
}

class FullNetworkGradient : public ::testing::TestWithParam<std::tuple<std::string, Mode>> {};

TEST_P(FullNetworkGradient, FiniteDifferenceOnReducedPreset) {
  const auto& [preset, mode] = GetParam();
  auto net = Net::build(pl::preset_spec(preset, 16), 21);
  if (mode == Mode::kEval) {
    // non-trivial running statistics
    for (int i = 0; i < 3; ++i) run(net, images(4, net.spec().input, 50 + i), Mode::kTrain);
  }
  auto res = pl::testing::network_gradient_check(net, images(3, net.spec().input, 31), labels(3), mode, 77, 2);
  EXPECT_LE(res.relative_error, 1e-4) << preset;
  EXPECT_GT(res.coordinates, 40u);
}

INSTANTIATE_TEST_SUITE_P(Presets, FullNetworkGradient,
                         ::testing::Combine(::testing::Values("mini-dense", "mini-effnet"),
                                            ::testing::Values(Mode::kTrain, Mode::kEval)));

TEST(SpecJson, RoundTripsPresetsAndExplicitLists) {
  for (const auto& name : pl::preset_names()) {
    const auto spec = pl::preset_spec(name, 32);
    const auto back = pl::spec_from_json(pl::spec_to_json(spec));
    EXPECT_EQ(pl::spec_to_json(back), pl::spec_to_json(spec));
  }
  const auto j = nlohmann::json::parse(R"({"preset":"mini-effnet","input_size":32})");
  EXPECT_EQ(pl::spec_to_json(pl::spec_from_json(j)), pl::spec_to_json(pl::mini_effnet_spec(32)));
  EXPECT_THROW(pl::block_from_json(nlohmann::json::parse(R"({"name":"x","type":"lstm"})")), pl::SpecError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  pl::testing::TempDir dir;
  auto net = Net::build(pl::mini_effnet_spec(16), 9);
  run(net, images(4, net.spec().input, 1), Mode::kTrain);  // non-default buffers
  const auto path = dir.path() / "model.ckpt";
  pl::save_checkpoint(net, path);
  auto loaded = pl::load_checkpoint(path);
  EXPECT_EQ(loaded.checksum(), net.checksum());
  EXPECT_EQ(pl::spec_to_json(loaded.spec()), pl::spec_to_json(net.spec()));
  const auto x = images(3, net.spec().input, 2);
  EXPECT_EQ(loaded.predict(x), net.predict(x));
}

TEST(Checkpoint, HeaderCarriesVersionAndSpec) {
  auto net = Net::build(pl::mini_dense_spec(16), 9);
  const auto c = pl::parse_checkpoint(pl::serialize_checkpoint(net));
  EXPECT_EQ(c.header.at("format_version"), pl::kCheckpointVersion);
  EXPECT_EQ(c.header.at("spec").at("preset"), "mini-dense");
  EXPECT_EQ(c.payload.size(), 4 * (net.parameter_count() + [&] {
                                 std::size_t n = 0;
                                 for (const auto& b : net.buffers()) n += b.tensor.size();
                                 return n;
                               }()));
}

TEST(Checkpoint, MismatchedSpecNamesFirstParameter) {
  pl::testing::TempDir dir;
  const auto path = dir.path() / "m.ckpt";
  pl::save_checkpoint(Net::build(pl::mini_dense_spec(16), 1), path);
  auto other = pl::mini_dense_spec(16);
  std::get<pl::DenseBlockSpec>(other.blocks[1].variant).growth_rate = 4;
  try {
    pl::load_checkpoint(path, other);
    FAIL() << "expected mismatch";
  } catch (const pl::CheckpointMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("dense1.layer0.conv.weight"), std::string::npos) << e.what();
  }
  EXPECT_THROW(pl::load_checkpoint(path, pl::mini_effnet_spec(16)), pl::CheckpointMismatchError);
}

TEST(Checkpoint, TruncationAndVersionAreDistinctErrors) {
  auto bytes = pl::serialize_checkpoint(Net::build(pl::mini_dense_spec(16), 1));
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() - 1, bytes.size() / 2}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(pl::parse_checkpoint(part), pl::CheckpointTruncatedError) << cut;
  }
  auto c = pl::parse_checkpoint(bytes);
  c.header["format_version"] = 99;
  const std::string text = c.header.dump();
  std::vector<std::uint8_t> v2(pl::kCheckpointMagic, pl::kCheckpointMagic + 8);
  for (int i = 0; i < 8; ++i) v2.push_back(static_cast<std::uint8_t>(text.size() >> (8 * i)));
  v2.insert(v2.end(), text.begin(), text.end());
  v2.insert(v2.end(), c.payload.begin(), c.payload.end());
  EXPECT_THROW(pl::parse_checkpoint(v2), pl::CheckpointVersionError);
  auto bad = bytes;
  bad[0] = 'X';
  try {
    pl::parse_checkpoint(bad);
    FAIL();
  } catch (const pl::CheckpointTruncatedError&) {
    FAIL() << "bad magic reported as truncation";
  } catch (const pl::CheckpointVersionError&) {
    FAIL() << "bad magic reported as version";
  } catch (const pl::CheckpointError&) {
  }
}

TEST(Checkpoint, TruncatedFileLeavesNoNetwork) {
  pl::testing::TempDir dir;
  const auto path = dir.path() / "t.ckpt";
  auto bytes = pl::serialize_checkpoint(Net::build(pl::mini_dense_spec(16), 1));
  bytes.resize(bytes.size() - 10);
  pl::write_file_bytes(path, bytes);
  EXPECT_THROW(pl::load_checkpoint(path), pl::CheckpointTruncatedError);
  EXPECT_THROW(pl::load_checkpoint(dir.path() / "missing.ckpt"), pl::CheckpointError);
}
