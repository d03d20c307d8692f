#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pneumolens/autodiff.hpp"
#include "pneumolens/random.hpp"

namespace pneumolens {

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Specs

/// conv → [batchnorm] → [relu]
struct ConvBlockSpec {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool batchnorm = true;
  bool relu = true;
  bool bias = false;
};

/// `num_layers` × (batchnorm → relu → 3×3 conv to `growth_rate` channels),
/// each output concatenated onto the running feature stack.
struct DenseBlockSpec {
  std::size_t growth_rate = 8;
  std::size_t num_layers = 4;
};

/// batchnorm → 1×1 conv to ⌊compression·C⌋ channels → 2×2 average pool.
struct TransitionSpec {
  double compression = 0.5;
};

/// 1×1 expand → bn → relu → depthwise (3×3, or 4×4 when stride 2) → bn → relu
/// → squeeze-excite → 1×1 project → bn, plus identity residual when shapes allow.
struct MBConvSpec {
  std::size_t out_channels = 16;
  std::size_t expansion = 4;
  double se_ratio = 0.25;
  std::size_t stride = 1;
};

using BlockVariant = std::variant<ConvBlockSpec, DenseBlockSpec, TransitionSpec, MBConvSpec>;

struct BlockSpec {
  std::string name;
  BlockVariant variant;
  /// Expected input channel count; 0 means "whatever the previous block emits".
  std::size_t in_channels = 0;
};

/// Feature extents C×H×W.
struct FeatureShape {
  std::size_t channels = 0, height = 0, width = 0;
  bool operator==(const FeatureShape&) const = default;
};

inline std::string to_string(const FeatureShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// Global average pool → dense to one logit → sigmoid (probability of Pneumonia).
struct NetworkSpec {
  std::string preset;  // informational
  FeatureShape input{3, 64, 64};
  std::vector<BlockSpec> blocks;
  std::string gradcam_target;  // empty → last block
};

inline const char* block_type(const BlockVariant& v) {
  switch (v.index()) {
    case 0: return "conv";
    case 1: return "dense";
    case 2: return "transition";
    default: return "mbconv";
  }
}

namespace detail {

inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                               const std::string& where) {
  const std::size_t padded = in + 2 * pad;
  if (kernel > padded || stride == 0 || (padded - kernel) % stride != 0) {
    throw SpecError(where + ": convolution extent (" + std::to_string(in) + "+2*" + std::to_string(pad) + "-" +
                    std::to_string(kernel) + ")/" + std::to_string(stride) + "+1 is not a positive integer");
  }
  return (padded - kernel) / stride + 1;
}

inline std::size_t se_channels(std::size_t expanded, double ratio) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(static_cast<double>(expanded) * ratio - 1e-9)));
}

inline std::size_t mbconv_dw_kernel(std::size_t stride) { return stride == 2 ? 4 : 3; }

}  // namespace detail

/// Output shape of one block, validating its parameters and input.
inline FeatureShape block_output_shape(const BlockSpec& b, const FeatureShape& in) {
  const std::string where = "block '" + b.name + "'";
  if (b.in_channels != 0 && b.in_channels != in.channels) {
    throw SpecError(where + ": expects " + std::to_string(b.in_channels) + " input channels but receives " +
                    to_string(in));
  }
  return std::visit(
      [&](const auto& v) -> FeatureShape {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ConvBlockSpec>) {
          if (v.out_channels == 0 || v.kernel == 0) throw SpecError(where + ": zero channels or kernel");
          return {v.out_channels, detail::conv_extent(in.height, v.kernel, v.stride, v.padding, where),
                  detail::conv_extent(in.width, v.kernel, v.stride, v.padding, where)};
        } else if constexpr (std::is_same_v<V, DenseBlockSpec>) {
          if (v.growth_rate < 1) throw SpecError(where + ": growth_rate must be >= 1");
          return {in.channels + v.num_layers * v.growth_rate, in.height, in.width};
        } else if constexpr (std::is_same_v<V, TransitionSpec>) {
          if (!(v.compression > 0.0 && v.compression <= 1.0)) throw SpecError(where + ": compression must be in (0,1]");
          if (in.height % 2 || in.width % 2) throw SpecError(where + ": transition needs even extents, got " + to_string(in));
          const auto c = static_cast<std::size_t>(std::floor(v.compression * static_cast<double>(in.channels) + 1e-9));
          if (c == 0) throw SpecError(where + ": compression leaves zero channels");
          return {c, in.height / 2, in.width / 2};
        } else {
          if (v.expansion < 1) throw SpecError(where + ": expansion must be >= 1");
          if (!(v.se_ratio > 0.0 && v.se_ratio <= 1.0)) throw SpecError(where + ": se_ratio must be in (0,1]");
          if (v.stride != 1 && v.stride != 2) throw SpecError(where + ": stride must be 1 or 2");
          if (v.out_channels == 0) throw SpecError(where + ": zero output channels");
          const std::size_t k = detail::mbconv_dw_kernel(v.stride);
          return {v.out_channels, detail::conv_extent(in.height, k, v.stride, 1, where),
                  detail::conv_extent(in.width, k, v.stride, 1, where)};
        }
      },
      b.variant);
}

/// Symbolic shape pass: the output shape of every block, in order.
inline std::vector<FeatureShape> infer_shapes(const NetworkSpec& spec) {
  if (spec.input.channels == 0 || spec.input.height == 0 || spec.input.width == 0) {
    throw SpecError("input shape must be positive");
  }
  if (spec.blocks.empty()) throw SpecError("network has no blocks");
  std::vector<FeatureShape> out;
  FeatureShape cur = spec.input;
  std::map<std::string, int> names;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    if (b.name.empty() || b.name == "head") throw SpecError("block " + std::to_string(i) + " has an invalid name");
    if (names[b.name]++) throw SpecError("duplicate block name '" + b.name + "'");
    try {
      cur = block_output_shape(b, cur);
    } catch (const SpecError& e) {
      const std::string prev = i == 0 ? std::string("input") : "'" + spec.blocks[i - 1].name + "'";
      throw SpecError(std::string("shape chain broken at boundary ") + prev + " -> '" + b.name + "': " + e.what());
    }
    out.push_back(cur);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json block_to_json(const BlockSpec& b) {
  nlohmann::json j{{"name", b.name}, {"type", block_type(b.variant)}};
  if (b.in_channels) j["in_channels"] = b.in_channels;
  std::visit(
      [&](const auto& v) {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ConvBlockSpec>) {
          j.update({{"out_channels", v.out_channels}, {"kernel", v.kernel}, {"stride", v.stride},
                    {"padding", v.padding}, {"batchnorm", v.batchnorm}, {"relu", v.relu}, {"bias", v.bias}});
        } else if constexpr (std::is_same_v<V, DenseBlockSpec>) {
          j.update({{"growth_rate", v.growth_rate}, {"num_layers", v.num_layers}});
        } else if constexpr (std::is_same_v<V, TransitionSpec>) {
          j["compression"] = v.compression;
        } else {
          j.update({{"out_channels", v.out_channels}, {"expansion", v.expansion}, {"se_ratio", v.se_ratio},
                    {"stride", v.stride}});
        }
      },
      b.variant);
  return j;
}

inline BlockSpec block_from_json(const nlohmann::json& j) {
  BlockSpec b;
  b.name = j.at("name").get<std::string>();
  b.in_channels = j.value("in_channels", std::size_t{0});
  const std::string type = j.at("type").get<std::string>();
  if (type == "conv") {
    ConvBlockSpec v;
    v.out_channels = j.at("out_channels").get<std::size_t>();
    v.kernel = j.value("kernel", v.kernel);
    v.stride = j.value("stride", v.stride);
    v.padding = j.value("padding", v.padding);
    v.batchnorm = j.value("batchnorm", v.batchnorm);
    v.relu = j.value("relu", v.relu);
    v.bias = j.value("bias", v.bias);
    b.variant = v;
  } else if (type == "dense") {
    b.variant = DenseBlockSpec{j.at("growth_rate").get<std::size_t>(), j.at("num_layers").get<std::size_t>()};
  } else if (type == "transition") {
    b.variant = TransitionSpec{j.value("compression", 0.5)};
  } else if (type == "mbconv") {
    MBConvSpec v;
    v.out_channels = j.at("out_channels").get<std::size_t>();
    v.expansion = j.value("expansion", v.expansion);
    v.se_ratio = j.value("se_ratio", v.se_ratio);
    v.stride = j.value("stride", v.stride);
    b.variant = v;
  } else {
    throw SpecError("unknown block type '" + type + "' (expected conv, dense, transition or mbconv)");
  }
  return b;
}

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  nlohmann::json j;
  j["preset"] = s.preset;
  j["input_shape"] = {s.input.channels, s.input.height, s.input.width};
  j["blocks"] = nlohmann::json::array();
  for (const auto& b : s.blocks) j["blocks"].push_back(block_to_json(b));
  j["head"] = {{"type", "gap_dense_sigmoid"}};
  j["gradcam_target"] = s.gradcam_target;
  return j;
}

NetworkSpec preset_spec(const std::string& name, std::size_t input_size = 64);

/// Accepts either {"preset": name, "input_size": n} or an explicit block list.
inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  if (j.contains("preset") && !j.contains("blocks")) {
    return preset_spec(j.at("preset").get<std::string>(), j.value("input_size", std::size_t{64}));
  }
  NetworkSpec s;
  s.preset = j.value("preset", std::string{});
  const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw SpecError("input_shape must be [channels, height, width]");
  s.input = {shape[0], shape[1], shape[2]};
  for (const auto& b : j.at("blocks")) s.blocks.push_back(block_from_json(b));
  s.gradcam_target = j.value("gradcam_target", std::string{});
  return s;
}

// ---------------------------------------------------------------------------
// Presets

/// Dense-connectivity preset (input 3×S×S, S divisible by 4):
///   stem   conv 4×4/2, 16 ch, bn, relu        S/2
///   dense1 growth 8 × 4 layers → 48 ch
///   trans1 θ = 0.5 → 24 ch                     S/4
///   dense2 growth 8 × 4 layers → 56 ch        (Grad-CAM target)
///   head   GAP → dense 56→1 → sigmoid
/// 21,049 trainable parameters at any input size.
inline NetworkSpec mini_dense_spec(std::size_t input_size = 64) {
  NetworkSpec s;
  s.preset = "mini-dense";
  s.input = {3, input_size, input_size};
  s.blocks = {
      {"stem", ConvBlockSpec{16, 4, 2, 1, true, true, false}},
      {"dense1", DenseBlockSpec{8, 4}},
      {"trans1", TransitionSpec{0.5}},
      {"dense2", DenseBlockSpec{8, 4}},
  };
  s.gradcam_target = "dense2";
  return s;
}

/// MBConv/squeeze-excitation preset (input 3×S×S, S divisible by 8):
///   stem      conv 4×4/2, 16 ch, bn, relu     S/2
///   mb1       e1, 16 ch, stride 1 (residual)
///   mb2       e4, 24 ch, stride 2             S/4
///   mb3       e4, 24 ch, stride 1 (residual)
///   mb4       e4, 40 ch, stride 2             S/8
///   head_conv 1×1, 64 ch, bn, relu            (Grad-CAM target)
///   head      GAP → dense 64→1 → sigmoid
inline NetworkSpec mini_effnet_spec(std::size_t input_size = 64) {
  NetworkSpec s;
  s.preset = "mini-effnet";
  s.input = {3, input_size, input_size};
  s.blocks = {
      {"stem", ConvBlockSpec{16, 4, 2, 1, true, true, false}},
      {"mb1", MBConvSpec{16, 1, 0.25, 1}},
      {"mb2", MBConvSpec{24, 4, 0.25, 2}},
      {"mb3", MBConvSpec{24, 4, 0.25, 1}},
      {"mb4", MBConvSpec{40, 4, 0.25, 2}},
      {"head_conv", ConvBlockSpec{64, 1, 1, 0, true, true, false}},
  };
  s.gradcam_target = "head_conv";
  return s;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> kNames{"mini-dense", "mini-effnet"};
  return kNames;
}

inline NetworkSpec preset_spec(const std::string& name, std::size_t input_size) {
  if (name == "mini-dense") return mini_dense_spec(input_size);
  if (name == "mini-effnet") return mini_effnet_spec(input_size);
  throw SpecError("unknown preset '" + name + "' (available: mini-dense, mini-effnet)");
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct ForwardOptions {
  /// Ablation: each dense layer sees only the block input (earlier layer
  /// outputs are replaced by zeros in its input stack).
  bool dense_feature_reuse = true;
  /// Bind weights as graph constants (copies). Backward then leaves the
  /// network's gradient buffers untouched, so shared networks stay read-only.
  bool frozen = false;
};

template <typename T>
struct ForwardResult {
  NodeId logit = 0;        // N
  NodeId probability = 0;  // N
  std::map<std::string, NodeId> activations;
};

template <typename T>
class Network {
 public:
  /// He fan-in normal initialization for conv/dense weights, zero biases,
  /// batchnorm γ=1, β=0, running mean 0, running variance 1.
  static Network build(NetworkSpec spec, std::uint64_t seed) {
    Network net;
    net.shapes_ = infer_shapes(spec);
    if (spec.gradcam_target.empty()) spec.gradcam_target = spec.blocks.back().name;
    net.spec_ = std::move(spec);
    net.declare_parameters();
    if (!net.is_layer_name(net.spec_.gradcam_target)) {
      throw SpecError("gradcam_target '" + net.spec_.gradcam_target + "' does not name a cached layer");
    }
    net.initialize(seed);
    return net;
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<FeatureShape>& block_shapes() const noexcept { return shapes_; }

  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  std::vector<NamedTensor<T>>& buffers() noexcept { return buffers_; }
  const std::vector<NamedTensor<T>>& buffers() const noexcept { return buffers_; }

  Tensor<T>& parameter(const std::string& name) { return lookup(params_, param_index_, name); }
  const Tensor<T>& parameter(const std::string& name) const {
    return const_cast<Network*>(this)->parameter(name);
  }
  Tensor<T>& buffer(const std::string& name) { return lookup(buffers_, buffer_index_, name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Names forward() records activations under: block outputs plus block
  /// internals ("<mbconv>.dw", "<mbconv>.se_gate").
  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (const auto& b : spec_.blocks) {
      names.push_back(b.name);
      if (std::holds_alternative<MBConvSpec>(b.variant)) {
        names.push_back(b.name + ".dw");
        names.push_back(b.name + ".se_gate");
      }
    }
    return names;
  }

  bool is_layer_name(const std::string& name) const {
    const auto names = layer_names();
    return std::find(names.begin(), names.end(), name) != names.end();
  }

  /// Records the forward pass of an N×C×H×W input on `g`. Train mode
  /// updates batchnorm running statistics.
  ForwardResult<T> forward(Graph<T>& g, NodeId input, Mode mode, const ForwardOptions& opt = {}) {
    const Shape xs = g.shape(input);
    if (xs.size() != 4 || xs[1] != spec_.input.channels || xs[2] != spec_.input.height ||
        xs[3] != spec_.input.width) {
      throw ShapeError("network expects N x " + to_string(spec_.input) + " input, got " + pneumolens::to_string(xs));
    }
    Ctx ctx{g, *this, mode, opt, {}};
    ForwardResult<T> r;
    NodeId x = input;
    for (const auto& b : spec_.blocks) {
      x = std::visit([&](const auto& v) { return block_forward(ctx, b.name, v, x, r.activations); }, b.variant);
      r.activations[b.name] = x;
    }
    NodeId pooled = flatten(g, pool2d(g, x, PoolMode::kGlobalAvg));
    NodeId logit = dense(g, pooled, ctx.param("head.dense.weight"), ctx.param("head.dense.bias"));
    r.logit = reshape(g, logit, Shape{xs[0]});
    r.probability = sigmoid(g, r.logit);
    return r;
  }

  /// Eval-mode probabilities for an N×C×H×W batch. Does not write to the
  /// network, so concurrent calls on one instance are safe.
  std::vector<T> predict(const Tensor<T>& images) const {
    Graph<T> g;
    auto* self = const_cast<Network*>(this);
    auto r = self->forward(g, g.constant(images), Mode::kEval, {.frozen = true});
    return g.value(r.probability).data();
  }

  /// FNV-1a over every parameter and buffer bit pattern.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const std::vector<NamedTensor<T>>& ts) {
      for (const auto& t : ts)
        for (T v : t.tensor.data()) {
          unsigned char bytes[sizeof(T)];
          std::memcpy(bytes, &v, sizeof(T));
          for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
        }
    };
    feed(params_);
    feed(buffers_);
    return h;
  }

 private:
  struct Ctx {
    Graph<T>& g;
    Network& net;
    Mode mode;
    const ForwardOptions& opt;
    std::map<std::string, NodeId> bound;

    NodeId param(const std::string& name) {
      auto it = bound.find(name);
      if (it != bound.end()) return it->second;
      const NodeId id = opt.frozen ? g.constant(net.parameter(name)) : g.parameter(net.parameter(name));
      bound.emplace(name, id);
      return id;
    }

    NodeId bn(NodeId x, const std::string& prefix) {
      BatchNormState<T> st{&net.buffer(prefix + ".running_mean"), &net.buffer(prefix + ".running_var")};
      return batchnorm2d(g, x, param(prefix + ".gamma"), param(prefix + ".beta"), st, mode);
    }

    NodeId conv(NodeId x, const std::string& prefix, Conv2dOptions o, bool bias = false) {
      std::optional<NodeId> b;
      if (bias) b = param(prefix + ".bias");
      return conv2d(g, x, param(prefix + ".weight"), b, o);
    }
  };

  NodeId block_forward(Ctx& c, const std::string& name, const ConvBlockSpec& v, NodeId x,
                       std::map<std::string, NodeId>&) {
    NodeId h = c.conv(x, name + ".conv", {v.stride, v.padding, 1}, v.bias);
    if (v.batchnorm) h = c.bn(h, name + ".bn");
    if (v.relu) h = relu(c.g, h);
    return h;
  }

  NodeId block_forward(Ctx& c, const std::string& name, const DenseBlockSpec& v, NodeId x,
                       std::map<std::string, NodeId>&) {
    std::vector<NodeId> features{x};
    for (std::size_t l = 0; l < v.num_layers; ++l) {
      const std::string p = name + ".layer" + std::to_string(l);
      NodeId in;
      if (features.size() == 1) {
        in = x;
      } else if (c.opt.dense_feature_reuse) {
        in = concat_channels(c.g, std::span<const NodeId>(features));
      } else {
        std::vector<NodeId> masked{x};
        const Shape s = c.g.shape(features[1]);
        for (std::size_t k = 1; k < features.size(); ++k) masked.push_back(c.g.constant(Tensor<T>(s, T{0})));
        in = concat_channels(c.g, std::span<const NodeId>(masked));
      }
      NodeId h = relu(c.g, c.bn(in, p + ".bn"));
      h = c.conv(h, p + ".conv", {1, 1, 1});
      features.push_back(h);
    }
    if (features.size() == 1) return x;
    return concat_channels(c.g, std::span<const NodeId>(features));
  }

  NodeId block_forward(Ctx& c, const std::string& name, const TransitionSpec&, NodeId x,
                       std::map<std::string, NodeId>&) {
    NodeId h = c.bn(x, name + ".bn");
    h = c.conv(h, name + ".conv", {1, 0, 1});
    return pool2d(c.g, h, PoolMode::kAvg, 2, 2);
  }

  NodeId block_forward(Ctx& c, const std::string& name, const MBConvSpec& v, NodeId x,
                       std::map<std::string, NodeId>& acts) {
    const std::size_t in_ch = c.g.shape(x)[1];
    const std::size_t expanded = in_ch * v.expansion;
    NodeId h = relu(c.g, c.bn(c.conv(x, name + ".expand.conv", {1, 0, 1}), name + ".expand.bn"));
    h = c.conv(h, name + ".dw.conv", {v.stride, 1, expanded});
    h = relu(c.g, c.bn(h, name + ".dw.bn"));
    acts[name + ".dw"] = h;
    // squeeze-and-excitation
    NodeId s = flatten(c.g, pool2d(c.g, h, PoolMode::kGlobalAvg));
    s = relu(c.g, dense(c.g, s, c.param(name + ".se.reduce.weight"), c.param(name + ".se.reduce.bias")));
    s = sigmoid(c.g, dense(c.g, s, c.param(name + ".se.expand.weight"), c.param(name + ".se.expand.bias")));
    acts[name + ".se_gate"] = s;
    h = scale_channels(c.g, h, s);
    h = c.bn(c.conv(h, name + ".project.conv", {1, 0, 1}), name + ".project.bn");
    if (v.stride == 1 && v.out_channels == in_ch) h = add(c.g, h, x);
    return h;
  }

  void add_param(const std::string& name, Shape shape, std::size_t fan_in) {
    param_index_[name] = params_.size();
    params_.push_back({name, Tensor<T>(std::move(shape))});
    fan_in_.push_back(fan_in);
  }

  void add_bn(const std::string& prefix, std::size_t channels) {
    add_param(prefix + ".gamma", {channels}, 0);
    add_param(prefix + ".beta", {channels}, 0);
    buffer_index_[prefix + ".running_mean"] = buffers_.size();
    buffers_.push_back({prefix + ".running_mean", Tensor<T>({channels}, T{0})});
    buffer_index_[prefix + ".running_var"] = buffers_.size();
    buffers_.push_back({prefix + ".running_var", Tensor<T>({channels}, T{1})});
  }

  void declare_parameters() {
    FeatureShape cur = spec_.input;
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
      const auto& b = spec_.blocks[i];
      const std::string& n = b.name;
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, ConvBlockSpec>) {
              add_param(n + ".conv.weight", {v.out_channels, cur.channels, v.kernel, v.kernel},
                        cur.channels * v.kernel * v.kernel);
              if (v.bias) add_param(n + ".conv.bias", {v.out_channels}, 0);
              if (v.batchnorm) add_bn(n + ".bn", v.out_channels);
            } else if constexpr (std::is_same_v<V, DenseBlockSpec>) {
              for (std::size_t l = 0; l < v.num_layers; ++l) {
                const std::string p = n + ".layer" + std::to_string(l);
                const std::size_t c = cur.channels + l * v.growth_rate;
                add_bn(p + ".bn", c);
                add_param(p + ".conv.weight", {v.growth_rate, c, 3, 3}, c * 9);
              }
            } else if constexpr (std::is_same_v<V, TransitionSpec>) {
              add_bn(n + ".bn", cur.channels);
              add_param(n + ".conv.weight", {shapes_[i].channels, cur.channels, 1, 1}, cur.channels);
            } else {
              const std::size_t e = cur.channels * v.expansion;
              const std::size_t k = detail::mbconv_dw_kernel(v.stride);
              const std::size_t r = detail::se_channels(e, v.se_ratio);
              add_param(n + ".expand.conv.weight", {e, cur.channels, 1, 1}, cur.channels);
              add_bn(n + ".expand.bn", e);
              add_param(n + ".dw.conv.weight", {e, 1, k, k}, k * k);
              add_bn(n + ".dw.bn", e);
              add_param(n + ".se.reduce.weight", {e, r}, e);
              add_param(n + ".se.reduce.bias", {r}, 0);
              add_param(n + ".se.expand.weight", {r, e}, r);
              add_param(n + ".se.expand.bias", {e}, 0);
              add_param(n + ".project.conv.weight", {v.out_channels, e, 1, 1}, e);
              add_bn(n + ".project.bn", v.out_channels);
            }
          },
          b.variant);
      cur = shapes_[i];
    }
    add_param("head.dense.weight", {cur.channels, 1}, cur.channels);
    add_param("head.dense.bias", {1}, 0);
  }

  void initialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const bool is_gamma = p.name.size() > 6 && p.name.compare(p.name.size() - 6, 6, ".gamma") == 0;
      if (fan_in_[i] == 0) {
        std::fill(p.tensor.data().begin(), p.tensor.data().end(), is_gamma ? T{1} : T{0});
        continue;
      }
      Rng rng(derive_seed(seed, {0x494e4954ULL, i}));
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in_[i]));
      for (auto& v : p.tensor.data()) v = static_cast<T>(stddev * standard_normal(rng));
    }
  }

  Tensor<T>& lookup(std::vector<NamedTensor<T>>& store, const std::map<std::string, std::size_t>& index,
                    const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("no tensor named '" + name + "'");
    return store[it->second].tensor;
  }

  NetworkSpec spec_;
  std::vector<FeatureShape> shapes_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<std::size_t> fan_in_;
  std::map<std::string, std::size_t> param_index_;
  std::map<std::string, std::size_t> buffer_index_;
};

template <typename T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  return Network<T>::build(spec, seed);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "PNLSCKPT" | u64 LE header length | JSON header | float32 LE payload.
// The header carries format_version, the full explicit spec, and one entry
// per tensor {name, kind, shape, offset, count} (offset in payload bytes).

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'P', 'N', 'L', 'S', 'C', 'K', 'P', 'T'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Network<float>& net) {
  nlohmann::json header;
  header["format"] = "pneumolens-checkpoint";
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = "float32-le";
  header["spec"] = spec_to_json(net.spec());
  header["tensors"] = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  auto emit = [&](const std::vector<NamedTensor<float>>& ts, const char* kind) {
    for (const auto& t : ts) {
      header["tensors"].push_back({{"name", t.name},
                                   {"kind", kind},
                                   {"shape", t.tensor.shape()},
                                   {"offset", payload.size()},
                                   {"count", t.tensor.size()}});
      for (float v : t.tensor.data()) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) payload.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
      }
    }
  };
  emit(net.parameters(), "parameter");
  emit(net.buffers(), "buffer");
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline void save_checkpoint(const Network<float>& net, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for checkpoint " + path.string());
}

struct CheckpointContents {
  nlohmann::json header;
  std::vector<std::uint8_t> payload;
};

inline CheckpointContents parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw CheckpointTruncatedError("checkpoint truncated: header incomplete");
  if (!std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin())) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t hlen = detail::get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw CheckpointTruncatedError("checkpoint truncated: header incomplete");
  CheckpointContents c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const int version = c.header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  c.payload.assign(bytes.begin() + 16 + static_cast<long>(hlen), bytes.end());
  std::size_t expected = 0;
  for (const auto& t : c.header.at("tensors"))
    expected = std::max(expected, t.at("offset").get<std::size_t>() + 4 * t.at("count").get<std::size_t>());
  if (c.payload.size() < expected) {
    throw CheckpointTruncatedError("checkpoint truncated: payload has " + std::to_string(c.payload.size()) +
                                   " bytes, header describes " + std::to_string(expected));
  }
  if (c.payload.size() > expected) throw CheckpointError("checkpoint has trailing bytes after payload");
  return c;
}

/// Copies checkpoint tensors into `net`, which must have exactly the same
/// tensor names and shapes. Nothing is written unless every tensor matches.
inline void load_weights_into(Network<float>& net, const CheckpointContents& c) {
  const auto& entries = c.header.at("tensors");
  std::vector<std::pair<Tensor<float>*, const nlohmann::json*>> plan;
  std::size_t k = 0;
  auto match = [&](std::vector<NamedTensor<float>>& ts, const char* kind) {
    for (auto& t : ts) {
      if (k >= entries.size()) throw CheckpointMismatchError("checkpoint lacks " + std::string(kind) + " '" + t.name + "'");
      const auto& e = entries[k++];
      if (e.at("name").get<std::string>() != t.name || e.at("kind").get<std::string>() != kind) {
        throw CheckpointMismatchError("checkpoint tensor '" + e.at("name").get<std::string>() +
                                      "' does not match expected " + kind + " '" + t.name + "'");
      }
      if (e.at("shape").get<Shape>() != t.tensor.shape()) {
        throw CheckpointMismatchError("checkpoint tensor '" + t.name + "' has shape " +
                                      to_string(e.at("shape").get<Shape>()) + ", network expects " +
                                      to_string(t.tensor.shape()));
      }
      plan.emplace_back(&t.tensor, &e);
    }
  };
  match(net.parameters(), "parameter");
  match(net.buffers(), "buffer");
  if (k != entries.size()) {
    throw CheckpointMismatchError("checkpoint has unexpected extra tensor '" + entries[k].at("name").get<std::string>() + "'");
  }
  for (auto& [tensor, e] : plan) {
    const std::size_t off = e->at("offset").get<std::size_t>();
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const std::uint8_t* p = c.payload.data() + off + 4 * i;
      const std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                                 std::uint32_t(p[3]) << 24;
      (*tensor)[i] = std::bit_cast<float>(bits);
    }
  }
}

/// Rebuilds the network from the embedded spec and restores every tensor.
inline Network<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  const auto c = parse_checkpoint(bytes);
  auto net = Network<float>::build(spec_from_json(c.header.at("spec")), 0);
  load_weights_into(net, c);
  return net;
}

/// Loads into a network built from `expected`; tensor mismatches name the
/// first offending tensor.
inline Network<float> load_checkpoint(const std::filesystem::path& path, const NetworkSpec& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  const auto c = parse_checkpoint(bytes);
  auto net = Network<float>::build(expected, 0);
  load_weights_into(net, c);
  return net;
}

}  // namespace pneumolens
