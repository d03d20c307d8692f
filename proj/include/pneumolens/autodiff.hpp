#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pneumolens/tensor.hpp"

namespace pneumolens {

using NodeId = std::size_t;

enum class OpTag {
  kParameter,
  kConstant,
  kConv2d,
  kPool2d,
  kDense,
  kBatchNorm2d,
  kRelu,
  kSigmoid,
  kConcatChannels,
  kScaleChannels,
  kBceLoss,
  kAdd,
  kReshape,
  kSum,
  kMean,
  kScale,
};

inline const char* op_name(OpTag tag) {
  switch (tag) {
    case OpTag::kParameter: return "parameter";
    case OpTag::kConstant: return "constant";
    case OpTag::kConv2d: return "conv2d";
    case OpTag::kPool2d: return "pool2d";
    case OpTag::kDense: return "dense";
    case OpTag::kBatchNorm2d: return "batchnorm2d";
    case OpTag::kRelu: return "relu";
    case OpTag::kSigmoid: return "sigmoid";
    case OpTag::kConcatChannels: return "concat_channels";
    case OpTag::kScaleChannels: return "scale_channels";
    case OpTag::kBceLoss: return "bce_loss";
    case OpTag::kAdd: return "add";
    case OpTag::kReshape: return "reshape";
    case OpTag::kSum: return "sum";
    case OpTag::kMean: return "mean";
    case OpTag::kScale: return "scale";
  }
  return "unknown";
}

/// Append-only record of a forward computation. Every node's parents have
/// smaller ids, so reverse id order is a valid topological order for backward.
///
/// Parameter nodes alias caller-owned tensors (no copy); the caller keeps them
/// alive and unmodified for the lifetime of the graph. backward() accumulates
/// into those tensors' grad buffers.
template <typename T>
class Graph {
 public:
  using value_type = T;
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    OpTag tag;
    std::vector<NodeId> parents;
    Tensor<T> value;
    Tensor<T>* param = nullptr;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  NodeId parameter(Tensor<T>& p) {
    require_finite(p, OpTag::kParameter);
    Node node{OpTag::kParameter, {}, Tensor<T>{}, &p, {}};
    return append(std::move(node));
  }

  NodeId constant(Tensor<T> value) {
    require_finite(value, OpTag::kConstant);
    return append(Node{OpTag::kConstant, {}, std::move(value), nullptr, {}});
  }

  /// Records an operator output. Parents must already exist.
  NodeId record(OpTag tag, std::vector<NodeId> parents, Tensor<T> value, BackwardFn backward) {
    for (NodeId p : parents)
      if (p >= nodes_.size()) throw std::out_of_range("parent node id out of range");
    require_finite(value, tag);
    return append(Node{tag, std::move(parents), std::move(value), nullptr, std::move(backward)});
  }

  const Tensor<T>& value(NodeId id) const {
    const Node& n = nodes_.at(id);
    return n.param ? *n.param : n.value;
  }
  const Shape& shape(NodeId id) const { return value(id).shape(); }
  OpTag tag(NodeId id) const { return nodes_.at(id).tag; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_.at(id).parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target with respect to node `id`;
  /// all zeros for nodes the target does not depend on.
  std::vector<T> grad(NodeId id) const {
    if (id < grads_.size() && !grads_[id].empty()) return grads_[id];
    return std::vector<T>(value(id).size(), T{0});
  }

  /// Mutable gradient slot used by operator backward functions.
  std::vector<T>& grad_slot(NodeId id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[id];
    if (g.empty()) g.assign(value(id).size(), T{0});
    return g;
  }

  /// Reverse-mode sweep from a single-element node. Node gradients from any
  /// earlier sweep are discarded; parameter grads accumulate.
  void backward(NodeId loss) {
    if (value(loss).size() != 1) {
      throw ShapeError("backward requires a scalar, got shape " + to_string(shape(loss)));
    }
    backward(loss, std::vector<T>{T{1}});
  }

  /// Reverse-mode sweep seeded with an explicit output gradient.
  void backward(NodeId output, const std::vector<T>& seed) {
    if (seed.size() != value(output).size()) throw ShapeError("backward seed length mismatch");
    grads_.assign(nodes_.size(), {});
    grads_[output] = seed;
    visited_order_.clear();
    for (NodeId id = output + 1; id-- > 0;) {
      if (grads_[id].empty()) continue;
      visited_order_.push_back(id);
      Node& n = nodes_[id];
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        auto& pg = n.param->grad();
        const auto& g = grads_[id];
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      }
    }
    // Parameters the output does not reach still end up with a (zero) buffer.
    for (Node& n : nodes_)
      if (n.param) n.param->grad();
  }

  /// Node ids in the order the last backward sweep processed them.
  const std::vector<NodeId>& last_backward_order() const noexcept { return visited_order_; }

 private:
  NodeId append(Node node) {
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  static void require_finite(const Tensor<T>& t, OpTag tag) {
    if (!t.all_finite()) throw NonFiniteError(std::string(op_name(tag)) + ": non-finite value");
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::vector<NodeId> visited_order_;
};

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) +
                     ", got " + to_string(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation of an NCHW input with an OIHW kernel (I = C / groups).
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId kernel, std::optional<NodeId> bias,
              Conv2dOptions opt = {}) {
  const Shape& xs = g.shape(input);
  const Shape& ks = g.shape(kernel);
  detail::require_rank(xs, 4, "conv2d", "input");
  detail::require_rank(ks, 4, "conv2d", "kernel");
  if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (opt.groups == 0) throw ShapeError("conv2d: groups must be positive");
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ks[0], I = ks[1], KH = ks[2], KW = ks[3];
  const std::size_t G = opt.groups, S = opt.stride, P = opt.padding;
  if (C % G != 0 || O % G != 0 || I != C / G) {
    throw ShapeError("conv2d: channel mismatch, input " + to_string(xs) + " kernel " + to_string(ks) +
                     " groups " + std::to_string(G));
  }
  if (bias) {
    const Shape& bs = g.shape(*bias);
    if (bs.size() != 1 || bs[0] != O) {
      throw ShapeError("conv2d: bias shape " + to_string(bs) + " does not match " + std::to_string(O) +
                       " output channels");
    }
  }
  const std::size_t HP = H + 2 * P, WP = W + 2 * P;
  if (KH > HP || KW > WP || (HP - KH) % S != 0 || (WP - KW) % S != 0) {
    throw ShapeError("conv2d: output extent is not a positive integer for input " + to_string(xs) +
                     " kernel " + to_string(ks) + " stride " + std::to_string(S) + " padding " +
                     std::to_string(P));
  }
  const std::size_t OH = (HP - KH) / S + 1, OW = (WP - KW) / S + 1;
  const std::size_t OPG = O / G;

  // Range of output columns whose tap `k` lands inside [0, extent).
  auto valid_range = [S, P](std::size_t k, std::size_t extent, std::size_t out_extent) {
    // i = o*S + k - P must satisfy 0 <= i < extent
    long lo_num = static_cast<long>(P) - static_cast<long>(k);
    long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(S) - 1) / static_cast<long>(S);
    long hi_num = static_cast<long>(extent) - 1 + static_cast<long>(P) - static_cast<long>(k);
    long hi = hi_num < 0 ? -1 : hi_num / static_cast<long>(S);
    hi = std::min(hi, static_cast<long>(out_extent) - 1);
    return std::pair<long, long>{lo, hi};
  };

  Tensor<T> out({N, O, OH, OW});
  const auto& x = g.value(input).data();
  const auto& k = g.value(kernel).data();
  auto& y = out.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      T* yp = y.data() + (n * O + o) * OH * OW;
      if (bias) std::fill(yp, yp + OH * OW, g.value(*bias)[o]);
      const std::size_t group = o / OPG;
      for (std::size_t i = 0; i < I; ++i) {
        const std::size_t c = group * I + i;
        const T* xp = x.data() + (n * C + c) * H * W;
        for (std::size_t kh = 0; kh < KH; ++kh) {
          auto [oh_lo, oh_hi] = valid_range(kh, H, OH);
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const T w = k[((o * I + i) * KH + kh) * KW + kw];
            auto [ow_lo, ow_hi] = valid_range(kw, W, OW);
            if (ow_lo > ow_hi) continue;
            for (long oh = oh_lo; oh <= oh_hi; ++oh) {
              const std::size_t ih = oh * S + kh - P;
              T* yrow = yp + oh * OW;
              const T* xrow = xp + ih * W;
              const long off = static_cast<long>(kw) - static_cast<long>(P);
              if (S == 1) {
                for (long ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += w * xrow[ow + off];
              } else {
                for (long ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += w * xrow[ow * static_cast<long>(S) + off];
              }
            }
          }
        }
      }
    }
  }

  std::vector<NodeId> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  auto backward = [=](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    const auto& xv = gr.value(input).data();
    const auto& kv = gr.value(kernel).data();
    auto& gx = gr.grad_slot(input);
    auto& gk = gr.grad_slot(kernel);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t o = 0; o < O; ++o) {
        const T* gyp = gy.data() + (n * O + o) * OH * OW;
        const std::size_t group = o / OPG;
        for (std::size_t i = 0; i < I; ++i) {
          const std::size_t c = group * I + i;
          const T* xp = xv.data() + (n * C + c) * H * W;
          T* gxp = gx.data() + (n * C + c) * H * W;
          for (std::size_t kh = 0; kh < KH; ++kh) {
            auto [oh_lo, oh_hi] = valid_range(kh, H, OH);
            for (std::size_t kw = 0; kw < KW; ++kw) {
              const std::size_t widx = ((o * I + i) * KH + kh) * KW + kw;
              const T w = kv[widx];
              auto [ow_lo, ow_hi] = valid_range(kw, W, OW);
              if (ow_lo > ow_hi) continue;
              const long off = static_cast<long>(kw) - static_cast<long>(P);
              const long stride = static_cast<long>(S);
              T acc{0};
              for (long oh = oh_lo; oh <= oh_hi; ++oh) {
                const std::size_t ih = oh * S + kh - P;
                const T* gyrow = gyp + oh * OW;
                const T* xrow = xp + ih * W;
                T* gxrow = gxp + ih * W;
                if (S == 1) {
                  for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                    acc += xrow[ow + off] * gyrow[ow];
                    gxrow[ow + off] += w * gyrow[ow];
                  }
                } else {
                  for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                    acc += xrow[ow * stride + off] * gyrow[ow];
                    gxrow[ow * stride + off] += w * gyrow[ow];
                  }
                }
              }
              gk[widx] += acc;
            }
          }
        }
      }
    }
    if (bias) {
      auto& gb = gr.grad_slot(*bias);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const T* gyp = gy.data() + (n * O + o) * OH * OW;
          T acc{0};
          for (std::size_t j = 0; j < OH * OW; ++j) acc += gyp[j];
          gb[o] += acc;
        }
    }
  };
  return g.record(OpTag::kConv2d, std::move(parents), std::move(out), std::move(backward));
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolMode { kMax, kAvg, kGlobalAvg };

/// Windowed max/mean pooling with floor semantics (a trailing remainder that
/// does not fill a window is dropped). kGlobalAvg ignores window and stride.
template <typename T>
NodeId pool2d(Graph<T>& g, NodeId input, PoolMode mode, std::size_t window = 2, std::size_t stride = 2) {
  const Shape xs = g.shape(input);
  detail::require_rank(xs, 4, "pool2d", "input");
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const auto& x = g.value(input).data();

  if (mode == PoolMode::kGlobalAvg) {
    Tensor<T> out({N, C, 1, 1});
    const T inv = T{1} / static_cast<T>(H * W);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      T acc{0};
      for (std::size_t j = 0; j < H * W; ++j) acc += x[nc * H * W + j];
      out[nc] = acc * inv;
    }
    auto backward = [=](Graph<T>& gr, NodeId self) {
      const auto& gy = gr.grad_slot(self);
      auto& gx = gr.grad_slot(input);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T v = gy[nc] * inv;
        for (std::size_t j = 0; j < H * W; ++j) gx[nc * H * W + j] += v;
      }
    };
    return g.record(OpTag::kPool2d, {input}, std::move(out), std::move(backward));
  }

  if (window == 0 || stride == 0) throw ShapeError("pool2d: window and stride must be positive");
  if (window > H || window > W) {
    throw ShapeError("pool2d: window " + std::to_string(window) + " larger than input " + to_string(xs));
  }
  const std::size_t OH = (H - window) / stride + 1, OW = (W - window) / stride + 1;
  Tensor<T> out({N, C, OH, OW});
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::kMax) argmax.resize(out.size());
  const T inv = T{1} / static_cast<T>(window * window);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* xp = x.data() + nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const std::size_t oidx = (nc * OH + oh) * OW + ow;
        if (mode == PoolMode::kMax) {
          std::size_t best = (oh * stride) * W + ow * stride;
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t b = 0; b < window; ++b) {
              const std::size_t idx = (oh * stride + a) * W + ow * stride + b;
              if (xp[idx] > xp[best]) best = idx;
            }
          out[oidx] = xp[best];
          argmax[oidx] = nc * H * W + best;
        } else {
          T acc{0};
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t b = 0; b < window; ++b) acc += xp[(oh * stride + a) * W + ow * stride + b];
          out[oidx] = acc * inv;
        }
      }
  }
  auto backward = [=, argmax = std::move(argmax)](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    auto& gx = gr.grad_slot(input);
    if (mode == PoolMode::kMax) {
      for (std::size_t j = 0; j < gy.size(); ++j) gx[argmax[j]] += gy[j];
      return;
    }
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const T v = gy[(nc * OH + oh) * OW + ow] * inv;
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t b = 0; b < window; ++b)
              gx[nc * H * W + (oh * stride + a) * W + ow * stride + b] += v;
        }
  };
  return g.record(OpTag::kPool2d, {input}, std::move(out), std::move(backward));
}

// ---------------------------------------------------------------------------
// Dense

/// y = x W + b with x: N×F, W: F×K, b: K.
template <typename T>
NodeId dense(Graph<T>& g, NodeId input, NodeId weight, NodeId bias) {
  const Shape& xs = g.shape(input);
  const Shape& ws = g.shape(weight);
  const Shape& bs = g.shape(bias);
  detail::require_rank(xs, 2, "dense", "input");
  detail::require_rank(ws, 2, "dense", "weight");
  if (xs[1] != ws[0] || bs.size() != 1 || bs[0] != ws[1]) {
    throw ShapeError("dense: extent mismatch, input " + to_string(xs) + " weight " + to_string(ws) +
                     " bias " + to_string(bs));
  }
  const std::size_t N = xs[0], F = xs[1], K = ws[1];
  const auto& x = g.value(input).data();
  const auto& w = g.value(weight).data();
  const auto& b = g.value(bias).data();
  Tensor<T> out({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    T* yrow = out.data().data() + n * K;
    std::copy(b.begin(), b.end(), yrow);
    for (std::size_t f = 0; f < F; ++f) {
      const T xv = x[n * F + f];
      const T* wrow = w.data() + f * K;
      for (std::size_t k = 0; k < K; ++k) yrow[k] += xv * wrow[k];
    }
  }
  auto backward = [=](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    const auto& xv = gr.value(input).data();
    const auto& wv = gr.value(weight).data();
    auto& gx = gr.grad_slot(input);
    auto& gw = gr.grad_slot(weight);
    auto& gb = gr.grad_slot(bias);
    for (std::size_t n = 0; n < N; ++n) {
      const T* gyrow = gy.data() + n * K;
      for (std::size_t f = 0; f < F; ++f) {
        const T* wrow = wv.data() + f * K;
        T acc{0};
        for (std::size_t k = 0; k < K; ++k) {
          acc += wrow[k] * gyrow[k];
          gw[f * K + k] += xv[n * F + f] * gyrow[k];
        }
        gx[n * F + f] += acc;
      }
      for (std::size_t k = 0; k < K; ++k) gb[k] += gyrow[k];
    }
  };
  return g.record(OpTag::kDense, {input, weight, bias}, std::move(out), std::move(backward));
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class Mode { kTrain, kEval };

template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

/// Train mode normalizes with biased batch statistics over (N, H, W) and moves
/// the running statistics by `momentum` (running variance uses the unbiased
/// estimate). Eval mode uses the running statistics.
template <typename T>
NodeId batchnorm2d(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, BatchNormState<T> state, Mode mode) {
  const Shape& xs = g.shape(input);
  detail::require_rank(xs, 4, "batchnorm2d", "input");
  const std::size_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
  if (g.shape(gamma) != Shape{C} || g.shape(beta) != Shape{C}) {
    throw ShapeError("batchnorm2d: gamma/beta must have shape [" + std::to_string(C) + "]");
  }
  if (!state.running_mean || !state.running_var || state.running_mean->shape() != Shape{C} ||
      state.running_var->shape() != Shape{C}) {
    throw ShapeError("batchnorm2d: running statistics must have shape [" + std::to_string(C) + "]");
  }
  const std::size_t M = N * HW;
  if (mode == Mode::kTrain && M <= 1) {
    throw ShapeError("batchnorm2d: train mode needs more than one value per channel, got " + to_string(xs));
  }
  const auto& x = g.value(input).data();
  const auto& ga = g.value(gamma).data();
  const auto& be = g.value(beta).data();

  std::vector<T> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::kTrain) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < HW; ++j) s += x[(n * C + c) * HW + j];
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < HW; ++j) {
          const double d = x[(n * C + c) * HW + j] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      auto& rm = (*state.running_mean)[c];
      auto& rv = (*state.running_var)[c];
      const T unbiased = static_cast<T>(ss / static_cast<double>(M - 1));
      rm = (T{1} - state.momentum) * rm + state.momentum * mean[c];
      rv = (T{1} - state.momentum) * rv + state.momentum * unbiased;
    } else {
      mean[c] = (*state.running_mean)[c];
      inv_std[c] = T{1} / std::sqrt((*state.running_var)[c] + state.eps);
    }
  }

  Tensor<T> out(xs);
  std::vector<T> xhat(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t j = 0; j < HW; ++j) {
        const std::size_t idx = (n * C + c) * HW + j;
        xhat[idx] = (x[idx] - mean[c]) * inv_std[c];
        out[idx] = ga[c] * xhat[idx] + be[c];
      }

  auto backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    const auto& gav = gr.value(gamma).data();
    auto& gx = gr.grad_slot(input);
    auto& gg = gr.grad_slot(gamma);
    auto& gbt = gr.grad_slot(beta);
    for (std::size_t c = 0; c < C; ++c) {
      T sum_dy{0}, sum_dy_xhat{0};
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < HW; ++j) {
          const std::size_t idx = (n * C + c) * HW + j;
          sum_dy += gy[idx];
          sum_dy_xhat += gy[idx] * xhat[idx];
        }
      gg[c] += sum_dy_xhat;
      gbt[c] += sum_dy;
      const T scale = gav[c] * inv_std[c];
      if (mode == Mode::kTrain) {
        const T mdy = sum_dy / static_cast<T>(M);
        const T mdyx = sum_dy_xhat / static_cast<T>(M);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t j = 0; j < HW; ++j) {
            const std::size_t idx = (n * C + c) * HW + j;
            gx[idx] += scale * (gy[idx] - mdy - xhat[idx] * mdyx);
          }
      } else {
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t j = 0; j < HW; ++j) {
            const std::size_t idx = (n * C + c) * HW + j;
            gx[idx] += scale * gy[idx];
          }
      }
    }
  };
  return g.record(OpTag::kBatchNorm2d, {input, gamma, beta}, std::move(out), std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Activation { kRelu, kSigmoid };

template <typename T>
T sigmoid_value(T x) {
  T y;
  if (x >= T{0}) {
    y = T{1} / (T{1} + std::exp(-x));
  } else {
    const T e = std::exp(x);
    y = e / (T{1} + e);
  }
  // keep the output inside the open unit interval at the representable limits
  return std::clamp(y, std::numeric_limits<T>::min(), std::nextafter(T{1}, T{0}));
}

template <typename T>
NodeId activation(Graph<T>& g, NodeId input, Activation kind) {
  Tensor<T> out = g.value(input);
  for (auto& v : out.data()) v = kind == Activation::kRelu ? std::max(v, T{0}) : sigmoid_value(v);
  auto backward = [input, kind](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    const auto& y = gr.value(self).data();
    auto& gx = gr.grad_slot(input);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (kind == Activation::kRelu) {
        if (y[i] > T{0}) gx[i] += gy[i];
      } else {
        gx[i] += gy[i] * y[i] * (T{1} - y[i]);
      }
    }
  };
  return g.record(kind == Activation::kRelu ? OpTag::kRelu : OpTag::kSigmoid, {input}, std::move(out),
                  std::move(backward));
}

template <typename T>
NodeId relu(Graph<T>& g, NodeId input) {
  return activation(g, input, Activation::kRelu);
}

template <typename T>
NodeId sigmoid(Graph<T>& g, NodeId input) {
  return activation(g, input, Activation::kSigmoid);
}

/// Elementwise sum of two same-shaped tensors.
template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  if (g.shape(a) != g.shape(b)) {
    throw ShapeError("add: shape mismatch " + to_string(g.shape(a)) + " vs " + to_string(g.shape(b)));
  }
  Tensor<T> out = g.value(a);
  const auto& bv = g.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto backward = [a, b](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    for (NodeId p : {a, b}) {
      auto& gp = gr.grad_slot(p);
      for (std::size_t i = 0; i < gy.size(); ++i) gp[i] += gy[i];
    }
  };
  return g.record(OpTag::kAdd, {a, b}, std::move(out), std::move(backward));
}

template <typename T>
NodeId scale(Graph<T>& g, NodeId input, T factor) {
  Tensor<T> out = g.value(input);
  for (auto& v : out.data()) v *= factor;
  auto backward = [input, factor](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    auto& gx = gr.grad_slot(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
  };
  return g.record(OpTag::kScale, {input}, std::move(out), std::move(backward));
}

template <typename T>
NodeId reshape(Graph<T>& g, NodeId input, Shape shape) {
  if (element_count(shape) != g.value(input).size()) {
    throw ShapeError("reshape: cannot view " + to_string(g.shape(input)) + " as " + to_string(shape));
  }
  Tensor<T> out = g.value(input).reshaped(std::move(shape));
  auto backward = [input](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    auto& gx = gr.grad_slot(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  };
  return g.record(OpTag::kReshape, {input}, std::move(out), std::move(backward));
}

/// N×... → N×(rest)
template <typename T>
NodeId flatten(Graph<T>& g, NodeId input) {
  const Shape& s = g.shape(input);
  if (s.empty()) throw ShapeError("flatten: rank-0 input");
  return reshape(g, input, Shape{s[0], g.value(input).size() / s[0]});
}

template <typename T>
NodeId sum(Graph<T>& g, NodeId input) {
  T acc{0};
  for (T v : g.value(input).data()) acc += v;
  auto backward = [input](Graph<T>& gr, NodeId self) {
    const T gy = gr.grad_slot(self)[0];
    auto& gx = gr.grad_slot(input);
    for (auto& v : gx) v += gy;
  };
  return g.record(OpTag::kSum, {input}, Tensor<T>(Shape{1}, std::vector<T>{acc}), std::move(backward));
}

template <typename T>
NodeId mean(Graph<T>& g, NodeId input) {
  const std::size_t n = g.value(input).size();
  T acc{0};
  for (T v : g.value(input).data()) acc += v;
  const T inv = T{1} / static_cast<T>(n);
  auto backward = [input, inv](Graph<T>& gr, NodeId self) {
    const T gy = gr.grad_slot(self)[0] * inv;
    auto& gx = gr.grad_slot(input);
    for (auto& v : gx) v += gy;
  };
  return g.record(OpTag::kMean, {input}, Tensor<T>(Shape{1}, std::vector<T>{acc * inv}), std::move(backward));
}

// ---------------------------------------------------------------------------
// Channel ops

/// Concatenates NCiHW tensors along the channel axis in argument order.
template <typename T>
NodeId concat_channels(Graph<T>& g, std::span<const NodeId> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape first = g.shape(inputs[0]);
  detail::require_rank(first, 4, "concat_channels", "input");
  const std::size_t N = first[0], H = first[2], W = first[3];
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (NodeId id : inputs) {
    const Shape& s = g.shape(id);
    detail::require_rank(s, 4, "concat_channels", "input");
    if (s[0] != N || s[2] != H || s[3] != W) {
      throw ShapeError("concat_channels: spatial/batch mismatch " + to_string(first) + " vs " + to_string(s));
    }
    channels.push_back(s[1]);
    total += s[1];
  }
  const std::size_t HW = H * W;
  Tensor<T> out({N, total, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t offset = 0;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
      const auto& v = g.value(inputs[a]).data();
      std::copy_n(v.begin() + n * channels[a] * HW, channels[a] * HW,
                  out.data().begin() + (n * total + offset) * HW);
      offset += channels[a];
    }
  }
  std::vector<NodeId> parents(inputs.begin(), inputs.end());
  auto backward = [parents, channels, N, total, HW](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    std::size_t offset = 0;
    for (std::size_t a = 0; a < parents.size(); ++a) {
      auto& gp = gr.grad_slot(parents[a]);
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = gy.data() + (n * total + offset) * HW;
        T* dst = gp.data() + n * channels[a] * HW;
        for (std::size_t j = 0; j < channels[a] * HW; ++j) dst[j] += src[j];
      }
      offset += channels[a];
    }
  };
  return g.record(OpTag::kConcatChannels, parents, std::move(out), std::move(backward));
}

template <typename T>
NodeId concat_channels(Graph<T>& g, std::initializer_list<NodeId> inputs) {
  return concat_channels(g, std::span<const NodeId>(inputs.begin(), inputs.size()));
}

/// Multiplies channel c of sample n by gates[n, c].
template <typename T>
NodeId scale_channels(Graph<T>& g, NodeId input, NodeId gates) {
  const Shape& xs = g.shape(input);
  const Shape& gs = g.shape(gates);
  detail::require_rank(xs, 4, "scale_channels", "input");
  if (gs.size() != 2 || gs[0] != xs[0] || gs[1] != xs[1]) {
    throw ShapeError("scale_channels: gates " + to_string(gs) + " do not match input " + to_string(xs));
  }
  const std::size_t NC = xs[0] * xs[1], HW = xs[2] * xs[3];
  Tensor<T> out = g.value(input);
  const auto& gv = g.value(gates).data();
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t j = 0; j < HW; ++j) out[nc * HW + j] *= gv[nc];
  auto backward = [=](Graph<T>& gr, NodeId self) {
    const auto& gy = gr.grad_slot(self);
    const auto& xv = gr.value(input).data();
    const auto& gtv = gr.value(gates).data();
    auto& gx = gr.grad_slot(input);
    auto& gg = gr.grad_slot(gates);
    for (std::size_t nc = 0; nc < NC; ++nc) {
      T acc{0};
      for (std::size_t j = 0; j < HW; ++j) {
        acc += gy[nc * HW + j] * xv[nc * HW + j];
        gx[nc * HW + j] += gy[nc * HW + j] * gtv[nc];
      }
      gg[nc] += acc;
    }
  };
  return g.record(OpTag::kScaleChannels, {input, gates}, std::move(out), std::move(backward));
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kBceClampEps = 1e-7;

/// Mean binary cross-entropy of post-sigmoid probabilities against {0,1}
/// labels. Probabilities are clamped to [eps, 1-eps] before the logarithm.
/// Optional per-sample weights scale each term; the mean still divides by N.
template <typename T>
NodeId bce_loss(Graph<T>& g, NodeId probs, NodeId labels, std::vector<T> weights = {}) {
  const auto& p = g.value(probs).data();
  const auto& y = g.value(labels).data();
  if (p.size() != y.size()) {
    throw ShapeError("bce_loss: " + std::to_string(p.size()) + " probabilities vs " + std::to_string(y.size()) +
                     " labels");
  }
  if (!weights.empty() && weights.size() != p.size()) {
    throw ShapeError("bce_loss: " + std::to_string(weights.size()) + " weights for " + std::to_string(p.size()) +
                     " samples");
  }
  for (T v : y)
    if (v != T{0} && v != T{1}) throw std::invalid_argument("bce_loss: labels must be 0 or 1");
  const T eps = static_cast<T>(kBceClampEps);
  const std::size_t n = p.size();
  if (weights.empty()) weights.assign(n, T{1});
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T pc = std::clamp(p[i], eps, T{1} - eps);
    acc -= weights[i] * (y[i] * std::log(pc) + (T{1} - y[i]) * std::log(T{1} - pc));
  }
  const T loss = acc / static_cast<T>(n);
  auto backward = [probs, labels, eps, n, w = std::move(weights)](Graph<T>& gr, NodeId self) {
    const T gy = gr.grad_slot(self)[0] / static_cast<T>(n);
    const auto& pv = gr.value(probs).data();
    const auto& yv = gr.value(labels).data();
    auto& gp = gr.grad_slot(probs);
    for (std::size_t i = 0; i < n; ++i) {
      const T pc = std::clamp(pv[i], eps, T{1} - eps);
      gp[i] += gy * w[i] * (-yv[i] / pc + (T{1} - yv[i]) / (T{1} - pc));
    }
  };
  return g.record(OpTag::kBceLoss, {probs, labels}, Tensor<T>(Shape{1}, std::vector<T>{loss}),
                  std::move(backward));
}

}  // namespace pneumolens
