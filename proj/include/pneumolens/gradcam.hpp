#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "pneumolens/image.hpp"
#include "pneumolens/model.hpp"

namespace pneumolens {

class UnknownLayerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Grad-CAM output. `raw` has the target layer's extents and is ≥ 0;
/// `normalized` has the input extents with values in [0,1].
struct Heatmap {
  ImageF raw;
  ImageF normalized;
  std::string target_layer;
  double class_score = 0;  // probability of Pneumonia
  double logit = 0;
};

/// Core Grad-CAM on a recorded graph: backward from scalar `score` to the
/// 1×K×h×w node `features`, α_k = spatial mean of ∂score/∂A_k,
/// raw = ReLU(Σ_k α_k A_k), then bilinear upsampling to out_h×out_w and
/// division by the max (an all-zero map stays zero).
template <typename T>
Heatmap gradcam_from_graph(Graph<T>& g, NodeId features, NodeId score, std::size_t out_h, std::size_t out_w) {
  const Shape fs = g.shape(features);
  if (fs.size() != 4 || fs[0] != 1) {
    throw ShapeError("gradcam: feature map must be 1xKxHxW, got " + to_string(fs));
  }
  g.backward(score);
  const auto& a = g.value(features).data();
  const auto grads = g.grad(features);
  for (T v : grads)
    if (!std::isfinite(v)) throw NonFiniteError("gradcam: non-finite gradient at the target layer");
  const std::size_t k = fs[1], h = fs[2], w = fs[3], hw = h * w;
  Heatmap hm;
  hm.raw = ImageF(w, h, 1);
  std::vector<double> acc(hw, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double alpha = 0;
    for (std::size_t i = 0; i < hw; ++i) alpha += static_cast<double>(grads[c * hw + i]);
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) acc[i] += alpha * static_cast<double>(a[c * hw + i]);
  }
  for (std::size_t i = 0; i < hw; ++i) hm.raw.pixels[i] = static_cast<float>(std::max(acc[i], 0.0));
  hm.normalized = resize_bilinear(hm.raw, out_h, out_w);
  float peak = 0;
  for (float v : hm.normalized.pixels) peak = std::max(peak, v);
  if (peak > 0) {
    for (auto& v : hm.normalized.pixels) v = std::clamp(v / peak, 0.0f, 1.0f);
  } else {
    std::fill(hm.normalized.pixels.begin(), hm.normalized.pixels.end(), 0.0f);
  }
  const auto& s = g.value(score).data();
  hm.logit = static_cast<double>(s[0]);
  hm.class_score = static_cast<double>(sigmoid_value(s[0]));
  return hm;
}

/// Explains the Pneumonia logit of one preprocessed image (3×H×W or
/// 1×3×H×W). An empty `target_layer` uses the network's gradcam_target.
/// The network is not written to.
inline Heatmap gradcam(const Network<float>& net, const Tensor<float>& image, std::string target_layer = "") {
  if (target_layer.empty()) target_layer = net.spec().gradcam_target;
  if (!net.is_layer_name(target_layer)) {
    std::string names;
    for (const auto& n : net.layer_names()) names += (names.empty() ? "" : ", ") + n;
    throw UnknownLayerError("gradcam: unknown layer '" + target_layer + "' (valid: " + names + ")");
  }
  Tensor<float> x = image;
  if (image.rank() == 3) x = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("gradcam: expects one image, got " + to_string(image.shape()));
  Graph<float> g;
  auto* self = const_cast<Network<float>*>(&net);
  const auto r = self->forward(g, g.constant(x), Mode::kEval, {.frozen = true});
  auto hm = gradcam_from_graph(g, r.activations.at(target_layer), r.logit, x.dim(2), x.dim(3));
  hm.target_layer = target_layer;
  return hm;
}

/// (x, y) of the maximum of a single-channel map; first in row-major order on ties.
inline std::pair<std::size_t, std::size_t> argmax(const ImageF& map) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < map.pixels.size(); ++i)
    if (map.pixels[i] > map.pixels[best]) best = i;
  return {best % map.width, best / map.width};
}

// ---------------------------------------------------------------------------
// Rendering

/// 256-entry blue→cyan→green→yellow→red lookup table in integer arithmetic.
inline const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const int seg = std::min(i / 64, 3), f = (i - seg * 64) * 255 / 63;  // 0..255 within the segment
      int r = 0, g = 0, b = 0;
      switch (seg) {
        case 0: r = 0, g = f, b = 255; break;        // blue → cyan
        case 1: r = 0, g = 255, b = 255 - f; break;  // cyan → green
        case 2: r = f, g = 255, b = 0; break;        // green → yellow
        default: r = 255, g = 255 - f, b = 0; break; // yellow → red
      }
      t[i] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
    }
    return t;
  }();
  return table;
}

inline std::uint8_t heat_index(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Grayscale PNG-ready rendering of a [0,1] map.
inline ImageBuffer heatmap_image(const ImageF& normalized) {
  ImageBuffer out(normalized.width, normalized.height, 1);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = heat_index(normalized.pixels[i]);
  return out;
}

/// Colormapped heatmap alpha-blended onto the grayscale original:
/// out = (1−α)·gray + α·lut(heat), rounded per channel. The heatmap is
/// bilinearly resized to the original's extents first.
inline ImageBuffer overlay(const Heatmap& hm, const ImageBuffer& original, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("overlay: alpha must be in [0,1]");
  if (original.empty()) throw ImageError("overlay: empty original image");
  if (hm.normalized.empty() || hm.normalized.channels != 1) throw ImageError("overlay: heatmap must be a 1-channel map");
  const ImageF heat = (hm.normalized.width == original.width && hm.normalized.height == original.height)
                          ? hm.normalized
                          : resize_bilinear(hm.normalized, original.height, original.width);
  if (heat.width != original.width || heat.height != original.height) throw ImageError("overlay: size mismatch");
  const ImageF gray = to_gray(original);
  const auto& lut = heat_colormap();
  ImageBuffer out(original.width, original.height, 3);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
    const auto& color = lut[heat_index(heat.pixels[i])];
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = (1.0 - alpha) * gray.pixels[i] + alpha * color[c];
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

/// Numeric map as CSV, one image row per line.
inline std::string heatmap_csv(const ImageF& map) {
  std::string out;
  char buf[32];
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      std::snprintf(buf, sizeof buf, "%s%.9g", x ? "," : "", static_cast<double>(map.at(x, y, 0)));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace pneumolens
