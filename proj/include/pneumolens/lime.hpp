#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pneumolens/image.hpp"
#include "pneumolens/parallel.hpp"
#include "pneumolens/random.hpp"

namespace pneumolens {

class LimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Normal equations could not be factorized.
class SingularSystemError : public LimeError {
 public:
  using LimeError::LimeError;
};

// ---------------------------------------------------------------------------
// Superpixels

struct Superpixels {
  std::size_t width = 0, height = 0;
  std::vector<std::int32_t> labels;  // row-major, ids in [0, count)
  std::size_t count = 0;

  std::int32_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(count, 0);
    for (auto l : labels) ++s[static_cast<std::size_t>(l)];
    return s;
  }
};

namespace detail {

inline double srgb_to_linear(double c) {
  c /= 255.0;
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

/// CIE Lab (D65) per pixel, 3 floats each.
inline std::vector<double> to_lab(const ImageBuffer& img) {
  const ImageBuffer rgb = to_rgb(img);
  std::vector<double> lab(rgb.width * rgb.height * 3);
  for (std::size_t i = 0; i < rgb.width * rgb.height; ++i) {
    const double r = srgb_to_linear(rgb.pixels[i * 3]), g = srgb_to_linear(rgb.pixels[i * 3 + 1]),
                 b = srgb_to_linear(rgb.pixels[i * 3 + 2]);
    const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    const double fx = lab_f(x), fy = lab_f(y), fz = lab_f(z);
    lab[i * 3] = 116 * fy - 16;
    lab[i * 3 + 1] = 500 * (fx - fy);
    lab[i * 3 + 2] = 200 * (fy - fz);
  }
  return lab;
}

/// 4-connected components of a label map; returns component id per pixel.
inline std::vector<std::int32_t> components(const std::vector<std::int32_t>& labels, std::size_t w, std::size_t h,
                                            std::size_t& n_comp) {
  std::vector<std::int32_t> comp(labels.size(), -1);
  std::vector<std::size_t> stack;
  n_comp = 0;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (comp[start] >= 0) continue;
    const auto id = static_cast<std::int32_t>(n_comp++);
    comp[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t x = p % w, y = p / w;
      const std::size_t nb[4] = {x > 0 ? p - 1 : p, x + 1 < w ? p + 1 : p, y > 0 ? p - w : p, y + 1 < h ? p + w : p};
      for (std::size_t q : nb)
        if (comp[q] < 0 && labels[q] == labels[p]) {
          comp[q] = id;
          stack.push_back(q);
        }
    }
  }
  return comp;
}

}  // namespace detail

/// SLIC: k-means over (L,a,b,x,y) seeded on a regular grid of at most
/// n_segments cells, then a connectivity pass that merges every fragment
/// other than the largest piece of each cluster into the neighbor sharing
/// the longest border.
/// Ids are relabeled 0..d−1 in row-major order of first appearance.
inline Superpixels slic_segments(const ImageBuffer& image, std::size_t n_segments, double compactness = 10.0,
                                 std::size_t max_iters = 10) {
  if (n_segments < 1) throw std::invalid_argument("slic_segments: n_segments must be >= 1");
  if (image.empty()) throw ImageError("slic_segments: empty image");
  const std::size_t w = image.width, h = image.height, n = w * h;
  if (n_segments > n) throw std::invalid_argument("slic_segments: n_segments exceeds pixel count");
  if (!(compactness > 0)) throw std::invalid_argument("slic_segments: compactness must be > 0");
  const auto lab = detail::to_lab(image);

  const double s0 = std::sqrt(static_cast<double>(n) / static_cast<double>(n_segments));
  const std::size_t nx = std::clamp<std::size_t>(static_cast<std::size_t>(static_cast<double>(w) / s0), 1, w);
  const std::size_t ny = std::clamp<std::size_t>(static_cast<std::size_t>(static_cast<double>(h) / s0), 1, h);
  const double step_x = static_cast<double>(w) / static_cast<double>(nx);
  const double step_y = static_cast<double>(h) / static_cast<double>(ny);
  const double S = std::sqrt(step_x * step_y);

  struct Center {
    double l, a, b, x, y;
  };
  auto grad_at = [&](std::size_t x, std::size_t y) {
    auto L = [&](std::size_t xx, std::size_t yy) { return lab[(yy * w + xx) * 3]; };
    const double gx = L(std::min(x + 1, w - 1), y) - L(x > 0 ? x - 1 : 0, y);
    const double gy = L(x, std::min(y + 1, h - 1)) - L(x, y > 0 ? y - 1 : 0);
    return gx * gx + gy * gy;
  };
  std::vector<Center> centers;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      auto cx = static_cast<std::size_t>((static_cast<double>(i) + 0.5) * step_x);
      auto cy = static_cast<std::size_t>((static_cast<double>(j) + 0.5) * step_y);
      // move the seed to the lowest gradient in its 3×3 neighborhood
      std::size_t bx = cx, by = cy;
      double best = grad_at(cx, cy);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long xx = static_cast<long>(cx) + dx, yy = static_cast<long>(cy) + dy;
          if (xx < 0 || yy < 0 || xx >= static_cast<long>(w) || yy >= static_cast<long>(h)) continue;
          const double gv = grad_at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy));
          if (gv < best) {
            best = gv;
            bx = static_cast<std::size_t>(xx);
            by = static_cast<std::size_t>(yy);
          }
        }
      const double px = (bx == cx && by == cy) ? (static_cast<double>(i) + 0.5) * step_x : static_cast<double>(bx) + 0.5;
      const double py = (bx == cx && by == cy) ? (static_cast<double>(j) + 0.5) * step_y : static_cast<double>(by) + 0.5;
      const std::size_t p = by * w + bx;
      centers.push_back({lab[p * 3], lab[p * 3 + 1], lab[p * 3 + 2], px, py});
    }

  std::vector<std::int32_t> label(n, -1);
  std::vector<double> dist(n);
  const double m2 = compactness * compactness / (S * S);
  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& c = centers[k];
      const long x0 = std::max(0L, static_cast<long>(std::floor(c.x - 2 * step_x)));
      const long x1 = std::min(static_cast<long>(w), static_cast<long>(std::ceil(c.x + 2 * step_x)));
      const long y0 = std::max(0L, static_cast<long>(std::floor(c.y - 2 * step_y)));
      const long y1 = std::min(static_cast<long>(h), static_cast<long>(std::ceil(c.y + 2 * step_y)));
      for (long y = y0; y < y1; ++y)
        for (long x = x0; x < x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          const double dl = lab[p * 3] - c.l, da = lab[p * 3 + 1] - c.a, db = lab[p * 3 + 2] - c.b;
          const double dx = static_cast<double>(x) + 0.5 - c.x, dy = static_cast<double>(y) + 0.5 - c.y;
          const double d = dl * dl + da * da + db * db + (dx * dx + dy * dy) * m2;
          if (d < dist[p]) {
            dist[p] = d;
            label[p] = static_cast<std::int32_t>(k);
          }
        }
    }
    // pixels outside every window (possible only on tiny images) take the nearest center spatially
    for (std::size_t p = 0; p < n; ++p) {
      if (label[p] >= 0) continue;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const double dx = static_cast<double>(p % w) + 0.5 - centers[k].x;
        const double dy = static_cast<double>(p / w) + 0.5 - centers[k].y;
        if (dx * dx + dy * dy < best) {
          best = dx * dx + dy * dy;
          label[p] = static_cast<std::int32_t>(k);
        }
      }
    }
    std::vector<Center> sum(centers.size(), Center{0, 0, 0, 0, 0});
    std::vector<std::size_t> cnt(centers.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      auto& s = sum[static_cast<std::size_t>(label[p])];
      s.l += lab[p * 3];
      s.a += lab[p * 3 + 1];
      s.b += lab[p * 3 + 2];
      s.x += static_cast<double>(p % w) + 0.5;
      s.y += static_cast<double>(p / w) + 0.5;
      ++cnt[static_cast<std::size_t>(label[p])];
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (cnt[k] == 0) continue;
      const double c = static_cast<double>(cnt[k]);
      centers[k] = {sum[k].l / c, sum[k].a / c, sum[k].b / c, sum[k].x / c, sum[k].y / c};
    }
  }

  // connectivity
  std::size_t n_comp = 0;
  const auto comp = detail::components(label, w, h, n_comp);
  std::vector<std::size_t> comp_size(n_comp, 0);
  std::vector<std::int32_t> comp_label(n_comp, 0);
  for (std::size_t p = 0; p < n; ++p) {
    ++comp_size[static_cast<std::size_t>(comp[p])];
    comp_label[static_cast<std::size_t>(comp[p])] = label[p];
  }
  std::vector<std::int64_t> largest(centers.size(), -1);
  for (std::size_t c = 0; c < n_comp; ++c) {
    auto& l = largest[static_cast<std::size_t>(comp_label[c])];
    if (l < 0 || comp_size[c] > comp_size[static_cast<std::size_t>(l)]) l = static_cast<std::int64_t>(c);
  }
  std::vector<std::int64_t> root(n_comp, -1);
  for (std::size_t c = 0; c < n_comp; ++c)
    if (largest[static_cast<std::size_t>(comp_label[c])] == static_cast<std::int64_t>(c))
      root[c] = static_cast<std::int64_t>(c);
  // orphan → resolved neighbor with the longest shared border (ties: lowest id)
  for (bool pending = true; pending;) {
    pending = false;
    std::vector<std::vector<std::pair<std::int64_t, std::size_t>>> border(n_comp);
    for (std::size_t p = 0; p < n; ++p) {
      const auto a = static_cast<std::size_t>(comp[p]);
      if (root[a] >= 0) continue;
      const std::size_t x = p % w, y = p / w;
      const std::size_t nb[4] = {x > 0 ? p - 1 : p, x + 1 < w ? p + 1 : p, y > 0 ? p - w : p, y + 1 < h ? p + w : p};
      for (std::size_t q : nb) {
        const auto b = static_cast<std::size_t>(comp[q]);
        if (b == a || root[b] < 0) continue;
        auto& list = border[a];
        auto it = std::find_if(list.begin(), list.end(), [&](const auto& e) { return e.first == root[b]; });
        if (it == list.end()) {
          list.emplace_back(root[b], 1);
        } else {
          ++it->second;
        }
      }
    }
    std::vector<std::int64_t> next = root;
    for (std::size_t c = 0; c < n_comp; ++c) {
      if (root[c] >= 0) continue;
      if (border[c].empty()) {
        pending = true;
        continue;
      }
      auto best = border[c].front();
      for (const auto& e : border[c])
        if (e.second > best.second || (e.second == best.second && e.first < best.first)) best = e;
      next[c] = best.first;
    }
    root = std::move(next);
  }

  Superpixels sp;
  sp.width = w;
  sp.height = h;
  sp.labels.assign(n, 0);
  std::vector<std::int32_t> relabel(n_comp, -1);
  for (std::size_t p = 0; p < n; ++p) {
    const auto r = static_cast<std::size_t>(root[static_cast<std::size_t>(comp[p])]);
    if (relabel[r] < 0) relabel[r] = static_cast<std::int32_t>(sp.count++);
    sp.labels[p] = relabel[r];
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Perturbation

/// n×d row-major 0/1 matrix; row 0 is all ones, other entries Bernoulli(½).
inline std::vector<std::uint8_t> sample_perturbations(std::size_t d, std::size_t n, Rng& rng) {
  if (n < 1 || d < 1) throw std::invalid_argument("sample_perturbations: n and d must be >= 1");
  std::vector<std::uint8_t> z(n * d, 1);
  for (std::size_t i = d; i < n * d; ++i) z[i] = uniform01(rng) < 0.5 ? 1 : 0;
  return z;
}

enum class FillMode { kMeanColor, kGray };

/// Per-segment mean color (rounded), channels of `image`.
inline std::vector<std::uint8_t> segment_means(const ImageBuffer& image, const Superpixels& sp) {
  const std::size_t ch = image.channels;
  std::vector<double> sum(sp.count * ch, 0.0);
  std::vector<std::size_t> cnt(sp.count, 0);
  for (std::size_t p = 0; p < sp.labels.size(); ++p) {
    const auto l = static_cast<std::size_t>(sp.labels[p]);
    ++cnt[l];
    for (std::size_t c = 0; c < ch; ++c) sum[l * ch + c] += image.pixels[p * ch + c];
  }
  std::vector<std::uint8_t> out(sp.count * ch);
  for (std::size_t l = 0; l < sp.count; ++l)
    for (std::size_t c = 0; c < ch; ++c)
      out[l * ch + c] = static_cast<std::uint8_t>(std::lround(sum[l * ch + c] / static_cast<double>(cnt[l])));
  return out;
}

/// Segments with z=1 keep their pixels; z=0 segments are filled with the
/// segment's mean color (computed on `image`) or mid-gray.
inline ImageBuffer apply_mask(const ImageBuffer& image, const Superpixels& sp, std::span<const std::uint8_t> z,
                              FillMode fill = FillMode::kMeanColor) {
  if (z.size() != sp.count) {
    throw std::invalid_argument("apply_mask: mask has " + std::to_string(z.size()) + " entries for " +
                                std::to_string(sp.count) + " segments");
  }
  if (image.width != sp.width || image.height != sp.height) throw ImageError("apply_mask: image/segmentation size mismatch");
  const std::size_t ch = image.channels;
  std::vector<std::uint8_t> means;
  if (fill == FillMode::kMeanColor) means = segment_means(image, sp);
  ImageBuffer out = image;
  for (std::size_t p = 0; p < sp.labels.size(); ++p) {
    const auto l = static_cast<std::size_t>(sp.labels[p]);
    if (z[l]) continue;
    for (std::size_t c = 0; c < ch; ++c) out.pixels[p * ch + c] = fill == FillMode::kMeanColor ? means[l * ch + c] : 128;
  }
  return out;
}

/// exp(−D²/width²), D = cosine distance between z and the all-ones row
/// (1 for the all-zero row).
inline double kernel_weight(std::span<const std::uint8_t> z, double width) {
  std::size_t on = 0;
  for (auto v : z) on += v;
  const double cos_sim = on == 0 ? 0.0 : std::sqrt(static_cast<double>(on) / static_cast<double>(z.size()));
  const double d = 1.0 - cos_sim;
  return std::exp(-d * d / (width * width));
}

// ---------------------------------------------------------------------------
// Surrogate

struct SurrogateFit {
  std::vector<double> weights;
  double intercept = 0;
  double local_r2 = 0;
};

/// Weighted ridge regression y ≈ b + Z·β with unpenalized intercept. Sample
/// weights are rescaled to sum to n, so a common scale factor cancels.
/// Normal equations on weighted-centered data, solved by Cholesky.
inline SurrogateFit fit_surrogate(std::span<const std::uint8_t> Z, std::size_t d, std::span<const double> y,
                                  std::span<const double> sample_weights, double lambda) {
  const std::size_t n = y.size();
  if (d == 0 || Z.size() != n * d) throw std::invalid_argument("fit_surrogate: Z must be n x d");
  if (sample_weights.size() != n) throw std::invalid_argument("fit_surrogate: one weight per sample required");
  if (n < d + 1) throw std::invalid_argument("fit_surrogate: need n >= d+1 samples");
  if (!(lambda >= 0)) throw std::invalid_argument("fit_surrogate: lambda must be >= 0");
  double wsum = 0;
  for (double w : sample_weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw std::invalid_argument("fit_surrogate: weights must be finite and >= 0");
    wsum += w;
  }
  if (wsum <= 0) throw std::invalid_argument("fit_surrogate: all sample weights are zero");
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = sample_weights[i] * static_cast<double>(n) / wsum;

  std::vector<double> xbar(d, 0.0);
  double ybar = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ybar += w[i] * y[i];
    for (std::size_t j = 0; j < d; ++j) xbar[j] += w[i] * Z[i * d + j];
  }
  ybar /= static_cast<double>(n);
  for (auto& v : xbar) v /= static_cast<double>(n);

  std::vector<double> A(d * d, 0.0), rhs(d, 0.0), xc(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) xc[j] = Z[i * d + j] - xbar[j];
    const double yc = y[i] - ybar;
    for (std::size_t j = 0; j < d; ++j) {
      rhs[j] += w[i] * xc[j] * yc;
      for (std::size_t k = 0; k <= j; ++k) A[j * d + k] += w[i] * xc[j] * xc[k];
    }
  }
  double diag_max = 0;
  for (std::size_t j = 0; j < d; ++j) {
    A[j * d + j] += lambda;
    diag_max = std::max(diag_max, A[j * d + j]);
  }
  // A = L·Lᵀ (lower triangle in place)
  const double tol = 1e-12 * std::max(diag_max, 1.0);
  for (std::size_t j = 0; j < d; ++j) {
    double s = A[j * d + j];
    for (std::size_t k = 0; k < j; ++k) s -= A[j * d + k] * A[j * d + k];
    if (!(s > tol)) {
      throw SingularSystemError("fit_surrogate: normal equations are singular (segment " + std::to_string(j) +
                                "); use ridge_lambda > 0");
    }
    const double ljj = std::sqrt(s);
    A[j * d + j] = ljj;
    for (std::size_t i = j + 1; i < d; ++i) {
      double t = A[i * d + j];
      for (std::size_t k = 0; k < j; ++k) t -= A[i * d + k] * A[j * d + k];
      A[i * d + j] = t / ljj;
    }
  }
  std::vector<double> beta(rhs);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < j; ++k) beta[j] -= A[j * d + k] * beta[k];
    beta[j] /= A[j * d + j];
  }
  for (std::size_t j = d; j-- > 0;) {
    for (std::size_t k = j + 1; k < d; ++k) beta[j] -= A[k * d + j] * beta[k];
    beta[j] /= A[j * d + j];
  }

  SurrogateFit fit;
  fit.weights = beta;
  fit.intercept = ybar;
  for (std::size_t j = 0; j < d; ++j) fit.intercept -= xbar[j] * beta[j];
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double pred = fit.intercept;
    for (std::size_t j = 0; j < d; ++j) pred += beta[j] * Z[i * d + j];
    ss_res += w[i] * (y[i] - pred) * (y[i] - pred);
    ss_tot += w[i] * (y[i] - ybar) * (y[i] - ybar);
  }
  // a constant target is fit exactly by the intercept
  fit.local_r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

// ---------------------------------------------------------------------------
// Explanation

struct LimeConfig {
  std::size_t n_segments = 50;
  double compactness = 10.0;
  std::size_t slic_iters = 10;
  std::size_t n_samples = 1000;
  std::optional<double> kernel_width;  // default 0.25·√d
  double ridge_lambda = 1e-3;
  FillMode fill = FillMode::kMeanColor;
  std::size_t top_k = 5;
  std::size_t batch_size = 50;  // masked images per predict_fn call
  std::size_t threads = 1;
  std::uint64_t seed = 0;

  double width_for(std::size_t d) const { return kernel_width.value_or(0.25 * std::sqrt(static_cast<double>(d))); }

  void validate(std::size_t d) const {
    if (n_segments < 1) throw std::invalid_argument("LimeConfig: n_segments must be >= 1");
    if (n_samples < d + 1) {
      throw std::invalid_argument("LimeConfig: n_samples (" + std::to_string(n_samples) + ") must be >= segments+1 (" +
                                  std::to_string(d + 1) + ")");
    }
    if (!(ridge_lambda >= 0)) throw std::invalid_argument("LimeConfig: ridge_lambda must be >= 0");
    if (kernel_width && !(*kernel_width > 0)) throw std::invalid_argument("LimeConfig: kernel_width must be > 0");
    if (batch_size < 1) throw std::invalid_argument("LimeConfig: batch_size must be >= 1");
  }
};

inline const char* fill_name(FillMode f) { return f == FillMode::kMeanColor ? "mean_color" : "gray"; }

inline void to_json(nlohmann::json& j, const LimeConfig& c) {
  j = {{"n_segments", c.n_segments},
       {"compactness", c.compactness},
       {"slic_iters", c.slic_iters},
       {"n_samples", c.n_samples},
       {"ridge_lambda", c.ridge_lambda},
       {"fill", fill_name(c.fill)},
       {"top_k", c.top_k},
       {"batch_size", c.batch_size},
       {"seed", c.seed}};
  j["kernel_width"] = c.kernel_width ? nlohmann::json(*c.kernel_width) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, LimeConfig& c) {
  c.n_segments = j.value("n_segments", c.n_segments);
  c.compactness = j.value("compactness", c.compactness);
  c.slic_iters = j.value("slic_iters", c.slic_iters);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.ridge_lambda = j.value("ridge_lambda", c.ridge_lambda);
  c.top_k = j.value("top_k", c.top_k);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("kernel_width") && !j["kernel_width"].is_null()) c.kernel_width = j["kernel_width"].get<double>();
  if (j.contains("fill")) {
    const auto f = j["fill"].get<std::string>();
    if (f == "mean_color") {
      c.fill = FillMode::kMeanColor;
    } else if (f == "gray") {
      c.fill = FillMode::kGray;
    } else {
      throw std::invalid_argument("LimeConfig: fill must be mean_color or gray");
    }
  }
}

struct LimeExplanation {
  std::vector<double> weights;
  double intercept = 0;
  double local_r2 = 0;
  std::vector<std::pair<std::size_t, double>> top_k;  // (segment, weight), by descending |weight|
  double prediction = 0;                              // black-box score of the unperturbed image
  double kernel_width = 0;
  std::size_t num_segments = 0;
  std::uint64_t seed = 0;
};

/// Batch black box: masked images → one score each.
using PredictFn = std::function<std::vector<double>(const std::vector<ImageBuffer>&)>;

inline std::vector<std::pair<std::size_t, double>> top_k_segments(const std::vector<double>& w, std::size_t k) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(w[a]) > std::abs(w[b]); });
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t i = 0; i < std::min(k, w.size()); ++i) out.emplace_back(idx[i], w[idx[i]]);
  return out;
}

/// LIME over a given segmentation. Predictions are gathered by sample index,
/// so the result does not depend on cfg.threads.
inline LimeExplanation explain_segments(const PredictFn& predict, const ImageBuffer& image, const Superpixels& sp,
                                        const LimeConfig& cfg) {
  const std::size_t d = sp.count;
  cfg.validate(d);
  Rng rng(derive_seed(cfg.seed, {0x4c494d45ULL}));
  const auto Z = sample_perturbations(d, cfg.n_samples, rng);
  const std::size_t n = cfg.n_samples;
  std::vector<double> preds(n);
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  parallel_for(batches, cfg.threads, [&](std::size_t b) {
    const std::size_t begin = b * cfg.batch_size, end = std::min(n, begin + cfg.batch_size);
    std::vector<ImageBuffer> imgs;
    for (std::size_t i = begin; i < end; ++i)
      imgs.push_back(apply_mask(image, sp, std::span<const std::uint8_t>(Z).subspan(i * d, d), cfg.fill));
    std::vector<double> out;
    try {
      out = predict(imgs);
    } catch (const std::exception& e) {
      throw LimeError("predict_fn failed on perturbation sample " + std::to_string(begin) + ": " + e.what());
    }
    if (out.size() != imgs.size()) {
      throw LimeError("predict_fn returned " + std::to_string(out.size()) + " scores for " +
                      std::to_string(imgs.size()) + " images (samples " + std::to_string(begin) + ".." +
                      std::to_string(end - 1) + ")");
    }
    for (std::size_t i = begin; i < end; ++i) {
      if (!std::isfinite(out[i - begin])) throw LimeError("predict_fn returned a non-finite score for sample " + std::to_string(i));
      preds[i] = out[i - begin];
    }
  });
  const double width = cfg.width_for(d);
  std::vector<double> kw(n);
  for (std::size_t i = 0; i < n; ++i) kw[i] = kernel_weight(std::span<const std::uint8_t>(Z).subspan(i * d, d), width);
  auto fit = fit_surrogate(Z, d, preds, kw, cfg.ridge_lambda);
  LimeExplanation ex;
  ex.weights = std::move(fit.weights);
  ex.intercept = fit.intercept;
  ex.local_r2 = fit.local_r2;
  ex.top_k = top_k_segments(ex.weights, cfg.top_k);
  ex.prediction = preds[0];
  ex.kernel_width = width;
  ex.num_segments = d;
  ex.seed = cfg.seed;
  return ex;
}

/// SLIC segmentation followed by explain_segments.
inline std::pair<LimeExplanation, Superpixels> explain(const PredictFn& predict, const ImageBuffer& image,
                                                       const LimeConfig& cfg) {
  auto sp = slic_segments(image, cfg.n_segments, cfg.compactness, cfg.slic_iters);
  auto ex = explain_segments(predict, image, sp, cfg);
  return {std::move(ex), std::move(sp)};
}

inline nlohmann::json to_json(const LimeExplanation& ex, const LimeConfig& cfg) {
  nlohmann::json j;
  j["weights"] = ex.weights;
  j["intercept"] = ex.intercept;
  j["local_r2"] = ex.local_r2;
  j["prediction"] = ex.prediction;
  j["num_segments"] = ex.num_segments;
  j["kernel_width"] = ex.kernel_width;
  j["seed"] = ex.seed;
  j["top_k"] = nlohmann::json::array();
  for (const auto& [s, w] : ex.top_k) j["top_k"].push_back({{"segment", s}, {"weight", w}});
  j["config"] = cfg;
  return j;
}

// ---------------------------------------------------------------------------
// Overlay

inline constexpr std::uint8_t kBoundaryColor[3] = {255, 255, 0};

/// Pixel mask of the segments lime_overlay tints: among the top-k segments,
/// those with nonzero weight.
inline std::vector<bool> lime_highlight_mask(const Superpixels& sp, const LimeExplanation& ex, std::size_t k) {
  std::vector<int> tint(sp.count, 0);
  for (const auto& [s, w] : top_k_segments(ex.weights, k)) tint[s] = w > 0 ? 1 : (w < 0 ? -1 : 0);
  std::vector<bool> mask(sp.labels.size());
  for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = tint[static_cast<std::size_t>(sp.labels[p])] != 0;
  return mask;
}

/// Grayscale original as RGB; top-k segments tinted red (positive weight)
/// or blue (negative) at 50%; segment boundaries outside tinted segments
/// drawn in yellow.
inline ImageBuffer lime_overlay(const ImageBuffer& image, const Superpixels& sp, const LimeExplanation& ex,
                                std::size_t k) {
  if (k > sp.count) throw std::invalid_argument("lime_overlay: k exceeds segment count");
  if (ex.weights.size() != sp.count) throw std::invalid_argument("lime_overlay: explanation/segmentation mismatch");
  if (image.width != sp.width || image.height != sp.height) throw ImageError("lime_overlay: size mismatch");
  std::vector<int> tint(sp.count, 0);
  for (const auto& [s, w] : top_k_segments(ex.weights, k)) tint[s] = w > 0 ? 1 : (w < 0 ? -1 : 0);
  const ImageF gray = to_gray(image);
  ImageBuffer out(image.width, image.height, 3);
  const std::size_t w = sp.width, h = sp.height;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const auto v = static_cast<std::uint8_t>(std::clamp(std::lround(gray.pixels[p]), 0L, 255L));
      std::uint8_t* px = &out.pixels[p * 3];
      const int t = tint[static_cast<std::size_t>(sp.labels[p])];
      if (t != 0) {
        const auto hi = static_cast<std::uint8_t>((v + 255 + 1) / 2), lo = static_cast<std::uint8_t>((v + 1) / 2);
        px[0] = t > 0 ? hi : lo;
        px[1] = lo;
        px[2] = t > 0 ? lo : hi;
        continue;
      }
      const bool edge = (x + 1 < w && sp.labels[p + 1] != sp.labels[p]) || (y + 1 < h && sp.labels[p + w] != sp.labels[p]);
      for (std::size_t c = 0; c < 3; ++c) px[c] = edge ? kBoundaryColor[c] : v;
    }
  return out;
}

}  // namespace pneumolens
