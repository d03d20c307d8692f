#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pneumolens/image.hpp"
#include "pneumolens/parallel.hpp"
#include "pneumolens/random.hpp"
#include "pneumolens/tensor.hpp"

namespace pneumolens {

enum class Label : int { kNormal = 0, kPneumonia = 1 };

inline const char* class_dir_name(Label label) { return label == Label::kNormal ? "NORMAL" : "PNEUMONIA"; }

struct Sample {
  std::filesystem::path path;
  Label label = Label::kNormal;
  bool operator==(const Sample&) const = default;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Files of a `root/{split}/{NORMAL,PNEUMONIA}/` tree, sorted by path per split.
struct DatasetManifest {
  std::filesystem::path root;
  std::map<std::string, std::vector<Sample>> splits;

  const std::vector<Sample>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw DatasetError("split '" + name + "' not in manifest of " + root.string());
    return it->second;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [_, samples] : splits) n += samples.size();
    return n;
  }

  std::size_t count(const std::string& split_name, Label label) const {
    const auto& s = split(split_name);
    return static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [label](const Sample& x) { return x.label == label; }));
  }

  bool operator==(const DatasetManifest&) const = default;

  /// {"root":..., "total":N, "splits":{split:{"NORMAL":n,"PNEUMONIA":m,"total":k,"files":[...]}}}
  nlohmann::json summary(bool with_files = false) const {
    nlohmann::json j;
    j["root"] = root.string();
    j["total"] = total();
    j["splits"] = nlohmann::json::object();
    for (const auto& [name, samples] : splits) {
      nlohmann::json s;
      s["NORMAL"] = count(name, Label::kNormal);
      s["PNEUMONIA"] = count(name, Label::kPneumonia);
      s["total"] = samples.size();
      if (with_files) {
        s["files"] = nlohmann::json::array();
        for (const auto& x : samples)
          s["files"].push_back({{"path", x.path.string()}, {"label", static_cast<int>(x.label)}});
      }
      j["splits"][name] = std::move(s);
    }
    return j;
  }
};

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline const std::vector<std::string>& default_splits() {
  static const std::vector<std::string> kSplits{"train", "val", "test"};
  return kSplits;
}

/// Scans `root`. Every required split must exist; any other visible
/// subdirectory is scanned as an extra split. Hidden and `__`-prefixed
/// entries (archive debris) are ignored, as are non-image files.
inline DatasetManifest scan_dataset(const std::filesystem::path& root,
                                    const std::vector<std::string>& required = default_splits()) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset root " + root.string() + " is not a directory");
  auto hidden = [](const fs::path& p) {
    const std::string name = p.filename().string();
    return name.empty() || name[0] == '.' || name.rfind("__", 0) == 0;
  };
  std::vector<fs::path> split_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && !hidden(entry.path())) split_dirs.push_back(entry.path());
  if (split_dirs.empty()) throw DatasetError("no splits found under " + root.string());
  for (const auto& name : required)
    if (!fs::is_directory(root / name)) throw DatasetError("missing split directory '" + name + "' under " + root.string());

  DatasetManifest manifest;
  manifest.root = root;
  std::set<fs::path> seen;
  std::sort(split_dirs.begin(), split_dirs.end());
  for (const auto& split_dir : split_dirs) {
    const std::string split = split_dir.filename().string();
    std::vector<Sample> samples;
    for (const auto& cls : fs::directory_iterator(split_dir)) {
      if (!cls.is_directory() || hidden(cls.path())) continue;
      const std::string cname = cls.path().filename().string();
      Label label;
      if (cname == "NORMAL") {
        label = Label::kNormal;
      } else if (cname == "PNEUMONIA") {
        label = Label::kPneumonia;
      } else {
        throw DatasetError("unrecognized class directory '" + cname + "' in split '" + split +
                           "' (expected NORMAL or PNEUMONIA)");
      }
      for (const auto& f : fs::directory_iterator(cls.path())) {
        if (!f.is_regular_file() || hidden(f.path()) || !is_image_file(f.path())) continue;
        const fs::path canonical = fs::weakly_canonical(f.path());
        if (!seen.insert(canonical).second) {
          throw DatasetError("file " + f.path().string() + " appears in more than one split");
        }
        samples.push_back({f.path(), label});
      }
    }
    if (samples.empty()) throw DatasetError("split '" + split + "' contains zero images");
    std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.path < b.path; });
    manifest.splits.emplace(split, std::move(samples));
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessConfig {
  std::size_t target_size = 224;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
  double flip_prob = 0.5;
  double rotation_deg = 15.0;
  std::array<double, 2> zoom_range{0.9, 1.1};
  double brightness_delta = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (target_size == 0) throw std::invalid_argument("preprocess: target_size must be positive");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw std::invalid_argument("preprocess: flip_prob must be in [0,1]");
    if (!(zoom_range[0] > 0.0 && zoom_range[0] <= zoom_range[1])) {
      throw std::invalid_argument("preprocess: zoom_range must satisfy 0 < low <= high");
    }
    if (!(rotation_deg >= 0.0)) throw std::invalid_argument("preprocess: rotation_deg must be >= 0");
    if (!(brightness_delta >= 0.0 && brightness_delta < 1.0)) {
      throw std::invalid_argument("preprocess: brightness_delta must be in [0,1)");
    }
    for (float s : std)
      if (!(s > 0.0f)) throw std::invalid_argument("preprocess: std entries must be positive");
  }

  /// Augmentation switched off entirely.
  PreprocessConfig without_augmentation() const {
    PreprocessConfig c = *this;
    c.flip_prob = 0.0;
    c.rotation_deg = 0.0;
    c.zoom_range = {1.0, 1.0};
    c.brightness_delta = 0.0;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"target_size", c.target_size},   {"mean", c.mean},           {"std", c.std},
       {"flip_prob", c.flip_prob},       {"rotation_deg", c.rotation_deg}, {"zoom_range", c.zoom_range},
       {"brightness_delta", c.brightness_delta}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  c.target_size = j.value("target_size", c.target_size);
  c.mean = j.value("mean", c.mean);
  c.std = j.value("std", c.std);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.rotation_deg = j.value("rotation_deg", c.rotation_deg);
  c.zoom_range = j.value("zoom_range", c.zoom_range);
  c.brightness_delta = j.value("brightness_delta", c.brightness_delta);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

/// v/255 then (v - mean_c) / std_c, returned channel-first as 3×H×W.
template <typename P>
Tensor<float> normalize(const Image<P>& img, const PreprocessConfig& cfg) {
  if (img.channels != 3) {
    throw std::invalid_argument("normalize: expected 3 channels, got " + std::to_string(img.channels));
  }
  const std::size_t H = img.height, W = img.width;
  Tensor<float> out({3, H, W});
  for (std::size_t c = 0; c < 3; ++c) {
    const double m = cfg.mean[c], s = cfg.std[c];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double v = static_cast<double>(img.at(x, y, c)) / 255.0;
        out[(c * H + y) * W + x] = static_cast<float>((v - m) / s);
      }
  }
  return out;
}

template <typename P>
Image<P> flip_horizontal(const Image<P>& img) {
  Image<P> out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

/// Rotation by `degrees` about the image centre, edge-clamped fill.
inline ImageF rotate(const ImageF& img, double degrees) {
  if (degrees == 0.0) return img;
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  ImageF out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      // inverse map: rotate the destination offset by -angle
      const double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = sample_bilinear(img, sx, sy, c);
    }
  return out;
}

/// Central zoom by `factor` (>1 magnifies and crops, <1 shrinks with
/// edge-clamped border) back to the original extents.
inline ImageF zoom(const ImageF& img, double factor) {
  if (factor == 1.0) return img;
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  ImageF out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double sx = cx + (static_cast<double>(x) - cx) / factor;
      const double sy = cy + (static_cast<double>(y) - cy) / factor;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = sample_bilinear(img, sx, sy, c);
    }
  return out;
}

/// Parameters drawn for one augmentation; exposed for tests and logging.
struct AugmentDraw {
  bool flip = false;
  double rotation_deg = 0.0;
  double zoom = 1.0;
  double brightness = 1.0;
};

/// Draws the four parameters in fixed order (flip, rotation, zoom,
/// brightness); all four are always drawn so the stream layout never depends
/// on the configuration.
inline AugmentDraw draw_augmentation(const PreprocessConfig& cfg, Rng& rng) {
  AugmentDraw d;
  const double u_flip = uniform01(rng);
  const double u_rot = uniform01(rng);
  const double u_zoom = uniform01(rng);
  const double u_bright = uniform01(rng);
  d.flip = u_flip < cfg.flip_prob;
  if (cfg.rotation_deg > 0) d.rotation_deg = -cfg.rotation_deg + 2 * cfg.rotation_deg * u_rot;
  if (cfg.zoom_range[0] != cfg.zoom_range[1]) d.zoom = cfg.zoom_range[0] + (cfg.zoom_range[1] - cfg.zoom_range[0]) * u_zoom;
  else d.zoom = cfg.zoom_range[0];
  if (cfg.brightness_delta > 0) d.brightness = 1 - cfg.brightness_delta + 2 * cfg.brightness_delta * u_bright;
  return d;
}

inline ImageF apply_augmentation(const ImageF& img, const AugmentDraw& d) {
  ImageF out = d.flip ? flip_horizontal(img) : img;
  out = rotate(out, d.rotation_deg);
  out = zoom(out, d.zoom);
  if (d.brightness != 1.0) {
    for (auto& v : out.pixels) v = static_cast<float>(std::clamp(static_cast<double>(v) * d.brightness, 0.0, 255.0));
  }
  return out;
}

/// flip → rotate → zoom → brightness with parameters drawn from `rng`.
template <typename P>
ImageF augment(const Image<P>& img, const PreprocessConfig& cfg, Rng& rng) {
  return apply_augmentation(convert<float>(img), draw_augmentation(cfg, rng));
}

/// decode → RGB → resize to target_size², as floats in [0,255].
inline ImageF load_resized(const std::filesystem::path& path, std::size_t target_size) {
  return resize_bilinear(to_rgb(read_image(path)), target_size, target_size);
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor<float> images;  // N×3×H×W
  Tensor<float> labels;  // N
  std::vector<std::size_t> indices;  // positions in the sample list
};

/// Lazily materialized batches over one split. Sample order for an epoch is a
/// seeded permutation; the augmentation stream of sample i in epoch e is
/// seeded by (seed, i, e), so batches can be built in any order or in parallel.
class BatchLoader {
 public:
  BatchLoader(std::vector<Sample> samples, PreprocessConfig cfg, std::size_t batch_size, bool shuffle, bool augment,
              std::size_t threads = 1)
      : samples_(std::move(samples)),
        cfg_(std::move(cfg)),
        batch_size_(batch_size),
        shuffle_(shuffle),
        augment_(augment),
        threads_(threads) {
    if (batch_size_ == 0) throw std::invalid_argument("batch_size must be >= 1");
    cfg_.validate();
  }

  std::size_t size() const noexcept { return samples_.size(); }
  std::size_t num_batches() const noexcept { return (samples_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<Sample>& samples() const noexcept { return samples_; }
  const PreprocessConfig& config() const noexcept { return cfg_; }

  std::vector<std::size_t> order(std::size_t epoch) const {
    std::vector<std::size_t> idx(samples_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (shuffle_) {
      Rng rng(derive_seed(cfg_.seed, {0x5348554646ULL, epoch}));
      for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    }
    return idx;
  }

  Batch load(std::size_t epoch, std::size_t batch) const { return load(order(epoch), epoch, batch); }

  Batch load(const std::vector<std::size_t>& order, std::size_t epoch, std::size_t batch) const {
    if (batch >= num_batches()) throw std::out_of_range("batch index out of range");
    const std::size_t begin = batch * batch_size_;
    const std::size_t n = std::min(batch_size_, samples_.size() - begin);
    const std::size_t S = cfg_.target_size;
    Batch out{Tensor<float>({n, 3, S, S}), Tensor<float>({n}), {}};
    out.indices.assign(order.begin() + begin, order.begin() + begin + n);
    parallel_for(n, threads_, [&](std::size_t j) {
      const std::size_t idx = out.indices[j];
      const Sample& s = samples_[idx];
      ImageF img;
      try {
        img = load_resized(s.path, S);
      } catch (const std::exception& e) {
        throw DatasetError(std::string("cannot load ") + s.path.string() + ": " + e.what());
      }
      if (augment_) {
        Rng rng(derive_seed(cfg_.seed, {0x4155474dULL, idx, epoch}));
        img = augment(img, cfg_, rng);
      }
      const Tensor<float> t = normalize(img, cfg_);
      std::copy(t.data().begin(), t.data().end(), out.images.data().begin() + j * t.size());
      out.labels[j] = static_cast<float>(static_cast<int>(s.label));
    });
    return out;
  }

  std::vector<Batch> epoch_batches(std::size_t epoch) const {
    const auto ord = order(epoch);
    std::vector<Batch> out;
    for (std::size_t b = 0; b < num_batches(); ++b) out.push_back(load(ord, epoch, b));
    return out;
  }

 private:
  std::vector<Sample> samples_;
  PreprocessConfig cfg_;
  std::size_t batch_size_;
  bool shuffle_;
  bool augment_;
  std::size_t threads_;
};

/// Eagerly builds every batch of one pass over `samples`.
inline std::vector<Batch> make_batches(const std::vector<Sample>& samples, const PreprocessConfig& cfg,
                                       std::size_t batch_size, bool shuffle, bool augment = false,
                                       std::size_t epoch = 0) {
  return BatchLoader(samples, cfg, batch_size, shuffle, augment).epoch_batches(epoch);
}

}  // namespace pneumolens
