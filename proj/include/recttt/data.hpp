#pragma once

#include <array>
#include <bit>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "recttt/rng.hpp"
#include "recttt/tensor.hpp"

namespace recttt {

// Procedural 32x32 RGB shape dataset plus a graded corruption suite. The
// four classes are closed under horizontal flip, so flipping never changes
// a label. Everything is a pure function of the seed.

constexpr int kImageHw = 32;
constexpr int kNumClasses = 4;

struct ShapeSample {
  Tensor image;  // [3, 32, 32], values in [0, 1]
  int label = 0; // 0 disk, 1 square, 2 triangle, 3 ring
};

enum class Split { Train, Test };

namespace detail {

inline float sd_disk(float px, float py, float r) { return std::sqrt(px * px + py * py) - r; }

inline float sd_square(float px, float py, float a) {
  return std::max(std::abs(px), std::abs(py)) - a;
}

inline float sd_triangle(float px, float py, float r) {
  // equilateral triangle, circumradius r
  const float k = std::sqrt(3.0f);
  px = std::abs(px) - r;
  py = py + r / k;
  if (px + k * py > 0.0f) {
    const float nx = (px - k * py) * 0.5f;
    const float ny = (-k * px - py) * 0.5f;
    px = nx;
    py = ny;
  }
  px -= std::clamp(px, -2.0f * r, 0.0f);
  return -std::sqrt(px * px + py * py) * (py > 0.0f ? 1.0f : -1.0f);
}

inline float sd_ring(float px, float py, float r, float w) {
  return std::abs(std::sqrt(px * px + py * py) - r) - w;
}

}  // namespace detail

inline ShapeSample render_shape(int label, Rng& rng) {
  ShapeSample s;
  s.label = label;
  s.image = Tensor({3, kImageHw, kImageHw});

  const float cx = rng.uniform(12.0f, 20.0f);
  const float cy = rng.uniform(12.0f, 20.0f);
  const float r = rng.uniform(6.0f, 11.0f);
  const float theta = rng.uniform(0.0f, 6.2831853f);
  const float ring_w = rng.uniform(1.5f, 3.0f);
  float fg[3], bg_top[3], bg_bot[3];
  for (int c = 0; c < 3; ++c) {
    fg[c] = rng.uniform(0.55f, 1.0f);
    bg_top[c] = rng.uniform(0.0f, 0.45f);
    bg_bot[c] = rng.uniform(0.0f, 0.45f);
  }
  const float ct = std::cos(theta), st = std::sin(theta);

  for (int y = 0; y < kImageHw; ++y) {
    for (int x = 0; x < kImageHw; ++x) {
      const float dx = (x + 0.5f) - cx;
      const float dy = (y + 0.5f) - cy;
      const float px = ct * dx + st * dy;
      const float py = -st * dx + ct * dy;
      float sd = 0.0f;
      switch (label) {
        case 0: sd = detail::sd_disk(px, py, r); break;
        case 1: sd = detail::sd_square(px, py, 0.8f * r); break;
        case 2: sd = detail::sd_triangle(px, py, 0.95f * r); break;
        case 3: sd = detail::sd_ring(px, py, 0.75f * r, ring_w); break;
        default: throw ConfigError("render_shape: unknown label " + std::to_string(label));
      }
      const float cover = std::clamp(0.5f - sd / 1.2f, 0.0f, 1.0f);
      const float t = static_cast<float>(y) / (kImageHw - 1);
      for (int c = 0; c < 3; ++c) {
        const float bg = bg_top[c] + (bg_bot[c] - bg_top[c]) * t;
        s.image.data[(std::size_t(c) * kImageHw + y) * kImageHw + x] = bg + (fg[c] - bg) * cover;
      }
    }
  }
  return s;
}

// Deterministic, class-balanced within +-1. The split selects a documented
// substream of the seed, so train and test never share draws.
inline std::vector<ShapeSample> gen_dataset(const Rng& rng, int n, Split split) {
  if (n < 1) throw ConfigError("gen_dataset: n must be >= 1");
  Rng local = rng.split(split == Split::Train ? 1 : 2);
  std::vector<ShapeSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(render_shape(i % kNumClasses, local));
  return out;
}

// ---------------------------------------------------------------------------
// Corruptions (applied after rendering, before any augmentation).
// ---------------------------------------------------------------------------

enum class CorruptionKind {
  GaussianNoise,
  ImpulseNoise,
  GaussianBlur,
  Brightness,
  Contrast,
  Pixelate,
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 5;  // 1..5
};

inline const std::vector<CorruptionKind>& all_corruptions() {
  static const std::vector<CorruptionKind> kinds = {
      CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise, CorruptionKind::GaussianBlur,
      CorruptionKind::Brightness,    CorruptionKind::Contrast,     CorruptionKind::Pixelate};
  return kinds;
}

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::ImpulseNoise: return "impulse_noise";
    case CorruptionKind::GaussianBlur: return "gaussian_blur";
    case CorruptionKind::Brightness: return "brightness";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::Pixelate: return "pixelate";
  }
  throw ConfigError("corruption_name: bad kind");
}

inline CorruptionKind corruption_from_name(const std::string& name) {
  for (CorruptionKind k : all_corruptions())
    if (name == corruption_name(k)) return k;
  throw ConfigError("unknown corruption kind '" + name + "'");
}

// Severity parameter tables, index 0 = severity 1.
constexpr std::array<float, 5> kGaussianNoiseSigma = {0.04f, 0.08f, 0.12f, 0.18f, 0.26f};
constexpr std::array<float, 5> kImpulseFraction = {0.01f, 0.03f, 0.06f, 0.10f, 0.17f};
constexpr std::array<float, 5> kBlurSigma = {0.4f, 0.6f, 0.8f, 1.1f, 1.5f};
constexpr std::array<float, 5> kBrightnessShift = {0.05f, 0.10f, 0.15f, 0.22f, 0.30f};
constexpr std::array<float, 5> kContrastFactor = {0.75f, 0.6f, 0.45f, 0.3f, 0.2f};
constexpr std::array<int, 5> kPixelateBlock = {2, 2, 4, 4, 8};

inline Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, Rng& rng) {
  if (x.rank() != 3) throw ShapeError("corrupt: expects a CHW image");
  if (spec.severity < 1 || spec.severity > 5)
    throw ConfigError("corrupt: severity must be 1..5, got " + std::to_string(spec.severity));
  const int si = spec.severity - 1;
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Tensor out = x;

  switch (spec.kind) {
    case CorruptionKind::GaussianNoise: {
      const float sigma = kGaussianNoiseSigma[si];
      for (float& v : out.data) v += rng.normal(0.0f, sigma);
      break;
    }
    case CorruptionKind::ImpulseNoise: {
      const float frac = kImpulseFraction[si];
      for (float& v : out.data)
        if (rng.uniform() < frac) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
      break;
    }
    case CorruptionKind::GaussianBlur: {
      const float sigma = kBlurSigma[si];
      const int radius = std::max(1, static_cast<int>(std::ceil(2.5f * sigma)));
      std::vector<float> kernel(2 * radius + 1);
      double ksum = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5f * (i * i) / (sigma * sigma));
        ksum += kernel[i + radius];
      }
      for (float& kv : kernel) kv = static_cast<float>(kv / ksum);
      Tensor tmp(x.shape);
      for (int ch = 0; ch < c; ++ch) {  // horizontal then vertical, clamped edges
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
              const int sx = std::clamp(xx + i, 0, w - 1);
              acc += kernel[i + radius] * x.data[(std::size_t(ch) * h + y) * w + sx];
            }
            tmp.data[(std::size_t(ch) * h + y) * w + xx] = static_cast<float>(acc);
          }
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
              const int sy = std::clamp(y + i, 0, h - 1);
              acc += kernel[i + radius] * tmp.data[(std::size_t(ch) * h + sy) * w + xx];
            }
            out.data[(std::size_t(ch) * h + y) * w + xx] = static_cast<float>(acc);
          }
      }
      break;
    }
    case CorruptionKind::Brightness: {
      const float shift = kBrightnessShift[si];
      for (float& v : out.data) v += shift;
      break;
    }
    case CorruptionKind::Contrast: {
      const float f = kContrastFactor[si];
      for (float& v : out.data) v = (v - 0.5f) * f + 0.5f;
      break;
    }
    case CorruptionKind::Pixelate: {
      const int b = kPixelateBlock[si];
      for (int ch = 0; ch < c; ++ch)
        for (int by = 0; by < h; by += b)
          for (int bx = 0; bx < w; bx += b) {
            double acc = 0.0;
            for (int y = 0; y < b; ++y)
              for (int xx = 0; xx < b; ++xx)
                acc += x.data[(std::size_t(ch) * h + by + y) * w + bx + xx];
            const float avg = static_cast<float>(acc / (b * b));
            for (int y = 0; y < b; ++y)
              for (int xx = 0; xx < b; ++xx)
                out.data[(std::size_t(ch) * h + by + y) * w + bx + xx] = avg;
          }
      break;
    }
    default:
      throw ConfigError("corrupt: unknown kind");
  }
  for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Batching.
// ---------------------------------------------------------------------------

struct Batch {
  Tensor x;                  // [B, 3, 32, 32]
  std::vector<int> labels;   // flip-invariant
  std::vector<int> indices;  // positions in the source dataset
};

inline std::vector<Batch> make_batches(const std::vector<ShapeSample>& data, int batch_size,
                                       Rng& rng, bool shuffle) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<int> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (shuffle) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(0, i)]);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const int bs = static_cast<int>(std::min<std::size_t>(batch_size, order.size() - start));
    Batch b;
    b.x = Tensor({bs, 3, kImageHw, kImageHw});
    for (int i = 0; i < bs; ++i) {
      const ShapeSample& s = data[order[start + i]];
      std::copy(s.image.data.begin(), s.image.data.end(),
                b.x.data.begin() + std::size_t(i) * s.image.numel());
      b.labels.push_back(s.label);
      b.indices.push_back(order[start + i]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raw export/import: little-endian float32 image files plus a JSON index,
// used to pin fixtures for regression tests.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "dataset export assumes a little-endian host");

inline void export_dataset(const std::string& dir, const std::vector<ShapeSample>& data,
                           const std::string& split) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.f32", i);
    std::ofstream f(fs::path(dir) / name, std::ios::binary);
    if (!f) throw IoError("export_dataset: cannot write " + std::string(name));
    f.write(reinterpret_cast<const char*>(data[i].image.data.data()),
            static_cast<std::streamsize>(data[i].image.data.size() * sizeof(float)));
    index.push_back({{"id", i}, {"label", data[i].label}, {"split", split}});
  }
  std::ofstream idx(fs::path(dir) / "index.json");
  if (!idx) throw IoError("export_dataset: cannot write index.json");
  idx << index.dump(2) << "\n";
}

inline std::vector<ShapeSample> import_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream idx(fs::path(dir) / "index.json");
  if (!idx) throw IoError("import_dataset: missing index.json in " + dir);
  nlohmann::json index = nlohmann::json::parse(idx, nullptr, /*allow_exceptions=*/false);
  if (index.is_discarded() || !index.is_array())
    throw IoError("import_dataset: malformed index.json");
  std::vector<ShapeSample> out;
  for (const auto& entry : index) {
    ShapeSample s;
    s.label = entry.at("label").get<int>();
    s.image = Tensor({3, kImageHw, kImageHw});
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.f32", entry.at("id").get<std::size_t>());
    std::ifstream f(fs::path(dir) / name, std::ios::binary);
    if (!f) throw IoError("import_dataset: missing " + std::string(name));
    f.read(reinterpret_cast<char*>(s.image.data.data()),
           static_cast<std::streamsize>(s.image.data.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(s.image.data.size() * sizeof(float)))
      throw IoError("import_dataset: truncated " + std::string(name));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace recttt
