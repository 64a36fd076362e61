#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "qlns/data.hpp"
#include "qlns/eval.hpp"
#include "qlns/model.hpp"
#include "qlns/rng.hpp"
#include "qlns/tensor.hpp"
#include "qlns/train.hpp"

// Deterministic image distortions with five severity levels each. Severity
// ladders are monotone so the distortion-gap experiments can assert ordering;
// every generator is a pure function of (image, spec) and clips its output to
// [0, 1].

namespace qlns {

enum class CorruptionKind {
  kGaussianNoise,
  kShotNoise,
  kImpulseNoise,
  kDefocusBlur,
  kBrightness,
  kContrast,
  kPixelate,
};

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kShotNoise: return "shot_noise";
    case CorruptionKind::kImpulseNoise: return "impulse_noise";
    case CorruptionKind::kDefocusBlur: return "defocus_blur";
    case CorruptionKind::kBrightness: return "brightness";
    case CorruptionKind::kContrast: return "contrast";
    case CorruptionKind::kPixelate: return "pixelate";
  }
  return "?";
}

inline const std::vector<CorruptionKind>& all_corruptions() {
  static const std::vector<CorruptionKind> kinds = {
      CorruptionKind::kGaussianNoise, CorruptionKind::kShotNoise, CorruptionKind::kImpulseNoise,
      CorruptionKind::kDefocusBlur,   CorruptionKind::kBrightness, CorruptionKind::kContrast,
      CorruptionKind::kPixelate};
  return kinds;
}

inline CorruptionKind corruption_from_name(const std::string& name) {
  for (CorruptionKind k : all_corruptions()) {
    if (name == corruption_name(k)) return k;
  }
  throw std::invalid_argument("corruption: unknown kind '" + name + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 1;  // 1..5
  std::uint64_t seed = 0;

  void validate() const {
    if (severity < 1 || severity > 5) {
      throw std::invalid_argument("corruption: severity must be in [1,5]");
    }
  }
};

namespace detail {

inline void clip01(Tensor& t) {
  for (auto& v : t.data()) v = std::clamp(v, 0.0, 1.0);
}

inline void require_chw(const Tensor& image) {
  if (image.rank() != 3) {
    throw std::invalid_argument("corruption: expected channels-first (C,H,W) image, got rank " +
                                std::to_string(image.rank()));
  }
}

inline Tensor gaussian_noise(const Tensor& image, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out = image;
  for (auto& v : out.data()) v += sigma * rng.normal();
  clip01(out);
  return out;
}

inline Tensor shot_noise(const Tensor& image, double photons, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out = image;
  for (auto& v : out.data()) {
    v = static_cast<double>(rng.poisson(std::max(v, 0.0) * photons)) / photons;
  }
  clip01(out);
  return out;
}

inline Tensor impulse_noise(const Tensor& image, double prob, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out = image;
  for (auto& v : out.data()) {
    if (rng.uniform() < prob) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  }
  clip01(out);
  return out;
}

// Normalized disk kernel, replicate padding (constant images stay constant).
inline Tensor defocus_blur(const Tensor& image, int radius) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::pair<int, int>> taps;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) taps.emplace_back(dy, dx);
    }
  }
  Tensor out(image.shape());
  const double inv = 1.0 / static_cast<double>(taps.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        double acc = 0.0;
        for (const auto& [dy, dx] : taps) {
          const long rr = std::clamp<long>(static_cast<long>(r) + dy, 0, static_cast<long>(h) - 1);
          const long cc =
              std::clamp<long>(static_cast<long>(col) + dx, 0, static_cast<long>(w) - 1);
          acc += image[(ch * h + static_cast<std::size_t>(rr)) * w + static_cast<std::size_t>(cc)];
        }
        out[(ch * h + r) * w + col] = acc * inv;
      }
    }
  }
  clip01(out);
  return out;
}

inline Tensor brightness(const Tensor& image, double add) {
  Tensor out = image;
  for (auto& v : out.data()) v += add;
  clip01(out);
  return out;
}

// Scale about the per-channel mean; a constant image is a fixed point.
inline Tensor contrast(const Tensor& image, double scale) {
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  Tensor out = image;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += image[ch * hw + i];
    mean /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      out[ch * hw + i] = (image[ch * hw + i] - mean) * scale + mean;
    }
  }
  clip01(out);
  return out;
}

// Box-average downsample by `factor`, nearest-neighbor upsample back.
// factor 1 is the identity.
inline Tensor pixelate(const Tensor& image, double factor) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t sh = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(h) / factor)));
  const std::size_t sw = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(w) / factor)));
  if (sh == h && sw == w) return image;
  std::vector<double> small(c * sh * sw, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < sh; ++i) {
      const std::size_t r0 = i * h / sh, r1 = std::max(r0 + 1, (i + 1) * h / sh);
      for (std::size_t j = 0; j < sw; ++j) {
        const std::size_t c0 = j * w / sw, c1 = std::max(c0 + 1, (j + 1) * w / sw);
        double acc = 0.0;
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t col = c0; col < c1; ++col) acc += image[(ch * h + r) * w + col];
        }
        small[(ch * sh + i) * sw + j] =
            acc / static_cast<double>((r1 - r0) * (c1 - c0));
      }
    }
  }
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < h; ++r) {
      const std::size_t i = std::min(sh - 1, r * sh / h);
      for (std::size_t col = 0; col < w; ++col) {
        const std::size_t j = std::min(sw - 1, col * sw / w);
        out[(ch * h + r) * w + col] = small[(ch * sh + i) * sw + j];
      }
    }
  }
  clip01(out);
  return out;
}

}  // namespace detail

// Severity ladders, index 0 = severity 1.
inline double corruption_parameter(CorruptionKind kind, int severity) {
  static constexpr double kGauss[5] = {.04, .06, .08, .09, .10};
  static constexpr double kShot[5] = {60, 25, 12, 5, 3};
  static constexpr double kImpulse[5] = {.01, .02, .03, .05, .07};
  static constexpr double kDefocus[5] = {1, 2, 3, 4, 6};
  static constexpr double kBright[5] = {.1, .2, .3, .4, .5};
  static constexpr double kContrast[5] = {.75, .6, .45, .3, .15};
  static constexpr double kPixelate[5] = {1.25, 1.5, 2, 3, 4};
  const int i = severity - 1;
  switch (kind) {
    case CorruptionKind::kGaussianNoise: return kGauss[i];
    case CorruptionKind::kShotNoise: return kShot[i];
    case CorruptionKind::kImpulseNoise: return kImpulse[i];
    case CorruptionKind::kDefocusBlur: return kDefocus[i];
    case CorruptionKind::kBrightness: return kBright[i];
    case CorruptionKind::kContrast: return kContrast[i];
    case CorruptionKind::kPixelate: return kPixelate[i];
  }
  throw std::invalid_argument("corruption: bad kind");
}

inline Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec) {
  spec.validate();
  detail::require_chw(image);
  const double p = corruption_parameter(spec.kind, spec.severity);
  switch (spec.kind) {
    case CorruptionKind::kGaussianNoise: return detail::gaussian_noise(image, p, spec.seed);
    case CorruptionKind::kShotNoise: return detail::shot_noise(image, p, spec.seed);
    case CorruptionKind::kImpulseNoise: return detail::impulse_noise(image, p, spec.seed);
    case CorruptionKind::kDefocusBlur: return detail::defocus_blur(image, static_cast<int>(p));
    case CorruptionKind::kBrightness: return detail::brightness(image, p);
    case CorruptionKind::kContrast: return detail::contrast(image, p);
    case CorruptionKind::kPixelate: return detail::pixelate(image, p);
  }
  throw std::invalid_argument("corruption: bad kind");
}

// Applies one corruption to every image; per-image seeds derive from the
// dataset-level seed and the image index.
inline Dataset corrupt_dataset(const Dataset& d, CorruptionKind kind, int severity,
                               std::uint64_t seed) {
  if (d.x.rank() != 4) {
    throw std::invalid_argument("corruption: dataset images must be (N,C,H,W)");
  }
  CorruptionSpec spec{kind, severity, seed};
  spec.validate();
  Dataset out = d;
  const std::size_t per = d.x.size() / d.size();
  const std::vector<std::size_t> img_shape{d.x.dim(1), d.x.dim(2), d.x.dim(3)};
  for (std::size_t i = 0; i < d.size(); ++i) {
    Tensor img(img_shape);
    std::copy_n(d.x.data().begin() + i * per, per, img.data().begin());
    spec.seed = derive_seed(seed, i);
    const Tensor corrupted = apply_corruption(img, spec);
    std::copy(corrupted.data().begin(), corrupted.data().end(), out.x.data().begin() + i * per);
  }
  return out;
}

// Corrupted-test loss minus clean training loss.
inline double corrupted_gap(const Model& model, const Dataset& train_data,
                            const Dataset& test_data, CorruptionKind kind, int severity,
                            std::uint64_t seed) {
  const Dataset corrupted = corrupt_dataset(test_data, kind, severity, seed);
  const double train_loss = evaluate(model, train_data).loss;
  const double test_loss = evaluate(model, corrupted).loss;
  return test_loss - train_loss;
}

}  // namespace qlns
