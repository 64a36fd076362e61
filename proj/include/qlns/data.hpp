#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qlns/rng.hpp"
#include "qlns/tensor.hpp"

namespace qlns {

struct Dataset {
  Tensor x;                 // (N, ...) features
  Tensor y;                 // (N, K): one-hot labels or regression targets
  std::vector<int> labels;  // class ids for classification, empty otherwise

  std::size_t size() const { return x.rank() == 0 ? 0 : x.dim(0); }
  bool classification() const { return !labels.empty(); }
};

// Two-class images: one Gaussian bump per image at a random center, narrow
// for class 0 and wide for class 1, plus a per-image exposure offset, pixel
// noise and an optional fraction of flipped labels. Blob size (not position)
// carries the class, so the task suits pooling classifiers; the size ranges
// overlap and the exposure offset gives every image a global signature that
// capacity-rich models can memorize.
inline Dataset make_blobs(std::size_t n, std::size_t image_size, double pixel_noise,
                          std::uint64_t seed, double label_noise = 0.0) {
  if (n == 0 || image_size < 4) throw std::invalid_argument("blobs: bad size");
  Rng rng(derive_seed(seed, 0x626c6f62ULL));
  const double s = static_cast<double>(image_size);
  Dataset d;
  d.x = Tensor({n, 1, image_size, image_size});
  d.y = Tensor({n, 2});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int true_class = static_cast<int>(i % 2);
    const double sigma =
        (true_class == 0 ? rng.uniform(0.09, 0.14) : rng.uniform(0.12, 0.17)) * s;
    const double cx = rng.uniform(0.35, 0.65) * s;
    const double cy = rng.uniform(0.35, 0.65) * s;
    const double exposure = rng.uniform(0.0, 0.3);
    for (std::size_t r = 0; r < image_size; ++r) {
      for (std::size_t c = 0; c < image_size; ++c) {
        const double dx = static_cast<double>(c) - cx;
        const double dy = static_cast<double>(r) - cy;
        double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        v += exposure + pixel_noise * rng.normal();
        d.x[(i * image_size + r) * image_size + c] = std::clamp(v, 0.0, 1.0);
      }
    }
    int label = true_class;
    if (label_noise > 0.0 && rng.uniform() < label_noise) label = 1 - label;
    d.labels[i] = label;
    d.y[i * 2 + static_cast<std::size_t>(label)] = 1.0;
  }
  return d;
}

// Classic interleaved half-circles in the plane.
inline Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("moons: empty dataset");
  Rng rng(derive_seed(seed, 0x6d6f6f6eULL));
  Dataset d;
  d.x = Tensor({n, 2});
  d.y = Tensor({n, 2});
  d.labels.resize(n);
  constexpr double kPi = 3.14159265358979323846;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = rng.uniform(0.0, kPi);
    double px, py;
    if (label == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    d.x[i * 2 + 0] = px + noise * rng.normal();
    d.x[i * 2 + 1] = py + noise * rng.normal();
    d.labels[i] = label;
    d.y[i * 2 + static_cast<std::size_t>(label)] = 1.0;
  }
  return d;
}

// y = X W + noise, standard normal features.
inline Dataset make_linear_regression(std::size_t n, std::size_t in_dim, std::size_t out_dim,
                                      double noise, std::uint64_t seed) {
  if (n == 0 || in_dim == 0 || out_dim == 0) throw std::invalid_argument("linreg: bad dims");
  Rng rng(derive_seed(seed, 0x6c696e72ULL));
  std::vector<double> w(in_dim * out_dim);
  for (auto& v : w) v = rng.normal();
  Dataset d;
  d.x = Tensor({n, in_dim});
  d.y = Tensor({n, out_dim});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < in_dim; ++j) d.x[i * in_dim + j] = rng.normal();
    for (std::size_t k = 0; k < out_dim; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < in_dim; ++j) acc += d.x[i * in_dim + j] * w[j * out_dim + k];
      d.y[i * out_dim + k] = acc + noise * rng.normal();
    }
  }
  return d;
}

inline Dataset take_rows(const Dataset& d, const std::vector<std::size_t>& rows) {
  Dataset out;
  std::vector<std::size_t> xs = d.x.shape();
  std::vector<std::size_t> ys = d.y.shape();
  const std::size_t xrow = d.x.size() / d.size();
  const std::size_t yrow = d.y.size() / d.size();
  xs[0] = rows.size();
  ys[0] = rows.size();
  out.x = Tensor(xs);
  out.y = Tensor(ys);
  if (d.classification()) out.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= d.size()) throw std::out_of_range("dataset: row index out of range");
    std::copy_n(d.x.data().begin() + r * xrow, xrow, out.x.data().begin() + i * xrow);
    std::copy_n(d.y.data().begin() + r * yrow, yrow, out.y.data().begin() + i * yrow);
    if (d.classification()) out.labels[i] = d.labels[r];
  }
  return out;
}

struct Split {
  Dataset train;
  Dataset test;
};

// Seeded shuffle, first round(ratio*n) rows become the training split.
inline Split split_dataset(const Dataset& d, double ratio, std::uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("split: ratio must be in (0,1)");
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x73706c69ULL));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(idx[i - 1], idx[j]);
  }
  const std::size_t k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (k == 0 || k == n) throw std::invalid_argument("split: degenerate split");
  Split s;
  s.train = take_rows(d, {idx.begin(), idx.begin() + static_cast<long>(k)});
  s.test = take_rows(d, {idx.begin() + static_cast<long>(k), idx.end()});
  return s;
}

}  // namespace qlns
