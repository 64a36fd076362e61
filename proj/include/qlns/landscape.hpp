#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qlns/eval.hpp"
#include "qlns/model.hpp"
#include "qlns/noise.hpp"
#include "qlns/parallel.hpp"
#include "qlns/rng.hpp"

// 2-D loss-surface slices along filter-normalized random directions: each
// first-axis block of a weight tensor (a convolution filter or a dense row)
// is rescaled so the direction block carries the same norm as the weight
// block. Quantized models re-quantize the displaced weights before every
// evaluation, so the slice shows the loss of the network the quantized model
// actually computes.

namespace qlns {

struct LandscapeGrid {
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<std::vector<double>> losses;  // [alpha index][beta index]
  double center_loss = 0.0;
  std::uint64_t direction_seed = 0;
  bool degenerate_directions = false;  // all-zero weights produce zero directions
};

struct Directions {
  std::vector<double> d1;
  std::vector<double> d2;
  bool degenerate = false;
};

inline Directions sample_directions(const Model& model, std::uint64_t seed) {
  const std::vector<double> w = flat_weights(model.state, WeightSet::kCurrent);
  const auto layout = weight_layout(model.state);
  Directions out;
  out.d1.resize(w.size());
  out.d2.resize(w.size());
  Rng rng1(derive_seed(seed, 1));
  Rng rng2(derive_seed(seed, 2));
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.d1[i] = rng1.normal();
    out.d2[i] = rng2.normal();
  }
  bool any_nonzero = false;
  for (const auto& span : layout) {
    const std::size_t blocks = span.shape[0];
    const std::size_t block_len = span.count / blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t off = span.offset + b * block_len;
      double wn = 0.0;
      for (std::size_t i = 0; i < block_len; ++i) wn += w[off + i] * w[off + i];
      wn = std::sqrt(wn);
      for (std::vector<double>* d : {&out.d1, &out.d2}) {
        double dn = 0.0;
        for (std::size_t i = 0; i < block_len; ++i) dn += (*d)[off + i] * (*d)[off + i];
        dn = std::sqrt(dn);
        const double f = (wn == 0.0 || dn == 0.0) ? 0.0 : wn / dn;
        for (std::size_t i = 0; i < block_len; ++i) (*d)[off + i] *= f;
      }
      if (wn != 0.0) any_nonzero = true;
    }
  }
  out.degenerate = !any_nonzero;
  return out;
}

namespace detail {

// Re-quantizes a displaced latent weight vector through the model's current
// layer specs; identity for fully full-precision models.
inline std::vector<double> dequantize_flat(const ModelState& s, std::vector<double> latent) {
  const auto layout = weight_layout(s);
  for (const auto& span : layout) {
    const auto it = s.quant.find(span.name);
    if (it == s.quant.end()) continue;
    Tensor t(span.shape);
    std::copy_n(latent.begin() + span.offset, span.count, t.data().begin());
    const QuantizedView qv = quantize(t, it->second);
    std::copy(qv.w_hat.data().begin(), qv.w_hat.data().end(), latent.begin() + span.offset);
  }
  return latent;
}

}  // namespace detail

inline LandscapeGrid evaluate_grid(const Model& model, const Dataset& data, const Directions& dirs,
                                   double half_range = 1.0, int steps = 21,
                                   std::uint64_t direction_seed = 0) {
  if (steps < 1 || steps % 2 == 0) {
    throw std::invalid_argument("landscape: steps must be odd so a center cell exists");
  }
  const std::vector<double> base = flat_weights(model.state, WeightSet::kCurrent);
  if (dirs.d1.size() != base.size() || dirs.d2.size() != base.size()) {
    throw std::invalid_argument("landscape: direction size mismatch");
  }
  LandscapeGrid grid;
  grid.direction_seed = direction_seed;
  grid.degenerate_directions = dirs.degenerate;
  grid.alphas.resize(static_cast<std::size_t>(steps));
  grid.betas.resize(static_cast<std::size_t>(steps));
  const auto coord = [&](int k) {
    return steps == 1 ? 0.0
                      : -half_range + 2.0 * half_range * static_cast<double>(k) /
                                          static_cast<double>(steps - 1);
  };
  for (int k = 0; k < steps; ++k) grid.alphas[static_cast<std::size_t>(k)] = coord(k);
  grid.betas = grid.alphas;
  grid.losses.assign(static_cast<std::size_t>(steps),
                     std::vector<double>(static_cast<std::size_t>(steps), 0.0));

  const int cells = steps * steps;
  detail::sharded_draws(cells, [&]() { return Evaluator(model, data); }, [&](Evaluator& ev, int cell) {
    const std::size_t i = static_cast<std::size_t>(cell) / static_cast<std::size_t>(steps);
    const std::size_t j = static_cast<std::size_t>(cell) % static_cast<std::size_t>(steps);
    std::vector<double> shifted(base.size());
    const double a = grid.alphas[i], b = grid.betas[j];
    for (std::size_t k = 0; k < base.size(); ++k) {
      shifted[k] = base[k] + a * dirs.d1[k] + b * dirs.d2[k];
    }
    grid.losses[i][j] = ev.loss(detail::dequantize_flat(model.state, std::move(shifted)));
  });

  const std::size_t c = static_cast<std::size_t>(steps / 2);
  grid.center_loss = grid.losses[c][c];
  return grid;
}

inline LandscapeGrid evaluate_grid(const Model& model, const Dataset& data, std::uint64_t seed,
                                   double half_range = 1.0, int steps = 21) {
  return evaluate_grid(model, data, sample_directions(model, seed), half_range, steps, seed);
}

}  // namespace qlns
