#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <thread>
#include <vector>

#include "qlns/eval.hpp"
#include "qlns/model.hpp"
#include "qlns/parallel.hpp"
#include "qlns/rng.hpp"

// Monte-Carlo machinery over weight-space noise: perturbed-loss estimation,
// the first-order regularizer E||delta^T grad y||^2 for the mean-square-error
// setting, the cross-term check, and the perturbation-dominance rate. All
// estimators share a per-draw seed scheme, so results do not depend on worker
// count or scheduling, and the identity check evaluates every quantity on
// common random numbers.

namespace qlns {

enum class NoiseKind { kUniformBin, kGaussian, kAdversarial };

struct NoiseBudget {
  NoiseKind kind = NoiseKind::kUniformBin;
  double scale = 0.0;  // uniform: half-width delta/2; gaussian: sigma; adversarial: alpha
  int draws = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(scale > 0.0)) throw std::invalid_argument("noise: scale must be positive");
    if (draws < 1) throw std::invalid_argument("noise: draws must be >= 1");
  }
};

struct McStat {
  double mean = 0.0;
  double std_err = 0.0;
  int flagged = 0;  // draws that produced a non-finite loss (counted as +inf)
};

namespace detail {

inline void fill_noise(std::vector<double>& out, NoiseKind kind, double scale, std::uint64_t seed) {
  Rng rng(seed);
  switch (kind) {
    case NoiseKind::kUniformBin:
      for (auto& v : out) v = rng.uniform(-scale, scale);
      break;
    case NoiseKind::kGaussian:
      for (auto& v : out) v = scale * rng.normal();
      break;
    case NoiseKind::kAdversarial:
      throw std::invalid_argument("noise: adversarial draws need a gradient path");
  }
}

inline McStat summarize(const std::vector<double>& losses) {
  McStat s;
  const double n = static_cast<double>(losses.size());
  for (double v : losses) {
    if (!std::isfinite(v)) ++s.flagged;
  }
  if (s.flagged > 0) {
    s.mean = std::numeric_limits<double>::infinity();
    s.std_err = std::numeric_limits<double>::infinity();
    return s;
  }
  for (double v : losses) s.mean += v;
  s.mean /= n;
  if (losses.size() > 1) {
    double ss = 0.0;
    for (double v : losses) ss += (v - s.mean) * (v - s.mean);
    s.std_err = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return s;
}

// Contiguous-range sharding; each worker owns an evaluator clone and writes
// results by draw index.
template <typename MakeCtx, typename Body>
void sharded_draws(int draws, MakeCtx&& make_ctx, Body&& body) {
  const int workers = std::min(worker_count(), draws);
  if (workers <= 1) {
    auto ctx = make_ctx();
    for (int i = 0; i < draws; ++i) body(ctx, i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t]() {
      try {
        auto ctx = make_ctx();
        const int lo = draws * t / workers;
        const int hi = draws * (t + 1) / workers;
        for (int i = lo; i < hi; ++i) body(ctx, i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

// Noise applies to the weights the network actually computes with (the
// dequantized view for quantized models); biases are untouched.
inline McStat perturb_eval(const Model& model, const NoiseBudget& budget,
                           const std::function<double(const std::vector<double>&)>& loss_fn) {
  budget.validate();
  const std::vector<double> base = effective_weights(model);
  std::vector<double> losses(static_cast<std::size_t>(budget.draws));
  std::vector<double> buf = base;
  std::vector<double> noise(base.size());
  for (int i = 0; i < budget.draws; ++i) {
    detail::fill_noise(noise, budget.kind, budget.scale, derive_seed(budget.seed, static_cast<std::uint64_t>(i)));
    for (std::size_t k = 0; k < base.size(); ++k) buf[k] = base[k] + noise[k];
    double l;
    try {
      l = loss_fn(buf);
    } catch (const std::runtime_error&) {
      l = std::numeric_limits<double>::infinity();
    }
    losses[static_cast<std::size_t>(i)] = l;
  }
  return detail::summarize(losses);
}

inline McStat perturb_eval(const Model& model, const Dataset& data, const NoiseBudget& budget) {
  budget.validate();
  const std::vector<double> base = effective_weights(model);
  std::vector<double> losses(static_cast<std::size_t>(budget.draws));
  detail::sharded_draws(
      budget.draws, [&]() { return Evaluator(model, data); },
      [&](Evaluator& ev, int i) {
        std::vector<double> noise(base.size());
        detail::fill_noise(noise, budget.kind, budget.scale,
                           derive_seed(budget.seed, static_cast<std::uint64_t>(i)));
        for (std::size_t k = 0; k < base.size(); ++k) noise[k] += base[k];
        double l;
        try {
          l = ev.loss(noise);
        } catch (const std::runtime_error&) {
          l = std::numeric_limits<double>::infinity();
        }
        losses[static_cast<std::size_t>(i)] = l;
      });
  return detail::summarize(losses);
}

namespace detail {

// Per-example, per-output-dim gradients of the network output w.r.t. the
// flattened weight vector, evaluated at the effective weights.
inline std::vector<std::vector<double>> per_example_output_grads(const Model& model,
                                                                 const Dataset& data) {
  const std::vector<double> weights = effective_weights(model);
  const auto layout = weight_layout(model.state);
  const std::size_t wdim = weights.size();
  NetGraph net = model.make_graph(1);
  net.g.set_output(net.logits);  // differentiate the prediction, not the loss
  const std::size_t out_dim = net.g.shape_of(net.logits)[1];

  std::vector<Tensor> weight_tensors;
  for (const auto& span : layout) {
    Tensor t(span.shape);
    std::copy_n(weights.begin() + span.offset, span.count, t.data().begin());
    weight_tensors.push_back(std::move(t));
  }

  std::vector<std::vector<double>> grads;
  grads.reserve(data.size() * out_dim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Dataset row = take_rows(data, {i});
    std::unordered_map<std::string, const Tensor*> bound{{"x", &row.x}, {"y", &row.y}};
    for (std::size_t si = 0; si < layout.size(); ++si) bound[layout[si].name] = &weight_tensors[si];
    for (std::size_t pi = 0; pi < model.state.count(); ++pi) {
      const auto& e = model.state.entry(pi);
      if (!e.is_weight) bound[e.name] = &e.tensor;
    }
    net.g.forward(bound);
    for (std::size_t d = 0; d < out_dim; ++d) {
      Tensor seed({1, out_dim});
      seed[d] = 1.0;
      const auto g = net.g.backward(seed);
      std::vector<double> flat(wdim, 0.0);
      for (const auto& span : layout) {
        const auto it = g.find(span.name);
        if (it == g.end()) continue;
        std::copy_n(it->second.data().begin(), span.count, flat.begin() + span.offset);
      }
      grads.push_back(std::move(flat));
    }
  }
  return grads;
}

inline void require_mse(const Model& model) {
  if (model.arch.task != TaskKind::kRegression) {
    throw std::invalid_argument("noise: identity machinery requires the mean-square-error setting");
  }
}

}  // namespace detail

// Monte-Carlo estimate of E||delta^T grad_w y||^2 over data and uniform
// weight noise of the given half-width.
inline McStat regularizer_estimate(const Model& model, const Dataset& data, double half_width,
                                   int draws, std::uint64_t seed = 0) {
  detail::require_mse(model);
  NoiseBudget budget{NoiseKind::kUniformBin, half_width, draws, seed};
  budget.validate();
  const auto grads = detail::per_example_output_grads(model, data);
  const std::size_t wdim = grads.empty() ? 0 : grads[0].size();
  const double inv_n = 1.0 / static_cast<double>(data.size());
  std::vector<double> per_draw(static_cast<std::size_t>(draws));
  detail::sharded_draws(
      draws, []() { return 0; },
      [&](int&, int k) {
        std::vector<double> delta(wdim);
        detail::fill_noise(delta, NoiseKind::kUniformBin, half_width,
                           derive_seed(seed, static_cast<std::uint64_t>(k)));
        double acc = 0.0;
        for (const auto& g : grads) {
          const double t = dot(delta, g);
          acc += t * t;
        }
        per_draw[static_cast<std::size_t>(k)] = acc * inv_n;
      });
  return detail::summarize(per_draw);
}

struct IdentityCheck {
  double clean_loss = 0.0;
  double perturbed_loss = 0.0;
  double perturbed_se = 0.0;
  double regularizer = 0.0;
  double regularizer_se = 0.0;
  double cross_term = 0.0;
  double cross_se = 0.0;
  double delta = 0.0;  // full bin width; noise is U[-delta/2, delta/2]
  int draws = 0;
  std::uint64_t seed = 0;
  double delta_over_weight_linf = 0.0;
  // worst per-draw residual of perturbed - (clean + reg + cross); exact up to
  // rounding when the model is linear in its weights
  double max_taylor_residual = 0.0;
};

// Evaluates the clean loss, the perturbed loss, the first-order regularizer
// and the cross term on common random numbers.
inline IdentityCheck identity_check(const Model& model, const Dataset& data, double delta,
                                    int draws, std::uint64_t seed = 0) {
  detail::require_mse(model);
  if (delta < 0.0) throw std::invalid_argument("noise: delta must be >= 0");
  if (draws < 1) throw std::invalid_argument("noise: draws must be >= 1");
  const double half = delta / 2.0;

  const std::vector<double> base = effective_weights(model);
  const auto grads = detail::per_example_output_grads(model, data);
  const std::size_t n = data.size();

  Evaluator clean_eval(model, data);
  const double clean = clean_eval.loss(base);
  const Tensor predictions = clean_eval.logits(base);
  const std::size_t out_dim = predictions.dim(1);

  // per-example residuals y_hat - y at the unperturbed weights
  std::vector<double> residual(n * out_dim);
  for (std::size_t i = 0; i < n * out_dim; ++i) residual[i] = predictions[i] - data.y[i];

  std::vector<double> perturbed(static_cast<std::size_t>(draws));
  std::vector<double> reg(static_cast<std::size_t>(draws));
  std::vector<double> cross(static_cast<std::size_t>(draws));
  detail::sharded_draws(
      draws, [&]() { return Evaluator(model, data); },
      [&](Evaluator& ev, int k) {
        std::vector<double> delta_vec(base.size());
        detail::fill_noise(delta_vec, NoiseKind::kUniformBin, half,
                           derive_seed(seed, static_cast<std::uint64_t>(k)));
        std::vector<double> shifted(base.size());
        for (std::size_t i = 0; i < base.size(); ++i) shifted[i] = base[i] + delta_vec[i];
        perturbed[static_cast<std::size_t>(k)] = ev.loss(shifted);
        double r = 0.0, c = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t d = 0; d < out_dim; ++d) {
            const double t = dot(delta_vec, grads[i * out_dim + d]);
            r += t * t;
            c += 2.0 * residual[i * out_dim + d] * t;
          }
        }
        reg[static_cast<std::size_t>(k)] = r / static_cast<double>(n);
        cross[static_cast<std::size_t>(k)] = c / static_cast<double>(n);
      });

  IdentityCheck out;
  out.clean_loss = clean;
  const McStat ps = detail::summarize(perturbed);
  const McStat rs = detail::summarize(reg);
  const McStat cs = detail::summarize(cross);
  out.perturbed_loss = ps.mean;
  out.perturbed_se = ps.std_err;
  out.regularizer = rs.mean;
  out.regularizer_se = rs.std_err;
  out.cross_term = cs.mean;
  out.cross_se = cs.std_err;
  out.delta = delta;
  out.draws = draws;
  out.seed = seed;
  const double winf = linf_norm(base);
  out.delta_over_weight_linf = winf > 0.0 ? delta / winf : std::numeric_limits<double>::infinity();
  for (int k = 0; k < draws; ++k) {
    const double res = std::fabs(perturbed[static_cast<std::size_t>(k)] - clean -
                                 reg[static_cast<std::size_t>(k)] - cross[static_cast<std::size_t>(k)]);
    out.max_taylor_residual = std::max(out.max_taylor_residual, res);
  }
  return out;
}

// Fraction of uniform noise draws that lower the training loss.
inline double dominance_check(const Model& model, const Dataset& data, double delta, int draws,
                              std::uint64_t seed = 0) {
  if (delta < 0.0) throw std::invalid_argument("noise: delta must be >= 0");
  if (draws < 1) throw std::invalid_argument("noise: draws must be >= 1");
  const std::vector<double> base = effective_weights(model);
  Evaluator ev0(model, data);
  const double clean = ev0.loss(base);
  std::vector<int> violated(static_cast<std::size_t>(draws), 0);
  detail::sharded_draws(
      draws, [&]() { return Evaluator(model, data); },
      [&](Evaluator& ev, int k) {
        std::vector<double> shifted(base.size());
        detail::fill_noise(shifted, NoiseKind::kUniformBin, delta / 2.0,
                           derive_seed(seed, static_cast<std::uint64_t>(k)));
        for (std::size_t i = 0; i < base.size(); ++i) shifted[i] += base[i];
        violated[static_cast<std::size_t>(k)] = ev.loss(shifted) < clean ? 1 : 0;
      });
  int count = 0;
  for (int v : violated) count += v;
  return static_cast<double>(count) / static_cast<double>(draws);
}

}  // namespace qlns
