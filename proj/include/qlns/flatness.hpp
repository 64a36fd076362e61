#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qlns/eval.hpp"
#include "qlns/model.hpp"
#include "qlns/noise.hpp"
#include "qlns/rng.hpp"

// Flatness measures around a trained minimum. The expected-case family uses
// the largest Gaussian perturbation scale sigma that keeps the training
// accuracy within a deviation target; the worst-case family uses the largest
// box budget alpha under projected gradient ascent. Magnitude-aware variants
// scale per-coordinate perturbations by (|w_i| + eps) so parameters cannot
// flip sign. Budgets are found by bracketed binary search with common random
// numbers across candidates.

namespace qlns {

enum class BudgetKind { kGaussianSigma, kAdversarialAlpha };

struct PerturbationBudget {
  BudgetKind kind = BudgetKind::kGaussianSigma;
  bool magnitude_aware = false;
  double value = 0.0;
  double upper_bracket = 0.0;  // smallest candidate observed to violate
  bool capped = false;         // expansion hit the hard cap without violating
  std::vector<std::pair<double, double>> search_trace;  // (candidate, deviation)
};

struct SearchParams {
  double target_dev = 0.1;  // tolerated training-accuracy drop
  int iters = 15;           // binary-search iterations
  int draws = 10;           // Gaussian draws averaged per candidate
  int ascent_steps = 20;
  double ascent_lr = 1e-4;
  double eps_mag = 1e-3;    // magnitude floor for the aware variants
  double bracket_lo = 1e-5;
  double bracket_hi = 2.0;
  double cap = 1048576.0;   // 2^20
  std::uint64_t seed = 0;
};

namespace detail {

// Per-coordinate perturbation scales: ones, or |w_i| + eps.
inline std::vector<double> coordinate_scales(const std::vector<double>& w, bool magnitude_aware,
                                             double eps_mag) {
  std::vector<double> s(w.size(), 1.0);
  if (magnitude_aware) {
    for (std::size_t i = 0; i < w.size(); ++i) s[i] = std::fabs(w[i]) + eps_mag;
  }
  return s;
}

struct SearchCtx {
  const Model* model;
  const Dataset* data;
  SearchParams params;
  bool magnitude_aware;
  std::vector<double> base;    // effective weights
  std::vector<double> scales;  // per-coordinate multipliers
  double clean_acc;
};

// deviation(sigma): clean accuracy minus the mean perturbed accuracy over
// `draws` Gaussian draws. Draw seeds depend only on (seed, draw index).
inline double sigma_deviation(SearchCtx& ctx, Evaluator& ev, double sigma) {
  if (sigma == 0.0) return 0.0;
  double acc = 0.0;
  std::vector<double> losses(static_cast<std::size_t>(ctx.params.draws));
  std::vector<double> accs(static_cast<std::size_t>(ctx.params.draws));
  for (int k = 0; k < ctx.params.draws; ++k) {
    Rng rng(derive_seed(ctx.params.seed, static_cast<std::uint64_t>(k)));
    std::vector<double> shifted(ctx.base.size());
    for (std::size_t i = 0; i < ctx.base.size(); ++i) {
      shifted[i] = ctx.base[i] + sigma * ctx.scales[i] * rng.normal();
    }
    accs[static_cast<std::size_t>(k)] = ev.loss_acc(shifted).acc;
  }
  for (double a : accs) acc += a;
  acc /= static_cast<double>(ctx.params.draws);
  return ctx.clean_acc - acc;
}

// deviation(alpha): accuracy drop at the worst box perturbation found by
// projected gradient ascent (best-so-far iterate kept, so the reported worst
// loss is monotone over the ascent).
inline double alpha_deviation(SearchCtx& ctx, Evaluator& ev, double alpha,
                              std::vector<double>* ascent_losses = nullptr) {
  if (alpha == 0.0) return 0.0;
  const std::size_t dim = ctx.base.size();
  std::vector<double> box(dim);
  for (std::size_t i = 0; i < dim; ++i) box[i] = alpha * ctx.scales[i];

  Rng rng(derive_seed(ctx.params.seed, 0xa5c37ULL));
  std::vector<double> u(dim);
  for (std::size_t i = 0; i < dim; ++i) u[i] = box[i] * rng.uniform(-1.0, 1.0);

  std::vector<double> shifted(dim);
  const auto eval_at = [&](const std::vector<double>& uu) {
    for (std::size_t i = 0; i < dim; ++i) shifted[i] = ctx.base[i] + uu[i];
    return ev.loss_and_weight_grad(shifted);
  };

  auto [loss, grad] = eval_at(u);
  std::vector<double> best_u = u;
  double best_loss = loss;
  if (ascent_losses) ascent_losses->push_back(best_loss);
  for (int step = 0; step < ctx.params.ascent_steps; ++step) {
    for (std::size_t i = 0; i < dim; ++i) {
      u[i] += ctx.params.ascent_lr * grad[i];
      u[i] = std::clamp(u[i], -box[i], box[i]);
    }
    auto [l2, g2] = eval_at(u);
    loss = l2;
    grad = std::move(g2);
    if (loss > best_loss) {
      best_loss = loss;
      best_u = u;
    }
    if (ascent_losses) ascent_losses->push_back(best_loss);
  }
  for (std::size_t i = 0; i < dim; ++i) shifted[i] = ctx.base[i] + best_u[i];
  return ctx.clean_acc - ev.loss_acc(shifted).acc;
}

template <typename DevFn>
PerturbationBudget bracketed_search(SearchCtx& ctx, BudgetKind kind, DevFn&& deviation) {
  PerturbationBudget budget;
  budget.kind = kind;
  budget.magnitude_aware = ctx.magnitude_aware;
  const auto probe = [&](double candidate) {
    const double d = deviation(candidate);
    budget.search_trace.emplace_back(candidate, d);
    return d;
  };

  double lo = 0.0;  // zero perturbation never deviates
  double hi = ctx.params.bracket_lo;
  if (probe(hi) <= ctx.params.target_dev) {
    lo = hi;
    hi = ctx.params.bracket_hi;
    double d = probe(hi);
    while (d <= ctx.params.target_dev) {
      lo = hi;
      hi *= 2.0;
      if (hi > ctx.params.cap) {
        budget.value = ctx.params.cap;
        budget.upper_bracket = ctx.params.cap;
        budget.capped = true;
        return budget;
      }
      d = probe(hi);
    }
  }
  for (int it = 0; it < ctx.params.iters; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (probe(mid) <= ctx.params.target_dev) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  budget.value = lo;
  budget.upper_bracket = hi;
  return budget;
}

inline SearchCtx make_ctx(const Model& model, const Dataset& train, const SearchParams& params,
                          bool magnitude_aware) {
  if (!train.classification()) {
    throw std::invalid_argument("flatness: accuracy-based search needs a classification dataset");
  }
  SearchCtx ctx{&model, &train, params, magnitude_aware, effective_weights(model), {}, 0.0};
  ctx.scales = coordinate_scales(ctx.base, magnitude_aware, params.eps_mag);
  return ctx;
}

}  // namespace detail

// Largest Gaussian scale whose mean training-accuracy drop stays within the
// deviation target.
inline PerturbationBudget search_sigma(const Model& model, const Dataset& train,
                                       const SearchParams& params = {},
                                       bool magnitude_aware = false) {
  auto ctx = detail::make_ctx(model, train, params, magnitude_aware);
  Evaluator ev(model, train);
  ctx.clean_acc = ev.loss_acc(ctx.base).acc;
  return detail::bracketed_search(ctx, BudgetKind::kGaussianSigma,
                                  [&](double s) { return detail::sigma_deviation(ctx, ev, s); });
}

// Largest box budget whose worst-case (ascent) accuracy drop stays within the
// deviation target.
inline PerturbationBudget search_alpha(const Model& model, const Dataset& train,
                                       const SearchParams& params = {},
                                       bool magnitude_aware = false) {
  auto ctx = detail::make_ctx(model, train, params, magnitude_aware);
  Evaluator ev(model, train);
  ctx.clean_acc = ev.loss_acc(ctx.base).acc;
  return detail::bracketed_search(ctx, BudgetKind::kAdversarialAlpha,
                                  [&](double a) { return detail::alpha_deviation(ctx, ev, a); });
}

// Re-evaluates the deviation a search would see at a given budget value.
// Exposed so bracketing postconditions can be verified independently.
inline double sigma_deviation_at(const Model& model, const Dataset& train,
                                 const SearchParams& params, bool magnitude_aware, double sigma) {
  auto ctx = detail::make_ctx(model, train, params, magnitude_aware);
  Evaluator ev(model, train);
  ctx.clean_acc = ev.loss_acc(ctx.base).acc;
  return detail::sigma_deviation(ctx, ev, sigma);
}

inline double alpha_deviation_at(const Model& model, const Dataset& train,
                                 const SearchParams& params, bool magnitude_aware, double alpha) {
  auto ctx = detail::make_ctx(model, train, params, magnitude_aware);
  Evaluator ev(model, train);
  ctx.clean_acc = ev.loss_acc(ctx.base).acc;
  return detail::alpha_deviation(ctx, ev, alpha);
}

struct AscentResult {
  double worst_loss = 0.0;
  std::vector<double> best_so_far;  // per-step running maximum, monotone
};

// Runs only the inner ascent at a fixed box budget and reports the worst loss
// found. Works for regression models too (no accuracy involved).
inline AscentResult worst_case_ascent(const Model& model, const Dataset& data, double alpha,
                                      const SearchParams& params = {},
                                      bool magnitude_aware = false) {
  auto base = effective_weights(model);
  detail::SearchCtx ctx{&model, &data, params, magnitude_aware, base,
                        detail::coordinate_scales(base, magnitude_aware, params.eps_mag), 0.0};
  Evaluator ev(model, data);
  AscentResult out;
  detail::alpha_deviation(ctx, ev, alpha, &out.best_so_far);
  out.worst_loss = out.best_so_far.empty() ? 0.0 : out.best_so_far.back();
  return out;
}

// ---- measure formulas ----

inline double pac_bayes_measure(double dist_sq, double sigma, double m, double delta_conf) {
  if (!(sigma > 0.0)) throw std::invalid_argument("measure: sigma must be positive");
  return dist_sq / (4.0 * sigma * sigma) + std::log(m / delta_conf) + 10.0;
}

inline double sharpness_measure(double dist_sq, double alpha, double omega, double m,
                                double delta_conf) {
  if (!(alpha > 0.0)) throw std::invalid_argument("measure: alpha must be positive");
  if (!(omega >= 1.0)) throw std::invalid_argument("measure: omega must be >= 1");
  return dist_sq * std::log(2.0 * omega) / (4.0 * alpha * alpha) + std::log(m / delta_conf) + 10.0;
}

enum class MeasureFamily { kPacBayes, kSharpness };
enum class MeasureVariant { kInit, kOrig };

// Magnitude-aware measure:
//   1/4 sum_i ln[(eps^2 + (v^2 + c) ||r||^2 / omega) / (eps^2 + v^2 (w_i - w0_i)^2)]
//     + ln(m / delta_conf) + 10
// with r = w - w0 (init) or w (orig); c = 1 and v = sigma' for the
// pac-bayes family, c = 4 ln(2 omega / delta_conf) and v = alpha' for the
// sharpness family. The denominator uses the displacement from initialization
// in both variants.
inline double mag_measure(const std::vector<double>& w, const std::vector<double>& w0,
                          MeasureFamily family, MeasureVariant variant, double budget, double m,
                          double delta_conf, double eps = 1e-3) {
  if (!(budget > 0.0)) throw std::invalid_argument("measure: budget must be positive");
  if (w.size() != w0.size() || w.empty()) {
    throw std::invalid_argument("measure: weight vectors must match and be nonempty");
  }
  const double omega = static_cast<double>(w.size());
  double r_sq = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = variant == MeasureVariant::kInit ? w[i] - w0[i] : w[i];
    r_sq += r * r;
  }
  const double c =
      family == MeasureFamily::kSharpness ? 4.0 * std::log(2.0 * omega / delta_conf) : 1.0;
  const double v2 = budget * budget;
  const double numerator = eps * eps + (v2 + c) * r_sq / omega;
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - w0[i];
    sum += std::log(numerator / (eps * eps + v2 * d * d));
  }
  return 0.25 * sum + std::log(m / delta_conf) + 10.0;
}

inline double normalize_measure(double x, double m) {
  if (x < 0.0) throw std::invalid_argument("normalize: negative measure");
  if (!(m >= 1.0)) throw std::invalid_argument("normalize: m must be >= 1");
  return std::sqrt(x / m);
}

// ---- full report ----

struct FlatnessReport {
  // order: pac_bayes init, orig, mag-init, mag-orig; sharpness init, orig,
  // mag-init, mag-orig
  static constexpr std::array<const char*, 8> kMeasureNames = {
      "pac_bayes_init",     "pac_bayes_orig",     "pac_bayes_mag_init", "pac_bayes_mag_orig",
      "sharpness_init",     "sharpness_orig",     "sharpness_mag_init", "sharpness_mag_orig"};
  std::array<double, 8> raw{};
  std::array<double, 8> normalized{};  // sqrt(x/m); NaN if a raw value is negative
  double sigma = 0.0;
  double sigma_mag = 0.0;
  double alpha = 0.0;
  double alpha_mag = 0.0;
  std::size_t m = 0;
  double delta_conf = 0.05;
  bool apply_normalization = true;
  std::uint64_t seed = 0;
  PerturbationBudget sigma_budget, sigma_mag_budget, alpha_budget, alpha_mag_budget;

  double raw_value(const std::string& name) const {
    for (std::size_t i = 0; i < kMeasureNames.size(); ++i) {
      if (name == kMeasureNames[i]) return raw[i];
    }
    throw std::invalid_argument("flatness: unknown measure '" + name + "'");
  }
  double value(const std::string& name) const {
    for (std::size_t i = 0; i < kMeasureNames.size(); ++i) {
      if (name == kMeasureNames[i]) return apply_normalization ? normalized[i] : raw[i];
    }
    throw std::invalid_argument("flatness: unknown measure '" + name + "'");
  }
};

// Weight vectors the measures are computed on. Quantized models default to
// the dequantized view for both the trained weights and the initialization
// (routed through the current layer specs); the switch falls back to latent
// weights.
struct MeasureWeights {
  std::vector<double> w;
  std::vector<double> w0;
};

inline MeasureWeights measure_weights(const Model& model, bool use_dequantized = true) {
  const WeightView view = use_dequantized ? WeightView::kDequantized : WeightView::kLatent;
  return {flat_weights(model.state, WeightSet::kCurrent, view),
          flat_weights(model.state, WeightSet::kInit, view)};
}

inline FlatnessReport full_report(const Model& model, const Dataset& train,
                                  const SearchParams& params = {}, double delta_conf = 0.05,
                                  bool normalize = true, bool use_dequantized = true) {
  FlatnessReport rep;
  rep.m = train.size();
  rep.delta_conf = delta_conf;
  rep.apply_normalization = normalize;
  rep.seed = params.seed;

  SearchParams p = params;
  p.seed = derive_seed(params.seed, 1);
  rep.sigma_budget = search_sigma(model, train, p, false);
  p.seed = derive_seed(params.seed, 2);
  rep.sigma_mag_budget = search_sigma(model, train, p, true);
  p.seed = derive_seed(params.seed, 3);
  rep.alpha_budget = search_alpha(model, train, p, false);
  p.seed = derive_seed(params.seed, 4);
  rep.alpha_mag_budget = search_alpha(model, train, p, true);
  rep.sigma = rep.sigma_budget.value;
  rep.sigma_mag = rep.sigma_mag_budget.value;
  rep.alpha = rep.alpha_budget.value;
  rep.alpha_mag = rep.alpha_mag_budget.value;

  const MeasureWeights mw = measure_weights(model, use_dequantized);
  const double omega = static_cast<double>(mw.w.size());
  double dist_init = 0.0, dist_orig = 0.0;
  for (std::size_t i = 0; i < mw.w.size(); ++i) {
    const double d = mw.w[i] - mw.w0[i];
    dist_init += d * d;
    dist_orig += mw.w[i] * mw.w[i];
  }
  const double m = static_cast<double>(rep.m);
  rep.raw[0] = pac_bayes_measure(dist_init, rep.sigma, m, delta_conf);
  rep.raw[1] = pac_bayes_measure(dist_orig, rep.sigma, m, delta_conf);
  rep.raw[2] = mag_measure(mw.w, mw.w0, MeasureFamily::kPacBayes, MeasureVariant::kInit,
                           rep.sigma_mag, m, delta_conf);
  rep.raw[3] = mag_measure(mw.w, mw.w0, MeasureFamily::kPacBayes, MeasureVariant::kOrig,
                           rep.sigma_mag, m, delta_conf);
  rep.raw[4] = sharpness_measure(dist_init, rep.alpha, omega, m, delta_conf);
  rep.raw[5] = sharpness_measure(dist_orig, rep.alpha, omega, m, delta_conf);
  rep.raw[6] = mag_measure(mw.w, mw.w0, MeasureFamily::kSharpness, MeasureVariant::kInit,
                           rep.alpha_mag, m, delta_conf);
  rep.raw[7] = mag_measure(mw.w, mw.w0, MeasureFamily::kSharpness, MeasureVariant::kOrig,
                           rep.alpha_mag, m, delta_conf);
  for (std::size_t i = 0; i < rep.raw.size(); ++i) {
    rep.normalized[i] = rep.raw[i] >= 0.0 ? normalize_measure(rep.raw[i], m)
                                          : std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

}  // namespace qlns
