#pragma once

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "qlns/tensor.hpp"

// Per-layer fake quantization of weights with a learned step size. A weight
// vector w is mapped to integer codes by round(clip(w/s, q_min, q_max)), the
// dequantized view is codes*s, and the residual delta = w - codes*s is the
// quantization noise handed to the noise and flatness machinery.

namespace qlns {

struct QuantSpec {
  int bits = 8;
  double step = 1.0;  // learned, strictly positive

  long q_min() const { return -(1L << (bits - 1)); }
  long q_max() const { return (1L << (bits - 1)) - 1; }

  void validate() const {
    if (bits < 2) throw std::invalid_argument("quant: bits must be >= 2");
    if (!(step > 0.0) || !std::isfinite(step)) {
      throw std::invalid_argument("quant: step size must be positive");
    }
  }
};

struct QuantizedView {
  Tensor w_hat;                 // dequantized weights, codes * step
  Tensor delta;                 // w - w_hat
  std::vector<long> codes;      // integers in [q_min, q_max]
};

// Round half to even; relies on the default FE_TONEAREST mode.
inline double round_half_even(double x) { return std::nearbyint(x); }

inline QuantizedView quantize(const Tensor& w, const QuantSpec& spec) {
  spec.validate();
  const double qmin = static_cast<double>(spec.q_min());
  const double qmax = static_cast<double>(spec.q_max());
  QuantizedView view;
  view.w_hat = Tensor(w.shape());
  view.delta = Tensor(w.shape());
  view.codes.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    double r = w[i] / spec.step;
    if (r < qmin) r = qmin;
    if (r > qmax) r = qmax;
    const double code = round_half_even(r);
    view.codes[i] = static_cast<long>(code);
    view.w_hat[i] = code * spec.step;
    view.delta[i] = w[i] - view.w_hat[i];
  }
  return view;
}

struct SteGrads {
  Tensor grad_w;
  double grad_step = 0.0;
};

// Straight-through/LSQ backward rule. In-range coordinates pass the upstream
// gradient to w and contribute (round(w/s) - w/s) to the step gradient;
// clipped coordinates block the weight gradient and contribute q_min or q_max.
// The step gradient is scaled by 1/sqrt(N_w * q_max).
inline SteGrads ste_backward(const Tensor& upstream, const Tensor& w, const QuantSpec& spec) {
  spec.validate();
  if (!upstream.same_shape(w)) {
    throw std::invalid_argument("quant: upstream gradient shape mismatch");
  }
  const double qmin = static_cast<double>(spec.q_min());
  const double qmax = static_cast<double>(spec.q_max());
  const double gscale = 1.0 / std::sqrt(static_cast<double>(w.size()) * qmax);
  SteGrads out;
  out.grad_w = Tensor(w.shape());
  double step_acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = w[i] / spec.step;
    double local;
    if (r < qmin) {
      local = qmin;
    } else if (r > qmax) {
      local = qmax;
    } else {
      out.grad_w[i] = upstream[i];
      local = round_half_even(r) - r;
    }
    step_acc += local * upstream[i];
  }
  out.grad_step = step_acc * gscale;
  return out;
}

// Step-size initialization: 2*mean(|w|)/sqrt(q_max), with a small floor when
// the weights are all zero.
inline double init_step(const Tensor& w, int bits) {
  QuantSpec probe{bits, 1.0};
  probe.validate();
  if (w.size() == 0) throw std::invalid_argument("quant: init_step on empty tensor");
  double mean_abs = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mean_abs += std::fabs(w[i]);
  mean_abs /= static_cast<double>(w.size());
  if (mean_abs == 0.0) return 1e-3;
  return 2.0 * mean_abs / std::sqrt(static_cast<double>(probe.q_max()));
}

// Stateful per-layer wrapper used by the trainer; enforces that the backward
// rule only runs against a weight tensor that was quantized first.
class FakeQuantLayer {
 public:
  FakeQuantLayer() = default;
  explicit FakeQuantLayer(QuantSpec spec) : spec_(spec) { spec_.validate(); }

  const QuantSpec& spec() const { return spec_; }
  void set_step(double s) {
    spec_.step = s;
    spec_.validate();
  }

  const QuantizedView& quantize_weights(const Tensor& w) {
    view_ = qlns::quantize(w, spec_);
    shape_ = w.shape();
    return *view_;
  }

  SteGrads backward(const Tensor& upstream, const Tensor& w) const {
    if (!view_ || shape_ != w.shape()) {
      throw std::logic_error("quant: ste backward before quantize");
    }
    return ste_backward(upstream, w, spec_);
  }

  const QuantizedView& view() const {
    if (!view_) throw std::logic_error("quant: view before quantize");
    return *view_;
  }

 private:
  QuantSpec spec_;
  std::optional<QuantizedView> view_;
  std::vector<std::size_t> shape_;
};

}  // namespace qlns
