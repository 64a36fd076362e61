#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qlns/data.hpp"
#include "qlns/model.hpp"

// Whole-dataset evaluation against an explicit flattened weight vector. The
// perturbation machinery (noise draws, budget searches, landscape slices)
// evaluates many weight variants against one dataset, so the evaluator caches
// batch slices and graphs up front and only rebinds weights per call.

namespace qlns {

struct LossAcc {
  double loss = 0.0;
  double acc = std::numeric_limits<double>::quiet_NaN();  // NaN for regression
};

class Evaluator {
 public:
  Evaluator(const Model& model, const Dataset& data, std::size_t max_batch = 64)
      : model_(&model), data_(&data) {
    const std::size_t n = data.size();
    if (n == 0) throw std::invalid_argument("eval: empty dataset");
    layout_ = weight_layout(model.state);
    std::size_t start = 0;
    while (start < n) {
      const std::size_t len = std::min(max_batch, n - start);
      Batch b;
      std::vector<std::size_t> rows(len);
      for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
      const Dataset sub = take_rows(data, rows);
      b.x = sub.x;
      b.y = sub.y;
      b.net = model.make_graph(len);
      b.rows = len;
      batches_.push_back(std::move(b));
      start += len;
    }
    for (const auto& span : layout_) weight_tmp_.emplace_back(span.shape);
  }

  const std::vector<WeightSpan>& layout() const { return layout_; }
  std::size_t weight_dim() const {
    return layout_.empty() ? 0 : layout_.back().offset + layout_.back().count;
  }

  double loss(const std::vector<double>& weights) { return run(weights, false).loss; }

  LossAcc loss_acc(const std::vector<double>& weights) { return run(weights, true); }

  // Network outputs over the whole dataset, stacked to (N, out_dim).
  Tensor logits(const std::vector<double>& weights) {
    scatter(weights);
    const std::size_t out_dim = batches_[0].net.g.shape_of(batches_[0].net.logits)[1];
    Tensor out({data_->size(), out_dim});
    std::size_t row0 = 0;
    for (auto& b : batches_) {
      b.net.g.forward(bindings(b));
      const Tensor& part = b.net.g.value(b.net.logits);
      std::copy(part.data().begin(), part.data().end(), out.data().begin() + row0 * out_dim);
      row0 += b.rows;
    }
    return out;
  }

  // Loss plus its gradient w.r.t. the flattened weight vector.
  std::pair<double, std::vector<double>> loss_and_weight_grad(const std::vector<double>& weights) {
    scatter(weights);
    const double n = static_cast<double>(data_->size());
    double loss = 0.0;
    std::vector<double> grad(weight_dim(), 0.0);
    for (auto& b : batches_) {
      const Tensor& out = b.net.g.forward(bindings(b));
      const double frac = static_cast<double>(b.rows) / n;
      loss += out[0] * frac;
      const auto grads = b.net.g.backward(Tensor::scalar(frac));
      for (std::size_t si = 0; si < layout_.size(); ++si) {
        const auto it = grads.find(layout_[si].name);
        if (it == grads.end()) continue;
        const auto& g = it->second.data();
        for (std::size_t i = 0; i < g.size(); ++i) grad[layout_[si].offset + i] += g[i];
      }
    }
    return {loss, std::move(grad)};
  }

 private:
  struct Batch {
    Tensor x, y;
    NetGraph net;
    std::size_t rows = 0;
  };

  void scatter(const std::vector<double>& weights) {
    if (weights.size() != weight_dim()) {
      throw std::invalid_argument("eval: weight vector length mismatch");
    }
    for (std::size_t si = 0; si < layout_.size(); ++si) {
      std::copy_n(weights.begin() + layout_[si].offset, layout_[si].count,
                  weight_tmp_[si].data().begin());
    }
  }

  std::unordered_map<std::string, const Tensor*> bindings(Batch& b) {
    std::unordered_map<std::string, const Tensor*> bound;
    bound["x"] = &b.x;
    bound["y"] = &b.y;
    for (std::size_t si = 0; si < layout_.size(); ++si) {
      bound[layout_[si].name] = &weight_tmp_[si];
    }
    for (std::size_t i = 0; i < model_->state.count(); ++i) {
      const auto& e = model_->state.entry(i);
      if (!e.is_weight) bound[e.name] = &e.tensor;
    }
    return bound;
  }

  LossAcc run(const std::vector<double>& weights, bool want_acc) {
    scatter(weights);
    const double n = static_cast<double>(data_->size());
    LossAcc res;
    std::size_t correct = 0, row0 = 0;
    for (auto& b : batches_) {
      const Tensor& out = b.net.g.forward(bindings(b));
      res.loss += out[0] * static_cast<double>(b.rows) / n;
      if (want_acc && data_->classification()) {
        const Tensor& logits = b.net.g.value(b.net.logits);
        const std::size_t cols = logits.dim(1);
        for (std::size_t i = 0; i < b.rows; ++i) {
          std::size_t arg = 0;
          for (std::size_t c = 1; c < cols; ++c) {
            if (logits[i * cols + c] > logits[i * cols + arg]) arg = c;
          }
          if (static_cast<int>(arg) == data_->labels[row0 + i]) ++correct;
        }
      }
      row0 += b.rows;
    }
    if (want_acc && data_->classification()) {
      res.acc = static_cast<double>(correct) / n;
    }
    return res;
  }

  const Model* model_;
  const Dataset* data_;
  std::vector<WeightSpan> layout_;
  std::vector<Tensor> weight_tmp_;
  std::vector<Batch> batches_;
};

// The weights the network actually computes with: dequantized when the model
// carries quantization attachments, latent otherwise.
inline std::vector<double> effective_weights(const Model& m) {
  return flat_weights(m.state, WeightSet::kCurrent, WeightView::kDequantized);
}

inline LossAcc evaluate(const Model& m, const Dataset& data) {
  Evaluator ev(m, data);
  return ev.loss_acc(effective_weights(m));
}

}  // namespace qlns
