#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qlns/data.hpp"
#include "qlns/eval.hpp"
#include "qlns/model.hpp"
#include "qlns/quantize.hpp"
#include "qlns/rng.hpp"

namespace qlns {

enum class OptimizerKind { kSgdMomentum, kAdam, kRmsprop };

struct LrStep {
  int epoch = 0;  // 0-based epoch at which the factor applies
  double factor = 1.0;
};

struct ExperimentSpec {
  ArchSpec arch;
  int bits = 0;  // 0 = full precision; otherwise fake-quantized weights
  OptimizerKind optimizer = OptimizerKind::kSgdMomentum;
  double lr = 0.1;
  double weight_decay = 0.0;
  int epochs = 30;
  std::vector<LrStep> lr_schedule;
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;

  void validate() const {
    arch.validate();
    if (!(lr > 0.0)) throw std::invalid_argument("spec: lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("spec: weight decay must be >= 0");
    if (epochs < 0) throw std::invalid_argument("spec: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("spec: batch size must be >= 1");
    if (bits != 0 && bits != 2 && bits != 4 && bits != 8) {
      throw std::invalid_argument("spec: bits must be one of {0(fp),2,4,8}");
    }
    int prev = -1;
    for (const auto& s : lr_schedule) {
      if (s.epoch <= prev || s.epoch >= epochs) {
        throw std::invalid_argument("spec: schedule epochs must be strictly increasing and < epochs");
      }
      prev = s.epoch;
    }
  }
};

// First-order update rules with per-tensor state slots. Step sizes of
// quantized layers ride in scalar slots with weight decay excluded.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  int add_slot(std::size_t size) {
    m_.emplace_back(size, 0.0);
    v_.emplace_back(size, 0.0);
    t_.push_back(0);
    return static_cast<int>(m_.size() - 1);
  }

  void update(int slot, std::vector<double>& value, const std::vector<double>& grad) {
    auto& m = m_[static_cast<std::size_t>(slot)];
    auto& v = v_[static_cast<std::size_t>(slot)];
    switch (kind_) {
      case OptimizerKind::kSgdMomentum:
        for (std::size_t i = 0; i < value.size(); ++i) {
          m[i] = 0.9 * m[i] + grad[i];
          value[i] -= lr_ * m[i];
        }
        break;
      case OptimizerKind::kAdam: {
        const long t = ++t_[static_cast<std::size_t>(slot)];
        const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(0.999, static_cast<double>(t));
        for (std::size_t i = 0; i < value.size(); ++i) {
          m[i] = 0.9 * m[i] + 0.1 * grad[i];
          v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
          value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
        }
        break;
      }
      case OptimizerKind::kRmsprop:
        for (std::size_t i = 0; i < value.size(); ++i) {
          v[i] = 0.99 * v[i] + 0.01 * grad[i] * grad[i];
          value[i] -= lr_ * grad[i] / (std::sqrt(v[i]) + 1e-8);
        }
        break;
    }
  }

  double update_scalar(int slot, double value, double grad) {
    std::vector<double> v{value};
    update(slot, v, {grad});
    return v[0];
  }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<long> t_;
};

struct EpochStat {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
};

struct TrainTrace {
  std::vector<EpochStat> epochs;
  int best_epoch = 0;  // 0 = initialization
  double best_loss = 0.0;
};

struct TrainResult {
  Model model;  // state of the best epoch
  TrainTrace trace;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& msg, TrainTrace trace)
      : std::runtime_error(msg), trace(std::move(trace)) {}
  TrainTrace trace;
};

// Minibatch training with the epoch-of-lowest-training-loss selection rule.
// Quantized specs fake-quantize weights every forward pass and route weight
// and step-size gradients through the straight-through rule.
inline TrainResult train(const ExperimentSpec& spec, const Dataset& train_data) {
  spec.validate();
  if (train_data.size() == 0) throw std::invalid_argument("train: empty dataset");

  Model model = build(spec.arch, spec.seed);
  if (spec.bits != 0) attach_quantization(model, spec.bits);

  Optimizer opt(spec.optimizer, spec.lr);
  std::unordered_map<std::string, int> slots;
  std::unordered_map<std::string, int> step_slots;
  std::unordered_map<std::string, FakeQuantLayer> fq;
  for (std::size_t i = 0; i < model.state.count(); ++i) {
    const auto& e = model.state.entry(i);
    slots[e.name] = opt.add_slot(e.tensor.size());
    const auto it = model.state.quant.find(e.name);
    if (it != model.state.quant.end()) {
      step_slots[e.name] = opt.add_slot(1);
      fq.emplace(e.name, FakeQuantLayer(it->second));
    }
  }

  Evaluator train_eval(model, train_data);
  TrainTrace trace;
  const auto epoch_loss = [&]() {
    return train_eval.loss(flat_weights(model.state, WeightSet::kCurrent, WeightView::kDequantized));
  };

  // best-so-far snapshot (parameters + learned steps)
  std::vector<Tensor> best_params;
  std::map<std::string, double> best_steps;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  const auto snapshot = [&]() {
    best_params.clear();
    for (std::size_t i = 0; i < model.state.count(); ++i) best_params.push_back(model.state.param(i));
    best_steps.clear();
    for (const auto& [name, spec_q] : model.state.quant) best_steps[name] = spec_q.step;
  };

  std::map<std::size_t, NetGraph> graphs;  // per batch size
  const std::size_t n = train_data.size();
  std::vector<std::size_t> perm(n);

  double lr = spec.lr;
  std::size_t sched_pos = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    while (sched_pos < spec.lr_schedule.size() && spec.lr_schedule[sched_pos].epoch == epoch) {
      lr *= spec.lr_schedule[sched_pos].factor;
      ++sched_pos;
    }
    opt.set_lr(lr);

    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng shuffle_rng(derive_seed(spec.seed, 0x65706f63ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) {
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(shuffle_rng.below(i))]);
    }

    try {
      for (std::size_t start = 0; start < n; start += spec.batch_size) {
        const std::size_t len = std::min(spec.batch_size, n - start);
        const Dataset batch =
            take_rows(train_data, {perm.begin() + static_cast<long>(start),
                                   perm.begin() + static_cast<long>(start + len)});
        auto git = graphs.find(len);
        if (git == graphs.end()) git = graphs.emplace(len, model.make_graph(len)).first;
        NetGraph& net = git->second;

        std::unordered_map<std::string, const Tensor*> bound{{"x", &batch.x}, {"y", &batch.y}};
        for (std::size_t i = 0; i < model.state.count(); ++i) {
          const auto& e = model.state.entry(i);
          auto fit = fq.find(e.name);
          if (fit != fq.end()) {
            bound[e.name] = &fit->second.quantize_weights(e.tensor).w_hat;
          } else {
            bound[e.name] = &e.tensor;
          }
        }
        net.g.forward(bound);
        const auto grads = net.g.backward(Tensor::scalar(1.0));

        for (std::size_t i = 0; i < model.state.count(); ++i) {
          const auto& name = model.state.entry(i).name;
          Tensor& value = model.state.param(i);
          const auto git2 = grads.find(name);
          if (git2 == grads.end()) continue;
          std::vector<double> g = git2->second.data();
          const auto fit = fq.find(name);
          if (fit != fq.end()) {
            const SteGrads sg = fit->second.backward(git2->second, value);
            g = sg.grad_w.data();
            // learned step: same optimizer, no weight decay, kept positive
            auto& layer = fit->second;
            double s = opt.update_scalar(step_slots[name], layer.spec().step, sg.grad_step);
            s = std::max(s, 1e-8);
            layer.set_step(s);
            model.state.quant[name].step = s;
          }
          if (spec.weight_decay > 0.0) {
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += spec.weight_decay * value[k];
          }
          opt.update(slots[name], value.data(), g);
        }
      }
    } catch (const std::runtime_error& e) {
      throw TrainingDiverged(std::string("training diverged at epoch ") +
                                 std::to_string(epoch + 1) + ": " + e.what(),
                             trace);
    }

    double loss;
    try {
      loss = epoch_loss();
    } catch (const std::runtime_error& e) {
      throw TrainingDiverged(std::string("training diverged at epoch ") +
                                 std::to_string(epoch + 1) + ": " + e.what(),
                             trace);
    }
    trace.epochs.push_back({epoch + 1, lr, loss});
    if (!std::isfinite(loss)) {
      throw TrainingDiverged(
          "training diverged at epoch " + std::to_string(epoch + 1) + ": non-finite loss", trace);
    }
    if (loss < best_loss) {
      best_loss = loss;
      best_epoch = epoch + 1;
      snapshot();
    }
  }

  if (best_epoch > 0) {
    for (std::size_t i = 0; i < model.state.count(); ++i) model.state.param(i) = best_params[i];
    for (const auto& [name, step] : best_steps) model.state.quant[name].step = step;
  } else {
    best_loss = spec.epochs == 0 ? epoch_loss() : best_loss;
  }
  trace.best_epoch = best_epoch;
  trace.best_loss = best_loss;
  return {std::move(model), std::move(trace)};
}

struct GapReport {
  double train_acc = 0.0;
  double test_acc = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double gap = 0.0;  // always test_loss - train_loss
  int best_epoch = 0;
};

inline GapReport measure_gap(const Model& model, const Dataset& train_data,
                             const Dataset& test_data, int best_epoch = 0) {
  const LossAcc tr = evaluate(model, train_data);
  const LossAcc te = evaluate(model, test_data);
  GapReport r;
  r.train_loss = tr.loss;
  r.train_acc = tr.acc;
  r.test_loss = te.loss;
  r.test_acc = te.acc;
  r.gap = te.loss - tr.loss;
  r.best_epoch = best_epoch;
  return r;
}

// Per-layer learned step sizes in parameter order, ready for CSV emission.
inline std::vector<std::pair<std::string, double>> bin_width_report(const ModelState& s) {
  if (!s.quantized()) throw std::invalid_argument("bin_width_report: model has no quantization");
  std::vector<std::pair<std::string, double>> rows;
  for (std::size_t i = 0; i < s.count(); ++i) {
    const auto& e = s.entry(i);
    const auto it = s.quant.find(e.name);
    if (it == s.quant.end()) continue;
    std::string layer = e.name;
    constexpr const char* kSuffix = ".weight";
    if (layer.size() > 7 && layer.substr(layer.size() - 7) == kSuffix) {
      layer = layer.substr(0, layer.size() - 7);
    }
    rows.emplace_back(layer, it->second.step);
  }
  return rows;
}

inline double mean_step(const ModelState& s) {
  const auto rows = bin_width_report(s);
  double acc = 0.0;
  for (const auto& [_, step] : rows) acc += step;
  return acc / static_cast<double>(rows.size());
}

}  // namespace qlns
