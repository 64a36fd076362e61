#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qlns/autodiff.hpp"
#include "qlns/quantize.hpp"
#include "qlns/rng.hpp"
#include "qlns/tensor.hpp"

namespace qlns {

// Ordered parameter store: current values, an immutable snapshot of the
// values at construction, and optional per-layer quantization attachments
// keyed by weight parameter name.
class ModelState {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool is_weight = false;  // biases carry false and are excluded from
                             // quantization, perturbation and flat_l2
  };

  void add_param(const std::string& name, Tensor t, bool is_weight) {
    if (frozen_) throw std::logic_error("model: add_param after snapshot");
    if (index_.count(name)) throw std::invalid_argument("model: duplicate param '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, std::move(t), is_weight});
  }

  void snapshot_init() {
    if (frozen_) throw std::logic_error("model: snapshot taken twice");
    init_ = params_;
    frozen_ = true;
  }

  std::size_t count() const { return params_.size(); }
  const Entry& entry(std::size_t i) const { return params_.at(i); }
  Tensor& param(std::size_t i) { return params_.at(i).tensor; }
  const Tensor& param(std::size_t i) const { return params_.at(i).tensor; }

  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("model: unknown param '" + name + "'");
    return it->second;
  }
  Tensor& param(const std::string& name) { return params_[index_of(name)].tensor; }
  const Tensor& param(const std::string& name) const { return params_[index_of(name)].tensor; }
  const Tensor& init(const std::string& name) const { return init_[index_of(name)].tensor; }
  const Tensor& init(std::size_t i) const { return init_.at(i).tensor; }
  bool snapshot_taken() const { return frozen_; }

  std::map<std::string, QuantSpec> quant;  // weight name -> spec

  bool quantized() const { return !quant.empty(); }

  // Rebuilds a state from checkpoint parts; shapes and key sets must agree.
  static ModelState from_parts(std::vector<Entry> params, std::vector<Entry> init,
                               std::map<std::string, QuantSpec> quant) {
    if (params.size() != init.size()) {
      throw std::invalid_argument("model: params/init entry count mismatch");
    }
    ModelState s;
    for (auto& e : params) s.add_param(e.name, std::move(e.tensor), e.is_weight);
    s.init_ = s.params_;
    for (std::size_t i = 0; i < init.size(); ++i) {
      if (init[i].name != s.params_[i].name || !init[i].tensor.same_shape(s.params_[i].tensor)) {
        throw std::invalid_argument("model: init snapshot does not match params");
      }
      s.init_[i].tensor = std::move(init[i].tensor);
    }
    s.frozen_ = true;
    s.quant = std::move(quant);
    return s;
  }

 private:
  std::vector<Entry> params_;
  std::vector<Entry> init_;
  std::unordered_map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

// kLinear is a single dense layer (no hidden activations); exactly linear in
// its weights, which the noise-identity oracles rely on.
enum class ArchKind { kMlp, kNin, kLinear };
enum class TaskKind { kClassification, kRegression };

struct ArchSpec {
  ArchKind kind = ArchKind::kMlp;
  int depth_multiplier = 1;
  int width_multiplier = 1;
  int base_width = 8;
  std::vector<std::size_t> input_shape;  // mlp: {in_dim}; nin: {C,H,W}
  std::size_t classes = 2;               // output width
  TaskKind task = TaskKind::kClassification;

  void validate() const {
    if (depth_multiplier < 1 || width_multiplier < 1 || base_width < 1) {
      throw std::invalid_argument("arch: multipliers and base width must be >= 1");
    }
    if (classes < 1) throw std::invalid_argument("arch: class count must be >= 1");
    if ((kind == ArchKind::kMlp || kind == ArchKind::kLinear) && input_shape.size() != 1) {
      throw std::invalid_argument("arch: mlp/linear expects a 1-d input shape");
    }
    if (kind == ArchKind::kNin && input_shape.size() != 3) {
      throw std::invalid_argument("arch: nin expects a (C,H,W) input shape");
    }
  }
};

// A built graph plus the node ids the harness needs.
struct NetGraph {
  Graph g;
  int x = -1;
  int y = -1;
  int logits = -1;
  int loss = -1;
};

struct Model {
  ArchSpec arch;
  ModelState state;

  // Builds the computation graph for a given batch size. Pure function of
  // (arch, batch): leaves are "x", "y" and every parameter by name.
  NetGraph make_graph(std::size_t batch) const { return build_graph(arch, batch); }

  static NetGraph build_graph(const ArchSpec& arch, std::size_t batch);
};

namespace detail {

inline Tensor kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

struct LayerDims {
  // mlp: widths of every dense layer boundary, e.g. {2,16,1}
  std::vector<std::size_t> mlp_dims;
};

inline std::vector<std::size_t> mlp_dims(const ArchSpec& a) {
  std::vector<std::size_t> dims;
  dims.push_back(a.input_shape[0]);
  if (a.kind == ArchKind::kMlp) {
    const std::size_t hidden = static_cast<std::size_t>(a.base_width) * a.width_multiplier;
    for (int i = 0; i < a.depth_multiplier; ++i) dims.push_back(hidden);
  }
  dims.push_back(a.classes);
  return dims;
}

// NiN block: one 3x3 conv followed by two 1x1 convs, each with bias. Blocks
// after the first downsample with stride 2. The last conv of the last block
// maps to the class count and stays pre-activation; logits come from global
// average pooling.
struct NinConv {
  std::string name;
  std::size_t in_ch, out_ch, k;
  int stride, pad;
  bool relu;
};

inline std::vector<NinConv> nin_convs(const ArchSpec& a) {
  const std::size_t cw = static_cast<std::size_t>(a.base_width) * a.width_multiplier;
  std::vector<NinConv> convs;
  std::size_t in_ch = a.input_shape[0];
  for (int b = 1; b <= a.depth_multiplier; ++b) {
    const bool last_block = (b == a.depth_multiplier);
    const std::string prefix = "block" + std::to_string(b);
    convs.push_back({prefix + ".conv1", in_ch, cw, 3, b > 1 ? 2 : 1, 1, true});
    convs.push_back({prefix + ".conv2", cw, cw, 1, 1, 0, true});
    const std::size_t out = last_block ? a.classes : cw;
    convs.push_back({prefix + ".conv3", cw, out, 1, 1, 0, !last_block});
    in_ch = out;
  }
  return convs;
}

}  // namespace detail

inline NetGraph Model::build_graph(const ArchSpec& arch, std::size_t batch) {
  arch.validate();
  NetGraph net;
  Graph& g = net.g;
  if (arch.kind == ArchKind::kMlp || arch.kind == ArchKind::kLinear) {
    const auto dims = detail::mlp_dims(arch);
    net.x = g.leaf("x", {batch, dims[0]});
    net.y = g.leaf("y", {batch, dims.back()});
    int cur = net.x;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::string prefix = "fc" + std::to_string(l + 1);
      const int w = g.leaf(prefix + ".weight", {dims[l], dims[l + 1]}, true);
      const int b = g.leaf(prefix + ".bias", {dims[l + 1]}, true);
      cur = g.bias_add(g.matmul(cur, w), b);
      if (l + 2 < dims.size()) cur = g.relu(cur);
    }
    net.logits = cur;
  } else {
    const auto convs = detail::nin_convs(arch);
    net.x = g.leaf("x", {batch, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]});
    net.y = g.leaf("y", {batch, arch.classes});
    int cur = net.x;
    for (const auto& c : convs) {
      const int w = g.leaf(c.name + ".weight", {c.out_ch, c.in_ch, c.k, c.k}, true);
      const int b = g.leaf(c.name + ".bias", {c.out_ch}, true);
      cur = g.bias_add(g.conv2d(cur, w, c.stride, c.pad), b);
      if (c.relu) cur = g.relu(cur);
    }
    net.logits = g.global_avg_pool(cur);
  }
  net.loss = arch.task == TaskKind::kRegression ? g.mse_loss(net.logits, net.y)
                                                : g.softmax_cross_entropy(net.logits, net.y);
  g.set_output(net.loss);
  return net;
}

// Kaiming-uniform weights, zero biases, snapshot taken at the end.
// Deterministic for a fixed (spec, seed).
inline Model build(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.arch = spec;
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  if (spec.kind == ArchKind::kMlp || spec.kind == ArchKind::kLinear) {
    const auto dims = detail::mlp_dims(spec);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::string prefix = "fc" + std::to_string(l + 1);
      m.state.add_param(prefix + ".weight",
                        detail::kaiming_uniform({dims[l], dims[l + 1]}, dims[l], rng), true);
      m.state.add_param(prefix + ".bias", Tensor({dims[l + 1]}), false);
    }
  } else {
    for (const auto& c : detail::nin_convs(spec)) {
      m.state.add_param(c.name + ".weight",
                        detail::kaiming_uniform({c.out_ch, c.in_ch, c.k, c.k}, c.in_ch * c.k * c.k, rng),
                        true);
      m.state.add_param(c.name + ".bias", Tensor({c.out_ch}), false);
    }
  }
  m.state.snapshot_init();
  return m;
}

// Attaches a per-layer quantization spec to every weight tensor.
inline void attach_quantization(Model& m, int bits) {
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    const auto& e = m.state.entry(i);
    if (!e.is_weight) continue;
    m.state.quant[e.name] = QuantSpec{bits, init_step(e.tensor, bits)};
  }
}

enum class WeightSet { kCurrent, kInit };
enum class WeightView { kLatent, kDequantized };

// Concatenated weight tensors (biases excluded), in parameter order. The
// dequantized view routes each quantized layer through its current spec.
inline std::vector<double> flat_weights(const ModelState& s, WeightSet set,
                                        WeightView view = WeightView::kLatent) {
  std::vector<double> out;
  for (std::size_t i = 0; i < s.count(); ++i) {
    const auto& e = s.entry(i);
    if (!e.is_weight) continue;
    const Tensor& src = set == WeightSet::kInit ? s.init(i) : e.tensor;
    const auto it = s.quant.find(e.name);
    if (view == WeightView::kDequantized && it != s.quant.end()) {
      const QuantizedView qv = quantize(src, it->second);
      out.insert(out.end(), qv.w_hat.data().begin(), qv.w_hat.data().end());
    } else {
      out.insert(out.end(), src.data().begin(), src.data().end());
    }
  }
  return out;
}

// L2 norm of the flattened weight vector.
inline double flat_l2(const ModelState& s, WeightSet set) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.count(); ++i) {
    const auto& e = s.entry(i);
    if (!e.is_weight) continue;
    const Tensor& t = set == WeightSet::kInit ? s.init(i) : e.tensor;
    for (double v : t.data()) acc += v * v;
  }
  return std::sqrt(acc);
}

struct WeightSpan {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
  std::vector<std::size_t> shape;
};

// Layout of the flattened weight vector, one span per weight tensor.
inline std::vector<WeightSpan> weight_layout(const ModelState& s) {
  std::vector<WeightSpan> spans;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < s.count(); ++i) {
    const auto& e = s.entry(i);
    if (!e.is_weight) continue;
    spans.push_back({e.name, offset, e.tensor.size(), e.tensor.shape()});
    offset += e.tensor.size();
  }
  return spans;
}

// Scatters a flattened weight vector back into the state's weight tensors.
inline void set_flat_weights(ModelState& s, const std::vector<double>& flat) {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < s.count(); ++i) {
    if (!s.entry(i).is_weight) continue;
    Tensor& t = s.param(i);
    if (offset + t.size() > flat.size()) {
      throw std::invalid_argument("model: flat weight vector too short");
    }
    std::copy(flat.begin() + offset, flat.begin() + offset + t.size(), t.data().begin());
    offset += t.size();
  }
  if (offset != flat.size()) throw std::invalid_argument("model: flat weight vector too long");
}

}  // namespace qlns
