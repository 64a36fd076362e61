#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qlns/tensor.hpp"

// Reverse-mode automatic differentiation over a static, topologically ordered
// node list. Shapes are fixed at build time (one graph per batch size), every
// reduction runs in a fixed left-to-right order, and the backward sweep visits
// nodes in exact reverse construction order, so repeated executions are
// bit-identical.

namespace qlns {

enum class Op {
  kLeaf,
  kMatMul,
  kConv2d,
  kBiasAdd,
  kRelu,
  kAdd,
  kScale,
  kGlobalAvgPool,
  kMseLoss,
  kSoftmaxCrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kBiasAdd: return "bias_add";
    case Op::kRelu: return "relu";
    case Op::kAdd: return "add";
    case Op::kScale: return "scale";
    case Op::kGlobalAvgPool: return "global_avg_pool";
    case Op::kMseLoss: return "mse_loss";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

class Graph {
 public:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;
    std::vector<std::size_t> shape;
    std::string name;       // leaves only
    bool is_param = false;  // leaves only
    double factor = 1.0;    // kScale
    int stride = 1;         // kConv2d
    int pad = 0;            // kConv2d
    Tensor value;
    std::vector<double> grad;
  };

  int leaf(const std::string& name, std::vector<std::size_t> shape, bool is_param = false) {
    if (leaves_.count(name)) throw std::invalid_argument("graph: duplicate leaf '" + name + "'");
    Node n;
    n.op = Op::kLeaf;
    n.shape = std::move(shape);
    n.name = name;
    n.is_param = is_param;
    const int id = push(std::move(n));
    leaves_[name] = id;
    return id;
  }

  int matmul(int a, int b) {
    const auto& sa = shape_of(a);
    const auto& sb = shape_of(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
      fail_shape("matmul", {a, b});
    }
    return push_op(Op::kMatMul, {a, b}, {sa[0], sb[1]});
  }

  // input (N,C,H,W), weight (F,C,kh,kw), zero padding.
  int conv2d(int x, int w, int stride = 1, int pad = 0) {
    const auto& sx = shape_of(x);
    const auto& sw = shape_of(w);
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1] || stride < 1 || pad < 0) {
      fail_shape("conv2d", {x, w});
    }
    const std::size_t h = sx[2] + 2 * static_cast<std::size_t>(pad);
    const std::size_t wd = sx[3] + 2 * static_cast<std::size_t>(pad);
    if (h < sw[2] || wd < sw[3]) fail_shape("conv2d", {x, w});
    const std::size_t oh = (h - sw[2]) / static_cast<std::size_t>(stride) + 1;
    const std::size_t ow = (wd - sw[3]) / static_cast<std::size_t>(stride) + 1;
    Node n;
    n.op = Op::kConv2d;
    n.inputs = {x, w};
    n.shape = {sx[0], sw[0], oh, ow};
    n.stride = stride;
    n.pad = pad;
    return push(std::move(n));
  }

  // x (N,D)+b(D) or x (N,C,H,W)+b(C).
  int bias_add(int x, int b) {
    const auto& sx = shape_of(x);
    const auto& sb = shape_of(b);
    const bool ok = sb.size() == 1 && ((sx.size() == 2 && sb[0] == sx[1]) ||
                                       (sx.size() == 4 && sb[0] == sx[1]));
    if (!ok) fail_shape("bias_add", {x, b});
    return push_op(Op::kBiasAdd, {x, b}, sx);
  }

  int relu(int x) { return push_op(Op::kRelu, {x}, shape_of(x)); }

  int add(int a, int b) {
    if (shape_of(a) != shape_of(b)) fail_shape("add", {a, b});
    return push_op(Op::kAdd, {a, b}, shape_of(a));
  }

  int scale(int a, double factor) {
    Node n;
    n.op = Op::kScale;
    n.inputs = {a};
    n.shape = shape_of(a);
    n.factor = factor;
    return push(std::move(n));
  }

  int global_avg_pool(int x) {
    const auto& sx = shape_of(x);
    if (sx.size() != 4) fail_shape("global_avg_pool", {x});
    return push_op(Op::kGlobalAvgPool, {x}, {sx[0], sx[1]});
  }

  // Mean over the batch of per-sample squared L2 distance.
  int mse_loss(int pred, int target) {
    if (shape_of(pred) != shape_of(target) || shape_of(pred).size() != 2) {
      fail_shape("mse_loss", {pred, target});
    }
    return push_op(Op::kMseLoss, {pred, target}, {1});
  }

  // logits (N,C) against one-hot (or soft) targets (N,C); mean over the batch.
  int softmax_cross_entropy(int logits, int target) {
    if (shape_of(logits) != shape_of(target) || shape_of(logits).size() != 2) {
      fail_shape("softmax_cross_entropy", {logits, target});
    }
    return push_op(Op::kSoftmaxCrossEntropy, {logits, target}, {1});
  }

  void set_output(int id) { output_ = check_id(id); }
  int output() const { return output_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<std::size_t>& shape_of(int id) const { return nodes_[check_id(id)].shape; }

  bool has_leaf(const std::string& name) const { return leaves_.count(name) != 0; }

  // Executes all nodes; returns the value of the designated output node.
  const Tensor& forward(const std::unordered_map<std::string, const Tensor*>& bound) {
    if (output_ < 0) throw std::logic_error("graph: no output node set");
    for (auto& [name, id] : leaves_) {
      const auto it = bound.find(name);
      if (it == bound.end() || it->second == nullptr) {
        throw std::invalid_argument("graph: unbound leaf '" + name + "'");
      }
      if (it->second->shape() != nodes_[id].shape) {
        throw std::invalid_argument("graph: leaf '" + name + "' expects shape " +
                                    Tensor(nodes_[id].shape).shape_str() + ", got " +
                                    it->second->shape_str());
      }
      nodes_[id].value = *it->second;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      eval_node(static_cast<int>(i));
      for (double v : nodes_[i].value.data()) {
        if (!std::isfinite(v)) {
          throw std::runtime_error("graph: non-finite value at node " + node_label(static_cast<int>(i)));
        }
      }
    }
    forward_done_ = true;
    return nodes_[output_].value;
  }

  const Tensor& value(int id) const {
    if (!forward_done_) throw std::logic_error("graph: value() before forward()");
    return nodes_[check_id(id)].value;
  }

  // Gradient of the output w.r.t. every parameter leaf. Must follow forward().
  std::map<std::string, Tensor> backward(const Tensor& seed) {
    if (!forward_done_) throw std::logic_error("graph: backward() before forward()");
    if (seed.shape() != nodes_[output_].shape) {
      throw std::invalid_argument("graph: seed gradient shape mismatch");
    }
    for (auto& n : nodes_) n.grad.assign(n.value.size(), 0.0);
    nodes_[output_].grad = seed.data();
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      backprop_node(i);
    }
    std::map<std::string, Tensor> grads;
    for (auto& [name, id] : leaves_) {
      Node& n = nodes_[id];
      if (!n.is_param) continue;
      for (double v : n.grad) {
        if (!std::isfinite(v)) {
          throw std::runtime_error("graph: non-finite gradient at leaf '" + name + "'");
        }
      }
      grads.emplace(name, Tensor(n.shape, n.grad));
    }
    return grads;
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
  }

  int push_op(Op op, std::vector<int> inputs, std::vector<std::size_t> shape) {
    for (int id : inputs) check_id(id);
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  int check_id(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw std::invalid_argument("graph: bad node id");
    }
    return id;
  }

  std::string node_label(int id) const {
    const Node& n = nodes_[id];
    std::string s = "#" + std::to_string(id) + "(" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s + ")";
  }

  [[noreturn]] void fail_shape(const char* what, std::vector<int> ids) const {
    std::string msg = std::string("graph: ") + what + " shape mismatch:";
    for (int id : ids) {
      msg += " " + node_label(id) + Tensor(nodes_[check_id(id)].shape).shape_str();
    }
    throw std::invalid_argument(msg);
  }

  void eval_node(int id) {
    Node& n = nodes_[id];
    if (n.op == Op::kLeaf) {
      if (n.value.size() != Tensor(n.shape).size()) {
        throw std::invalid_argument("graph: unbound leaf '" + n.name + "'");
      }
      return;
    }
    n.value = Tensor(n.shape);
    auto& out = n.value.data();
    switch (n.op) {
      case Op::kMatMul: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * p + j];
            out[i * p + j] = acc;
          }
        }
        break;
      }
      case Op::kConv2d: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        const Tensor& w = nodes_[n.inputs[1]].value;
        conv_forward(x, w, n, out);
        break;
      }
      case Op::kBiasAdd: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        const std::size_t channels = b.size();
        if (x.rank() == 2) {
          const std::size_t rows = x.dim(0);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t c = 0; c < channels; ++c) out[i * channels + c] = x[i * channels + c] + b[c];
        } else {
          const std::size_t nk = x.dim(0), hw = x.dim(2) * x.dim(3);
          for (std::size_t i = 0; i < nk; ++i)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t s = 0; s < hw; ++s)
                out[(i * channels + c) * hw + s] = x[(i * channels + c) * hw + s] + b[c];
        }
        break;
      }
      case Op::kRelu: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
      }
      case Op::kAdd: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
        break;
      }
      case Op::kScale: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * n.factor;
        break;
      }
      case Op::kGlobalAvgPool: {
        const Tensor& x = nodes_[n.inputs[0]].value;
        const std::size_t nk = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < nk; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < hw; ++s) acc += x[(i * c + j) * hw + s];
            out[i * c + j] = acc / static_cast<double>(hw);
          }
        break;
      }
      case Op::kMseLoss: {
        const Tensor& p = nodes_[n.inputs[0]].value;
        const Tensor& t = nodes_[n.inputs[1]].value;
        double acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double d = p[i] - t[i];
          acc += d * d;
        }
        out[0] = acc / static_cast<double>(p.dim(0));
        break;
      }
      case Op::kSoftmaxCrossEntropy: {
        const Tensor& z = nodes_[n.inputs[0]].value;
        const Tensor& y = nodes_[n.inputs[1]].value;
        const std::size_t rows = z.dim(0), cols = z.dim(1);
        double acc = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          double mx = z[i * cols];
          for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, z[i * cols + c]);
          double sum = 0.0;
          for (std::size_t c = 0; c < cols; ++c) sum += std::exp(z[i * cols + c] - mx);
          const double lse = mx + std::log(sum);
          double target_term = 0.0;
          for (std::size_t c = 0; c < cols; ++c) target_term += y[i * cols + c] * z[i * cols + c];
          acc += lse - target_term;
        }
        out[0] = acc / static_cast<double>(rows);
        break;
      }
      case Op::kLeaf:
        break;
    }
  }

  static void conv_forward(const Tensor& x, const Tensor& w, const Node& n, std::vector<double>& out) {
    const std::size_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = n.shape[2], ow = n.shape[3];
    const long stride = n.stride, pad = n.pad;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t fo = 0; fo < f; ++fo)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t u = 0; u < kh; ++u) {
                const long ih = static_cast<long>(i) * stride + static_cast<long>(u) - pad;
                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                  const long iw = static_cast<long>(j) * stride + static_cast<long>(v) - pad;
                  if (iw < 0 || iw >= static_cast<long>(wd)) continue;
                  acc += x[((b * c + ci) * h + static_cast<std::size_t>(ih)) * wd + static_cast<std::size_t>(iw)] *
                         w[((fo * c + ci) * kh + u) * kw + v];
                }
              }
            out[((b * f + fo) * oh + i) * ow + j] = acc;
          }
  }

  void backprop_node(int id) {
    Node& n = nodes_[id];
    if (n.op == Op::kLeaf) return;
    const auto& g = n.grad;
    switch (n.op) {
      case Op::kMatMul: {
        Node& na = nodes_[n.inputs[0]];
        Node& nb = nodes_[n.inputs[1]];
        const Tensor& a = na.value;
        const Tensor& b = nb.value;
        const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * b[t * p + j];
            na.grad[i * k + t] += acc;
          }
        for (std::size_t t = 0; t < k; ++t)
          for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += a[i * k + t] * g[i * p + j];
            nb.grad[t * p + j] += acc;
          }
        break;
      }
      case Op::kConv2d: {
        Node& nx = nodes_[n.inputs[0]];
        Node& nw = nodes_[n.inputs[1]];
        const Tensor& x = nx.value;
        const Tensor& w = nw.value;
        const std::size_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
        const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
        const std::size_t oh = n.shape[2], ow = n.shape[3];
        const long stride = n.stride, pad = n.pad;
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t fo = 0; fo < f; ++fo)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                const double go = g[((b * f + fo) * oh + i) * ow + j];
                if (go == 0.0) continue;
                for (std::size_t ci = 0; ci < c; ++ci)
                  for (std::size_t u = 0; u < kh; ++u) {
                    const long ih = static_cast<long>(i) * stride + static_cast<long>(u) - pad;
                    if (ih < 0 || ih >= static_cast<long>(h)) continue;
                    for (std::size_t v = 0; v < kw; ++v) {
                      const long iw = static_cast<long>(j) * stride + static_cast<long>(v) - pad;
                      if (iw < 0 || iw >= static_cast<long>(wd)) continue;
                      const std::size_t xi =
                          ((b * c + ci) * h + static_cast<std::size_t>(ih)) * wd + static_cast<std::size_t>(iw);
                      const std::size_t wi = ((fo * c + ci) * kh + u) * kw + v;
                      nx.grad[xi] += w[wi] * go;
                      nw.grad[wi] += x.data()[xi] * go;
                    }
                  }
              }
        break;
      }
      case Op::kBiasAdd: {
        Node& nx = nodes_[n.inputs[0]];
        Node& nb = nodes_[n.inputs[1]];
        const std::size_t channels = nb.value.size();
        if (nx.value.rank() == 2) {
          const std::size_t rows = nx.value.dim(0);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t c = 0; c < channels; ++c) {
              nx.grad[i * channels + c] += g[i * channels + c];
              nb.grad[c] += g[i * channels + c];
            }
        } else {
          const std::size_t rows = nx.value.dim(0), hw = nx.value.dim(2) * nx.value.dim(3);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t s = 0; s < hw; ++s) {
                nx.grad[(i * channels + c) * hw + s] += g[(i * channels + c) * hw + s];
                nb.grad[c] += g[(i * channels + c) * hw + s];
              }
        }
        break;
      }
      case Op::kRelu: {
        Node& nx = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < nx.value.size(); ++i) {
          if (nx.value[i] > 0.0) nx.grad[i] += g[i];
        }
        break;
      }
      case Op::kAdd: {
        Node& na = nodes_[n.inputs[0]];
        Node& nb = nodes_[n.inputs[1]];
        for (std::size_t i = 0; i < g.size(); ++i) {
          na.grad[i] += g[i];
          nb.grad[i] += g[i];
        }
        break;
      }
      case Op::kScale: {
        Node& na = nodes_[n.inputs[0]];
        for (std::size_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] * n.factor;
        break;
      }
      case Op::kGlobalAvgPool: {
        Node& nx = nodes_[n.inputs[0]];
        const std::size_t rows = nx.value.dim(0), c = nx.value.dim(1), hw = nx.value.dim(2) * nx.value.dim(3);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < c; ++j)
            for (std::size_t s = 0; s < hw; ++s)
              nx.grad[(i * c + j) * hw + s] += g[i * c + j] / static_cast<double>(hw);
        break;
      }
      case Op::kMseLoss: {
        Node& np = nodes_[n.inputs[0]];
        Node& nt = nodes_[n.inputs[1]];
        const double inv = 1.0 / static_cast<double>(np.value.dim(0));
        for (std::size_t i = 0; i < np.value.size(); ++i) {
          const double d = 2.0 * (np.value[i] - nt.value[i]) * inv * g[0];
          np.grad[i] += d;
          nt.grad[i] -= d;
        }
        break;
      }
      case Op::kSoftmaxCrossEntropy: {
        Node& nz = nodes_[n.inputs[0]];
        Node& ny = nodes_[n.inputs[1]];
        const std::size_t rows = nz.value.dim(0), cols = nz.value.dim(1);
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i) {
          double mx = nz.value[i * cols];
          for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, nz.value[i * cols + c]);
          double sum = 0.0;
          for (std::size_t c = 0; c < cols; ++c) sum += std::exp(nz.value[i * cols + c] - mx);
          for (std::size_t c = 0; c < cols; ++c) {
            const double soft = std::exp(nz.value[i * cols + c] - mx) / sum;
            nz.grad[i * cols + c] += (soft - ny.value[i * cols + c]) * inv * g[0];
            ny.grad[i * cols + c] -= nz.value[i * cols + c] * inv * g[0];
          }
        }
        break;
      }
      case Op::kLeaf:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> leaves_;  // ordered: deterministic bind/report order
  int output_ = -1;
  bool forward_done_ = false;
};

}  // namespace qlns
