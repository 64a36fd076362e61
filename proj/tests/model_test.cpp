#include <gtest/gtest.h>

#include <cmath>

#include "qlns/eval.hpp"
#include "qlns/model.hpp"

using namespace qlns;

namespace {

ArchSpec mlp_2_16_1() {
  ArchSpec a;
  a.kind = ArchKind::kMlp;
  a.depth_multiplier = 1;
  a.width_multiplier = 1;
  a.base_width = 16;
  a.input_shape = {2};
  a.classes = 1;
  a.task = TaskKind::kRegression;
  return a;
}

ArchSpec nin_mini(int depth, int width, int base) {
  ArchSpec a;
  a.kind = ArchKind::kNin;
  a.depth_multiplier = depth;
  a.width_multiplier = width;
  a.base_width = base;
  a.input_shape = {1, 12, 12};
  a.classes = 2;
  return a;
}

}  // namespace

TEST(ModelZoo, MlpShapes) {
  const Model m = build(mlp_2_16_1(), 7);
  ASSERT_EQ(m.state.count(), 4u);
  EXPECT_EQ(m.state.entry(0).name, "fc1.weight");
  EXPECT_EQ(m.state.param("fc1.weight").shape(), (std::vector<std::size_t>{2, 16}));
  EXPECT_EQ(m.state.param("fc1.bias").shape(), (std::vector<std::size_t>{16}));
  EXPECT_EQ(m.state.param("fc2.weight").shape(), (std::vector<std::size_t>{16, 1}));
  EXPECT_EQ(m.state.param("fc2.bias").shape(), (std::vector<std::size_t>{1}));
}

TEST(ModelZoo, NinLayerCount) {
  // A block is one 3x3 conv plus two 1x1 convs, so 3*depth conv layers.
  const Model m = build(nin_mini(2, 4, 8), 1);
  std::size_t weights = 0, biases = 0;
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    (m.state.entry(i).is_weight ? weights : biases)++;
  }
  EXPECT_EQ(weights, 6u);
  EXPECT_EQ(biases, 6u);
  EXPECT_EQ(m.state.param("block1.conv1.weight").shape(),
            (std::vector<std::size_t>{32, 1, 3, 3}));
  EXPECT_EQ(m.state.param("block2.conv3.weight").shape(),
            (std::vector<std::size_t>{2, 32, 1, 1}));
}

TEST(ModelZoo, BuildIsDeterministic) {
  const Model a = build(nin_mini(2, 1, 8), 99);
  const Model b = build(nin_mini(2, 1, 8), 99);
  for (std::size_t i = 0; i < a.state.count(); ++i) {
    EXPECT_EQ(a.state.param(i).data(), b.state.param(i).data()) << a.state.entry(i).name;
  }
  const Model c = build(nin_mini(2, 1, 8), 100);
  EXPECT_NE(a.state.param(0).data(), c.state.param(0).data());
}

TEST(ModelZoo, FlatL2) {
  std::vector<ModelState::Entry> params;
  params.push_back({"a.weight", Tensor::vector({3, 4}), true});
  params.push_back({"a.bias", Tensor::vector({9}), false});  // biases excluded
  params.push_back({"b.weight", Tensor::vector({0}), true});
  auto init = params;
  const ModelState s = ModelState::from_parts(params, init, {});
  EXPECT_DOUBLE_EQ(flat_l2(s, WeightSet::kCurrent), 5.0);
}

TEST(ModelZoo, FlatL2ZeroAndHomogeneity) {
  Model m = build(mlp_2_16_1(), 3);
  const double base = flat_l2(m.state, WeightSet::kCurrent);
  EXPECT_GT(base, 0.0);
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    if (!m.state.entry(i).is_weight) continue;
    for (auto& v : m.state.param(i).data()) v *= -2.5;
  }
  EXPECT_NEAR(flat_l2(m.state, WeightSet::kCurrent), 2.5 * base, 1e-9);
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    for (auto& v : m.state.param(i).data()) v = 0.0;
  }
  EXPECT_DOUBLE_EQ(flat_l2(m.state, WeightSet::kCurrent), 0.0);
}

TEST(ModelZoo, InitSnapshotImmutable) {
  Model m = build(mlp_2_16_1(), 5);
  const double init_norm = flat_l2(m.state, WeightSet::kInit);
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    for (auto& v : m.state.param(i).data()) v += 1.0;
  }
  EXPECT_DOUBLE_EQ(flat_l2(m.state, WeightSet::kInit), init_norm);
  EXPECT_NE(flat_l2(m.state, WeightSet::kCurrent), init_norm);
}

TEST(ModelZoo, GraphForwardShapes) {
  const Model m = build(nin_mini(2, 1, 4), 11);
  NetGraph net = m.make_graph(3);
  Tensor x({3, 1, 12, 12});
  Tensor y({3, 2});
  for (std::size_t i = 0; i < 3; ++i) y[i * 2] = 1.0;
  std::unordered_map<std::string, const Tensor*> bound{{"x", &x}, {"y", &y}};
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    bound[m.state.entry(i).name] = &m.state.param(i);
  }
  const Tensor& loss = net.g.forward(bound);
  EXPECT_EQ(loss.size(), 1u);
  EXPECT_EQ(net.g.value(net.logits).shape(), (std::vector<std::size_t>{3, 2}));
}

TEST(ModelZoo, QuantAttachAndFlatViews) {
  Model m = build(mlp_2_16_1(), 13);
  attach_quantization(m, 4);
  EXPECT_EQ(m.state.quant.size(), 2u);
  for (const auto& [name, spec] : m.state.quant) {
    EXPECT_DOUBLE_EQ(spec.step, init_step(m.state.param(name), 4)) << name;
  }
  const auto latent = flat_weights(m.state, WeightSet::kCurrent, WeightView::kLatent);
  const auto deq = flat_weights(m.state, WeightSet::kCurrent, WeightView::kDequantized);
  ASSERT_EQ(latent.size(), deq.size());
  EXPECT_NE(latent, deq);
  // dequantized values are integer multiples of the layer step
  const auto layout = weight_layout(m.state);
  for (const auto& span : layout) {
    const double s = m.state.quant.at(span.name).step;
    for (std::size_t i = span.offset; i < span.offset + span.count; ++i) {
      const double code = deq[i] / s;
      EXPECT_NEAR(code, std::rint(code), 1e-9);
    }
  }
}

TEST(ModelZoo, SetFlatWeightsRoundTrip) {
  Model m = build(nin_mini(1, 1, 4), 2);
  auto w = flat_weights(m.state, WeightSet::kCurrent);
  for (auto& v : w) v += 0.25;
  set_flat_weights(m.state, w);
  EXPECT_EQ(flat_weights(m.state, WeightSet::kCurrent), w);
  w.pop_back();
  EXPECT_THROW(set_flat_weights(m.state, w), std::invalid_argument);
}

TEST(ModelZoo, RejectsBadSpec) {
  ArchSpec a = mlp_2_16_1();
  a.depth_multiplier = 0;
  EXPECT_THROW(build(a, 1), std::invalid_argument);
  ArchSpec b = nin_mini(1, 1, 4);
  b.input_shape = {4};
  EXPECT_THROW(build(b, 1), std::invalid_argument);
}
