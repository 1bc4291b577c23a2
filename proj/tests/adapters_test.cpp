#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "bilalora/adapters.hpp"
#include "bilalora/errors.hpp"
#include "testing_util.hpp"

namespace bilalora {
namespace {

using test_util::random_tensor;

// Dense reference: W x + b for a single input.
std::vector<double> dense_affine(const Tensor& w, const Tensor& b, const Tensor& x) {
  std::vector<double> y(w.dim(0));
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w.dim(1); ++j) s += w.at(i, j) * x[j];
    y[i] = s + b[i];
  }
  return y;
}

GatedLoRALayer random_layer(std::mt19937_64& rng, std::size_t d_in, std::size_t d_out, std::size_t rank) {
  GatedLoRALayer layer = init_adapter(random_tensor(rng, {d_out, d_in}), random_tensor(rng, {d_out}), rank,
                                      kDefaultGamma, rng());
  layer.lora_b = random_tensor(rng, {d_out, rank});
  return layer;
}

std::vector<std::size_t> default_dims() { return {16, 64, 64, 64, 64, 64, 16}; }

TEST(GatedLoRALayer, ZeroIncrementMatchesFrozenLayerExactly) {
  std::mt19937_64 rng(1);
  GatedLoRALayer layer = init_adapter(random_tensor(rng, {12, 10}), random_tensor(rng, {12}), 4, 2.0, 7);
  for (double raw : {-5.0, 0.0, 0.3, 9.0}) {
    layer.gate_raw = Tensor::scalar(raw);
    const Tensor x = random_tensor(rng, {10});
    const Tensor y = forward(layer, x);
    const auto expected = dense_affine(layer.weight, layer.bias, x);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(y[i], expected[i]);
  }
}

TEST(GatedLoRALayer, HalfGateWithGammaTwoAddsTheFullIncrement) {
  std::mt19937_64 rng(2);
  GatedLoRALayer layer = random_layer(rng, 6, 5, 2);
  const Tensor x = random_tensor(rng, {6});
  const auto frozen = dense_affine(layer.weight, layer.bias, x);
  // u = B A x by hand.
  std::vector<double> ax(2, 0.0), u(5, 0.0);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 6; ++j) ax[r] += layer.lora_a.at(r, j) * x[j];
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t r = 0; r < 2; ++r) u[i] += layer.lora_b.at(i, r) * ax[r];
  const Tensor y = forward(layer, x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(y[i], frozen[i] + 1.0 * u[i], 1e-12);
}

TEST(GatedLoRALayer, DefaultRankIncrementMatchesDenseOracle) {
  std::mt19937_64 rng(3);
  GatedLoRALayer layer = random_layer(rng, 16, 16, kDefaultRank);
  ASSERT_EQ(layer.rank(), 8u);
  ASSERT_EQ(layer.gamma, 2.0);
  const Tensor x = random_tensor(rng, {16});
  // Dense B*A assembled entry by entry.
  double norm_sq = 0.0;
  for (std::size_t i = 0; i < 16; ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      double ba = 0.0;
      for (std::size_t r = 0; r < 8; ++r) ba += layer.lora_b.at(i, r) * layer.lora_a.at(r, j);
      v += ba * x[j];
    }
    norm_sq += v * v;
  }
  const double expected = 0.5 * 2.0 * std::sqrt(norm_sq);
  const Tensor y = forward(layer, x);
  const auto frozen = dense_affine(layer.weight, layer.bias, x);
  double inc = 0.0;
  for (std::size_t i = 0; i < 16; ++i) inc += (y[i] - frozen[i]) * (y[i] - frozen[i]);
  EXPECT_NEAR(std::sqrt(inc), expected, 1e-12 * std::max(1.0, expected));
}

TEST(GatedLoRALayer, EffectiveWeightMatchesForward) {
  std::mt19937_64 rng(4);
  GatedLoRALayer layer = random_layer(rng, 7, 9, 3);
  layer.gate_raw = Tensor::scalar(0.8);
  const Tensor x = random_tensor(rng, {7});
  const auto expected = dense_affine(layer.effective_weight(layer.gate()), layer.bias, x);
  const Tensor y = forward(layer, x);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(GatedLoRALayer, IncrementNormStrictlyIncreasesWithGate) {
  std::mt19937_64 rng(5);
  GatedLoRALayer layer = random_layer(rng, 8, 8, 3);
  const Tensor x = random_tensor(rng, {8});
  const auto frozen = dense_affine(layer.weight, layer.bias, x);
  double previous = -1.0;
  for (double raw = -6.0; raw <= 6.0; raw += 0.5) {
    layer.gate_raw = Tensor::scalar(raw);
    const Tensor y = forward(layer, x);
    double n = 0.0;
    for (std::size_t i = 0; i < 8; ++i) n += (y[i] - frozen[i]) * (y[i] - frozen[i]);
    EXPECT_GT(n, previous) << "gate_raw " << raw;
    previous = n;
  }
}

TEST(GatedLoRALayer, ForwardRejectsWrongInputWidth) {
  std::mt19937_64 rng(6);
  GatedLoRALayer layer = random_layer(rng, 5, 4, 2);
  EXPECT_THROW(forward(layer, random_tensor(rng, {6})), ShapeError);
}

TEST(GatedLoRALayer, GradientsReachAdapterAndGateButNotFrozenWeights) {
  std::mt19937_64 rng(7);
  GatedLoRALayer layer = random_layer(rng, 5, 4, 2);
  Tape tape;
  LayerNodes nodes{tape.leaf(layer.weight), tape.leaf(layer.bias), tape.leaf(layer.lora_a, true),
                   tape.leaf(layer.lora_b, true), tape.leaf(layer.gate_raw, true), GateMode::kLearned,
                   layer.gamma};
  NodeRef out = forward(tape, nodes, tape.leaf(random_tensor(rng, {5})));
  Gradients g = tape.backward(tape.sum(out));
  EXPECT_FALSE(g.has(nodes.weight));
  EXPECT_FALSE(g.has(nodes.bias));
  EXPECT_TRUE(g.has(nodes.lora_a));
  EXPECT_TRUE(g.has(nodes.lora_b));
  EXPECT_TRUE(g.has(*nodes.gate));
}

TEST(GatedLoRALayer, LayerGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    GatedLoRALayer layer = random_layer(rng, 6, 5, 2);
    const Tensor w = layer.weight, b = layer.bias;
    const double gamma = layer.gamma;
    auto graph = [&](Tape& t, const std::vector<NodeRef>& in) {
      LayerNodes nodes{t.leaf(w), t.leaf(b), in[0], in[1], in[2], GateMode::kLearned, gamma};
      return forward(t, nodes, in[3]);
    };
    const double err = test_util::gradient_check(
        graph, {layer.lora_a, layer.lora_b, Tensor::scalar(0.3), random_tensor(rng, {3, 6})}, rng);
    EXPECT_LT(err, 1e-6);
  }
}

TEST(InitAdapter, FreshAdapterStartsAtFrozenModelWithHalfGate) {
  std::mt19937_64 rng(9);
  GatedLoRALayer layer = init_adapter(random_tensor(rng, {20, 30}), random_tensor(rng, {20}), 8, 2.0, 11);
  EXPECT_EQ(layer.gate_raw.item(), 0.0);
  EXPECT_EQ(layer.gate(), 0.5);
  for (double v : layer.lora_b.values()) EXPECT_EQ(v, 0.0);
  const double bound = 1.0 / std::sqrt(30.0);
  for (double v : layer.lora_a.values()) {
    EXPECT_LE(std::abs(v), bound);
  }
  const Tensor x = random_tensor(rng, {30});
  const auto expected = dense_affine(layer.weight, layer.bias, x);
  const Tensor y = forward(layer, x);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(y[i], expected[i]);
}

TEST(InitAdapter, EqualSeedsGiveIdenticalFactors) {
  std::mt19937_64 rng(10);
  const Tensor w = random_tensor(rng, {10, 12}), b = random_tensor(rng, {10});
  EXPECT_EQ(init_adapter(w, b, 4, 2.0, 99).lora_a, init_adapter(w, b, 4, 2.0, 99).lora_a);
  EXPECT_NE(init_adapter(w, b, 4, 2.0, 99).lora_a, init_adapter(w, b, 4, 2.0, 100).lora_a);
}

TEST(InitAdapter, RejectsRankAtOrAboveSmallerDimension) {
  std::mt19937_64 rng(11);
  const Tensor w = random_tensor(rng, {8, 12}), b = random_tensor(rng, {8});
  EXPECT_THROW(init_adapter(w, b, 8, 2.0, 1), RangeError);
  EXPECT_THROW(init_adapter(w, b, 0, 2.0, 1), RangeError);
  EXPECT_NO_THROW(init_adapter(w, b, 7, 2.0, 1));
}

TEST(Backbone, CollectParamsCountsAndPartition) {
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  EXPECT_EQ(net.collect_params(ParamGroup::kLora).size(), 12u);
  EXPECT_EQ(net.collect_params(ParamGroup::kGates).size(), 6u);
  EXPECT_EQ(net.collect_params(ParamGroup::kFrozen).size(), 12u);
  std::set<const Tensor*> seen;
  std::size_t total = 0;
  for (auto group : {ParamGroup::kFrozen, ParamGroup::kLora, ParamGroup::kGates}) {
    for (const Tensor* p : std::as_const(net).collect_params(group)) {
      EXPECT_TRUE(seen.insert(p).second) << "parameter listed twice";
      total += p->size();
    }
  }
  EXPECT_EQ(total, net.total_param_count());
  // Ordering is stable across calls.
  EXPECT_EQ(net.collect_params(ParamGroup::kLora), net.collect_params(ParamGroup::kLora));
}

TEST(Backbone, ParameterCountsFromDimensions) {
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  EXPECT_EQ(net.frozen_param_count(), (16u * 64 + 64) + 4 * (64u * 64 + 64) + (64u * 16 + 16));
  EXPECT_EQ(net.lora_param_count(), 2 * 8u * (16 + 64) + 4 * 8u * (64 + 64));
  EXPECT_EQ(net.total_param_count(), 18768u + 5376u + 6u);

  // A uniform 64-wide six-layer backbone with three rank-8 adapters selected
  // trains 3072 of 31110 parameters.
  Backbone wide = Backbone::create(std::vector<std::size_t>(7, 64), 8, 2.0, 3);
  EXPECT_EQ(wide.total_param_count(), 31110u);
  wide.apply_selection({1, 2, 3});
  EXPECT_EQ(wide.trainable_lora_count(), 3072u);
  EXPECT_LT(selection_param_fraction(wide, {1, 2, 3}), 0.10);
}

TEST(Backbone, SelectAllTurnsEveryGateOn) {
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  net.apply_selection({0, 1, 2, 3, 4, 5});
  for (std::size_t l = 0; l < 6; ++l) {
    EXPECT_EQ(net.gate_mode(l), GateMode::kOn);
    EXPECT_TRUE(net.adapter_trainable(l));
  }
  EXPECT_EQ(net.trainable_lora_count(), net.lora_param_count());
}

TEST(Backbone, EmptySelectionReproducesPretrainedOutput) {
  std::mt19937_64 rng(12);
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  const Tensor x = random_tensor(rng, {5, 16});
  const Tensor before = net.evaluate(x);
  for (std::size_t l = 0; l < 6; ++l) net.layer(l).lora_b = random_tensor(rng, net.layer(l).lora_b.shape());
  EXPECT_NE(net.evaluate(x), before);
  net.apply_selection({});
  EXPECT_EQ(net.evaluate(x), before);
  EXPECT_EQ(net.trainable_lora_count(), 0u);
}

TEST(Backbone, UnselectedAdaptersLeaveTheTrainableSet) {
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  net.apply_selection({1, 4});
  Tape tape;
  BoundBackbone bound = net.bind(tape, TrainableGroups{});
  std::set<std::size_t> layers;
  for (const auto& id : bound.ids) {
    EXPECT_TRUE(id.kind == ParamId::kLoraA || id.kind == ParamId::kLoraB);
    layers.insert(id.layer);
  }
  EXPECT_EQ(layers, (std::set<std::size_t>{1, 4}));
  EXPECT_EQ(net.first_active_layer(), 1u);
}

TEST(Backbone, SelectionValidation) {
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  EXPECT_THROW(net.apply_selection({6}), RangeError);
  EXPECT_THROW(net.apply_selection({2, 2}), ContractError);
}

TEST(Backbone, TapeForwardMatchesEvaluate) {
  std::mt19937_64 rng(13);
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  for (std::size_t l = 0; l < 6; ++l) {
    net.layer(l).lora_b = random_tensor(rng, net.layer(l).lora_b.shape());
    net.layer(l).gate_raw = Tensor::scalar(0.1 * static_cast<double>(l));
  }
  const Tensor x = random_tensor(rng, {4, 16});
  Tape tape;
  BoundBackbone bound = net.bind(tape, TrainableGroups{});
  EXPECT_EQ(tape.value(net.forward(tape, bound, tape.leaf(x))), net.evaluate(x));
  // Splitting the stack at any layer gives the same result.
  for (std::size_t split = 0; split <= 6; ++split) {
    EXPECT_EQ(net.evaluate(net.evaluate(x, 0, split), split), net.evaluate(x));
  }
}

TEST(Backbone, ResetAdaptersIsSeededAndKeepsFrozenWeights) {
  std::mt19937_64 rng(14);
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  const Backbone original = net;
  for (std::size_t l = 0; l < 6; ++l) net.layer(l).lora_b = random_tensor(rng, net.layer(l).lora_b.shape());
  Backbone other = net;
  net.reset_adapters(5);
  other.reset_adapters(5);
  EXPECT_EQ(net, other);
  for (std::size_t l = 0; l < 6; ++l) {
    EXPECT_EQ(net.layer(l).weight, original.layer(l).weight);
    for (double v : net.layer(l).lora_b.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(15);
  Backbone net = Backbone::create(default_dims(), 8, 2.0, 3);
  for (std::size_t l = 0; l < 6; ++l) {
    net.layer(l).lora_b = random_tensor(rng, net.layer(l).lora_b.shape(), -1e-3, 1e-3);
    net.layer(l).gate_raw = Tensor::scalar(std::ldexp(1.0, -40) / 3.0);
  }
  net.apply_selection({0, 3, 5});
  const Backbone loaded = checkpoint_from_string(checkpoint_to_string(net));
  EXPECT_EQ(loaded, net);
  EXPECT_EQ(loaded.selection(), net.selection());

  const auto path = std::filesystem::temp_directory_path() / "bilalora_checkpoint_test.json";
  save_checkpoint(net, path.string());
  EXPECT_EQ(load_checkpoint(path.string()), net);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  EXPECT_THROW(checkpoint_from_string("{not json"), IoError);
  EXPECT_THROW(checkpoint_from_string(R"({"format": "something-else", "version": 1})"), IoError);
  Backbone net = Backbone::create({4, 6, 3}, 2, 2.0, 1);
  std::string text = checkpoint_to_string(net);
  // Drop one weight value so the data no longer matches its shape.
  const auto pos = text.find("\"data\": [");
  ASSERT_NE(pos, std::string::npos);
  const auto comma = text.find(',', pos);
  text.erase(pos + 9, comma - pos - 8);
  EXPECT_THROW(checkpoint_from_string(text), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/bilalora/checkpoint.json"), IoError);
}

}  // namespace
}  // namespace bilalora
