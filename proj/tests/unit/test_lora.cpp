#include <gtest/gtest.h>

#include <cstring>

#include "gradcheck.hpp"
#include "lab/lora/lora.hpp"
#include "lab/model/transformer.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"

using namespace lab;
using lab::testing::random_tensor;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

LoraAdapter random_adapter(std::size_t d, const LoraConfig& config, Rng& rng) {
  LoraAdapter adapter(d, d, config, rng);
  Tensor b = adapter.b();
  for (float& x : b.mutable_data()) x = static_cast<float>(rng.uniform(-0.5, 0.5));
  return adapter;
}

}  // namespace

TEST(LoraForward, ZeroBReproducesBaseBitwise) {
  Rng rng(1);
  const Tensor w = random_tensor({16, 16}, rng, -1, 1, false);
  const Tensor h = random_tensor({5, 16}, rng, -1, 1, false);
  LoraAdapter adapter(16, 16, LoraConfig{}, rng);
  EXPECT_TRUE(bitwise_equal(lora_forward(w, adapter, h, false, nullptr), linear(h, w)));
  Rng drop(2);
  EXPECT_TRUE(bitwise_equal(lora_forward(w, adapter, h, true, &drop), linear(h, w)));
}

TEST(LoraForward, HandArithmetic) {
  const LoraAdapter adapter(Tensor::from_vector({1, 2}, {1, 0}, true),
                            Tensor::from_vector({2, 1}, {1, 0}, true), 2.0f, 0.0f);
  const Tensor w = Tensor::zeros({2, 2});
  const Tensor h = Tensor::from_vector({1, 2}, {3, 4});
  const Tensor out = lora_forward(w, adapter, h, false, nullptr);
  EXPECT_EQ(out.data()[0], 6.0f);
  EXPECT_EQ(out.data()[1], 0.0f);
}

TEST(LoraForward, DefaultScaleIsExactlyEight) {
  Rng rng(3);
  const LoraAdapter adapter = random_adapter(16, LoraConfig{}, rng);
  EXPECT_EQ(adapter.scale(), 8.0f);
  const Tensor w = random_tensor({16, 16}, rng, -1, 1, false);
  const Tensor h = random_tensor({4, 16}, rng, -1, 1, false);
  const Tensor out = lora_forward(w, adapter, h, false, nullptr);
  const Tensor base = linear(h, w);
  const Tensor low = linear(linear(h, adapter.a()), adapter.b());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    EXPECT_EQ(out.data()[i], base.data()[i] + 8.0f * low.data()[i]);
  }
}

TEST(LoraForward, DoublingAlphaDoublesAdapterPath) {
  Rng rng(4);
  LoraAdapter adapter = random_adapter(16, LoraConfig{}, rng);
  const Tensor w = Tensor::zeros({16, 16});
  const Tensor h = random_tensor({4, 16}, rng, -1, 1, false);
  const Tensor once = lora_forward(w, adapter, h, false, nullptr);
  adapter.set_alpha(2.0f * adapter.alpha());
  const Tensor twice = lora_forward(w, adapter, h, false, nullptr);
  for (std::size_t i = 0; i < once.numel(); ++i) {
    EXPECT_EQ(twice.data()[i], 2.0f * once.data()[i]);
  }
}

TEST(LoraForward, GradientsReachAdapterButNotBase) {
  Rng rng(5);
  const Tensor w = random_tensor({8, 8}, rng, -1, 1, true);
  const LoraAdapter adapter = random_adapter(8, LoraConfig{4, 8.0f, 0.1f}, rng);
  const Tensor h = random_tensor({3, 8}, rng, -1, 1, false);
  Rng drop(6);
  sum(lora_forward(w, adapter, h, true, &drop)).backward();
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(adapter.a().has_grad());
  EXPECT_TRUE(adapter.b().has_grad());
}

TEST(LoraForward, DropoutOnlyTouchesAdapterPath) {
  Rng rng(7);
  const LoraAdapter adapter = random_adapter(16, LoraConfig::dropout_only(), rng);
  EXPECT_EQ(adapter.dropout(), 0.5f);
  const Tensor w = random_tensor({16, 16}, rng, -1, 1, false);
  const Tensor h = random_tensor({6, 16}, rng, -1, 1, false);
  const Tensor base = linear(h, w);
  Rng mask_rng(8), replay(8);
  const Tensor out = lora_forward(w, adapter, h, true, &mask_rng);
  const Tensor low = linear(linear(dropout(h, 0.5f, replay), adapter.a()), adapter.b());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    EXPECT_EQ(out.data()[i], base.data()[i] + adapter.scale() * low.data()[i]);
  }
  EXPECT_FALSE(bitwise_equal(out, lora_forward(w, adapter, h, false, nullptr)));
}

TEST(LoraForward, ShapeMismatchIsDimensionError) {
  Rng rng(9);
  const LoraAdapter adapter(8, 8, LoraConfig{2, 4.0f, 0.0f}, rng);
  EXPECT_THROW(lora_forward(Tensor::zeros({6, 6}), adapter, Tensor::zeros({1, 6}), false,
                            nullptr),
               DimensionError);
}

TEST(LoraAdapter, RankMustBeBelowWidth) {
  Rng rng(10);
  EXPECT_THROW(LoraAdapter(8, 8, LoraConfig{8, 64.0f, 0.1f}, rng), ConfigError);
  EXPECT_THROW(LoraAdapter(8, 8, LoraConfig{0, 64.0f, 0.1f}, rng), ConfigError);
}

TEST(LoraAdapter, InitializationZeroBAndCenteredA) {
  Rng rng(11);
  const LoraAdapter adapter(64, 64, LoraConfig{}, rng);
  double total = 0.0;
  for (float x : adapter.a().data()) {
    total += x;
    EXPECT_LE(std::abs(x), 0.125f);
  }
  EXPECT_NEAR(total / adapter.a().numel(), 0.0, 0.01);
  for (float x : adapter.b().data()) EXPECT_EQ(x, 0.0f);
}

TEST(CountTrainable, Llama7bGeometryBothModels) {
  const auto count =
      count_trainable(ModelConfig::llama7b(), AdapterPlacement{}, LoraConfig{});
  EXPECT_EQ(count.adapter_parameters, 16777216u);
  EXPECT_EQ(count.value_head_parameters, 4097u);
  EXPECT_EQ(count.total(), 16777216u + 4097u);
}

TEST(CountTrainable, ToyGeometryOneModel) {
  AdapterPlacement placement;
  placement.adapt_value = false;
  placement.full_tune_value_head = false;
  EXPECT_EQ(count_trainable(ModelConfig{}, placement, LoraConfig{}).total(), 8192u);
}

TEST(CountTrainable, MatchesInstantiatedAdapterSizes) {
  Rng rng(12);
  PolicyModel policy(ModelConfig{}, rng);
  policy.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  std::size_t n = 0;
  for (const auto& p : policy.trunk().adapter_parameters()) n += p.tensor.numel();
  AdapterPlacement one;
  one.adapt_value = false;
  one.full_tune_value_head = false;
  EXPECT_EQ(n, count_trainable(ModelConfig{}, one, LoraConfig{}).total());
}

TEST(MergeAdapter, HandArithmetic) {
  const LoraAdapter adapter(Tensor::from_vector({1, 2}, {1, 1}),
                            Tensor::from_vector({2, 1}, {1, 1}), 1.0f, 0.0f);
  const Tensor merged = merge_adapter(Tensor::from_vector({2, 2}, {1, 0, 0, 1}), adapter);
  EXPECT_EQ(std::vector<float>(merged.data().begin(), merged.data().end()),
            (std::vector<float>{2, 1, 1, 2}));
}

TEST(MergeAdapter, ZeroBLeavesWeightBitwise) {
  Rng rng(13);
  const Tensor w = random_tensor({16, 16}, rng, -1, 1, false);
  const LoraAdapter adapter(16, 16, LoraConfig{}, rng);
  EXPECT_TRUE(bitwise_equal(merge_adapter(w, adapter), w));
}

TEST(MergeAdapter, MergedModelMatchesAdaptedModel) {
  Rng rng(14);
  PolicyModel adapted(ModelConfig{}, rng);
  adapted.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  for (auto p : adapted.trunk().adapter_parameters()) {
    if (p.name.ends_with("lora_b")) {
      for (float& x : p.tensor.mutable_data()) x = static_cast<float>(rng.uniform(-0.05, 0.05));
    }
  }
  PolicyModel merged = adapted.clone();
  merged.trunk().merge_adapters();
  EXPECT_FALSE(merged.trunk().has_adapters());
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> tokens(1 + rng.below(20));
    for (int& t : tokens) t = static_cast<int>(rng.below(64));
    const Tensor a = adapted.forward_logprobs(tokens);
    const Tensor b = merged.forward_logprobs(tokens);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(AdapterExport, RecordsCarryRankAlphaAndShapes) {
  Rng rng(15);
  PolicyModel policy(ModelConfig{}, rng);
  policy.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  const auto records = policy.trunk().adapter_records();
  ASSERT_EQ(records.size(), 8u);
  EXPECT_EQ(records[0].name, "layers.0.wq");
  EXPECT_EQ(records[0].rank, 8u);
  EXPECT_EQ(records[0].alpha, 64.0f);
  EXPECT_EQ(records[0].a.shape(), (Shape{8, 64}));
  EXPECT_EQ(records[0].b.shape(), (Shape{64, 8}));
}
