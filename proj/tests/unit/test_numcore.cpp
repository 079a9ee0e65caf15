#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <set>

#include "gradient_cases.hpp"
#include "lab/numcore/adam.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/numcore/kernels.hpp"
#include "lab/numcore/ops.hpp"
#include "lab/numcore/parallel.hpp"
#include "lab/numcore/rng.hpp"
#include "lab/numcore/tensor.hpp"

using namespace lab;
using lab::testing::gradcheck;
using lab::testing::random_tensor;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr int kGradSeeds = 10;

std::vector<float> values(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Rng, PhiloxKnownAnswer) {
  // Random123 known-answer vector for philox4x32-10 with zero key and counter.
  Rng rng(0, 0);
  EXPECT_EQ(rng.next_u32(), 0x6627e8d5u);
  EXPECT_EQ(rng.next_u32(), 0xe169c58du);
  EXPECT_EQ(rng.next_u32(), 0xbc57ac4cu);
  EXPECT_EQ(rng.next_u32(), 0x9b00dbd8u);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, ForkIsStableAndIndependent) {
  const Rng parent(7);
  Rng f1 = parent.fork(3), f2 = parent.fork(3), f3 = parent.fork(4);
  EXPECT_EQ(f1.next_u64(), f2.next_u64());
  EXPECT_NE(parent.fork(3).next_u64(), f3.next_u64());
}

TEST(Rng, UniformAndBelowRanges) {
  Rng rng(1);
  double total = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    total += u;
    ASSERT_LT(rng.below(7), 7u);
  }
  EXPECT_NEAR(total / 100000.0, 0.5, 0.01);
  EXPECT_THROW(rng.below(0), InputError);
}

TEST(Rng, CategoricalFollowsDistribution) {
  Rng rng(5);
  const std::vector<float> logp = {std::log(0.2f), std::log(0.8f)};
  int ones = 0;
  for (int i = 0; i < 20000; ++i) ones += rng.categorical_from_logprobs(logp) == 1;
  EXPECT_NEAR(ones / 20000.0, 0.8, 0.015);
}

TEST(Tensor, ConstructionInvariants) {
  EXPECT_THROW(Tensor::from_vector({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::from_vector({2, 0}, {}), DimensionError);
  EXPECT_THROW(Tensor::from_vector({1}, {std::numeric_limits<float>::quiet_NaN()}),
               TrainingDivergence);
  const Tensor t = Tensor::zeros({3, 4});
  EXPECT_EQ(t.numel(), 12u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Matmul, IdentityLeavesMatrix) {
  const Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, HandArithmetic) {
  const Tensor a = Tensor::from_vector({1, 2}, {1, 2});
  const Tensor b = Tensor::from_vector({2, 1}, {3, 4});
  EXPECT_EQ(matmul(a, b).item(), 11.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(11);
  Tensor a = random_tensor({5, 7}, rng);
  const Tensor b = random_tensor({7, 3}, rng, -1, 1, false);
  sum(matmul(a, b)).backward();
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < 7; ++k) {
      float expected = 0.0f;
      for (std::size_t j = 0; j < 3; ++j) expected += b.data()[k * 3 + j];
      EXPECT_NEAR(a.grad()[i * 7 + k], expected, 1e-6);
    }
  }
  Rng check_rng(12);
  const auto r = gradcheck(
      [](const auto& in) { return matmul(in[0], in[1]); },
      [](const auto& in) { return lab::testing::ref::matmul(in[0], in[1], 5, 7, 3); },
      {random_tensor({5, 7}, rng), random_tensor({7, 3}, rng)}, check_rng);
  EXPECT_LT(r.max_relative_error, kGradTolerance);
}

TEST(SoftmaxLogprobs, WorkedValues) {
  const float ln_half = std::log(0.5f);
  auto out = values(softmax_logprobs(Tensor::from_vector({2}, {0, 0})));
  EXPECT_NEAR(out[0], ln_half, 1e-7);
  EXPECT_NEAR(out[1], ln_half, 1e-7);
  out = values(softmax_logprobs(Tensor::from_vector({2}, {1000, 1000})));
  EXPECT_NEAR(out[0], ln_half, 1e-7);
  EXPECT_NEAR(out[1], ln_half, 1e-7);
  out = values(softmax_logprobs(Tensor::from_vector({2}, {0, std::log(3.0f)})));
  EXPECT_NEAR(out[0], std::log(0.25f), 1e-6);
  EXPECT_NEAR(out[1], std::log(0.75f), 1e-6);
}

TEST(SoftmaxLogprobs, RowsNormalizeForWideLogits) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({16, 64}, rng, -50, 50, false);
    const Tensor lp = softmax_logprobs(logits);
    for (std::size_t r = 0; r < 16; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 64; ++j) total += std::exp(lp.data()[r * 64 + j]);
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxLogprobs, RejectsSingletonVocabulary) {
  EXPECT_THROW(softmax_logprobs(Tensor::zeros({3, 1})), DimensionError);
}

// Every differentiable op against central finite differences, 10 seeds.
TEST(GradientSuite, AllOpsMatchFiniteDifferences) {
  for (const auto& c : lab::testing::numcore_gradient_cases()) {
    for (int seed = 0; seed < kGradSeeds; ++seed) {
      Rng rng(1000 + static_cast<std::uint64_t>(seed));
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng));
      const auto r = gradcheck(c.fn, c.reference, inputs, rng);
      EXPECT_LT(r.max_forward_error, 1e-5) << c.name << " seed " << seed;
      EXPECT_LT(r.max_relative_error, kGradTolerance)
          << c.name << " seed " << seed << " |g|=" << r.analytic_norm;
    }
  }
}

TEST(Autograd, TopologicalOrderPutsInputsFirst) {
  Rng rng(2);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  const Tensor c = matmul(a, b);
  const Tensor loss = sum(add(c, c));
  const auto graph = ComputeGraph::trace(loss);
  const auto& order = graph.order();
  auto position = [&](const Tensor& t) {
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (order[i].same_storage(t)) return i;
    }
    return order.size();
  };
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto* node = order[i].impl()->grad_fn.get();
    if (!node) continue;
    for (const Tensor& input : node->inputs) EXPECT_LT(position(input), i);
  }
  EXPECT_TRUE(order.back().same_storage(loss));
}

TEST(Autograd, BackwardPopulatesEveryReachableLeaf) {
  Rng rng(4);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  Tensor unused = random_tensor({2, 2}, rng);
  const Tensor frozen = random_tensor({2, 2}, rng, -1, 1, false);
  sum(add(matmul(a, b), frozen)).backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(unused.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Autograd, GradientsAccumulateAcrossMicroBatches) {
  Tensor w = Tensor::from_vector({2}, {1.0f, 2.0f}, true);
  weighted_sum(w, std::vector<float>{1.0f, 1.0f}).backward();
  weighted_sum(w, std::vector<float>{2.0f, 3.0f}).backward();
  EXPECT_EQ(values(Tensor::from_vector({2}, {w.grad()[0], w.grad()[1]})),
            (std::vector<float>{3.0f, 4.0f}));
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Tensor a = Tensor::from_vector({1}, {2.0f}, true);
  NoGradGuard guard;
  const Tensor b = scale(a, 3.0f);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.is_leaf());
}

TEST(Determinism, SameSeedBitIdenticalTensors) {
  auto run = [] {
    Rng rng(77);
    Tensor x = random_tensor({8, 16}, rng);
    Tensor w = random_tensor({12, 16}, rng);
    Rng drop_rng = rng.fork(1);
    return values(softmax_logprobs(gelu(dropout(linear(x, w), 0.2f, drop_rng))));
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
}

TEST(Kernels, AttentionRowMatchesBatchedOp) {
  // The incremental decoder relies on this parity.
  Rng rng(8);
  const Tensor q = random_tensor({4, 6}, rng, -1, 1, false);
  const Tensor k = random_tensor({4, 6}, rng, -1, 1, false);
  const Tensor v = random_tensor({4, 6}, rng, -1, 1, false);
  const Tensor out = causal_attention(q, k, v, 1, 4, 2);
  std::vector<float> probs(4), row(3);
  const float s = 1.0f / std::sqrt(3.0f);
  kernels::attend(q.data().data() + 3 * 6 + 3, k.data().data() + 3, v.data().data() + 3,
                  4, 3, 6, s, probs.data(), row.data());
  for (int j = 0; j < 3; ++j) EXPECT_EQ(row[j], out.data()[3 * 6 + 3 + j]);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p = Tensor::from_vector({3}, {1.0f, -2.0f, 0.5f}, true);
  Adam opt(AdamOptions{.learning_rate = 0.1f});
  opt.add_parameter("p", p);
  p.grad_slot();  // zero gradient
  opt.step();
  EXPECT_EQ(values(p), (std::vector<float>{1.0f, -2.0f, 0.5f}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::from_vector({1}, {3.0f}, true);
  Adam opt(AdamOptions{.learning_rate = 0.1f});
  opt.add_parameter("p", p);
  p.accumulate_grad(std::vector<float>{1.0f});
  opt.step();
  EXPECT_NEAR(p.item(), 2.9f, 1e-6);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(Adam, QuadraticConvergesLikeScalarRecurrence) {
  // Oracle: the textbook recurrence in double precision.
  double x = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 100; ++t) {
    const double g = 2.0 * x;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  ASSERT_LT(std::abs(x), 0.1);

  Tensor p = Tensor::from_vector({1}, {1.0f}, true);
  Adam opt(AdamOptions{.learning_rate = 0.05f});
  opt.add_parameter("x", p);
  for (int t = 0; t < 100; ++t) {
    opt.zero_grad();
    mul(p, p).backward();
    opt.step();
  }
  EXPECT_LT(std::abs(p.item()), 0.1f);
  EXPECT_NEAR(p.item(), x, 1e-4);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor good = Tensor::from_vector({1}, {1.0f}, true);
  Tensor bad = Tensor::from_vector({2}, {1.0f, 1.0f}, true);
  Adam opt;
  opt.add_parameter("layers.0.good", good);
  opt.add_parameter("layers.0.bad", bad);
  good.accumulate_grad(std::vector<float>{1.0f});
  bad.accumulate_grad(std::vector<float>{0.0f, std::numeric_limits<float>::infinity()});
  try {
    opt.step();
    FAIL() << "expected TrainingDivergence";
  } catch (const TrainingDivergence& e) {
    EXPECT_EQ(e.parameter(), "layers.0.bad");
  }
  EXPECT_EQ(good.item(), 1.0f);
  EXPECT_EQ(opt.step_count(), 0);
}

TEST(Parallel, ResultsIndependentOfWorkerCount) {
  std::vector<std::uint64_t> out(100);
  const Rng root(9);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = root.fork(i).next_u64(); });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], root.fork(i).next_u64());
}
