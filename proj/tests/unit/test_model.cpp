#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "lab/model/sampling.hpp"
#include "lab/model/transformer.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"

using namespace lab;

namespace {

std::vector<int> random_tokens(std::size_t n, Rng& rng, std::size_t vocab = 64) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

void fill(Tensor t, float value) {
  for (float& x : t.mutable_data()) x = value;
}

void randomize_adapters(Transformer& trunk, Rng& rng) {
  for (auto p : trunk.adapter_parameters()) {
    if (p.name.ends_with("lora_b")) {
      for (float& x : p.tensor.mutable_data()) x = static_cast<float>(rng.uniform(-0.05, 0.05));
    }
  }
}

// Residual stream reduced to a constant vector: every hidden state is the
// same, so the next-token distribution is fixed by the unembedding alone.
PolicyModel constant_context_model(int forced, double logit) {
  Rng rng(5);
  PolicyModel model(ModelConfig{}, rng);
  Transformer& trunk = model.trunk();
  for (auto p : trunk.base_parameters()) {
    if (p.name == "tok_emb") {
      for (std::size_t i = 0; i < p.tensor.numel(); ++i) {
        p.tensor.mutable_data()[i] = (i % 64 == 0) ? 1.0f : 0.0f;
      }
    } else if (p.name == "pos_emb" || p.name.ends_with(".wo") || p.name.ends_with(".w2") ||
               p.name.ends_with(".b2")) {
      fill(p.tensor, 0.0f);
    }
  }
  // Normalized hidden state is c * e_0 with c = 1 / sqrt(1/64 + eps).
  const double c = 1.0 / std::sqrt(1.0 / 64.0 + kNormEps);
  Tensor unembed = model.unembedding();
  fill(unembed, 0.0f);
  unembed.mutable_data()[static_cast<std::size_t>(forced) * 64] =
      static_cast<float>(logit / c);
  return model;
}

}  // namespace

TEST(ForwardLogprobs, ZeroUnembeddingGivesUniformRows) {
  Rng rng(1);
  PolicyModel model(ModelConfig{}, rng);
  fill(model.unembedding(), 0.0f);
  const Tensor lp = model.forward_logprobs(random_tokens(9, rng));
  for (float x : lp.data()) EXPECT_NEAR(x, std::log(1.0f / 64.0f), 1e-6);
}

TEST(ForwardLogprobs, RowsNormalize) {
  Rng rng(2);
  PolicyModel model(ModelConfig{}, rng);
  const Tensor lp = model.forward_logprobs(random_tokens(30, rng));
  for (std::size_t r = 0; r < 30; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 64; ++j) total += std::exp(lp.data()[r * 64 + j]);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(ForwardLogprobs, FutureTokensDoNotAffectEarlierRows) {
  Rng rng(3);
  PolicyModel model(ModelConfig{}, rng);
  model.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  randomize_adapters(model.trunk(), rng);
  for (int trial = 0; trial < 10; ++trial) {
    auto tokens = random_tokens(16, rng);
    const std::size_t t = rng.below(12);
    const Tensor before = model.forward_logprobs(tokens);
    tokens[t + 3] = (tokens[t + 3] + 1 + static_cast<int>(rng.below(63))) % 64;
    const Tensor after = model.forward_logprobs(tokens);
    EXPECT_EQ(std::memcmp(before.data().data(), after.data().data(),
                          (t + 1) * 64 * sizeof(float)),
              0);
  }
}

TEST(ForwardLogprobs, PaddedBatchMatchesSingleSequences) {
  Rng rng(4);
  PolicyModel model(ModelConfig{}, rng);
  const std::vector<std::vector<int>> seqs = {random_tokens(5, rng), random_tokens(11, rng),
                                              random_tokens(8, rng)};
  const TokenBatch batch = TokenBatch::pack(seqs);
  const Tensor lp = model.forward_logprobs(batch);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const Tensor single = model.forward_logprobs(seqs[b]);
    EXPECT_EQ(std::memcmp(single.data().data(), lp.data().data() + batch.row(b, 0) * 64,
                          single.numel() * sizeof(float)),
              0);
  }
}

TEST(ForwardLogprobs, OutOfRangeTokenIsVocabularyError) {
  Rng rng(5);
  PolicyModel model(ModelConfig{}, rng);
  EXPECT_THROW(model.forward_logprobs(std::vector<int>{1, 64}), VocabularyError);
  EXPECT_THROW(model.forward_logprobs(std::vector<int>{-1}), VocabularyError);
}

TEST(ForwardLogprobs, OverlongSequenceIsLengthError) {
  Rng rng(6);
  ModelConfig config;
  config.max_seq_len = 8;
  PolicyModel model(config, rng);
  EXPECT_THROW(model.forward_logprobs(random_tokens(9, rng)), LengthError);
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig config;
  config.n_heads = 5;
  EXPECT_THROW(config.validate(), ConfigError);
  config = ModelConfig{};
  config.vocab_size = 1;
  EXPECT_THROW(config.validate(), ConfigError);
}

TEST(Decoder, StepRowsEqualBatchedRowsBitwise) {
  Rng rng(7);
  PolicyModel model(ModelConfig{}, rng);
  model.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  randomize_adapters(model.trunk(), rng);
  const auto tokens = random_tokens(20, rng);
  const Tensor full = model.forward_logprobs(tokens);
  IncrementalDecoder decoder(model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = decoder.step(tokens[t]);
    EXPECT_EQ(std::memcmp(row.data(), full.data().data() + t * 64, 64 * sizeof(float)), 0)
        << "position " << t;
  }
}

TEST(SampleResponse, LogprobsMatchScoringForward) {
  Rng rng(8);
  PolicyModel model(ModelConfig{}, rng);
  const std::vector<int> prompt = {1, 4, 9, 10, 2};
  Rng sampler(9);
  const auto response = sample_response(model, prompt, sampler, {12, 1.0f, false});
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), response.tokens.begin(), response.tokens.end());
  const Tensor lp = model.forward_logprobs(seq);
  for (std::size_t i = 0; i < response.tokens.size(); ++i) {
    const std::size_t row = prompt.size() - 1 + i;
    EXPECT_EQ(response.logprobs[i], lp.data()[row * 64 + response.tokens[i]]);
  }
}

TEST(SampleResponse, GreedyEqualsIteratedArgmax) {
  Rng rng(10);
  PolicyModel model(ModelConfig{}, rng);
  const std::vector<int> prompt = {1, 5, 20, 31, 2};
  Rng unused(0);
  const auto greedy = sample_response(model, prompt, unused, {10, 1.0f, true});
  std::vector<int> seq = prompt;
  for (std::size_t i = 0; i < greedy.tokens.size(); ++i) {
    const Tensor lp = model.forward_logprobs(seq);
    const float* row = lp.data().data() + (seq.size() - 1) * 64;
    const int arg = static_cast<int>(std::max_element(row, row + 64) - row);
    EXPECT_EQ(greedy.tokens[i], arg);
    seq.push_back(arg);
  }
  EXPECT_TRUE(greedy.tokens.size() == 10 || greedy.tokens.back() == 3);
}

TEST(SampleResponse, SameSeedSameSequence) {
  Rng rng(11);
  PolicyModel model(ModelConfig{}, rng);
  Rng a(12), b(12);
  const auto ra = sample_response(model, {1, 4, 8, 2}, a, {16, 0.7f, false});
  const auto rb = sample_response(model, {1, 4, 8, 2}, b, {16, 0.7f, false});
  EXPECT_EQ(ra.tokens, rb.tokens);
  EXPECT_EQ(ra.logprobs, rb.logprobs);
}

TEST(SampleResponse, ForcedTokenFrequencyWithinBinomialBound) {
  // p = 0.99 for token 7 among 64: logit ln(0.99 * 63 / 0.01).
  const PolicyModel model = constant_context_model(7, std::log(0.99 * 63 / 0.01));
  const Tensor lp = model.forward_logprobs(std::vector<int>{1, 2});
  EXPECT_NEAR(std::exp(lp.data()[7]), 0.99, 1e-5);
  Rng rng(13);
  int hits = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto r = sample_response(model, {1, 2}, rng, {1, 1.0f, false});
    hits += r.tokens[0] == 7 ? 1 : 0;
  }
  EXPECT_GE(hits, 970);
  EXPECT_LE(hits, 1000);
}

TEST(SampleResponse, StopsAtEosAndRespectsContextLimit) {
  const PolicyModel eos_model = constant_context_model(3, 50.0);
  Rng rng(14);
  const auto r = sample_response(eos_model, {1, 2}, rng, {10, 1.0f, false});
  EXPECT_EQ(r.tokens, std::vector<int>{3});

  ModelConfig config;
  config.max_seq_len = 6;
  Rng init(15);
  PolicyModel small(config, init);
  fill(small.unembedding(), 0.0f);
  const auto capped = sample_response(small, {1, 2, 4}, rng, {50, 1.0f, false});
  EXPECT_LE(capped.tokens.size(), 3u);
  EXPECT_THROW(sample_response(small, {1, 2, 3, 4, 5, 6}, rng, {5, 1.0f, false}), LengthError);
  EXPECT_THROW(sample_response(small, {1}, rng, {0, 1.0f, false}), InputError);
  EXPECT_THROW(sample_response(small, {1}, rng, {1, 0.0f, false}), InputError);
}

TEST(ForwardValues, ZeroHeadGivesZero) {
  Rng rng(16);
  ValueModel model(ModelConfig{}, rng);
  const Tensor v = model.forward_values(TokenBatch::pack({random_tokens(7, rng)}));
  EXPECT_EQ(v.shape(), (Shape{7, 1}));
  for (float x : v.data()) EXPECT_EQ(x, 0.0f);
}

TEST(ForwardValues, BiasOnlyHeadGivesBias) {
  Rng rng(17);
  ValueModel model(ModelConfig{}, rng);
  fill(model.head_bias(), 1.5f);
  const Tensor v = model.forward_values(TokenBatch::pack({random_tokens(7, rng)}));
  for (float x : v.data()) EXPECT_EQ(x, 1.5f);
}

TEST(ForwardValues, MeanValueGradientMatchesFiniteDifferences) {
  Rng rng(18);
  ValueModel model(ModelConfig{}, rng);
  for (float& x : Tensor(model.head_weight()).mutable_data()) {
    x = static_cast<float>(rng.uniform(-0.3, 0.3));
  }
  const TokenBatch batch = TokenBatch::pack({random_tokens(12, rng), random_tokens(12, rng)});
  Tensor hidden;
  {
    NoGradGuard guard;
    hidden = model.trunk().hidden(batch);
  }
  const std::vector<double> h(hidden.data().begin(), hidden.data().end());
  const std::size_t n = hidden.dim(0), d = hidden.dim(1);
  const auto r = lab::testing::gradcheck(
      [&](const std::vector<Tensor>& in) {
        return mean(add_bias(linear(hidden, in[0]), in[1]));
      },
      [&](const std::vector<lab::testing::Vec>& in) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          double v = in[1][0];
          for (std::size_t j = 0; j < d; ++j) v += h[i * d + j] * in[0][j];
          total += v;
        }
        return lab::testing::Vec{total / static_cast<double>(n)};
      },
      {model.head_weight().clone(), model.head_bias().clone()}, rng);
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_LT(r.max_forward_error, 1e-5);

  // The same gradient through the model's own path.
  mean(model.forward_values(batch)).backward();
  ASSERT_TRUE(model.head_weight().has_grad());
  for (std::size_t j = 0; j < d; ++j) {
    double expected = 0.0;
    for (std::size_t i = 0; i < n; ++i) expected += h[i * d + j];
    EXPECT_NEAR(model.head_weight().grad()[j], expected / n, 1e-5);
  }
}

TEST(Checkpointless, CloneIsIndependentAndIdentical) {
  Rng rng(19);
  PolicyModel model(ModelConfig{}, rng);
  PolicyModel copy = model.clone();
  const auto tokens = random_tokens(10, rng);
  const Tensor a = model.forward_logprobs(tokens);
  const Tensor b = copy.forward_logprobs(tokens);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)), 0);
  const auto pa = model.parameters();
  const auto pb = copy.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_FALSE(pa[i].tensor.same_storage(pb[i].tensor));
  }
}

TEST(Freezing, BaseParametersCanBeFrozen) {
  Rng rng(20);
  PolicyModel model(ModelConfig{}, rng);
  model.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  model.set_base_trainable(false);
  for (const auto& p : model.trainable_parameters()) {
    EXPECT_TRUE(p.name.find("lora_") != std::string::npos) << p.name;
  }
  EXPECT_EQ(model.trainable_parameters().size(), 16u);
  Rng drop(21);
  ForwardOptions options{true, &drop};
  const TokenBatch batch = TokenBatch::pack({random_tokens(6, rng)});
  sum(model.forward_logprobs(batch, options)).backward();
  for (const auto& p : model.parameters()) {
    if (p.name.find("lora_") == std::string::npos) {
      EXPECT_FALSE(p.tensor.has_grad()) << p.name;
    }
  }
}
