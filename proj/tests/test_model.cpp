#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "midalign/model.hpp"

namespace {

using namespace midalign;

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = 30;
  c.max_seq_len = 16;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng, int vocab = 30) {
  std::uniform_int_distribution<TokenId> dist(1, vocab - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

AdapterSet<double> trained_like(const ModelConfig& c, std::uint64_t seed) {
  auto a = AdapterSet<double>::initialize(c, 4, 8.0, 0.0, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (auto& [name, f] : a.entries) {
    for (Eigen::Index i = 0; i < f.b.size(); ++i) f.b.data()[i] = normal(rng);
  }
  return a;
}

TEST(ComposedGradient, TaskPlusAlignmentMatchesFiniteDifferences) {
  auto problem = gradcheck::ComposedProblem::make(2, 16, 11);
  const auto stats = problem.check(1e-4, 1e-4, 5);
  EXPECT_GT(stats.checked, 1000u);
  EXPECT_GE(stats.fraction(), 0.99) << stats.within << "/" << stats.checked;
  EXPECT_LT(stats.max_rel, 1e-3) << stats.worst;
}

TEST(Model, ZeroBAdaptersAreTheIdentity) {
  const auto c = tiny_config();
  const auto model = Transformer<double>::random(c, 3);
  const auto adapters = AdapterSet<double>::initialize(c, 8, 16.0, 0.1, 4);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto tokens = random_tokens(1 + trial * 3, rng);
    const auto plain = model.run(tokens);
    const auto with = model.run(tokens, &adapters);
    EXPECT_TRUE((plain.logits.array() == with.logits.array()).all());
    for (std::size_t l = 0; l < plain.trace.states.size(); ++l) {
      EXPECT_TRUE((plain.trace.states[l].array() == with.trace.states[l].array()).all());
    }
  }
}

TEST(Model, LaterTokensNeverChangeEarlierLogits) {
  const auto c = tiny_config();
  const auto model = Transformer<double>::random(c, 8);
  const auto adapters = trained_like(c, 9);
  std::mt19937_64 rng(10);
  auto tokens = random_tokens(10, rng);
  const auto before = model.run(tokens, &adapters);
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    auto changed = tokens;
    changed[t] = changed[t] % 29 + 1;
    const auto after = model.run(changed, &adapters);
    const auto rows = static_cast<Eigen::Index>(t);
    EXPECT_TRUE((before.logits.topRows(rows).array() == after.logits.topRows(rows).array()).all()) << t;
    EXPECT_FALSE(before.logits.row(rows).isApprox(after.logits.row(rows)));
  }
}

TEST(Model, BatchedTracesMatchSingleRuns) {
  const auto c = tiny_config();
  const auto model = Transformer<double>::random(c, 12);
  const auto adapters = trained_like(c, 13);
  std::mt19937_64 rng(14);
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::vector<bool>> masks;
  for (std::size_t n : {3u, 7u, 1u, 5u}) {
    seqs.push_back(random_tokens(n, rng));
    masks.emplace_back(n, false);
  }
  const auto batched = model.traces(seqs, masks, &adapters);
  ASSERT_EQ(batched.size(), seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto single = model.run(seqs[i], &adapters).trace;
    for (std::size_t l = 0; l < single.states.size(); ++l) {
      EXPECT_TRUE(batched[i].states[l].isApprox(single.states[l], 1e-12)) << i << " layer " << l;
    }
  }
  // Reordering the batch permutes the outputs.
  std::vector<std::vector<TokenId>> reversed(seqs.rbegin(), seqs.rend());
  const auto back = model.traces(reversed, masks, &adapters);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    EXPECT_TRUE(back[seqs.size() - 1 - i].states.back().isApprox(batched[i].states.back(), 1e-12));
  }
}

TEST(Model, SingleTokenTraceShape) {
  const auto c = tiny_config();
  const auto model = Transformer<double>::random(c, 1);
  const std::vector<TokenId> one{7};
  const auto out = model.run(one);
  EXPECT_EQ(out.trace.num_layers(), static_cast<std::size_t>(c.num_layers + 1));
  EXPECT_EQ(out.trace.num_positions(), 1);
  EXPECT_EQ(out.logits.rows(), 1);
  EXPECT_EQ(out.logits.cols(), c.vocab_size);
}

TEST(Model, EvalModeIsDeterministic) {
  const auto c = tiny_config();
  const auto model = Transformer<float>::random(c, 21);
  const auto adapters = trained_like(c, 22).cast<float>();
  std::mt19937_64 rng(23);
  const auto tokens = random_tokens(9, rng);
  const auto a = model.run(tokens, &adapters);
  const auto b = model.run(tokens, &adapters);
  EXPECT_TRUE((a.logits.array() == b.logits.array()).all());
}

TEST(Model, TrainModeDropoutChangesOutputsOnlyWithAdapters) {
  const auto c = tiny_config();
  const auto model = Transformer<double>::random(c, 31);
  auto adapters = trained_like(c, 32);
  adapters.dropout = 0.5;
  std::mt19937_64 rng(33);
  const auto tokens = random_tokens(6, rng);
  std::mt19937_64 r1(1), r2(1);
  const auto a = model.run(tokens, &adapters, Mode::kTrain, &r1);
  const auto b = model.run(tokens, &adapters, Mode::kTrain, &r2);
  EXPECT_TRUE((a.logits.array() == b.logits.array()).all());
  const auto eval = model.run(tokens, &adapters);
  EXPECT_FALSE(a.logits.isApprox(eval.logits));
}

TEST(Model, OutOfRangeTokenIsAnInputError) {
  const auto c = tiny_config();
  const auto model = Transformer<double>::random(c, 1);
  const std::vector<TokenId> bad{1, c.vocab_size};
  EXPECT_THROW(model.run(bad), InputError);
  const std::vector<TokenId> negative{-1};
  EXPECT_THROW(model.run(negative), InputError);
}

TEST(Model, AdapterInitialisationScales) {
  ModelConfig c = tiny_config();
  c.hidden_dim = 64;
  c.ffn_dim = 256;
  const auto a = AdapterSet<double>::initialize(c, 8, 16.0, 0.1, 5);
  EXPECT_EQ(a.entries.size(), 7u * 2);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& [name, f] : a.entries) {
    EXPECT_TRUE((f.b.array() == 0.0).all()) << name;
    sum += f.a.sum();
    sq += f.a.squaredNorm();
    n += static_cast<std::size_t>(f.a.size());
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sd, 1.0 / std::sqrt(8.0), 0.01);
  EXPECT_DOUBLE_EQ(a.scaling(), 2.0);
}

TEST(Model, AdapterConfigMismatchNamesTheEntry) {
  const auto c = tiny_config();
  const auto a = AdapterSet<double>::initialize(c, 4, 8.0, 0.1, 1);
  ModelConfig wider = c;
  wider.ffn_dim = 48;
  try {
    a.check_compatible(wider);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0."), std::string::npos) << e.what();
  }
  ModelConfig deeper = c;
  deeper.num_layers = 3;
  EXPECT_THROW(a.check_compatible(deeper), FormatError);
}

TEST(Model, AdapterEntryNames) {
  EXPECT_EQ(adapter_entry_name(3, "value"), "layers.3.value");
  const auto c = tiny_config();
  EXPECT_EQ(projection_shape(c, "gate"), std::make_pair(32, 16));
  EXPECT_EQ(projection_shape(c, "down"), std::make_pair(16, 32));
}

TEST(Model, ConfigValidation) {
  ModelConfig c = tiny_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, PackedSequencesTooLongAreRejected) {
  const auto c = tiny_config();
  std::vector<std::vector<TokenId>> seqs{std::vector<TokenId>(static_cast<std::size_t>(c.max_seq_len) + 1, 5)};
  EXPECT_THROW(pack_sequences(seqs, c), InputError);
}

// ---------------------------------------------------------------------------
// Pooling

HiddenTrace<double> trace_of(Matrix<double> states, std::vector<bool> pad) {
  HiddenTrace<double> t;
  t.states.push_back(std::move(states));
  t.pad_mask = std::move(pad);
  return t;
}

TEST(Pooling, ConstantStatesPoolToTheConstant) {
  RowVector<double> v(4);
  v << 0.5, -1.25, 3.0, 2.0;
  Matrix<double> s = v.replicate(5, 1);
  const auto p = pool_mean(trace_of(s, std::vector<bool>(5, false)), 0);
  EXPECT_TRUE((p.vector.array() == v.array()).all());
}

TEST(Pooling, OppositeVectorsPoolToZero) {
  RowVector<double> v(3);
  v << 1.5, -2.0, 0.25;
  Matrix<double> s(2, 3);
  s.row(0) = v;
  s.row(1) = -v;
  const auto p = pool_mean(trace_of(s, {false, false}), 0);
  EXPECT_TRUE((p.vector.array() == 0.0).all());
}

TEST(Pooling, MatchesNaiveSumOracle) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution pad(0.3);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> s(5, 6);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = normal(rng);
    std::vector<bool> mask(5);
    for (std::size_t i = 0; i < 5; ++i) mask[i] = pad(rng);
    mask[static_cast<std::size_t>(trial % 5)] = false;
    const auto p = pool_mean(trace_of(s, mask), 0);
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      double acc = 0.0;
      int count = 0;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) {
          acc += s(r, c);
          ++count;
        }
      }
      const double expected = acc / count;
      EXPECT_LE(std::abs(p.vector(c) - expected), 1e-12 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(Pooling, PermutationInvariant) {
  std::mt19937_64 rng(3);
  Matrix<double> s = Matrix<double>::Random(6, 4);
  std::vector<Eigen::Index> order{0, 1, 2, 3, 4, 5};
  std::shuffle(order.begin(), order.end(), rng);
  Matrix<double> shuffled(6, 4);
  for (Eigen::Index i = 0; i < 6; ++i) shuffled.row(i) = s.row(order[static_cast<std::size_t>(i)]);
  const auto a = pool_mean(trace_of(s, std::vector<bool>(6, false)), 0);
  const auto b = pool_mean(trace_of(shuffled, std::vector<bool>(6, false)), 0);
  EXPECT_TRUE(a.vector.isApprox(b.vector, 1e-14));
}

TEST(Pooling, AllPadIsAnInputError) {
  EXPECT_THROW(pool_mean(trace_of(Matrix<double>::Ones(3, 2), {true, true, true}), 0), InputError);
}

}  // namespace
