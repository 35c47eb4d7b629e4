#include "upt/tiny_mlm.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "support.hpp"
#include "upt/error.hpp"

using namespace upt;
using upt::testing::random_batch;

namespace {

ModelConfig small_config(std::size_t vocab = 60) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = 32;
  c.layers = 2;
  c.heads = 2;
  c.max_len = 16;
  return c;
}

// Zero-layer, untied model whose scores are exactly `bias` for any input.
TinyMlm constant_head(std::vector<double> bias) {
  ModelConfig c;
  c.vocab_size = bias.size();
  c.dim = 2;
  c.layers = 0;
  c.heads = 1;
  c.max_len = 4;
  c.tie_output = false;
  auto m = TinyMlm::init(c, 1);
  auto p = m.params();
  const auto& L = m.layout();
  std::fill(p.begin() + static_cast<std::ptrdiff_t>(L.out_w),
            p.begin() + static_cast<std::ptrdiff_t>(L.out_w + bias.size() * c.dim), 0.0);
  std::copy(bias.begin(), bias.end(), p.begin() + static_cast<std::ptrdiff_t>(L.out_b));
  return m;
}

AugmentedSample fixed_sample(TokenId target) {
  AugmentedSample s;
  s.token_ids = {0, 1, 0};
  s.mask_index = 1;
  s.candidate_word_ids = {0, 1};
  s.target_word_id = target;
  s.gold_label_index = static_cast<std::size_t>(target);
  return s;
}

// Spreads parameters so every block carries gradients well above roundoff.
TinyMlm perturbed(const ModelConfig& c, std::uint64_t seed) {
  auto m = TinyMlm::init(c, seed);
  Rng rng(seed + 99);
  for (auto& v : m.params()) v += rng.normal(0.0, 0.3);
  return m;
}

}  // namespace

TEST(TinyMlmInit, SameSeedIsBitIdentical) {
  const auto c = small_config();
  EXPECT_EQ(TinyMlm::init(c, 7), TinyMlm::init(c, 7));
  EXPECT_NE(TinyMlm::init(c, 7).digest(), TinyMlm::init(c, 8).digest());
}

TEST(TinyMlmInit, HeadsMustDivideDim) {
  auto c = small_config();
  c.dim = 64;
  c.heads = 3;
  EXPECT_THROW(TinyMlm::init(c, 0), ValidationError);
}

TEST(TinyMlmInit, GainsOnesBiasesZeros) {
  const auto m = TinyMlm::init(small_config(), 3);
  for (const auto& b : m.layout().blocks) {
    const auto first = m.params()[b.offset];
    if (b.name.ends_with("ln1_g") || b.name == "lnf_g") EXPECT_EQ(first, 1.0) << b.name;
    if (b.name.ends_with(".bq") || b.name.ends_with(".b1") || b.name == "out_b") EXPECT_EQ(first, 0.0) << b.name;
    if (b.name == "tok_emb") EXPECT_NE(first, 0.0);
  }
}

TEST(TinyMlmForward, ZeroLayerModelRuns) {
  auto c = small_config();
  c.layers = 0;
  const auto m = TinyMlm::init(c, 1);
  Rng rng(2);
  const auto d = forward(m, upt::testing::random_sample(rng, c.vocab_size, 8));
  EXPECT_EQ(d.scores.size(), c.vocab_size);
}

TEST(TinyMlmForward, ProbabilitiesSumToOne) {
  const auto c = small_config();
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = perturbed(c, static_cast<std::uint64_t>(trial));
    const auto d = forward(m, upt::testing::random_sample(rng, c.vocab_size, 1 + rng.uniform_index(16)));
    double sum = 0.0;
    for (const double p : d.probs) {
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(TinyMlmForward, LengthOverflowIsRejected) {
  const auto m = TinyMlm::init(small_config(), 0);
  Rng rng(0);
  EXPECT_THROW(forward(m, upt::testing::random_sample(rng, 60, 17)), ValidationError);
}

TEST(TinyMlmForward, HandSetHeadScores) {
  EXPECT_NEAR(forward(constant_head({0.0, 0.0}), fixed_sample(0)).probs[0], 0.5, 1e-15);
  const auto d = forward(constant_head({0.0, std::log(3.0)}), fixed_sample(0));
  EXPECT_NEAR(d.probs[0], 0.25, 1e-12);
  EXPECT_NEAR(d.probs[1], 0.75, 1e-12);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(10), shifted(10);
    const double shift = rng.normal(0.0, 50.0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = rng.normal(0.0, 5.0);
      shifted[i] = s[i] + shift;
    }
    const auto a = softmax(s);
    const auto b = softmax(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    const std::vector<TokenId> cand{1, 4, 7};
    EXPECT_EQ(classify(a, cand), classify(b, cand));
  }
}

TEST(Softmax, HugeScoresStayFinite) {
  const auto p = softmax(std::vector<double>{1000.0, 1000.0, -1000.0});
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Loss, QuarterProbabilityGivesLnFour) {
  const std::vector<AugmentedSample> batch{fixed_sample(0)};
  EXPECT_NEAR(loss_supervised(constant_head({0.0, std::log(3.0)}), batch, false), std::log(4.0),
              1e-12);
  EXPECT_NEAR(loss_ksmlm(constant_head({0.0, 0.0}), batch), std::log(2.0), 1e-12);
}

TEST(Loss, PerfectPredictionIsZero) {
  const std::vector<AugmentedSample> batch{fixed_sample(0)};
  EXPECT_NEAR(loss_supervised(constant_head({0.0, -800.0}), batch, false), 0.0, 1e-300);
}

TEST(Loss, KsmlmMatchesUnweightedSupervised) {
  const auto m = perturbed(small_config(), 4);
  Rng rng(4);
  const auto batch = random_batch(rng, 6, 60, 4, 12);
  EXPECT_EQ(loss_ksmlm(m, batch), loss_supervised(m, batch, false));
}

TEST(Loss, TotalCombinesTerms) {
  // probs (e^-1, rest, e^-2): supervised target 0 costs 1, KSMLM target 2 costs 2.
  const double p0 = std::exp(-1.0), p2 = std::exp(-2.0);
  const auto m = constant_head({std::log(p0), std::log(1.0 - p0 - p2), std::log(p2)});
  const std::vector<AugmentedSample> sup{fixed_sample(0)};
  auto ks_sample = fixed_sample(0);
  ks_sample.target_word_id = 2;
  const std::vector<AugmentedSample> ks{ks_sample};
  const auto r = total_loss(m, sup, ks, 0.1, false);
  EXPECT_NEAR(r.supervised, 1.0, 1e-12);
  EXPECT_NEAR(r.ksmlm, 2.0, 1e-12);
  EXPECT_NEAR(r.total, 1.2, 1e-12);
  const auto zero = total_loss(m, sup, ks, 0.0, false);
  EXPECT_EQ(zero.total, loss_supervised(m, sup, false));
  const auto empty = total_loss(m, sup, {}, 0.5, false);
  EXPECT_EQ(empty.total, empty.supervised);
}

TEST(Loss, EqualTermsWithUnitLambdaDouble) {
  const auto m = perturbed(small_config(), 6);
  Rng rng(6);
  const auto batch = random_batch(rng, 4, 60, 4, 10);
  const auto r = total_loss(m, batch, batch, 1.0, false);
  EXPECT_NEAR(r.total, 2.0 * r.supervised, 1e-12);
}

TEST(Loss, WeightingIdentities) {
  const auto m = perturbed(small_config(), 8);
  Rng rng(8);
  auto batch = random_batch(rng, 8, 60, 4, 12);
  EXPECT_EQ(loss_supervised(m, batch, true), loss_supervised(m, batch, false));
  const double unweighted = loss_supervised(m, batch, false);
  for (const std::size_t datasets : {2, 3, 7}) {
    for (auto& s : batch) s.weight = 1.0 / static_cast<double>(datasets);
    EXPECT_NEAR(loss_supervised(m, batch, true), unweighted / static_cast<double>(datasets), 1e-9);
  }
}

TEST(GradCheck, BackwardMatchesFiniteDifferences) {
  const auto c = small_config();
  const auto m = perturbed(c, 21);
  Rng rng(21);
  auto sup = random_batch(rng, 3, c.vocab_size, 5, 12, 0.4);
  const auto ks = random_batch(rng, 2, c.vocab_size, 5, 12);
  GradCheckOptions opt;
  opt.subset = 3000;
  opt.seed = 3;
  const auto r = grad_check(m, sup, ks, opt);
  EXPECT_GE(r.checked, 3000u);
  EXPECT_LT(r.max_rel_error, 1e-4) << "worst block " << r.worst_block;
}

TEST(GradCheck, UntiedHeadAndZeroLayers) {
  auto c = small_config(20);
  c.dim = 8;
  c.layers = 1;
  c.tie_output = false;
  const auto m = perturbed(c, 5);
  Rng rng(5);
  const auto sup = random_batch(rng, 3, c.vocab_size, 3, 8);
  GradCheckOptions opt;
  opt.weighted = false;
  const auto r = grad_check(m, sup, {}, opt);
  EXPECT_EQ(r.checked, m.num_params());
  EXPECT_LT(r.max_rel_error, 1e-4) << "worst block " << r.worst_block;
}

TEST(GradCheck, InjectedFaultIsDetected) {
  const auto c = small_config();
  const auto m = perturbed(c, 21);
  Rng rng(21);
  const auto sup = random_batch(rng, 3, c.vocab_size, 5, 12);
  const auto ks = random_batch(rng, 2, c.vocab_size, 5, 12);
  const auto wq = m.layout().layers[1].wq + 37;
  GradCheckOptions opt;
  opt.subset = 600;
  opt.fault = std::pair{wq, 2.0};
  const auto r = grad_check(m, sup, ks, opt);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-3);
  EXPECT_EQ(r.worst_index, wq);
  EXPECT_EQ(r.worst_block, "layer1.wq");
}

TEST(GradCheck, RejectsBadRequests) {
  const auto m = TinyMlm::init(small_config(), 0);
  Rng rng(0);
  const auto sup = random_batch(rng, 1, 60, 3, 5);
  GradCheckOptions opt;
  opt.subset = 0;
  EXPECT_THROW(grad_check(m, sup, {}, opt), ValidationError);
  opt.subset = 10;
  opt.epsilon = 1e-2;
  EXPECT_THROW(grad_check(m, sup, {}, opt), ValidationError);
}

TEST(GradCheck, ThreadCountDoesNotChangeGradients) {
  const auto c = small_config();
  const auto m = perturbed(c, 2);
  Rng rng(2);
  const auto sup = random_batch(rng, 7, c.vocab_size, 3, 14);
  std::vector<double> g1(m.num_params()), g4(m.num_params());
  set_thread_count(1);
  const auto r1 = total_loss_and_grad(m, sup, sup, 0.1, false, g1);
  set_thread_count(4);
  const auto r4 = total_loss_and_grad(m, sup, sup, 0.1, false, g4);
  set_thread_count(1);
  EXPECT_EQ(r1.total, r4.total);
  EXPECT_EQ(g1, g4);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamOptimizer adam(2, 0.1);
  std::vector<double> p{1.0, -1.0};
  const std::vector<double> g{3.0, -0.5};
  adam.step(p, g);
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_NEAR(p[1], -0.9, 1e-8);
}

TEST(Adam, MinimizesQuadratic) {
  AdamOptimizer adam(1, 0.05);
  std::vector<double> x{5.0};
  for (int i = 0; i < 2000; ++i) {
    const std::vector<double> g{2.0 * (x[0] - 2.0)};
    adam.step(x, g);
  }
  EXPECT_NEAR(x[0], 2.0, 1e-3);
}

namespace {

// Class 0 sentences use ids 10..19, class 1 ids 20..29; label words 5 and 6.
std::vector<AugmentedSample> separable_pool(Rng& rng, std::size_t n) {
  std::vector<AugmentedSample> pool;
  for (std::size_t i = 0; i < n; ++i) {
    AugmentedSample s;
    const auto label = i % 2;
    s.token_ids.push_back(2);
    for (int t = 0; t < 5; ++t) {
      s.token_ids.push_back(static_cast<TokenId>(10 + 10 * label + rng.uniform_index(10)));
    }
    s.token_ids.push_back(4);
    s.token_ids.push_back(3);
    s.mask_index = 6;
    s.candidate_word_ids = {5, 6};
    s.gold_label_index = label;
    s.target_word_id = s.candidate_word_ids[label];
    s.source_dataset = "toy";
    pool.push_back(std::move(s));
  }
  return pool;
}

}  // namespace

TEST(Train, ZeroStepsLeavesParametersUnchanged) {
  auto c = small_config(32);
  auto m = TinyMlm::init(c, 1);
  const auto before = m;
  Rng rng(1);
  const std::vector<std::vector<AugmentedSample>> pools{separable_pool(rng, 10)};
  TrainConfig tc;
  tc.steps = 0;
  const auto plan = SamplerPlan::make({"toy"}, {10}, 0.001, MixMode::stratified);
  EXPECT_TRUE(train(m, pools, {}, plan, tc).empty());
  EXPECT_EQ(m, before);
}

TEST(Train, DescendsAndIsDeterministic) {
  auto c = small_config(32);
  c.dim = 16;
  Rng rng(1);
  const std::vector<std::vector<AugmentedSample>> pools{separable_pool(rng, 40)};
  const auto plan = SamplerPlan::make({"toy"}, {40}, 0.001, MixMode::stratified);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 8;
  tc.seed = 9;
  tc.learning_rate = 3e-3;
  auto a = TinyMlm::init(c, 2);
  auto b = TinyMlm::init(c, 2);
  const auto curve_a = train(a, pools, {}, plan, tc);
  const auto curve_b = train(b, pools, {}, plan, tc);
  EXPECT_EQ(loss_curve_csv(curve_a), loss_curve_csv(curve_b));
  EXPECT_EQ(a, b);
  ASSERT_EQ(curve_a.size(), 300u);
  const auto initial = loss_supervised(TinyMlm::init(c, 2), pools[0], false);
  EXPECT_LT(loss_supervised(a, pools[0], false), initial);
  EXPECT_DOUBLE_EQ(evaluate(a, pools[0]).accuracy, 1.0);
}

TEST(Train, ZeroLambdaLeavesKsmlmColumnZero) {
  auto c = small_config(32);
  c.dim = 8;
  Rng rng(3);
  const std::vector<std::vector<AugmentedSample>> pools{separable_pool(rng, 10)};
  const auto ks = separable_pool(rng, 10);
  const auto plan = SamplerPlan::make({"toy"}, {10}, 0.001, MixMode::stratified);
  TrainConfig tc;
  tc.steps = 5;
  tc.lambda = 0.0;
  auto m = TinyMlm::init(c, 1);
  for (const auto& p : train(m, pools, ks, plan, tc)) {
    EXPECT_EQ(p.ksmlm, 0.0);
    EXPECT_EQ(p.total, p.supervised);
  }
  tc.lambda = 0.5;
  auto m2 = TinyMlm::init(c, 1);
  EXPECT_GT(train(m2, pools, ks, plan, tc).front().ksmlm, 0.0);
}

TEST(Train, DivergenceNamesTheStep) {
  auto c = small_config(32);
  c.dim = 8;
  Rng rng(3);
  const std::vector<std::vector<AugmentedSample>> pools{separable_pool(rng, 10)};
  const auto plan = SamplerPlan::make({"toy"}, {10}, 0.001, MixMode::stratified);
  TrainConfig tc;
  tc.steps = 50;
  tc.learning_rate = 1e300;
  auto m = TinyMlm::init(c, 1);
  try {
    train(m, pools, {}, plan, tc);
    FAIL() << "expected divergence";
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Evaluate, HandSetHeadAlwaysRight) {
  const auto m = constant_head({5.0, 0.0});
  const std::vector<AugmentedSample> eval(4, fixed_sample(0));
  const auto r = evaluate(m, eval);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  ASSERT_EQ(r.per_class.size(), 1u);
  EXPECT_EQ(r.per_class[0].correct, 4u);
  EXPECT_THROW(evaluate(m, {}), ValidationError);
}

TEST(Evaluate, RandomModelsNearChance) {
  const auto c = small_config();
  Rng rng(31);
  std::vector<AugmentedSample> eval;
  for (int i = 0; i < 200; ++i) {
    auto s = upt::testing::random_sample(rng, c.vocab_size, 10);
    s.gold_label_index = static_cast<std::size_t>(i % 2);
    s.target_word_id = s.candidate_word_ids[s.gold_label_index];
    eval.push_back(s);
  }
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    mean += evaluate(TinyMlm::init(c, seed), eval).accuracy / 5.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.1);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  const auto m = perturbed(small_config(), 12);
  const auto path = std::filesystem::temp_directory_path() / "upt_ckpt_test.json";
  save_checkpoint(m, "abc123", path);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.model, m);
  EXPECT_EQ(loaded.vocab_hash, "abc123");
  EXPECT_EQ(serialize_checkpoint(loaded.model, "abc123"), serialize_checkpoint(m, "abc123"));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFileIsRejected) {
  const auto path = std::filesystem::temp_directory_path() / "upt_ckpt_bad.json";
  write_file(path, "{\"format\":\"something-else\"}");
  EXPECT_THROW(load_checkpoint(path), ValidationError);
  std::filesystem::remove(path);
}

TEST(ExportEmbeddings, ShapeAndRoundTrip) {
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]", "good", "bad"};
  const Vocabulary vocab(tokens, SpecialTokens{});
  auto c = small_config(vocab.size());
  const auto m = perturbed(c, 1);
  const auto table = export_embeddings(m, vocab);
  EXPECT_EQ(table.size(), 2u);
  const auto parsed = EmbeddingTable::parse(table.serialize());
  const auto* good = parsed.find("good");
  ASSERT_NE(good, nullptr);
  ASSERT_EQ(good->size(), c.dim);
  for (std::size_t i = 0; i < c.dim; ++i) {
    EXPECT_NEAR((*good)[i], m.params()[m.layout().tok_emb + 5 * c.dim + i], 1e-6);
  }
  EXPECT_EQ(export_embeddings(m, vocab).serialize(), table.serialize());
}
