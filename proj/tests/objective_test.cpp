#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "unimeec/gradcheck.hpp"
#include "unimeec/trainer.hpp"

using namespace unimeec;

namespace {

Utterance utt(int emotion, std::optional<int> cause) {
  Utterance u;
  u.tokens = {1};
  u.emotion = emotion;
  u.cause_id = cause;
  return u;
}

struct Tiny {
  Corpus corpus = synth_generate(tiny_gradcheck_corpus());
  Model model{resolve_for_corpus(tiny_gradcheck_model(), corpus)};
};

}  // namespace

TEST(Heads, ZeroWeightsGiveUniformDistributions) {
  Tiny t;
  ParameterStore& s = t.model.params();
  for (const char* n : {"head.emotion.weight", "head.emotion.bias", "head.cause.weight", "head.cause.bias"})
    s.at(n).value.setZero();
  const Prediction p = t.model.predict(t.corpus.train[0]);
  for (std::size_t i = 0; i < p.emotion_probs.size(); ++i) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(p.emotion_probs[i](0, c), 1.0 / 3.0, 1e-15);
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(p.cause_probs[i](0, c), 0.25, 1e-15);
    EXPECT_EQ(p.emotion[i], 0);  // ties resolve to the lowest index
  }
}

TEST(Heads, SingleUtteranceCauseIsCertain) {
  Tiny t;
  Conversation c = t.corpus.train[0];
  c.utterances.resize(1);
  const Prediction p = t.model.predict(c);
  ASSERT_EQ(p.cause_probs[0].cols(), 4);
  EXPECT_EQ(p.cause_probs[0](0, 0), 1.0);
  EXPECT_EQ(p.cause[0], 0);
}

TEST(Heads, ShiftInvarianceOfSoftmax) {
  Matrix x(1, 4);
  x << 0.3, -1.0, 2.0, 0.5;
  const Matrix a = ad::softmax_row(x);
  const Matrix b = ad::softmax_row((x.array() + 123.0).matrix());
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Heads, RejectsConversationBeyondCapacity) {
  Tiny t;
  ad::Tape tape;
  ad::Var m = tape.constant(Matrix::Zero(1, 16));
  EXPECT_THROW(cause_logits(tape, t.model.params(), t.model.head_params(), m, 5), ShapeError);
}

TEST(Loss, UniformSixWayIsLogSix) {
  const std::vector<Matrix> e(2, Matrix::Constant(1, 6, 1.0 / 6.0));
  const std::vector<Matrix> c(2, Matrix::Constant(1, 2, 0.5));
  const std::vector<Utterance> gold{utt(0, std::nullopt), utt(3, 1)};
  const LossReport r = joint_loss(e, c, gold, 0);
  EXPECT_NEAR(r.l_merc, std::log(6.0), 1e-15);
  EXPECT_NEAR(r.l_mecpe, std::log(2.0), 1e-15);
  EXPECT_EQ(r.mecpe_items, 1u);
  EXPECT_NEAR(r.total, r.l_merc + r.l_mecpe, 1e-15);
}

TEST(Loss, OneHotIsZeroAndMecpeCanBeDisabled) {
  Matrix e = Matrix::Zero(1, 3), c = Matrix::Zero(1, 3);
  e(0, 2) = 1.0;
  c(0, 1) = 1.0;
  const std::vector<Matrix> es{e}, cs{c};
  const std::vector<Utterance> gold{utt(2, 1)};
  EXPECT_EQ(joint_loss(es, cs, gold, 0).total, 0.0);
  Matrix c2 = Matrix::Constant(1, 3, 1.0 / 3.0);
  const std::vector<Matrix> cs2{c2};
  EXPECT_NEAR(joint_loss(es, cs2, gold, 0).total, std::log(3.0), 1e-15);
  const LossReport off = joint_loss(es, cs2, gold, 0, false);
  EXPECT_EQ(off.l_mecpe, 0.0);
  EXPECT_EQ(off.mecpe_items, 0u);
  EXPECT_EQ(off.total, 0.0);
}

// Neutral utterances and those without a gold cause stay out of the MECPE mean.
TEST(Loss, MecpeAveragesOnlySupervisedUtterances) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ud(0.05, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Matrix> es, cs;
    std::vector<Utterance> gold;
    double merc = 0, mecpe = 0;
    int n_mecpe = 0;
    for (int i = 0; i < 5; ++i) {
      Matrix e(1, 4), c(1, 5);
      for (int k = 0; k < 4; ++k) e(0, k) = ud(rng);
      for (int k = 0; k < 5; ++k) c(0, k) = ud(rng);
      e /= e.sum();
      c /= c.sum();
      const int em = static_cast<int>(rng() % 4);
      std::optional<int> cause;
      if (em != 0 && rng() % 3 != 0) cause = static_cast<int>(rng() % 5);
      merc += -std::log(e(0, em));
      if (cause) mecpe += -std::log(c(0, *cause)), ++n_mecpe;
      es.push_back(e);
      cs.push_back(c);
      gold.push_back(utt(em, cause));
    }
    const LossReport r = joint_loss(es, cs, gold, 0);
    EXPECT_NEAR(r.l_merc, merc / 5.0, 1e-12);
    EXPECT_NEAR(r.l_mecpe, n_mecpe ? mecpe / n_mecpe : 0.0, 1e-12);
  }
}

TEST(Loss, ModelLossMatchesProbabilityFormula) {
  Tiny t;
  const Conversation& conv = t.corpus.train[0];
  ad::Tape tape;
  const ConversationOutputs out = t.model.forward(tape, conv);
  const ConversationLoss l = conversation_loss(out, conv, 0, true);
  std::vector<Matrix> es, cs;
  for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
    es.push_back(ad::softmax_row(out.emotion_logits[i].value()));
    cs.push_back(ad::softmax_row(out.cause_logits[i].value()));
  }
  const LossReport r = joint_loss(es, cs, conv.utterances, 0);
  EXPECT_NEAR(l.report.total, r.total, 1e-12);
  EXPECT_NEAR(loss_node(tape, l).value()(0, 0), r.total, 1e-12);
}

TEST(Loss, MaskedCauseLogitsReceiveNoGradient) {
  Tiny t;
  Conversation conv = t.corpus.train[0];
  conv.utterances.resize(2);
  for (auto& u : conv.utterances)
    if (u.cause_id && *u.cause_id >= 2) u.cause_id = 1;
  t.model.params().zero_grad();
  ad::Tape tape;
  const ConversationOutputs out = t.model.forward(tape, conv);
  tape.backward(loss_node(tape, conversation_loss(out, conv, 0, true)));
  const Parameter& w = t.model.params().at("head.cause.weight");
  const Parameter& b = t.model.params().at("head.cause.bias");
  for (int c = 2; c < 4; ++c) {
    EXPECT_EQ(w.grad.col(c).cwiseAbs().sum(), 0.0);
    EXPECT_EQ(b.grad(0, c), 0.0);
  }
}

TEST(Schedule, WarmupApexAndDecay) {
  const LinearWarmupDecay s(10, 110);
  EXPECT_EQ(s.factor(0), 0.0);
  EXPECT_DOUBLE_EQ(s.factor(5), 0.5);
  EXPECT_EQ(s.factor(10), 1.0);
  EXPECT_DOUBLE_EQ(s.factor(60), 0.5);
  EXPECT_EQ(s.factor(110), 0.0);
  for (long k = 1; k <= 110; ++k) {
    if (k <= 10) EXPECT_GE(s.factor(k), s.factor(k - 1));
    else EXPECT_LE(s.factor(k), s.factor(k - 1));
  }
  TrainConfig tc;
  tc.lr_encoder = 2e-3;
  ParameterStore store;
  AdamOptimizer opt(store, tc, s);
  EXPECT_DOUBLE_EQ(opt.learning_rate(ParamGroup::encoder, 60), 1e-3);
  EXPECT_EQ(LinearWarmupDecay::from_fraction(0.1, 105).warmup_steps, 10);
  EXPECT_THROW(LinearWarmupDecay(5, 5), ConfigError);
  EXPECT_EQ(LinearWarmupDecay(0, 4).factor(0), 1.0);
}

TEST(Optimizer, NonFiniteGradientNamesParameterAndLeavesValues) {
  ParameterStore store;
  store.add("probe", Matrix::Ones(2, 2), ParamGroup::other);
  const std::size_t id = 0;
  TrainConfig tc;
  AdamOptimizer opt(store, tc, LinearWarmupDecay(0, 10));
  store[id].grad(1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    opt.step(store, 0);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("probe"), std::string::npos);
  }
  EXPECT_EQ(store[id].value, Matrix::Ones(2, 2));
}

TEST(Optimizer, FirstStepMovesByLearningRate) {
  // bias-corrected first step is lr * sign(g)
  ParameterStore store;
  store.add("x", Matrix::Zero(1, 3), ParamGroup::other);
  const std::size_t id = 0;
  TrainConfig tc;
  tc.lr_other = 0.01;
  AdamOptimizer opt(store, tc, LinearWarmupDecay(0, 10));
  store[id].grad << 3.0, -0.5, 0.0;
  opt.step(store, 0);
  EXPECT_NEAR(store[id].value(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(store[id].value(0, 1), 0.01, 1e-9);
  EXPECT_EQ(store[id].value(0, 2), 0.0);
}

TEST(Training, LossStrictlyDecreasesOnOneConversation) {
  Tiny t;
  const Conversation& conv = t.corpus.train[0];
  TrainConfig tc;
  tc.lr_encoder = tc.lr_other = 1e-3;
  AdamOptimizer opt(t.model.params(), tc, LinearWarmupDecay(0, 1000));
  const double start = conversation_loss_value(t.model, conv);
  double prev = start;
  for (long step = 0; step < 20; ++step) {
    t.model.params().zero_grad();
    ad::Tape tape;
    const ConversationOutputs out = t.model.forward(tape, conv);
    tape.backward(loss_node(tape, conversation_loss(out, conv, 0, true)));
    opt.step(t.model.params(), step);
    const double now = conversation_loss_value(t.model, conv);
    EXPECT_LE(now, prev + 1e-9) << "step " << step;
    prev = now;
  }
  EXPECT_LT(prev, start);
}

TEST(Training, OneEpochLogsAndCheckpoints) {
  SynthConfig sc = tiny_gradcheck_corpus();
  sc.n_train = 2;
  const Corpus corpus = synth_generate(sc);
  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    Model model(resolve_for_corpus(tiny_gradcheck_model(), corpus));
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.warmup_fraction = 0.0;
    std::ostringstream log;
    TrainOptions opt;
    opt.log = &log;
    opt.checkpoint_path = testing::TempDir() + "objective_ckpt.bin";
    const TrainResult r = train(model, corpus, tc, opt);
    ASSERT_EQ(r.epochs.size(), 1u);
    logs[run] = log.str();
    EXPECT_EQ(std::count(logs[run].begin(), logs[run].end(), '\n'), 1);
    const nlohmann::json line = nlohmann::json::parse(logs[run]);
    for (const char* k : {"epoch", "l_merc", "l_mecpe", "total", "valid_wf1", "lr_encoder"})
      EXPECT_TRUE(line.contains(k)) << k;
    const Model back = load_checkpoint(opt.checkpoint_path);
    EXPECT_EQ(back.params().size(), model.params().size());
  }
  EXPECT_EQ(logs[0], logs[1]);
}
