#include <gtest/gtest.h>

#include <random>

#include "unimeec/gradcheck.hpp"
#include "unimeec/model.hpp"

using namespace unimeec;

namespace {

struct Tiny {
  Corpus corpus = synth_generate(tiny_gradcheck_corpus());
  Model model{resolve_for_corpus(tiny_gradcheck_model(), corpus)};
  const Utterance& utt() const { return corpus.train[0].utterances[0]; }
};

Matrix randn(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

}  // namespace

TEST(Transformer, PaddedKeysDoNotInfluenceOtherRows) {
  Tiny t;
  ParameterStore& store = t.model.params();
  std::mt19937_64 rng(1);
  const Matrix x = randn(6, 16, rng);
  const std::vector<bool> valid{true, true, false, true, false, true};
  Matrix x2 = x;
  x2.row(2) = randn(1, 16, rng);
  x2.row(4) *= 100.0;
  ad::Tape tape;
  std::vector<Matrix> att;
  const Matrix y1 = transformer_layer(tape, store, t.model.encoder_params().text[0], tape.constant(x), valid, 2, {},
                                      &att)
                        .value();
  const Matrix y2 =
      transformer_layer(tape, store, t.model.encoder_params().text[0], tape.constant(x2), valid, 2).value();
  for (int r : {0, 1, 3, 5}) EXPECT_EQ(y1.row(r), y2.row(r));
  ASSERT_EQ(att.size(), 2u);
  for (const Matrix& a : att)
    for (int r = 0; r < 6; ++r) {
      EXPECT_EQ(a(r, 2), 0.0);
      EXPECT_EQ(a(r, 4), 0.0);
      EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-12);
    }
}

TEST(Transformer, RejectsAllPadAndBadHeads) {
  Tiny t;
  ad::Tape tape;
  const auto& layer = t.model.encoder_params().text[0];
  ad::Var x = tape.constant(Matrix::Zero(3, 16));
  EXPECT_THROW(transformer_layer(tape, t.model.params(), layer, x, {false, false, false}, 2), Error);
  EXPECT_THROW(transformer_layer(tape, t.model.params(), layer, x, {true, true, true}, 3), ShapeError);
}

TEST(Transformer, LayerNormOutputsAreNormalizedInitially) {
  Tiny t;
  std::mt19937_64 rng(2);
  ad::Tape tape;
  const Matrix y = transformer_layer(tape, t.model.params(), t.model.encoder_params().text[0],
                                     tape.constant(randn(5, 16, rng)), std::vector<bool>(5, true), 2)
                       .value();
  for (int r = 0; r < 5; ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-9);
    const double var = (y.row(r).array() - y.row(r).mean()).square().mean();
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(Embed, RejectsUnknownIdsAndTurns) {
  Tiny t;
  ad::Tape tape;
  PromptSequence s = render_prompt(t.model.prompt(), std::vector<int>{1, 2});
  EXPECT_THROW(embed(tape, t.model.params(), t.model.encoder_params(), s, 4), ShapeError);
  s.token_ids[s.x_span.begin] = t.model.vocab().size();
  EXPECT_THROW(embed(tape, t.model.params(), t.model.encoder_params(), s, 0), Error);
}

TEST(Embed, TurnChangesEveryRowBlankingClearsSpan) {
  Tiny t;
  ad::Tape tape;
  const PromptSequence s = render_prompt(t.model.prompt(), std::vector<int>{1, 2});
  const auto& p = t.model.encoder_params();
  const Matrix a = embed(tape, t.model.params(), p, s, 0).value();
  const Matrix b = embed(tape, t.model.params(), p, s, 1).value();
  const Matrix delta = t.model.params()[p.turn_embedding].value.row(1) - t.model.params()[p.turn_embedding].value.row(0);
  for (int r = 0; r < s.length(); ++r) EXPECT_LT((b.row(r) - a.row(r) - delta).cwiseAbs().maxCoeff(), 1e-12);
  const Matrix blank = embed(tape, t.model.params(), p, s, 0, true).value();
  const Matrix& pos = t.model.params()[p.position_embedding].value;
  const Matrix& turn = t.model.params()[p.turn_embedding].value;
  for (int r = 0; r < s.length(); ++r) {
    if (s.x_span.contains(r)) EXPECT_LT((blank.row(r) - pos.row(r) - turn.row(0)).cwiseAbs().maxCoeff(), 1e-15);
    else EXPECT_EQ(blank.row(r), a.row(r));
  }
}

// Perturbing one modality's features leaves the other branches bit-identical.
TEST(Branches, ModalitiesAreIsolated) {
  Tiny t;
  std::mt19937_64 rng(7);
  const Utterance base = t.utt();
  for (int trial = 0; trial < 10; ++trial) {
    Utterance vis = base, aud = base;
    vis.vision = randn(static_cast<int>(base.vision.rows()), static_cast<int>(base.vision.cols()), rng);
    aud.audio = randn(static_cast<int>(base.audio.rows()), static_cast<int>(base.audio.cols()), rng);
    ad::Tape tape;
    const UtteranceOutputs o = t.model.encode_utterance(tape, base, 0);
    const UtteranceOutputs ov = t.model.encode_utterance(tape, vis, 0);
    const UtteranceOutputs oa = t.model.encode_utterance(tape, aud, 0);
    EXPECT_EQ(o.branches.text.states.value(), ov.branches.text.states.value());
    EXPECT_EQ(o.branches.audio.states.value(), ov.branches.audio.states.value());
    EXPECT_NE(o.branches.vision.states.value(), ov.branches.vision.states.value());
    EXPECT_EQ(o.branches.text.states.value(), oa.branches.text.states.value());
    EXPECT_EQ(o.branches.vision.states.value(), oa.branches.vision.states.value());
    EXPECT_NE(o.branches.audio.states.value(), oa.branches.audio.states.value());
  }
}

TEST(Branches, SlotsReadFromTheirRows) {
  Tiny t;
  ad::Tape tape;
  const UtteranceOutputs o = t.model.encode_utterance(tape, t.utt(), 0);
  const Matrix& states = o.branches.audio.states.value();
  EXPECT_EQ(o.branches.audio.m1.value(), states.row(o.seq.m1_index));
  EXPECT_EQ(o.branches.audio.m2.value(), states.row(o.seq.m2_index));
  EXPECT_EQ(o.branches.audio.x_span.value(), states.middleRows(o.seq.x_span.begin, o.seq.x_span.length));
}

TEST(Fusion, DisabledModalityContributesZeros) {
  Corpus corpus = synth_generate(tiny_gradcheck_corpus());
  ModelConfig mc = tiny_gradcheck_model();
  mc.ablation.modalities = Modalities::parse("tv");
  Model model(resolve_for_corpus(mc, corpus));
  ad::Tape tape;
  const UtteranceOutputs o = model.encode_utterance(tape, corpus.train[0].utterances[1], 1);
  const Matrix& raw = o.fused.raw_m1.value();
  ASSERT_EQ(raw.cols(), 48);
  EXPECT_EQ(raw.middleCols(16, 16).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(raw.leftCols(16).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(raw.rightCols(16).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(o.fused.raw_u.value().middleCols(16, 16).cwiseAbs().maxCoeff(), 0.0);
  // the audio features no longer matter at all
  Utterance changed = corpus.train[0].utterances[1];
  changed.audio.array() += 5.0;
  const UtteranceOutputs o2 = model.encode_utterance(tape, changed, 1);
  EXPECT_EQ(o.fused.m1.value(), o2.fused.m1.value());
  EXPECT_EQ(o.fused.m2.value(), o2.fused.m2.value());
}

TEST(Fusion, TextAblationIgnoresTokens) {
  Corpus corpus = synth_generate(tiny_gradcheck_corpus());
  ModelConfig mc = tiny_gradcheck_model();
  mc.ablation.modalities = Modalities::parse("av");
  Model model(resolve_for_corpus(mc, corpus));
  Utterance u = corpus.train[0].utterances[0];
  Utterance other = u;
  other.tokens[0] = (other.tokens[0] + 1) % 12;
  ad::Tape tape;
  EXPECT_EQ(model.encode_utterance(tape, u, 0).fused.m1.value(), model.encode_utterance(tape, other, 0).fused.m1.value());
}

TEST(Parameters, GroupsAndFreezing) {
  Corpus corpus = synth_generate(tiny_gradcheck_corpus());
  ModelConfig mc = tiny_gradcheck_model();
  mc.freeze_embeddings = true;
  Model model(resolve_for_corpus(mc, corpus));
  const ParameterStore& s = model.params();
  EXPECT_FALSE(s.at("embed.token").trainable);
  EXPECT_EQ(s.at("text.0.attn.q.weight").group, ParamGroup::encoder);
  EXPECT_EQ(s.at("thc.0.uu.weight").group, ParamGroup::other);
  EXPECT_EQ(s.at("head.emotion.weight").value.cols(), 3);
  EXPECT_EQ(s.at("head.cause.weight").value.cols(), 4);
}
