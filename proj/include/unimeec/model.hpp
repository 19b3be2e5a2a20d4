#pragma once

// Full conversation forward pass: prompts -> aligned modalities -> branch
// encoders -> fusion -> hierarchical context -> heads.

#include <random>
#include <vector>

#include "unimeec/encoder.hpp"
#include "unimeec/objective.hpp"
#include "unimeec/thc.hpp"

namespace unimeec {

struct UtteranceOutputs {
  PromptSequence seq;
  BranchOutputs branches;
  FusedSlots fused;
};

struct ConversationOutputs {
  std::vector<UtteranceOutputs> utterances;
  NodeStates initial;  // rows = utterances, before THC
  NodeStates final;    // equals `initial` when THC is off
  std::vector<ad::Var> emotion_logits;  // 1 x |E| each
  std::vector<ad::Var> cause_logits;    // 1 x C_max each, tail masked
};

struct Prediction {
  std::vector<int> emotion;
  std::vector<int> cause;
  std::vector<Matrix> emotion_probs;
  std::vector<Matrix> cause_probs;
};

class Model {
 public:
  Model() = default;

  // `cfg` must be fully resolved (see resolve_for_corpus).
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.check();
    vocab_ = Vocabulary::build(cfg_.corpus_vocab, cfg_.prompt_template);
    tmpl_ = PromptTemplate::parse(cfg_.prompt_template, vocab_, cfg_.x_capacity);
    std::mt19937_64 rng(cfg_.init_seed);
    enc_ = add_encoder_params(store_, cfg_, vocab_.size(), tmpl_.prompt_length(), rng);
    thc_ = add_thc_params(store_, cfg_, rng);
    heads_ = add_head_params(store_, cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const Vocabulary& vocab() const { return vocab_; }
  const PromptTemplate& prompt() const { return tmpl_; }
  const EncoderParams& encoder_params() const { return enc_; }
  const ThcParams& thc_params() const { return thc_; }
  const HeadParams& head_params() const { return heads_; }

  UtteranceOutputs encode_utterance(ad::Tape& tape, const Utterance& u, int turn, const ForwardMode& mode = {}) {
    const Modalities& use = cfg_.ablation.modalities;
    UtteranceOutputs out;
    out.seq = render_prompt(tmpl_, u.tokens);
    ad::Var embedded = embed(tape, store_, enc_, out.seq, turn, !use.text);
    const AlignedFeatures audio = aligned(tape, u.audio, enc_.audio_proj, out.seq, use.audio);
    const AlignedFeatures vision = aligned(tape, u.vision, enc_.vision_proj, out.seq, use.vision);
    out.branches = encode_branches(tape, store_, enc_, cfg_, out.seq, embedded, audio, vision, mode);
    out.fused = fuse(tape, store_, enc_, out.branches, use);
    return out;
  }

  ConversationOutputs forward(ad::Tape& tape, const Conversation& conv, const ForwardMode& mode = {},
                              ThcTrace* trace = nullptr) {
    const int v = static_cast<int>(conv.utterances.size());
    if (v < 1) throw ShapeError("forward: empty conversation " + conv.id);
    if (v > cfg_.max_conversation)
      throw ShapeError("forward: conversation " + conv.id + " is longer than max_conversation");
    ConversationOutputs out;
    std::vector<ad::Var> bottom, middle, top;
    for (int i = 0; i < v; ++i) {
      out.utterances.push_back(encode_utterance(tape, conv.utterances[static_cast<std::size_t>(i)], i, mode));
      const FusedSlots& f = out.utterances.back().fused;
      bottom.push_back(f.u);
      middle.push_back(f.m2);
      top.push_back(f.m1);
    }
    out.initial = {ad::concat_rows(bottom), ad::concat_rows(middle), ad::concat_rows(top)};
    out.final = out.initial;
    if (cfg_.ablation.use_thc) {
      const int window = cfg_.ablation.use_window ? cfg_.thc.window : v;
      out.final = run_thc(tape, store_, out.initial, thc_, cfg_.thc, window, trace);
    }
    for (int i = 0; i < v; ++i) {
      out.emotion_logits.push_back(emotion_logits(tape, store_, heads_, ad::slice_rows(out.final.top, i, 1)));
      out.cause_logits.push_back(cause_logits(tape, store_, heads_, ad::slice_rows(out.final.middle, i, 1), v));
    }
    return out;
  }

  Prediction predict(const Conversation& conv) {
    ad::Tape tape;
    const ConversationOutputs out = forward(tape, conv);
    Prediction p;
    for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
      p.emotion_probs.push_back(ad::softmax_row(out.emotion_logits[i].value()));
      p.cause_probs.push_back(ad::softmax_row(out.cause_logits[i].value()));
      p.emotion.push_back(argmax(out.emotion_logits[i].value()));
      p.cause.push_back(argmax(out.cause_logits[i].value()));
    }
    return p;
  }

 private:
  // A disabled modality yields all-zero rows with no valid keys.
  AlignedFeatures aligned(ad::Tape& tape, const Matrix& feat, const LinearParams& proj, const PromptSequence& seq,
                          bool enabled) {
    const std::pair<int, int> dims{static_cast<int>(feat.rows()), static_cast<int>(feat.cols())};
    if (!enabled) {
      AlignedBlock zero{tape.constant(Matrix::Zero(seq.x_span.length, cfg_.d_model)), 0};
      return pad_to_prompt(tape, zero, seq, dims);
    }
    const ModalityProjection mp{tape.param(store_[proj.weight]), tape.param(store_[proj.bias])};
    return pad_to_prompt(tape, align_modality(tape, feat, mp, seq.x_span.length), seq, dims);
  }

  ModelConfig cfg_;
  Vocabulary vocab_;
  PromptTemplate tmpl_;
  ParameterStore store_;
  EncoderParams enc_{};
  ThcParams thc_;
  HeadParams heads_{};
};

// Per-utterance CE nodes of one conversation; `report` uses the same
// reductions as joint_loss.
struct ConversationLoss {
  std::vector<ad::Var> merc_terms;
  std::vector<ad::Var> mecpe_terms;
  LossReport report;
};

inline ConversationLoss conversation_loss(const ConversationOutputs& out, const Conversation& conv, int neutral_index,
                                          bool use_mecpe) {
  ConversationLoss l;
  double merc = 0.0, mecpe = 0.0;
  for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
    const Utterance& u = conv.utterances[i];
    l.merc_terms.push_back(ad::softmax_cross_entropy(out.emotion_logits[i], u.emotion));
    merc += l.merc_terms.back().value()(0, 0);
    if (use_mecpe && mecpe_supervised(u, neutral_index)) {
      l.mecpe_terms.push_back(ad::softmax_cross_entropy(out.cause_logits[i], *u.cause_id));
      mecpe += l.mecpe_terms.back().value()(0, 0);
    }
  }
  l.report.merc_items = l.merc_terms.size();
  l.report.mecpe_items = l.mecpe_terms.size();
  l.report.l_merc = l.report.merc_items ? merc / static_cast<double>(l.report.merc_items) : 0.0;
  l.report.l_mecpe = l.report.mecpe_items ? mecpe / static_cast<double>(l.report.mecpe_items) : 0.0;
  l.report.total = l.report.l_merc + l.report.l_mecpe;
  return l;
}

// Scalar loss node: mean MERC CE + mean MECPE CE.
inline ad::Var loss_node(ad::Tape& tape, const ConversationLoss& l) {
  std::vector<ad::Var> terms;
  std::vector<double> weights;
  for (const auto& t : l.merc_terms) {
    terms.push_back(t);
    weights.push_back(1.0 / static_cast<double>(l.merc_terms.size()));
  }
  for (const auto& t : l.mecpe_terms) {
    terms.push_back(t);
    weights.push_back(1.0 / static_cast<double>(l.mecpe_terms.size()));
  }
  if (terms.empty()) return tape.constant(Matrix::Zero(1, 1));
  return ad::weighted_sum(terms, weights);
}

}  // namespace unimeec
