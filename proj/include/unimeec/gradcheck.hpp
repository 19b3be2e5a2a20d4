#pragma once

// Central finite-difference check of the analytic gradient of the joint loss
// of one conversation, over every scalar of every trainable parameter.

#include <algorithm>
#include <cmath>
#include <string>

#include "unimeec/model.hpp"

namespace unimeec {

struct GradCheckOptions {
  double step = 1e-5;
  double threshold = 1e-3;
  double floor = 1e-6;  // denominator floor for the relative error
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  Eigen::Index worst_index = 0;
  double analytic_at_worst = 0.0, numeric_at_worst = 0.0;
  std::size_t checked = 0;

  bool passed(double threshold) const { return max_rel_error < threshold; }
};

// Small enough to check every scalar in seconds. The short template keeps
// all three slots and non-empty auxiliary segments.
inline ModelConfig tiny_gradcheck_model() {
  ModelConfig m;
  m.prompt_template = "utterance [X] feels [M1] because [M2]";
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ffn = 32;
  m.text_layers = 2;
  m.audio_layers = 1;
  m.vision_layers = 1;
  m.max_conversation = 4;
  m.x_capacity = 3;
  m.thc.layers = 2;
  m.thc.heads = {1, 4};
  return m;
}

inline SynthConfig tiny_gradcheck_corpus() {
  SynthConfig s;
  s.n_train = 1;
  s.n_valid = 0;
  s.n_test = 0;
  s.min_utterances = 4;
  s.max_utterances = 4;
  s.n_labels = 3;
  s.vocab_size = 12;
  s.audio_dim = 3;
  s.audio_len = 5;
  s.vision_dim = 2;
  s.vision_len = 2;
  s.min_tokens = 2;
  s.max_tokens = 4;
  s.cause_offset_range = 1;
  s.neutral_prob = 0.2;
  return s;
}

inline double conversation_loss_value(Model& model, const Conversation& conv) {
  ad::Tape tape;
  const ConversationOutputs out = model.forward(tape, conv);
  const auto& mc = model.config();
  return loss_node(tape, conversation_loss(out, conv, mc.labels.neutral_index, mc.ablation.use_mecpe)).value()(0, 0);
}

inline GradCheckResult gradcheck(Model& model, const Conversation& conv, const GradCheckOptions& opt = {}) {
  ParameterStore& store = model.params();
  store.zero_grad();
  {
    ad::Tape tape;
    const ConversationOutputs out = model.forward(tape, conv);
    const auto& mc = model.config();
    tape.backward(loss_node(tape, conversation_loss(out, conv, mc.labels.neutral_index, mc.ablation.use_mecpe)));
  }
  GradCheckResult r;
  for (std::size_t k = 0; k < store.size(); ++k) {
    Parameter& p = store[k];
    if (!p.trainable) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + opt.step;
      const double up = conversation_loss_value(model, conv);
      x = saved - opt.step;
      const double down = conversation_loss_value(model, conv);
      x = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double analytic = p.grad.data()[i];
      const double err =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      ++r.checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_parameter = p.name;
        r.worst_index = i;
        r.analytic_at_worst = analytic;
        r.numeric_at_worst = numeric;
      }
    }
  }
  return r;
}

}  // namespace unimeec
