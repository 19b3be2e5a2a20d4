#pragma once

// Mask-prediction heads, the joint MERC + MECPE loss, the warmup/linear-decay
// schedule and the adaptive-moment update.

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "unimeec/autodiff.hpp"
#include "unimeec/config.hpp"
#include "unimeec/corpus.hpp"
#include "unimeec/encoder.hpp"

namespace unimeec {

struct HeadParams {
  LinearParams emotion;  // d -> |E|
  LinearParams cause;    // d -> C_max
};

inline HeadParams add_head_params(ParameterStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  HeadParams h;
  h.emotion = detail::add_linear(store, "head.emotion", cfg.d_model, cfg.n_emotions(), ParamGroup::other, rng);
  h.cause = detail::add_linear(store, "head.cause", cfg.d_model, cfg.max_conversation, ParamGroup::other, rng);
  return h;
}

inline ad::Var emotion_logits(ad::Tape& tape, ParameterStore& store, const HeadParams& h, const ad::Var& top) {
  return ad::linear(top, tape.param(store[h.emotion.weight]), tape.param(store[h.emotion.bias]));
}

// Positions >= conversation_length are -inf.
inline ad::Var cause_logits(ad::Tape& tape, ParameterStore& store, const HeadParams& h, const ad::Var& middle,
                            int conversation_length) {
  const Parameter& w = store[h.cause.weight];
  if (conversation_length < 1 || conversation_length > w.value.cols())
    throw ShapeError("cause_logits: conversation length " + std::to_string(conversation_length) +
                     " exceeds max_conversation " + std::to_string(w.value.cols()));
  ad::Var logits = ad::linear(middle, tape.param(store[h.cause.weight]), tape.param(store[h.cause.bias]));
  return ad::mask_tail_cols(logits, conversation_length);
}

// Lowest index wins ties.
inline int argmax(const Matrix& row) {
  int best = 0;
  for (Eigen::Index c = 1; c < row.cols(); ++c)
    if (row(0, c) > row(0, best)) best = static_cast<int>(c);
  return best;
}

struct LossReport {
  double l_merc = 0.0;
  double l_mecpe = 0.0;
  double total = 0.0;
  std::size_t merc_items = 0;
  std::size_t mecpe_items = 0;
};

// Utterances entering the MECPE loss: non-neutral with an annotated cause.
inline bool mecpe_supervised(const Utterance& u, int neutral_index) {
  return u.emotion != neutral_index && u.cause_id.has_value();
}

// Mean CE per task over the given utterances; total = l_merc + l_mecpe.
// Probabilities come as one 1 x K row per utterance.
inline LossReport joint_loss(std::span<const Matrix> emotion_probs, std::span<const Matrix> cause_probs,
                             std::span<const Utterance> gold, int neutral_index, bool use_mecpe = true) {
  if (emotion_probs.size() != gold.size() || cause_probs.size() != gold.size())
    throw ShapeError("joint_loss: prediction count differs from gold count");
  LossReport r;
  double merc = 0.0, mecpe = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const Utterance& u = gold[i];
    if (u.emotion < 0 || u.emotion >= emotion_probs[i].cols())
      throw SchemaError("joint_loss: gold emotion " + std::to_string(u.emotion) + " out of range");
    merc += -std::log(emotion_probs[i](0, u.emotion));
    ++r.merc_items;
    if (use_mecpe && mecpe_supervised(u, neutral_index)) {
      if (*u.cause_id < 0 || *u.cause_id >= cause_probs[i].cols())
        throw SchemaError("joint_loss: gold cause out of range");
      mecpe += -std::log(cause_probs[i](0, *u.cause_id));
      ++r.mecpe_items;
    }
  }
  r.l_merc = r.merc_items ? merc / static_cast<double>(r.merc_items) : 0.0;
  r.l_mecpe = r.mecpe_items ? mecpe / static_cast<double>(r.mecpe_items) : 0.0;
  r.total = r.l_merc + r.l_mecpe;
  return r;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

// lr(t) = base * t / T_w before the apex, base * (T - t) / (T - T_w) after.
struct LinearWarmupDecay {
  long warmup_steps = 0;
  long total_steps = 1;

  LinearWarmupDecay() = default;
  LinearWarmupDecay(long warmup, long total) : warmup_steps(warmup), total_steps(total) {
    if (total < 1 || warmup < 0 || warmup >= total) throw ConfigError("schedule: need 0 <= warmup < total steps");
  }
  static LinearWarmupDecay from_fraction(double warmup_fraction, long total) {
    return {static_cast<long>(std::floor(warmup_fraction * static_cast<double>(total))), total};
  }

  double factor(long t) const {
    if (t < warmup_steps) return static_cast<double>(t) / static_cast<double>(warmup_steps);
    const double f = static_cast<double>(total_steps - t) / static_cast<double>(total_steps - warmup_steps);
    return std::clamp(f, 0.0, 1.0);
  }
};

class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterStore& store, const TrainConfig& cfg, LinearWarmupDecay schedule)
      : cfg_(cfg), schedule_(schedule) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.push_back(Matrix::Zero(store[i].value.rows(), store[i].value.cols()));
      v_.push_back(Matrix::Zero(store[i].value.rows(), store[i].value.cols()));
    }
  }

  double learning_rate(ParamGroup g, long t) const {
    return (g == ParamGroup::encoder ? cfg_.lr_encoder : cfg_.lr_other) * schedule_.factor(t);
  }

  // Applies the update for schedule step t from the gradients held in `store`.
  // A non-finite gradient aborts before any parameter changes.
  void step(ParameterStore& store, long t) {
    if (t < 0) throw Error("step: step index must be >= 0");
    if (const Parameter* bad = store.first_non_finite_grad())
      throw NonFiniteError("non-finite gradient in parameter " + bad->name + " at step " + std::to_string(t));
    ++updates_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(updates_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(updates_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      Parameter& p = store[i];
      if (!p.trainable) continue;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      const double lr = learning_rate(p.group, t);
      if (lr == 0.0) continue;
      p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.adam_eps);
    }
  }

  const LinearWarmupDecay& schedule() const { return schedule_; }

 private:
  TrainConfig cfg_;
  LinearWarmupDecay schedule_;
  std::vector<Matrix> m_, v_;
  long updates_ = 0;
};

}  // namespace unimeec
