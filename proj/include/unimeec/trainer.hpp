#pragma once

// Evaluation over a split and the training driver: seeded batching, summed
// per-conversation gradients, scheduled adaptive-moment steps, best-valid
// selection with optional early stopping, and a JSONL epoch log.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unimeec/checkpoint.hpp"
#include "unimeec/metrics.hpp"
#include "unimeec/model.hpp"

namespace unimeec {

struct EvalResult {
  MetricReport report;
  LossReport loss;         // over every utterance of the split
  double cause_acc = 0.0;  // argmax cause == gold, over MECPE-supervised utterances
  std::vector<Prediction> predictions;
};

inline EvalResult evaluate(Model& model, const std::vector<Conversation>& split, PairMode pair_mode = PairMode::strict) {
  const LabelSpace& labels = model.config().labels;
  const int neutral = labels.neutral_index;
  std::vector<int> gold_e, pred_e, pred_c;
  std::vector<std::optional<int>> gold_c;
  std::vector<Matrix> probs_e, probs_c;
  std::vector<Utterance> gold;
  EvalResult r;
  std::size_t supervised = 0, cause_hits = 0;
  for (const auto& conv : split) {
    Prediction p = model.predict(conv);
    for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
      const Utterance& u = conv.utterances[i];
      gold_e.push_back(u.emotion);
      gold_c.push_back(u.cause_id);
      pred_e.push_back(p.emotion[i]);
      pred_c.push_back(p.cause[i]);
      probs_e.push_back(p.emotion_probs[i]);
      probs_c.push_back(p.cause_probs[i]);
      gold.push_back(u);
      if (mecpe_supervised(u, neutral)) {
        ++supervised;
        cause_hits += p.cause[i] == *u.cause_id;
      }
    }
    r.predictions.push_back(std::move(p));
  }
  r.report.labels = labels.names;
  r.report.emotion = classification_metrics(gold_e, pred_e, labels.size());
  r.report.cause = cause_metrics(gold_c, pred_c, pred_e, neutral);
  r.report.pair = pair_metrics(gold_c, gold_e, pred_c, pred_e, neutral, pair_mode);
  r.loss = joint_loss(probs_e, probs_c, gold, neutral, model.config().ablation.use_mecpe);
  r.cause_acc = supervised ? static_cast<double>(cause_hits) / static_cast<double>(supervised) : 0.0;
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double l_merc = 0.0;   // mean over training conversations
  double l_mecpe = 0.0;
  double total = 0.0;
  double valid_wf1 = 0.0;
  double valid_acc = 0.0;
  double valid_cause_f1 = 0.0;
  double valid_cause_acc = 0.0;
  double lr_encoder = 0.0;  // at the epoch's last step
  double lr_other = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},         {"l_merc", e.l_merc},         {"l_mecpe", e.l_mecpe},
          {"total", e.total},         {"valid_wf1", e.valid_wf1},   {"valid_acc", e.valid_acc},
          {"valid_cause_f1", e.valid_cause_f1}, {"valid_cause_acc", e.valid_cause_acc},
          {"lr_encoder", e.lr_encoder}, {"lr_other", e.lr_other}};
}

struct TrainOptions {
  std::ostream* log = nullptr;   // one JSON line per epoch
  std::string checkpoint_path;   // best-valid checkpoint, rewritten on improvement
  bool restore_best = true;      // leave the model at the best-valid parameters
  // Called after each epoch; returning true stops training.
  std::function<bool(const EpochRecord&, Model&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_valid_wf1 = -1.0;
  bool stopped_early = false;
};

// Model selection uses the valid split, or the train split when valid is empty.
inline TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.check();
  if (corpus.train.empty()) throw Error("train: empty training split");
  const ModelConfig& mc = model.config();
  const std::vector<Conversation>& selection = corpus.valid.empty() ? corpus.train : corpus.valid;
  BatchIterator batches(corpus.train, static_cast<std::size_t>(cfg.batch_size), cfg.seed);
  const long total_steps = static_cast<long>(cfg.epochs) * static_cast<long>(batches.batches_per_epoch());
  AdamOptimizer optimizer(model.params(), cfg, LinearWarmupDecay::from_fraction(cfg.warmup_fraction, total_steps));
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const ForwardMode mode{mc.dropout, &dropout_rng};

  TrainResult result;
  ParameterStore best = model.params();
  int since_best = 0;
  long t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double merc = 0.0, mecpe = 0.0;
    for (const auto& batch : batches.epoch(static_cast<std::size_t>(epoch))) {
      model.params().zero_grad();
      const double weight = 1.0 / static_cast<double>(batch.size());
      for (std::size_t idx : batch) {
        const Conversation& conv = corpus.train[idx];
        ad::Tape tape;
        const ConversationOutputs out = model.forward(tape, conv, mode);
        const ConversationLoss loss = conversation_loss(out, conv, mc.labels.neutral_index, mc.ablation.use_mecpe);
        merc += loss.report.l_merc;
        mecpe += loss.report.l_mecpe;
        tape.backward(loss_node(tape, loss), weight);
      }
      optimizer.step(model.params(), t++);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.l_merc = merc / static_cast<double>(corpus.train.size());
    rec.l_mecpe = mecpe / static_cast<double>(corpus.train.size());
    rec.total = rec.l_merc + rec.l_mecpe;
    rec.lr_encoder = optimizer.learning_rate(ParamGroup::encoder, t - 1);
    rec.lr_other = optimizer.learning_rate(ParamGroup::other, t - 1);
    const EvalResult valid = evaluate(model, selection);
    rec.valid_wf1 = valid.report.emotion.wf1;
    rec.valid_acc = valid.report.emotion.acc;
    rec.valid_cause_f1 = valid.report.cause.f1;
    rec.valid_cause_acc = valid.cause_acc;
    result.epochs.push_back(rec);
    if (opt.log) *opt.log << to_json(rec).dump() << '\n' << std::flush;

    if (rec.valid_wf1 > result.best_valid_wf1) {
      result.best_valid_wf1 = rec.valid_wf1;
      result.best_epoch = rec.epoch;
      best = model.params();
      since_best = 0;
      if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path, model);
    } else {
      ++since_best;
    }
    if (opt.on_epoch && opt.on_epoch(rec, model)) {
      result.stopped_early = epoch + 1 < cfg.epochs;
      break;
    }
    if (cfg.patience > 0 && since_best >= cfg.patience) {
      result.stopped_early = epoch + 1 < cfg.epochs;
      break;
    }
  }
  if (opt.restore_best) model.params() = best;
  return result;
}

}  // namespace unimeec
