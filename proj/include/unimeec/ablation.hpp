#pragma once

// Ablation grid: each row is the base configuration with one axis changed,
// trained and evaluated under the same seed.

#include <string>
#include <vector>

#include "json.hpp"
#include "unimeec/trainer.hpp"

namespace unimeec {

struct AblationRow {
  std::string name;
  AblationConfig ablation;
};

inline std::vector<std::string> standard_ablation_rows() {
  return {"full", "w/o MECPE", "t", "a", "v", "ta", "tv", "av", "w/o THC", "w/o hierarchy", "w/o window"};
}

inline AblationRow ablation_row(const std::string& name, AblationConfig base = {}) {
  AblationRow row{name, base};
  AblationConfig& a = row.ablation;
  if (name == "full") return row;
  if (name == "w/o MECPE") a.use_mecpe = false;
  else if (name == "w/o THC") a.use_thc = false;
  else if (name == "w/o hierarchy") a.use_hierarchy = false;
  else if (name == "w/o window") a.use_window = false;
  else if (!name.empty() && name.find_first_not_of("tav") == std::string::npos) a.modalities = Modalities::parse(name);
  else throw ConfigError("unknown ablation row: " + name);
  return row;
}

struct AblationResult {
  std::string name;
  AblationConfig ablation;
  std::uint64_t seed = 0;
  int epochs_run = 0;
  double final_l_mecpe = 0.0;
  MetricReport report;
};

inline nlohmann::json to_json(const AblationResult& r) {
  return {{"row", r.name},
          {"ablation", to_json(r.ablation)},
          {"seed", r.seed},
          {"epochs_run", r.epochs_run},
          {"final_l_mecpe", r.final_l_mecpe},
          {"report", to_json(r.report)}};
}

// Trains one model per row on `corpus` and reports its test-split metrics
// (valid when test is empty). `on_row` sees each finished row.
template <class OnRow>
std::vector<AblationResult> run_ablation(const ModelConfig& base, const TrainConfig& train_cfg, const Corpus& corpus,
                                         const std::vector<std::string>& rows, OnRow&& on_row) {
  std::vector<AblationResult> out;
  for (const auto& name : rows) {
    const AblationRow row = ablation_row(name, base.ablation);
    ModelConfig mc = base;
    mc.ablation = row.ablation;
    mc = resolve_for_corpus(mc, corpus);
    Model model(mc);
    const TrainResult tr = train(model, corpus, train_cfg);
    const auto& eval_split = corpus.test.empty() ? corpus.valid : corpus.test;
    AblationResult r;
    r.name = name;
    r.ablation = row.ablation;
    r.seed = train_cfg.seed;
    r.epochs_run = static_cast<int>(tr.epochs.size());
    r.final_l_mecpe = tr.epochs.empty() ? 0.0 : tr.epochs.back().l_mecpe;
    r.report = evaluate(model, eval_split.empty() ? corpus.train : eval_split).report;
    on_row(r);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<AblationResult> run_ablation(const ModelConfig& base, const TrainConfig& train_cfg,
                                                const Corpus& corpus, const std::vector<std::string>& rows) {
  return run_ablation(base, train_cfg, corpus, rows, [](const AblationResult&) {});
}

}  // namespace unimeec
