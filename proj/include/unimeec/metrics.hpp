#pragma once

// Accuracy, per-class P/R/F1 with support-weighted F1, cause-position scoring
// and emotion-cause pair scoring, plus the JSON report.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "unimeec/error.hpp"

namespace unimeec {

struct PRF {
  double p = 0.0, r = 0.0, f1 = 0.0;
};

inline double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

inline PRF prf_from_counts(std::size_t matched, std::size_t predicted, std::size_t gold) {
  PRF s;
  s.p = safe_div(static_cast<double>(matched), static_cast<double>(predicted));
  s.r = safe_div(static_cast<double>(matched), static_cast<double>(gold));
  s.f1 = safe_div(2.0 * s.p * s.r, s.p + s.r);
  return s;
}

struct ClassScore {
  PRF prf;
  std::size_t support = 0;
};

struct ClassificationMetrics {
  double acc = 0.0;
  double wf1 = 0.0;
  std::vector<ClassScore> per_class;
};

inline ClassificationMetrics classification_metrics(std::span<const int> gold, std::span<const int> pred,
                                                    int n_classes) {
  if (gold.size() != pred.size()) throw ShapeError("classification_metrics: gold and pred differ in length");
  if (n_classes < 1) throw ShapeError("classification_metrics: n_classes must be >= 1");
  const auto k = static_cast<std::size_t>(n_classes);
  std::vector<std::size_t> tp(k, 0), pred_n(k, 0), gold_n(k, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] < 0 || gold[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes)
      throw SchemaError("classification_metrics: label out of range at position " + std::to_string(i));
    ++gold_n[static_cast<std::size_t>(gold[i])];
    ++pred_n[static_cast<std::size_t>(pred[i])];
    if (gold[i] == pred[i]) {
      ++tp[static_cast<std::size_t>(gold[i])];
      ++correct;
    }
  }
  ClassificationMetrics m;
  const double total = static_cast<double>(gold.size());
  m.acc = safe_div(static_cast<double>(correct), total);
  for (std::size_t c = 0; c < k; ++c) {
    m.per_class.push_back({prf_from_counts(tp[c], pred_n[c], gold_n[c]), gold_n[c]});
    m.wf1 += safe_div(static_cast<double>(gold_n[c]), total) * m.per_class.back().prf.f1;
  }
  return m;
}

// Predicted set: (i, pred_cause[i]) for every i predicted non-neutral.
// Gold set: (i, gold_cause[i]) wherever a gold cause exists.
inline PRF cause_metrics(std::span<const std::optional<int>> gold_cause, std::span<const int> pred_cause,
                         std::span<const int> pred_emotion, int neutral_index) {
  if (gold_cause.size() != pred_cause.size() || pred_cause.size() != pred_emotion.size())
    throw ShapeError("cause_metrics: inputs differ in length");
  std::size_t predicted = 0, gold = 0, matched = 0;
  for (std::size_t i = 0; i < gold_cause.size(); ++i) {
    const bool in_pred = pred_emotion[i] != neutral_index;
    predicted += in_pred;
    gold += gold_cause[i].has_value();
    matched += in_pred && gold_cause[i] && *gold_cause[i] == pred_cause[i];
  }
  return prf_from_counts(matched, predicted, gold);
}

enum class PairMode { strict, position };

inline PairMode parse_pair_mode(const std::string& s) {
  if (s == "strict") return PairMode::strict;
  if (s == "position") return PairMode::position;
  throw ConfigError("pair mode must be strict|position, got " + s);
}

// Strict mode also requires the predicted emotion to equal the gold one.
inline PRF pair_metrics(std::span<const std::optional<int>> gold_cause, std::span<const int> gold_emotion,
                        std::span<const int> pred_cause, std::span<const int> pred_emotion, int neutral_index,
                        PairMode mode = PairMode::strict) {
  if (gold_emotion.size() != gold_cause.size()) throw ShapeError("pair_metrics: inputs differ in length");
  if (mode == PairMode::position) return cause_metrics(gold_cause, pred_cause, pred_emotion, neutral_index);
  if (gold_cause.size() != pred_cause.size() || pred_cause.size() != pred_emotion.size())
    throw ShapeError("pair_metrics: inputs differ in length");
  std::size_t predicted = 0, gold = 0, matched = 0;
  for (std::size_t i = 0; i < gold_cause.size(); ++i) {
    const bool in_pred = pred_emotion[i] != neutral_index;
    predicted += in_pred;
    gold += gold_cause[i].has_value();
    matched += in_pred && gold_cause[i] && *gold_cause[i] == pred_cause[i] && pred_emotion[i] == gold_emotion[i];
  }
  return prf_from_counts(matched, predicted, gold);
}

struct MetricReport {
  ClassificationMetrics emotion;
  std::vector<std::string> labels;
  PRF cause;
  PRF pair;
};

inline nlohmann::json to_json(const PRF& s) { return {{"p", s.p}, {"r", s.r}, {"f1", s.f1}}; }

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < r.emotion.per_class.size(); ++c) {
    const ClassScore& s = r.emotion.per_class[c];
    per_class.push_back({{"label", c < r.labels.size() ? r.labels[c] : std::to_string(c)},
                         {"p", s.prf.p},
                         {"r", s.prf.r},
                         {"f1", s.prf.f1},
                         {"support", s.support}});
  }
  return {{"acc", r.emotion.acc},
          {"wf1", r.emotion.wf1},
          {"per_class", per_class},
          {"cause", to_json(r.cause)},
          {"pair", to_json(r.pair)}};
}

// Checks a parsed report against the schema above; returns an empty string
// when valid, else the first problem found.
inline std::string report_schema_problem(const nlohmann::json& j) {
  auto unit = [](const nlohmann::json& v) { return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0; };
  auto prf_ok = [&](const nlohmann::json& v) {
    return v.is_object() && v.size() == 3 && v.contains("p") && v.contains("r") && v.contains("f1") &&
           unit(v["p"]) && unit(v["r"]) && unit(v["f1"]);
  };
  if (!j.is_object()) return "report is not an object";
  for (const char* key : {"acc", "wf1", "per_class", "cause", "pair"})
    if (!j.contains(key)) return std::string("missing key ") + key;
  if (j.size() != 5) return "unexpected top-level keys";
  if (!unit(j["acc"]) || !unit(j["wf1"])) return "acc/wf1 must be in [0, 1]";
  if (!prf_ok(j["cause"])) return "bad cause block";
  if (!prf_ok(j["pair"])) return "bad pair block";
  if (!j["per_class"].is_array() || j["per_class"].empty()) return "per_class must be a non-empty array";
  for (const auto& c : j["per_class"]) {
    if (!c.is_object() || c.size() != 5 || !c.contains("label") || !c["label"].is_string()) return "bad per_class row";
    if (!c.contains("support") || !c["support"].is_number_unsigned()) return "bad per_class support";
    for (const char* key : {"p", "r", "f1"})
      if (!c.contains(key) || !unit(c[key])) return "bad per_class score";
  }
  return {};
}

}  // namespace unimeec
