#pragma once

// Independent reference implementations used by tests only. They follow the
// textbook definitions literally (sets, per-class filtering) rather than the
// single-pass counting in the library.

#include <algorithm>
#include <iterator>
#include <optional>
#include <set>
#include <utility>
#include <vector>

namespace oracle {

struct Scores {
  double p = 0, r = 0, f1 = 0;
};

inline Scores from_sets(const std::set<std::pair<int, int>>& pred, const std::set<std::pair<int, int>>& gold) {
  std::vector<std::pair<int, int>> both;
  std::set_intersection(pred.begin(), pred.end(), gold.begin(), gold.end(), std::back_inserter(both));
  Scores s;
  s.p = pred.empty() ? 0.0 : static_cast<double>(both.size()) / static_cast<double>(pred.size());
  s.r = gold.empty() ? 0.0 : static_cast<double>(both.size()) / static_cast<double>(gold.size());
  s.f1 = s.p + s.r == 0.0 ? 0.0 : 2 * s.p * s.r / (s.p + s.r);
  return s;
}

struct Classification {
  double acc = 0, wf1 = 0;
  std::vector<Scores> per_class;
  std::vector<int> support;
};

// Per class c: the items predicted c versus the items whose gold is c.
inline Classification classification(const std::vector<int>& gold, const std::vector<int>& pred, int k) {
  Classification out;
  int same = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) same += gold[i] == pred[i];
  out.acc = gold.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(gold.size());
  for (int c = 0; c < k; ++c) {
    std::set<std::pair<int, int>> p, g;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (pred[i] == c) p.insert({static_cast<int>(i), c});
      if (gold[i] == c) g.insert({static_cast<int>(i), c});
    }
    out.per_class.push_back(from_sets(p, g));
    out.support.push_back(static_cast<int>(g.size()));
  }
  for (int c = 0; c < k; ++c)
    if (!gold.empty()) out.wf1 += out.per_class[c].f1 * out.support[c] / static_cast<double>(gold.size());
  return out;
}

inline Scores cause(const std::vector<std::optional<int>>& gold_cause, const std::vector<int>& pred_cause,
                    const std::vector<int>& pred_emotion, int neutral) {
  std::set<std::pair<int, int>> p, g;
  for (std::size_t i = 0; i < pred_cause.size(); ++i) {
    if (pred_emotion[i] != neutral) p.insert({static_cast<int>(i), pred_cause[i]});
    if (gold_cause[i]) g.insert({static_cast<int>(i), *gold_cause[i]});
  }
  return from_sets(p, g);
}

// Strict pairs: the triple (i, cause, emotion) must agree.
inline Scores pair(const std::vector<std::optional<int>>& gold_cause, const std::vector<int>& gold_emotion,
                   const std::vector<int>& pred_cause, const std::vector<int>& pred_emotion, int neutral) {
  std::set<std::vector<int>> p, g;
  for (std::size_t i = 0; i < pred_cause.size(); ++i) {
    if (pred_emotion[i] != neutral) p.insert({static_cast<int>(i), pred_cause[i], pred_emotion[i]});
    if (gold_cause[i]) g.insert({static_cast<int>(i), *gold_cause[i], gold_emotion[i]});
  }
  std::size_t both = 0;
  for (const auto& x : p) both += g.count(x);
  Scores s;
  s.p = p.empty() ? 0.0 : static_cast<double>(both) / static_cast<double>(p.size());
  s.r = g.empty() ? 0.0 : static_cast<double>(both) / static_cast<double>(g.size());
  s.f1 = s.p + s.r == 0.0 ? 0.0 : 2 * s.p * s.r / (s.p + s.r);
  return s;
}

struct MetricCase {
  int k = 0, neutral = 0;
  std::vector<int> gold_e, pred_e, pred_c;
  std::vector<std::optional<int>> gold_c;
};

// Random conversation-shaped case: gold causes only on non-neutral items,
// causes point at earlier or equal positions.
template <class Rng>
MetricCase random_case(Rng& rng) {
  MetricCase m;
  m.k = 2 + static_cast<int>(rng() % 5);
  m.neutral = static_cast<int>(rng() % static_cast<unsigned>(m.k));
  const int n = 1 + static_cast<int>(rng() % 20);
  for (int i = 0; i < n; ++i) {
    m.gold_e.push_back(static_cast<int>(rng() % static_cast<unsigned>(m.k)));
    m.pred_e.push_back(rng() % 3 == 0 ? m.gold_e.back() : static_cast<int>(rng() % static_cast<unsigned>(m.k)));
    const int c = static_cast<int>(rng() % static_cast<unsigned>(i + 1));
    if (m.gold_e.back() != m.neutral && rng() % 4 != 0) m.gold_c.push_back(c);
    else m.gold_c.push_back(std::nullopt);
    m.pred_c.push_back(rng() % 2 == 0 ? c : static_cast<int>(rng() % static_cast<unsigned>(i + 1)));
  }
  return m;
}

}  // namespace oracle
