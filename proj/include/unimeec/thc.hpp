#pragma once

// Task-specific hierarchical context: a three-level graph over the utterances
// of one conversation. Bottom nodes are utterance states, middle nodes cause
// slots, top nodes emotion slots. Five windowed edge types connect them:
//
//   uu  bottom <-> bottom     feeds bottom
//   uc  bottom  -> middle     feeds middle (directed)
//   cc  middle <-> middle     feeds middle
//   ec  middle <-> top        feeds both, with separate weights per direction
//   ee  top    <-> top        feeds top
//
// Nothing flows into the bottom level from above.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "unimeec/autodiff.hpp"
#include "unimeec/config.hpp"

namespace unimeec {

enum class EdgeType { ee = 0, ec = 1, cc = 2, uc = 3, uu = 4 };

inline constexpr std::array<EdgeType, 5> kEdgeTypes{EdgeType::ee, EdgeType::ec, EdgeType::cc, EdgeType::uc,
                                                    EdgeType::uu};

inline const char* edge_name(EdgeType t) {
  switch (t) {
    case EdgeType::ee: return "ee";
    case EdgeType::ec: return "ec";
    case EdgeType::cc: return "cc";
    case EdgeType::uc: return "uc";
    case EdgeType::uu: return "uu";
  }
  return "?";
}

inline bool is_directed(EdgeType t) { return t == EdgeType::uc; }

// a(i, j) = 1 when j lies in the window of i. Interval mode: |i - j| <= w.
// Literal mode: j in {i - w, i + w}.
inline Matrix window_matrix(int n, int w, WindowMode mode = WindowMode::interval) {
  Matrix a = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int off = i > j ? i - j : j - i;
      a(i, j) = (mode == WindowMode::interval ? off <= w : off == w) ? 1.0 : 0.0;
    }
  return a;
}

struct AdjacencySet {
  std::array<Matrix, 5> matrices;
  int window = 0;

  const Matrix& operator[](EdgeType t) const { return matrices[static_cast<std::size_t>(t)]; }
  int nodes() const { return static_cast<int>(matrices[0].rows()); }
};

// Every type shares the window pattern; types differ in which levels they join.
inline AdjacencySet build_adjacency(int nodes, int window, WindowMode mode = WindowMode::interval) {
  if (nodes < 1) throw ShapeError("build_adjacency: need at least one node");
  if (window < 0) throw ConfigError("build_adjacency: window must be >= 0");
  AdjacencySet s;
  s.window = window;
  const Matrix a = window_matrix(nodes, window, mode);
  for (auto& m : s.matrices) m = a;
  return s;
}

// Single-level graph over all 3V nodes (rows: bottom, middle, top), linking any
// two nodes whose utterances fall in the window.
inline Matrix flat_adjacency(int nodes, int window, WindowMode mode = WindowMode::interval) {
  const Matrix a = window_matrix(nodes, window, mode);
  Matrix f(3 * nodes, 3 * nodes);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) f.block(r * nodes, c * nodes, nodes, nodes) = a;
  return f;
}

struct NodeStates {
  ad::Var bottom;  // V x d, utterances
  ad::Var middle;  // V x d, cause slots
  ad::Var top;     // V x d, emotion slots
};

// One typed relation: projection W (d x d) plus per-head scoring parameters.
// Head h scores a pair as a_h . LeakyReLU(L_h t_i + R_h s_j) over the head's
// slice of the projected states; L and R hold the heads side by side
// (dh x heads*dh), a holds one column per head.
struct ThcRelation {
  std::size_t weight, att_target, att_source, att_vector;
};

struct ThcLayerParams {
  ThcRelation uu, uc, cc, ec_to_middle, ee, ec_to_top;
  std::size_t bias;
  int heads = 1;
};

struct ThcFlatLayerParams {
  ThcRelation all;
  std::size_t bias;
  int heads = 1;
};

struct ThcParams {
  std::vector<ThcLayerParams> layers;
  std::vector<ThcFlatLayerParams> flat;
};

namespace detail {

inline ThcRelation add_relation(ParameterStore& store, const std::string& name, int d, int heads,
                                std::mt19937_64& rng) {
  const int dh = d / heads;
  ThcRelation r;
  store.add(name + ".weight", fan_in_uniform(d, d, d, rng), ParamGroup::other);
  r.weight = store.size() - 1;
  store.add(name + ".att_target", fan_in_uniform(dh, heads * dh, dh, rng), ParamGroup::other);
  r.att_target = store.size() - 1;
  store.add(name + ".att_source", fan_in_uniform(dh, heads * dh, dh, rng), ParamGroup::other);
  r.att_source = store.size() - 1;
  store.add(name + ".att_vector", fan_in_uniform(dh, heads, dh, rng), ParamGroup::other);
  r.att_vector = store.size() - 1;
  return r;
}

}  // namespace detail

// Hierarchical layers always; the flattened variant only when requested.
inline ThcParams add_thc_params(ParameterStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  ThcParams p;
  const int d = cfg.d_model;
  for (int n = 0; n < cfg.thc.layers; ++n) {
    const int heads = cfg.thc.heads_at(n);
    const std::string pre = "thc." + std::to_string(n) + ".";
    if (cfg.ablation.use_hierarchy) {
      ThcLayerParams l;
      l.heads = heads;
      l.uu = detail::add_relation(store, pre + "uu", d, heads, rng);
      l.uc = detail::add_relation(store, pre + "uc", d, heads, rng);
      l.cc = detail::add_relation(store, pre + "cc", d, heads, rng);
      l.ec_to_middle = detail::add_relation(store, pre + "ec_to_middle", d, heads, rng);
      l.ee = detail::add_relation(store, pre + "ee", d, heads, rng);
      l.ec_to_top = detail::add_relation(store, pre + "ec_to_top", d, heads, rng);
      store.add(pre + "bias", Matrix::Zero(1, d), ParamGroup::other);
      l.bias = store.size() - 1;
      p.layers.push_back(l);
    } else {
      ThcFlatLayerParams l;
      l.heads = heads;
      l.all = detail::add_relation(store, pre + "flat", d, heads, rng);
      store.add(pre + "bias", Matrix::Zero(1, d), ParamGroup::other);
      l.bias = store.size() - 1;
      p.flat.push_back(l);
    }
  }
  return p;
}

// Optional record of attention coefficients, one entry per relation per head.
struct ThcTrace {
  struct Entry {
    std::string relation;
    int layer = 0;
    int head = 0;
    Matrix alpha;
    Matrix adjacency;
  };
  std::vector<Entry> entries;
};

// Σ_j a_ij α_ij W s_j for one relation, V_target x d. Without attention α = 1.
inline ad::Var relation_message(ad::Tape& tape, ParameterStore& store, const ThcRelation& rel, int heads,
                                bool attention, const ad::Var& target, const ad::Var& source,
                                const Matrix& adjacency, ThcTrace* trace = nullptr, const char* name = "",
                                int layer = 0) {
  ad::Var w = tape.param(store[rel.weight]);
  ad::Var src = ad::matmul(source, w);
  if (!attention) return ad::matmul(tape.constant(adjacency), src);
  ad::Var tgt = target.id() == source.id() ? src : ad::matmul(target, w);
  ad::Var left = tape.param(store[rel.att_target]);
  ad::Var right = tape.param(store[rel.att_source]);
  ad::Var vec = tape.param(store[rel.att_vector]);
  const Eigen::Index dh = src.cols() / heads;
  std::vector<ad::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ad::Var sh = ad::slice_cols(src, h * dh, dh);
    ad::Var th = ad::slice_cols(tgt, h * dh, dh);
    ad::Var ls = ad::matmul(th, ad::slice_cols(left, h * dh, dh));   // V_t x dh
    ad::Var rs = ad::matmul(sh, ad::slice_cols(right, h * dh, dh));  // V_s x dh
    ad::Var a = ad::slice_cols(vec, h, 1);
    std::vector<ad::Var> rows;
    for (Eigen::Index i = 0; i < ls.rows(); ++i) {
      ad::Var pair = ad::leaky_relu(ad::add_row(rs, ad::slice_rows(ls, i, 1)), 0.2);
      rows.push_back(ad::transpose(ad::matmul(pair, a)));  // 1 x V_s
    }
    ad::Var alpha = ad::masked_softmax(ad::concat_rows(rows), adjacency);
    if (trace) trace->entries.push_back({name, layer, h, alpha.value(), adjacency});
    outs.push_back(ad::matmul(alpha, sh));
  }
  return heads == 1 ? outs[0] : ad::concat_cols(outs);
}

// Synchronous update: all three levels read the layer's input states.
inline NodeStates thc_layer(ad::Tape& tape, ParameterStore& store, const NodeStates& s, const AdjacencySet& adj,
                            const ThcLayerParams& p, bool attention, ThcTrace* trace = nullptr, int layer = 0) {
  auto msg = [&](const ThcRelation& rel, const ad::Var& target, const ad::Var& source, EdgeType t,
                 const char* name) {
    return relation_message(tape, store, rel, p.heads, attention, target, source, adj[t], trace, name, layer);
  };
  ad::Var bias = tape.param(store[p.bias]);
  NodeStates out;
  out.bottom = ad::relu(ad::add_row(msg(p.uu, s.bottom, s.bottom, EdgeType::uu, "uu"), bias));
  ad::Var middle = ad::add(msg(p.cc, s.middle, s.middle, EdgeType::cc, "cc"),
                           msg(p.ec_to_middle, s.middle, s.top, EdgeType::ec, "ec_to_middle"));
  middle = ad::add(middle, msg(p.uc, s.middle, s.bottom, EdgeType::uc, "uc"));
  out.middle = ad::relu(ad::add_row(middle, bias));
  ad::Var top = ad::add(msg(p.ee, s.top, s.top, EdgeType::ee, "ee"),
                        msg(p.ec_to_top, s.top, s.middle, EdgeType::ec, "ec_to_top"));
  out.top = ad::relu(ad::add_row(top, bias));
  return out;
}

inline NodeStates thc_flat_layer(ad::Tape& tape, ParameterStore& store, const NodeStates& s, const Matrix& flat_adj,
                                 const ThcFlatLayerParams& p, bool attention, ThcTrace* trace = nullptr,
                                 int layer = 0) {
  const Eigen::Index v = s.bottom.rows();
  const ad::Var parts[] = {s.bottom, s.middle, s.top};
  ad::Var all = ad::concat_rows(parts);
  ad::Var msg = relation_message(tape, store, p.all, p.heads, attention, all, all, flat_adj, trace, "flat", layer);
  ad::Var next = ad::relu(ad::add_row(msg, tape.param(store[p.bias])));
  return {ad::slice_rows(next, 0, v), ad::slice_rows(next, v, v), ad::slice_rows(next, 2 * v, v)};
}

// Applies the configured number of layers. The window comes from `window`,
// which callers set to the conversation length to lift the window restriction.
inline NodeStates run_thc(ad::Tape& tape, ParameterStore& store, NodeStates s, const ThcParams& p,
                          const ThcConfig& cfg, int window, ThcTrace* trace = nullptr) {
  const int v = static_cast<int>(s.bottom.rows());
  if (!p.layers.empty()) {
    const AdjacencySet adj = build_adjacency(v, window, cfg.window_mode);
    for (std::size_t n = 0; n < p.layers.size(); ++n)
      s = thc_layer(tape, store, s, adj, p.layers[n], cfg.attention, trace, static_cast<int>(n));
  } else {
    const Matrix adj = flat_adjacency(v, window, cfg.window_mode);
    for (std::size_t n = 0; n < p.flat.size(); ++n)
      s = thc_flat_layer(tape, store, s, adj, p.flat[n], cfg.attention, trace, static_cast<int>(n));
  }
  return s;
}

}  // namespace unimeec
