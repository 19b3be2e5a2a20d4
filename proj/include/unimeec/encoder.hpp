#pragma once

// Post-norm Transformer stack split into text, audio and vision sub-stacks.
// The text sub-stack encodes the rendered prompt; the audio and vision
// sub-stacks each continue from the text output after its [X] rows have been
// replaced by that modality's aligned features. Slot states are fused by
// concatenation followed by a learned 3d -> d projection.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "unimeec/autodiff.hpp"
#include "unimeec/config.hpp"
#include "unimeec/prompt.hpp"

namespace unimeec {

// Indices into a ParameterStore, so handles survive copies of the store.
struct TransformerLayerParams {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t ln1_gain, ln1_bias;
  std::size_t w1, b1, w2, b2;
  std::size_t ln2_gain, ln2_bias;
};

struct LinearParams {
  std::size_t weight, bias;
};

struct EncoderParams {
  std::size_t token_embedding, position_embedding, turn_embedding;
  std::vector<TransformerLayerParams> text, audio, vision;
  LinearParams audio_proj, vision_proj;
  LinearParams fuse_m1, fuse_m2, fuse_u;
};

namespace detail {

inline std::size_t add_param(ParameterStore& store, const std::string& name, Matrix init, ParamGroup group) {
  store.add(name, std::move(init), group);
  return store.size() - 1;
}

inline LinearParams add_linear(ParameterStore& store, const std::string& name, int in, int out, ParamGroup group,
                               std::mt19937_64& rng) {
  LinearParams p;
  p.weight = add_param(store, name + ".weight", fan_in_uniform(in, out, in, rng), group);
  p.bias = add_param(store, name + ".bias", Matrix::Zero(1, out), group);
  return p;
}

inline TransformerLayerParams add_transformer_layer(ParameterStore& store, const std::string& name, int d, int d_ffn,
                                                    std::mt19937_64& rng) {
  const auto g = ParamGroup::encoder;
  TransformerLayerParams p;
  auto q = add_linear(store, name + ".attn.q", d, d, g, rng);
  auto k = add_linear(store, name + ".attn.k", d, d, g, rng);
  auto v = add_linear(store, name + ".attn.v", d, d, g, rng);
  auto o = add_linear(store, name + ".attn.out", d, d, g, rng);
  p.wq = q.weight, p.bq = q.bias, p.wk = k.weight, p.bk = k.bias;
  p.wv = v.weight, p.bv = v.bias, p.wo = o.weight, p.bo = o.bias;
  p.ln1_gain = add_param(store, name + ".ln1.gain", Matrix::Ones(1, d), g);
  p.ln1_bias = add_param(store, name + ".ln1.bias", Matrix::Zero(1, d), g);
  auto f1 = add_linear(store, name + ".ffn.in", d, d_ffn, g, rng);
  auto f2 = add_linear(store, name + ".ffn.out", d_ffn, d, g, rng);
  p.w1 = f1.weight, p.b1 = f1.bias, p.w2 = f2.weight, p.b2 = f2.bias;
  p.ln2_gain = add_param(store, name + ".ln2.gain", Matrix::Ones(1, d), g);
  p.ln2_bias = add_param(store, name + ".ln2.bias", Matrix::Zero(1, d), g);
  return p;
}

}  // namespace detail

// Allocates every encoder-side parameter in a fixed order.
inline EncoderParams add_encoder_params(ParameterStore& store, const ModelConfig& cfg, int vocab_size, int prompt_len,
                                        std::mt19937_64& rng) {
  const int d = cfg.d_model;
  const auto enc = ParamGroup::encoder, other = ParamGroup::other;
  EncoderParams p;
  p.token_embedding = detail::add_param(store, "embed.token", fan_in_uniform(vocab_size, d, d, rng), enc);
  p.position_embedding = detail::add_param(store, "embed.position", fan_in_uniform(prompt_len, d, d, rng), enc);
  p.turn_embedding = detail::add_param(store, "embed.turn", fan_in_uniform(cfg.max_conversation, d, d, rng), enc);
  if (cfg.freeze_embeddings)
    for (auto idx : {p.token_embedding, p.position_embedding, p.turn_embedding}) store[idx].trainable = false;
  for (int n = 0; n < cfg.text_layers; ++n)
    p.text.push_back(detail::add_transformer_layer(store, "text." + std::to_string(n), d, cfg.d_ffn, rng));
  for (int n = 0; n < cfg.audio_layers; ++n)
    p.audio.push_back(detail::add_transformer_layer(store, "audio." + std::to_string(n), d, cfg.d_ffn, rng));
  for (int n = 0; n < cfg.vision_layers; ++n)
    p.vision.push_back(detail::add_transformer_layer(store, "vision." + std::to_string(n), d, cfg.d_ffn, rng));
  p.audio_proj = detail::add_linear(store, "align.audio", cfg.audio_dim, d, other, rng);
  p.vision_proj = detail::add_linear(store, "align.vision", cfg.vision_dim, d, other, rng);
  p.fuse_m1 = detail::add_linear(store, "fuse.m1", 3 * d, d, other, rng);
  p.fuse_m2 = detail::add_linear(store, "fuse.m2", 3 * d, d, other, rng);
  p.fuse_u = detail::add_linear(store, "fuse.u", 3 * d, d, other, rng);
  return p;
}

// Training-time stochasticity. Inference passes a default-constructed value.
struct ForwardMode {
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  bool stochastic() const { return dropout > 0.0 && rng != nullptr; }
};

// [PAD] rows embed the PAD token; they are masked as attention keys later.
// `turn` is the utterance's position in its conversation. With
// `blank_input_span` the [X] rows are zero, which removes the text input.
inline ad::Var embed(ad::Tape& tape, ParameterStore& store, const EncoderParams& p, const PromptSequence& seq,
                     int turn, bool blank_input_span = false) {
  Parameter& tokens = store[p.token_embedding];
  for (int id : seq.token_ids)
    if (id < 0 || id >= tokens.value.rows())
      throw Error("embed: token id " + std::to_string(id) + " is outside the vocabulary");
  Parameter& positions = store[p.position_embedding];
  if (seq.length() != positions.value.rows()) throw ShapeError("embed: prompt length differs from model geometry");
  Parameter& turns = store[p.turn_embedding];
  if (turn < 0 || turn >= turns.value.rows()) throw ShapeError("embed: turn index exceeds max_conversation");

  ad::Var tok = ad::gather_rows(tape.param(tokens), seq.token_ids);
  if (blank_input_span) {
    ad::Var zeros = tape.constant(Matrix::Zero(seq.x_span.length, tok.cols()));
    tok = ad::replace_rows(tok, seq.x_span.begin, zeros);
  }
  std::vector<int> turn_rows(static_cast<std::size_t>(seq.length()), turn);
  ad::Var states = ad::add(tok, tape.param(positions));
  return ad::add(states, ad::gather_rows(tape.param(turns), turn_rows));
}

// Key validity (true = attendable) broadcast to a rows x rows mask.
inline Matrix key_mask_matrix(const std::vector<bool>& valid) {
  const auto n = static_cast<Eigen::Index>(valid.size());
  Matrix m(n, n);
  for (Eigen::Index c = 0; c < n; ++c) m.col(c).setConstant(valid[static_cast<std::size_t>(c)] ? 1.0 : 0.0);
  return m;
}

// attention -> add -> norm -> FFN -> add -> norm. `key_valid[j]` selects the
// keys every query may attend to. When `attention_out` is non-null the
// per-head attention matrices are appended to it.
inline ad::Var transformer_layer(ad::Tape& tape, ParameterStore& store, const TransformerLayerParams& p,
                                 const ad::Var& x, const std::vector<bool>& key_valid, int n_heads,
                                 const ForwardMode& mode = {}, std::vector<Matrix>* attention_out = nullptr) {
  const Eigen::Index d = x.cols();
  if (static_cast<Eigen::Index>(key_valid.size()) != x.rows()) throw ShapeError("transformer_layer: mask length");
  if (d % n_heads != 0) throw ShapeError("transformer_layer: d_model not divisible by n_heads");
  if (std::none_of(key_valid.begin(), key_valid.end(), [](bool b) { return b; }))
    throw Error("transformer_layer: every position is padding");
  auto P = [&](std::size_t idx) { return tape.param(store[idx]); };

  const Matrix mask = key_mask_matrix(key_valid);
  ad::Var q = ad::linear(x, P(p.wq), P(p.bq));
  ad::Var k = ad::linear(x, P(p.wk), P(p.bk));
  ad::Var v = ad::linear(x, P(p.wv), P(p.bv));
  const Eigen::Index dh = d / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    ad::Var qh = ad::slice_cols(q, h * dh, dh);
    ad::Var kh = ad::slice_cols(k, h * dh, dh);
    ad::Var vh = ad::slice_cols(v, h * dh, dh);
    ad::Var weights = ad::masked_softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dh), mask);
    if (attention_out) attention_out->push_back(weights.value());
    heads.push_back(ad::matmul(weights, vh));
  }
  ad::Var attn = ad::linear(ad::concat_cols(heads), P(p.wo), P(p.bo));
  if (mode.stochastic()) attn = ad::dropout(attn, mode.dropout, *mode.rng);
  ad::Var h1 = ad::layer_norm(ad::add(x, attn), P(p.ln1_gain), P(p.ln1_bias));
  ad::Var ffn = ad::linear(ad::gelu(ad::linear(h1, P(p.w1), P(p.b1))), P(p.w2), P(p.b2));
  if (mode.stochastic()) ffn = ad::dropout(ffn, mode.dropout, *mode.rng);
  return ad::layer_norm(ad::add(h1, ffn), P(p.ln2_gain), P(p.ln2_bias));
}

struct BranchState {
  ad::Var states;  // L_p x d after the branch's last layer
  ad::Var m1;      // 1 x d
  ad::Var m2;      // 1 x d
  ad::Var x_span;  // x_capacity x d
};

struct BranchOutputs {
  BranchState text, audio, vision;
};

inline BranchState read_slots(const ad::Var& states, const PromptSequence& seq) {
  return {states, ad::slice_rows(states, seq.m1_index, 1), ad::slice_rows(states, seq.m2_index, 1),
          ad::slice_rows(states, seq.x_span.begin, seq.x_span.length)};
}

// Keys inside [X] are valid only where aligned rows carry features.
inline std::vector<bool> aligned_key_mask(const PromptSequence& seq, const AlignedFeatures& aligned) {
  std::vector<bool> valid(static_cast<std::size_t>(seq.length()), true);
  for (int r = 0; r < seq.x_span.length; ++r)
    valid[static_cast<std::size_t>(seq.x_span.begin + r)] = r < aligned.valid_rows;
  return valid;
}

inline ad::Var run_stack(ad::Tape& tape, ParameterStore& store, const std::vector<TransformerLayerParams>& layers,
                         ad::Var x, const std::vector<bool>& key_valid, int n_heads, const ForwardMode& mode) {
  for (const auto& layer : layers) x = transformer_layer(tape, store, layer, x, key_valid, n_heads, mode);
  return x;
}

// Text: N_t layers over the embedded prompt. Audio and vision: their own
// sub-stacks applied to the text output with [X] substituted. The two are
// siblings; neither sees the other's features.
inline BranchOutputs encode_branches(ad::Tape& tape, ParameterStore& store, const EncoderParams& p,
                                     const ModelConfig& cfg, const PromptSequence& seq, const ad::Var& embedded,
                                     const AlignedFeatures& aligned_audio, const AlignedFeatures& aligned_vision,
                                     const ForwardMode& mode = {}) {
  if (aligned_audio.x_span != seq.x_span || aligned_vision.x_span != seq.x_span)
    throw ShapeError("encode_branches: aligned features do not match the prompt geometry");
  std::vector<bool> text_valid(seq.pad_mask.size());
  for (std::size_t i = 0; i < text_valid.size(); ++i) text_valid[i] = !seq.pad_mask[i];

  BranchOutputs out;
  ad::Var text = run_stack(tape, store, p.text, embedded, text_valid, cfg.n_heads, mode);
  out.text = read_slots(text, seq);
  ad::Var audio = run_stack(tape, store, p.audio, substitute_x(text, aligned_audio),
                            aligned_key_mask(seq, aligned_audio), cfg.n_heads, mode);
  out.audio = read_slots(audio, seq);
  ad::Var vision = run_stack(tape, store, p.vision, substitute_x(text, aligned_vision),
                             aligned_key_mask(seq, aligned_vision), cfg.n_heads, mode);
  out.vision = read_slots(vision, seq);
  return out;
}

struct FusedSlots {
  ad::Var m1, m2, u;              // 1 x d, projected
  ad::Var raw_m1, raw_m2, raw_u;  // 1 x 3d, order text | audio | vision
};

// A disabled modality contributes zeros to every concatenation.
inline FusedSlots fuse(ad::Tape& tape, ParameterStore& store, const EncoderParams& p, const BranchOutputs& b,
                       const Modalities& use = {}) {
  auto P = [&](std::size_t idx) { return tape.param(store[idx]); };
  const Eigen::Index d = b.text.m1.cols();
  auto gate = [&](bool on, const ad::Var& v) { return on ? v : tape.constant(Matrix::Zero(1, d)); };
  auto concat3 = [&](const ad::Var& t, const ad::Var& a, const ad::Var& v) {
    const ad::Var parts[] = {gate(use.text, t), gate(use.audio, a), gate(use.vision, v)};
    return ad::concat_cols(parts);
  };
  FusedSlots f;
  f.raw_m1 = concat3(b.text.m1, b.audio.m1, b.vision.m1);
  f.raw_m2 = concat3(b.text.m2, b.audio.m2, b.vision.m2);
  f.raw_u = concat3(ad::mean_rows(b.text.x_span), ad::mean_rows(b.audio.x_span), ad::mean_rows(b.vision.x_span));
  f.m1 = ad::linear(f.raw_m1, P(p.fuse_m1.weight), P(p.fuse_m1.bias));
  f.m2 = ad::linear(f.raw_m2, P(p.fuse_m2.weight), P(p.fuse_m2.bias));
  f.u = ad::linear(f.raw_u, P(p.fuse_u.weight), P(p.fuse_u.bias));
  return f;
}

}  // namespace unimeec
