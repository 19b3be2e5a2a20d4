#pragma once

// Causal prompt construction: template rendering with the [X], [M1], [M2]
// slots, modality alignment into the [X] geometry, zero padding to the full
// prompt, and the [X]-span substitution that derives audio and vision prompts.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unimeec/autodiff.hpp"
#include "unimeec/error.hpp"

namespace unimeec {

inline constexpr const char* kDefaultTemplate =
    "for conversation , the emotion category of [X] is [M1] , the reason for this emotion is [M2]";

inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kEmotionSlot = "[M1]";
inline constexpr const char* kCauseSlot = "[M2]";
inline constexpr const char* kInputSlot = "[X]";

inline std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

// Token string -> id. Corpus tokens occupy [0, corpus_size) under their decimal
// spelling; the specials and template words follow.
class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary build(int corpus_size, const std::string& template_text) {
    if (corpus_size < 1) throw ConfigError("vocabulary: corpus token count must be >= 1");
    Vocabulary v;
    for (int t = 0; t < corpus_size; ++t) v.add(std::to_string(t));
    v.corpus_size_ = corpus_size;
    v.add(kPadToken);
    v.add(kEmotionSlot);
    v.add(kCauseSlot);
    for (const auto& w : split_whitespace(template_text))
      if (w != kInputSlot) v.add(w);
    return v;
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) throw Error("vocabulary: unknown token \"" + token + "\"");
    return it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  int size() const { return static_cast<int>(ids_.size()); }
  int corpus_size() const { return corpus_size_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [tok, id] : ids_) j[tok] = id;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j, int corpus_size) {
    Vocabulary v;
    for (auto it = j.begin(); it != j.end(); ++it) v.ids_[it.key()] = it.value().get<int>();
    v.corpus_size_ = corpus_size;
    return v;
  }

  bool operator==(const Vocabulary&) const = default;

 private:
  void add(const std::string& token) {
    if (!ids_.count(token)) ids_[token] = static_cast<int>(ids_.size());
  }
  std::map<std::string, int> ids_;
  int corpus_size_ = 0;
};

struct PromptTemplate {
  std::vector<int> prefix_tokens;
  std::vector<int> infix1_tokens;
  std::vector<int> infix2_tokens;
  int x_capacity = 0;
  int emotion_slot_id = 0;
  int cause_slot_id = 0;
  int pad_id = 0;

  int prompt_length() const {
    return static_cast<int>(prefix_tokens.size() + infix1_tokens.size() + infix2_tokens.size()) + x_capacity + 2;
  }
  int x_begin() const { return static_cast<int>(prefix_tokens.size()); }
  int emotion_index() const { return x_begin() + x_capacity + static_cast<int>(infix1_tokens.size()); }
  int cause_index() const { return emotion_index() + 1 + static_cast<int>(infix2_tokens.size()); }

  // Template text must read  <prefix> [X] <infix1> [M1] <infix2> [M2]  with each
  // slot exactly once and nothing after [M2].
  static PromptTemplate parse(const std::string& text, const Vocabulary& vocab, int x_capacity) {
    if (x_capacity < 1) throw ConfigError("prompt: x_capacity must be >= 1");
    const auto words = split_whitespace(text);
    auto find_once = [&](const char* slot) {
      std::ptrdiff_t at = -1;
      for (std::size_t k = 0; k < words.size(); ++k)
        if (words[k] == slot) {
          if (at >= 0) throw ConfigError(std::string("prompt.template: ") + slot + " appears more than once");
          at = static_cast<std::ptrdiff_t>(k);
        }
      if (at < 0) throw ConfigError(std::string("prompt.template: missing ") + slot);
      return static_cast<std::size_t>(at);
    };
    const std::size_t x = find_once(kInputSlot), m1 = find_once(kEmotionSlot), m2 = find_once(kCauseSlot);
    if (!(x < m1 && m1 < m2)) throw ConfigError("prompt.template: slots must appear in order [X] [M1] [M2]");
    if (m2 + 1 != words.size()) throw ConfigError("prompt.template: [M2] must be the last token");
    if (x == 0 || m1 == x + 1 || m2 == m1 + 1)
      throw ConfigError("prompt.template: each auxiliary segment must be non-empty");
    PromptTemplate t;
    for (std::size_t k = 0; k < x; ++k) t.prefix_tokens.push_back(vocab.id(words[k]));
    for (std::size_t k = x + 1; k < m1; ++k) t.infix1_tokens.push_back(vocab.id(words[k]));
    for (std::size_t k = m1 + 1; k < m2; ++k) t.infix2_tokens.push_back(vocab.id(words[k]));
    t.x_capacity = x_capacity;
    t.emotion_slot_id = vocab.id(kEmotionSlot);
    t.cause_slot_id = vocab.id(kCauseSlot);
    t.pad_id = vocab.id(kPadToken);
    return t;
  }
};

struct XSpan {
  int begin = 0;
  int length = 0;
  int end() const { return begin + length; }
  bool contains(int row) const { return row >= begin && row < end(); }
  bool operator==(const XSpan&) const = default;
};

struct PromptSequence {
  std::vector<int> token_ids;
  XSpan x_span;
  int m1_index = 0;
  int m2_index = 0;
  std::vector<bool> pad_mask;
  int text_tokens = 0;  // utterance tokens kept in the span
  bool truncated = false;

  int length() const { return static_cast<int>(token_ids.size()); }
};

inline PromptSequence render_prompt(const PromptTemplate& tmpl, std::span<const int> utterance_tokens) {
  if (utterance_tokens.empty()) throw Error("render_prompt: empty utterance");
  PromptSequence s;
  const int keep = std::min<int>(static_cast<int>(utterance_tokens.size()), tmpl.x_capacity);
  s.truncated = static_cast<int>(utterance_tokens.size()) > tmpl.x_capacity;
  s.text_tokens = keep;
  s.token_ids.reserve(static_cast<std::size_t>(tmpl.prompt_length()));
  auto append = [&](int id, bool pad) {
    s.token_ids.push_back(id);
    s.pad_mask.push_back(pad);
  };
  for (int id : tmpl.prefix_tokens) append(id, false);
  s.x_span = {static_cast<int>(s.token_ids.size()), tmpl.x_capacity};
  for (int k = 0; k < tmpl.x_capacity; ++k)
    append(k < keep ? utterance_tokens[static_cast<std::size_t>(k)] : tmpl.pad_id, k >= keep);
  for (int id : tmpl.infix1_tokens) append(id, false);
  s.m1_index = static_cast<int>(s.token_ids.size());
  append(tmpl.emotion_slot_id, false);
  for (int id : tmpl.infix2_tokens) append(id, false);
  s.m2_index = static_cast<int>(s.token_ids.size());
  append(tmpl.cause_slot_id, false);
  return s;
}

// Linear map from a modality's native dimension into d_model.
struct ModalityProjection {
  ad::Var weight;  // d_m x d_model
  ad::Var bias;    // 1 x d_model
};

// Fixed (rows x l_m) pooling matrix: contiguous bucket means when l_m > rows,
// identity rows followed by zero rows otherwise.
inline Matrix bucket_pool_matrix(int rows, int source_rows) {
  Matrix pool = Matrix::Zero(rows, source_rows);
  if (source_rows <= rows) {
    for (int r = 0; r < source_rows; ++r) pool(r, r) = 1.0;
    return pool;
  }
  for (int k = 0; k < rows; ++k) {
    const long lo = static_cast<long>(k) * source_rows / rows;
    const long hi = static_cast<long>(k + 1) * source_rows / rows;
    for (long r = lo; r < hi; ++r) pool(k, r) = 1.0 / static_cast<double>(hi - lo);
  }
  return pool;
}

struct AlignedBlock {
  ad::Var rows;        // target_rows x d_model
  int valid_rows = 0;  // leading rows that carry features
};

// Projects l_m x d_m features to d_model and fits them to `target_rows`.
inline AlignedBlock align_modality(ad::Tape& tape, const Matrix& feat, const ModalityProjection& proj,
                                   int target_rows) {
  if (feat.rows() < 1 || feat.cols() < 1) throw ShapeError("align_modality: empty feature matrix");
  if (!feat.allFinite()) throw NonFiniteError("align_modality: non-finite input feature");
  if (feat.cols() != proj.weight.rows()) throw ShapeError("align_modality: feature dim does not match projection");
  const int l_m = static_cast<int>(feat.rows());
  ad::Var projected = ad::linear(tape.constant(feat), proj.weight, proj.bias);
  ad::Var pooled = ad::matmul(tape.constant(bucket_pool_matrix(target_rows, l_m)), projected);
  return {pooled, std::min(l_m, target_rows)};
}

struct AlignedFeatures {
  ad::Var rows;  // L_p x d_model, zero outside x_span
  XSpan x_span;
  int valid_rows = 0;
  std::pair<int, int> source_dims{0, 0};
};

inline AlignedFeatures pad_to_prompt(ad::Tape& tape, const AlignedBlock& block, const PromptSequence& seq,
                                     std::pair<int, int> source_dims = {0, 0}) {
  if (block.rows.rows() != seq.x_span.length)
    throw ShapeError("pad_to_prompt: block has " + std::to_string(block.rows.rows()) + " rows, span has " +
                     std::to_string(seq.x_span.length));
  ad::Var zeros = tape.constant(Matrix::Zero(seq.length(), block.rows.cols()));
  return {ad::replace_rows(zeros, seq.x_span.begin, block.rows), seq.x_span, block.valid_rows, source_dims};
}

inline ad::Var substitute_x(const ad::Var& states, const AlignedFeatures& aligned) {
  if (states.rows() != aligned.rows.rows() || states.cols() != aligned.rows.cols())
    throw ShapeError("substitute_x: states and aligned features differ in shape");
  ad::Var block = ad::slice_rows(aligned.rows, aligned.x_span.begin, aligned.x_span.length);
  return ad::replace_rows(states, aligned.x_span.begin, block);
}

}  // namespace unimeec
