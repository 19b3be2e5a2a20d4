#pragma once

// Conversation data model, JSONL ingestion, synthetic corpora with planted
// emotion-cause structure, and seeded batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unimeec/error.hpp"
#include "unimeec/parameter.hpp"

namespace unimeec {

struct LabelSpace {
  std::vector<std::string> names;
  int neutral_index = 0;

  int size() const { return static_cast<int>(names.size()); }

  static LabelSpace numbered(int n, int neutral = 0) {
    LabelSpace s;
    for (int k = 0; k < n; ++k) s.names.push_back(k == neutral ? "neutral" : "emotion" + std::to_string(k));
    s.neutral_index = neutral;
    return s;
  }
  bool operator==(const LabelSpace&) const = default;
};

struct Utterance {
  std::vector<int> tokens;
  Matrix audio;   // l_a x d_a
  Matrix vision;  // l_v x d_v
  int emotion = 0;
  std::optional<int> cause_id;

  bool operator==(const Utterance& o) const {
    return tokens == o.tokens && audio.rows() == o.audio.rows() && audio.cols() == o.audio.cols() &&
           vision.rows() == o.vision.rows() && vision.cols() == o.vision.cols() &&
           audio == o.audio && vision == o.vision && emotion == o.emotion && cause_id == o.cause_id;
  }
};

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  bool operator==(const Conversation&) const = default;
};

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

struct Corpus {
  std::vector<Conversation> train, valid, test;
  LabelSpace labels;

  std::vector<Conversation>& split(Split s) {
    return s == Split::train ? train : s == Split::valid ? valid : test;
  }
  const std::vector<Conversation>& split(Split s) const {
    return s == Split::train ? train : s == Split::valid ? valid : test;
  }
  std::size_t longest_conversation() const {
    std::size_t n = 0;
    for (const auto* sp : {&train, &valid, &test})
      for (const auto& c : *sp) n = std::max(n, c.size());
    return n;
  }
  // One past the largest token id in any split.
  int token_bound() const {
    int n = 0;
    for (const auto* sp : {&train, &valid, &test})
      for (const auto& c : *sp)
        for (const auto& u : c.utterances)
          for (int t : u.tokens) n = std::max(n, t + 1);
    return n;
  }
  bool operator==(const Corpus&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string code;
  std::string detail;
};

inline std::vector<Violation> validate(const Conversation& c, const LabelSpace& labels) {
  std::vector<Violation> out;
  auto where = [&](std::size_t i) { return c.id + " utterance " + std::to_string(i); };
  if (c.utterances.empty()) out.push_back({"empty-conversation", c.id});
  const int n_labels = labels.size();
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    const Utterance& u = c.utterances[i];
    if (u.tokens.empty()) out.push_back({"empty-tokens", where(i)});
    for (int t : u.tokens)
      if (t < 0) {
        out.push_back({"negative-token", where(i)});
        break;
      }
    if (u.emotion < 0 || u.emotion >= n_labels)
      out.push_back({"label-out-of-range", where(i) + " emotion " + std::to_string(u.emotion)});
    if (u.cause_id) {
      if (*u.cause_id < 0 || *u.cause_id >= static_cast<int>(c.utterances.size()))
        out.push_back({"cause-out-of-range", where(i) + " cause_id " + std::to_string(*u.cause_id)});
      if (u.emotion == labels.neutral_index) out.push_back({"neutral-with-cause", where(i)});
    }
    if (u.audio.rows() == 0 || u.audio.cols() == 0) out.push_back({"empty-features", where(i) + " audio"});
    if (u.vision.rows() == 0 || u.vision.cols() == 0) out.push_back({"empty-features", where(i) + " vision"});
    for (Eigen::Index r = 0; r < u.audio.rows(); ++r)
      if (!u.audio.row(r).allFinite()) {
        out.push_back({"non-finite feature", where(i) + " audio row " + std::to_string(r)});
        break;
      }
    for (Eigen::Index r = 0; r < u.vision.rows(); ++r)
      if (!u.vision.row(r).allFinite()) {
        out.push_back({"non-finite feature", where(i) + " vision row " + std::to_string(r)});
        break;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

namespace detail {

using nlohmann::json;

inline Matrix matrix_from_json(const json& j, const std::string& what, std::size_t line) {
  if (!j.is_array()) throw SchemaError("line " + std::to_string(line) + ": " + what + " must be an array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Matrix(0, 0);
  if (!j[0].is_array()) throw SchemaError("line " + std::to_string(line) + ": " + what + " rows must be arrays");
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ShapeError("line " + std::to_string(line) + ": " + what + " row " + std::to_string(r) +
                       " has " + std::to_string(row.is_array() ? row.size() : 0) + " columns, expected " +
                       std::to_string(cols));
    for (Eigen::Index c = 0; c < cols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number())
        throw SchemaError("line " + std::to_string(line) + ": " + what + " entries must be numbers");
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline const json& require(const json& obj, const char* key, const std::string& ctx) {
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(ctx + ": missing field \"" + key + "\"");
  return *it;
}

}  // namespace detail

inline nlohmann::json conversation_to_json(const Conversation& c, Split split) {
  using nlohmann::json;
  json j;
  j["id"] = c.id;
  j["split"] = split_name(split);
  json utts = json::array();
  for (const auto& u : c.utterances) {
    json ju;
    ju["tokens"] = u.tokens;
    ju["audio"] = detail::matrix_to_json(u.audio);
    ju["vision"] = detail::matrix_to_json(u.vision);
    ju["emotion"] = u.emotion;
    ju["cause_id"] = u.cause_id ? json(*u.cause_id) : json(nullptr);
    utts.push_back(std::move(ju));
  }
  j["utterances"] = std::move(utts);
  return j;
}

// The first line may be a label-space record {"label_names": [...], "neutral_index": k};
// every other line is one conversation. Without the record the label space is
// numbered 0..max(emotion) with neutral 0, or `fallback` when given.
inline Corpus parse_corpus(std::istream& in, const std::optional<LabelSpace>& fallback = std::nullopt) {
  using nlohmann::json;
  struct Pending {
    Conversation conv;
    Split split;
    std::size_t line;
  };
  std::vector<Pending> pending;
  std::optional<LabelSpace> labels;
  std::optional<Eigen::Index> audio_dim, vision_dim;
  std::set<std::string> ids;
  int max_emotion = 0;

  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line) + ": " + e.what());
    }
    const std::string ctx = "line " + std::to_string(line);
    if (!j.is_object()) throw ParseError(ctx + ": expected a JSON object");
    if (j.contains("label_names") && !j.contains("utterances")) {
      if (!pending.empty() || labels) throw SchemaError(ctx + ": label record must be the first line");
      LabelSpace ls;
      try {
        ls.names = j.at("label_names").get<std::vector<std::string>>();
        ls.neutral_index = j.value("neutral_index", 0);
      } catch (const json::exception& e) {
        throw SchemaError(ctx + ": bad label record: " + e.what());
      }
      if (ls.names.size() < 2 || ls.neutral_index < 0 || ls.neutral_index >= ls.size())
        throw SchemaError(ctx + ": label record needs >= 2 names and a valid neutral_index");
      labels = std::move(ls);
      continue;
    }
    Pending p;
    p.line = line;
    try {
      p.conv.id = detail::require(j, "id", ctx).get<std::string>();
      const std::string split = detail::require(j, "split", ctx).get<std::string>();
      if (split == "train") p.split = Split::train;
      else if (split == "valid") p.split = Split::valid;
      else if (split == "test") p.split = Split::test;
      else throw SchemaError(ctx + ": unknown split \"" + split + "\"");
      const json& utts = detail::require(j, "utterances", ctx);
      if (!utts.is_array()) throw SchemaError(ctx + ": utterances must be an array");
      for (const json& ju : utts) {
        Utterance u;
        u.tokens = detail::require(ju, "tokens", ctx).get<std::vector<int>>();
        u.audio = detail::matrix_from_json(detail::require(ju, "audio", ctx), "audio", line);
        u.vision = detail::matrix_from_json(detail::require(ju, "vision", ctx), "vision", line);
        u.emotion = detail::require(ju, "emotion", ctx).get<int>();
        const json& cause = detail::require(ju, "cause_id", ctx);
        if (!cause.is_null()) u.cause_id = cause.get<int>();
        max_emotion = std::max(max_emotion, u.emotion);
        p.conv.utterances.push_back(std::move(u));
      }
    } catch (const json::exception& e) {
      throw SchemaError(ctx + ": " + e.what());
    }
    for (const auto& u : p.conv.utterances) {
      auto check_dim = [&](std::optional<Eigen::Index>& dim, const Matrix& m, const char* what) {
        if (m.rows() == 0) return;
        if (!dim) dim = m.cols();
        else if (*dim != m.cols())
          throw ShapeError(ctx + ": " + what + " dimension " + std::to_string(m.cols()) +
                           " differs from corpus dimension " + std::to_string(*dim));
      };
      check_dim(audio_dim, u.audio, "audio");
      check_dim(vision_dim, u.vision, "vision");
    }
    if (!ids.insert(p.conv.id).second)
      throw SchemaError(ctx + ": duplicate conversation id \"" + p.conv.id + "\"");
    pending.push_back(std::move(p));
  }

  Corpus corpus;
  corpus.labels = labels ? *labels : fallback ? *fallback : LabelSpace::numbered(std::max(2, max_emotion + 1));
  for (auto& p : pending) {
    auto violations = validate(p.conv, corpus.labels);
    if (!violations.empty()) {
      std::string msg = "line " + std::to_string(p.line) + ": conversation \"" + p.conv.id + "\": ";
      for (std::size_t k = 0; k < violations.size(); ++k)
        msg += (k ? "; " : "") + violations[k].code + " (" + violations[k].detail + ")";
      throw SchemaError(msg);
    }
    corpus.split(p.split).push_back(std::move(p.conv));
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& path, const std::optional<LabelSpace>& fallback = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path);
  return parse_corpus(in, fallback);
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  nlohmann::json meta;
  meta["label_names"] = corpus.labels.names;
  meta["neutral_index"] = corpus.labels.neutral_index;
  out << meta.dump() << '\n';
  for (Split s : {Split::train, Split::valid, Split::test})
    for (const auto& c : corpus.split(s)) out << conversation_to_json(c, s).dump() << '\n';
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus file: " + path);
  write_corpus(out, corpus);
  if (!out) throw Error("failed writing corpus file: " + path);
}

// ---------------------------------------------------------------------------
// Synthetic corpora
//
// Conversations are built from runs. A run starts with a cause utterance that
// carries an event token (which fixes the run's emotion) and is its own cause;
// it is followed by up to cause_offset_range utterances with the same emotion
// whose cause is the run start. Follower k carries an offset marker token
// r_k. Every non-neutral utterance has a class-specific mean shift on its
// audio and vision features. Neutral utterances sit between runs.

struct SynthConfig {
  int n_train = 48;
  int n_valid = 8;
  int n_test = 8;
  int min_utterances = 3;
  int max_utterances = 6;
  int n_labels = 4;
  int neutral_index = 0;
  int vocab_size = 40;
  int audio_dim = 8;
  int vision_dim = 6;
  int audio_len = 8;
  int vision_len = 4;
  int cause_offset_range = 2;
  int min_tokens = 3;
  int max_tokens = 6;
  int events_per_label = 2;
  double neutral_prob = 0.3;
  double shift_scale = 1.0;
  double noise = 1.0;
  std::uint64_t seed = 7;

  int n_conversations() const { return n_train + n_valid + n_test; }
  int event_token_count() const { return events_per_label * (n_labels - 1); }
  int marker_token(int offset) const { return event_token_count() + offset - 1; }
  int first_filler_token() const { return event_token_count() + cause_offset_range; }

  void check() const {
    auto fail = [](const std::string& m) { throw ConfigError("synth: " + m); };
    if (n_train < 0 || n_valid < 0 || n_test < 0 || n_conversations() < 1) fail("need at least one conversation");
    if (min_utterances < 1 || max_utterances < min_utterances) fail("bad utterance-count range");
    if (n_labels < 2) fail("need at least two labels");
    if (neutral_index < 0 || neutral_index >= n_labels) fail("neutral_index out of range");
    if (cause_offset_range < 0 || cause_offset_range > max_utterances - 1)
      fail("cause_offset_range must be in [0, max_utterances - 1]");
    if (events_per_label < 1) fail("events_per_label must be >= 1");
    if (vocab_size <= first_filler_token()) fail("vocab_size too small for event and marker tokens");
    if (min_tokens < 2 || max_tokens < min_tokens) fail("token-count range must start at >= 2");
    if (audio_dim < 1 || vision_dim < 1 || audio_len < 1 || vision_len < 1) fail("feature shapes must be >= 1");
    if (neutral_prob < 0.0 || neutral_prob >= 1.0) fail("neutral_prob must be in [0, 1)");
    if (!(noise >= 0.0) || !std::isfinite(shift_scale)) fail("bad noise or shift_scale");
  }
};

class SynthGenerator {
 public:
  explicit SynthGenerator(SynthConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.check();
    for (int label = 0, k = 0; label < cfg_.n_labels; ++label) {
      if (label == cfg_.neutral_index) continue;
      for (int e = 0; e < cfg_.events_per_label; ++e) event_emotion_[k * cfg_.events_per_label + e] = label;
      ++k;
    }
  }

  const SynthConfig& config() const { return cfg_; }

  // event token id -> emotion label it plants.
  const std::map<int, int>& event_table() const { return event_emotion_; }

  Corpus generate() const {
    std::mt19937_64 rng(cfg_.seed);
    Corpus corpus;
    corpus.labels = LabelSpace::numbered(cfg_.n_labels, cfg_.neutral_index);

    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<Matrix> audio_shift(cfg_.n_labels), vision_shift(cfg_.n_labels);
    std::bernoulli_distribution sign;
    for (int label = 0; label < cfg_.n_labels; ++label) {
      audio_shift[label] = Matrix::Zero(1, cfg_.audio_dim);
      vision_shift[label] = Matrix::Zero(1, cfg_.vision_dim);
      if (label == cfg_.neutral_index) continue;
      for (int d = 0; d < cfg_.audio_dim; ++d) audio_shift[label](0, d) = (sign(rng) ? 1.0 : -1.0) * cfg_.shift_scale;
      for (int d = 0; d < cfg_.vision_dim; ++d) vision_shift[label](0, d) = (sign(rng) ? 1.0 : -1.0) * cfg_.shift_scale;
    }

    std::vector<int> emotive;
    for (int label = 0; label < cfg_.n_labels; ++label)
      if (label != cfg_.neutral_index) emotive.push_back(label);

    auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    auto features = [&](int rows, int cols, const Matrix& shift) {
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = cfg_.noise * unit(rng);
      m.rowwise() += shift.row(0);
      return m;
    };
    auto filler = [&]() {
      std::vector<int> t(static_cast<std::size_t>(uniform_int(cfg_.min_tokens, cfg_.max_tokens)));
      for (int& x : t) x = uniform_int(cfg_.first_filler_token(), cfg_.vocab_size - 1);
      return t;
    };
    std::bernoulli_distribution neutral_step(cfg_.neutral_prob);

    for (int n = 0; n < cfg_.n_conversations(); ++n) {
      Conversation conv;
      char id[32];
      std::snprintf(id, sizeof id, "conv%05d", n);
      conv.id = id;
      const int length = uniform_int(cfg_.min_utterances, cfg_.max_utterances);
      conv.utterances.resize(static_cast<std::size_t>(length));
      // labels and causes first, then content
      std::vector<int> event_of(static_cast<std::size_t>(length), -1);
      std::vector<int> offset_of(static_cast<std::size_t>(length), 0);
      bool any_run = false;
      for (int p = 0; p < length;) {
        Utterance& u = conv.utterances[static_cast<std::size_t>(p)];
        const bool force_run = !any_run && p == length - 1;
        if (!force_run && neutral_step(rng)) {
          u.emotion = cfg_.neutral_index;
          ++p;
          continue;
        }
        any_run = true;
        const int label = emotive[static_cast<std::size_t>(uniform_int(0, static_cast<int>(emotive.size()) - 1))];
        const int label_rank = static_cast<int>(std::find(emotive.begin(), emotive.end(), label) - emotive.begin());
        const int event = label_rank * cfg_.events_per_label + uniform_int(0, cfg_.events_per_label - 1);
        const int run = std::min(1 + uniform_int(0, cfg_.cause_offset_range), length - p);
        for (int k = 0; k < run; ++k) {
          Utterance& v = conv.utterances[static_cast<std::size_t>(p + k)];
          v.emotion = label;
          v.cause_id = p;
          offset_of[static_cast<std::size_t>(p + k)] = k;
        }
        event_of[static_cast<std::size_t>(p)] = event;
        p += run;
      }
      for (int i = 0; i < length; ++i) {
        Utterance& u = conv.utterances[static_cast<std::size_t>(i)];
        u.tokens = filler();
        const auto slot = [&]() { return static_cast<std::size_t>(uniform_int(0, static_cast<int>(u.tokens.size()) - 1)); };
        if (event_of[static_cast<std::size_t>(i)] >= 0) u.tokens[slot()] = event_of[static_cast<std::size_t>(i)];
        else if (u.cause_id) u.tokens[slot()] = cfg_.marker_token(offset_of[static_cast<std::size_t>(i)]);
        u.audio = features(cfg_.audio_len, cfg_.audio_dim, audio_shift[static_cast<std::size_t>(u.emotion)]);
        u.vision = features(cfg_.vision_len, cfg_.vision_dim, vision_shift[static_cast<std::size_t>(u.emotion)]);
      }
      if (n < cfg_.n_train) corpus.train.push_back(std::move(conv));
      else if (n < cfg_.n_train + cfg_.n_valid) corpus.valid.push_back(std::move(conv));
      else corpus.test.push_back(std::move(conv));
    }
    return corpus;
  }

 private:
  SynthConfig cfg_;
  std::map<int, int> event_emotion_;
};

inline Corpus synth_generate(const SynthConfig& cfg) { return SynthGenerator(cfg).generate(); }

// ---------------------------------------------------------------------------
// Batching

// Seeded per-epoch permutation of a split, cut into batches of whole
// conversations. next() is a single-consumer cursor that rolls into the next
// epoch after the last batch.
class BatchIterator {
 public:
  BatchIterator(std::size_t n_items, std::size_t batch_size, std::uint64_t seed)
      : n_(n_items), batch_size_(batch_size), seed_(seed) {
    if (n_items == 0) throw Error("batch_iter: empty split");
    if (batch_size == 0) throw ConfigError("batch_iter: batch_size must be >= 1");
  }
  BatchIterator(const std::vector<Conversation>& split, std::size_t batch_size, std::uint64_t seed)
      : BatchIterator(split.size(), batch_size, seed) {}

  std::vector<std::vector<std::size_t>> epoch(std::size_t e) const {
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(e)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b = 0; b < n_; b += batch_size_)
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(n_, b + batch_size_)));
    return batches;
  }

  std::size_t batches_per_epoch() const { return (n_ + batch_size_ - 1) / batch_size_; }

  const std::vector<std::size_t>& next() {
    if (cursor_ >= current_.size()) {
      if (started_) ++epoch_;
      started_ = true;
      current_ = epoch(epoch_);
      cursor_ = 0;
    }
    return current_[cursor_++];
  }

  std::size_t current_epoch() const { return epoch_; }

 private:
  std::size_t n_, batch_size_;
  std::uint64_t seed_;
  std::vector<std::vector<std::size_t>> current_;
  std::size_t cursor_ = 0, epoch_ = 0;
  bool started_ = false;
};

}  // namespace unimeec
