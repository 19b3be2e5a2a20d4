#pragma once

// Configuration records and their JSON form. A config file is one JSON object
// with optional sections "synth", "model", "prompt", "thc", "ablation",
// "train"; missing keys keep their defaults and unknown keys are rejected.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "unimeec/corpus.hpp"
#include "unimeec/error.hpp"
#include "unimeec/prompt.hpp"

namespace unimeec {

using nlohmann::json;

enum class WindowMode { interval, literal };

struct ThcConfig {
  int layers = 2;
  int window = 2;
  std::vector<int> heads{1, 4};
  bool attention = true;
  WindowMode window_mode = WindowMode::interval;

  // Heads used by layer n; the last entry repeats for deeper stacks.
  int heads_at(int n) const { return heads.empty() ? 1 : heads[std::min<std::size_t>(n, heads.size() - 1)]; }
  bool operator==(const ThcConfig&) const = default;
};

struct Modalities {
  bool text = true, audio = true, vision = true;

  int count() const { return int(text) + int(audio) + int(vision); }
  std::string str() const { return std::string(text ? "t" : "") + (audio ? "a" : "") + (vision ? "v" : ""); }
  static Modalities parse(const std::string& s) {
    Modalities m{false, false, false};
    for (char c : s) {
      if (c == 't') m.text = true;
      else if (c == 'a') m.audio = true;
      else if (c == 'v') m.vision = true;
      else throw ConfigError(std::string("ablation.modalities: unknown modality '") + c + "'");
    }
    if (m.count() == 0) throw ConfigError("ablation.modalities must be non-empty");
    return m;
  }
  bool operator==(const Modalities&) const = default;
};

struct AblationConfig {
  bool use_mecpe = true;
  Modalities modalities;
  bool use_thc = true;
  bool use_hierarchy = true;
  bool use_window = true;
  bool operator==(const AblationConfig&) const = default;
};

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 128;
  int text_layers = 2;
  int audio_layers = 1;
  int vision_layers = 1;
  int max_conversation = 64;  // C_max
  double dropout = 0.0;
  std::uint64_t init_seed = 1;
  bool freeze_embeddings = false;

  std::string prompt_template = kDefaultTemplate;
  int x_capacity = 7;

  // Resolved from the corpus when left at 0.
  int corpus_vocab = 0;
  int audio_dim = 0;
  int vision_dim = 0;
  LabelSpace labels;

  ThcConfig thc;
  AblationConfig ablation;

  int n_emotions() const { return labels.size(); }

  void check() const {
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) fail("d_model must be a positive multiple of n_heads");
    if (d_ffn < 1) fail("d_ffn must be >= 1");
    if (text_layers < 1 || audio_layers < 1 || vision_layers < 1) fail("layer counts must be >= 1");
    if (max_conversation < 1) fail("max_conversation must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
    if (x_capacity < 1) fail("x_capacity must be >= 1");
    if (corpus_vocab < 1 || audio_dim < 1 || vision_dim < 1) fail("corpus-derived sizes are unresolved");
    if (labels.size() < 2) fail("need at least two emotion labels");
    if (thc.layers < 1) fail("thc.layers must be >= 1");
    if (thc.window < 0) fail("thc.window must be >= 0");
    for (int n = 0; n < thc.layers; ++n)
      if (thc.heads_at(n) < 1 || d_model % thc.heads_at(n) != 0) fail("thc.heads must divide d_model");
    if (ablation.modalities.count() == 0) fail("ablation.modalities must be non-empty");
  }
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr_encoder = 3e-4;
  double lr_other = 1e-4;
  double warmup_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int patience = 0;  // epochs without valid WF1 gain before stopping; 0 disables

  void check() const {
    auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr_encoder > 0.0) || !(lr_other > 0.0)) fail("learning rates must be > 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) fail("warmup_fraction must be in [0, 1)");
    if (patience < 0) fail("patience must be >= 0");
  }
};

struct GradcheckConfig {
  double step = 1e-5;
  double threshold = 1e-3;
};

struct Config {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  GradcheckConfig gradcheck;
  std::vector<std::string> ablation_rows;  // empty: the standard grid
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void reject_unknown(const json& obj, const char* section, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(std::string(section) + ": expected an object");
  std::set<std::string> k(known.begin(), known.end());
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!k.count(it.key())) throw ConfigError(std::string(section) + ": unknown key \"" + it.key() + "\"");
}

template <class T>
void read(const json& obj, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key \"") + key + "\": " + e.what());
  }
}

inline bool read_switch(const json& v, const char* key) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "on") return true;
    if (s == "off") return false;
  }
  throw ConfigError(std::string("config key \"") + key + "\" must be on|off");
}

}  // namespace detail

inline json to_json(const ThcConfig& c) {
  return {{"layers", c.layers},
          {"window", c.window},
          {"heads", c.heads},
          {"attention", c.attention ? "on" : "off"},
          {"window_mode", c.window_mode == WindowMode::interval ? "interval" : "literal"}};
}

inline ThcConfig thc_from_json(const json& j, ThcConfig c = {}) {
  detail::reject_unknown(j, "thc", {"layers", "window", "heads", "attention", "window_mode"});
  detail::read(j, "layers", c.layers);
  detail::read(j, "window", c.window);
  detail::read(j, "heads", c.heads);
  if (j.contains("attention")) c.attention = detail::read_switch(j["attention"], "thc.attention");
  if (j.contains("window_mode")) {
    const auto m = j["window_mode"].get<std::string>();
    if (m == "interval") c.window_mode = WindowMode::interval;
    else if (m == "literal") c.window_mode = WindowMode::literal;
    else throw ConfigError("thc.window_mode must be interval|literal");
  }
  return c;
}

inline json to_json(const AblationConfig& a) {
  return {{"use_mecpe", a.use_mecpe},
          {"modalities", a.modalities.str()},
          {"use_thc", a.use_thc},
          {"use_hierarchy", a.use_hierarchy},
          {"use_window", a.use_window}};
}

inline AblationConfig ablation_from_json(const json& j, AblationConfig a = {}) {
  detail::reject_unknown(j, "ablation", {"use_mecpe", "modalities", "use_thc", "use_hierarchy", "use_window"});
  detail::read(j, "use_mecpe", a.use_mecpe);
  if (j.contains("modalities")) a.modalities = Modalities::parse(j["modalities"].get<std::string>());
  detail::read(j, "use_thc", a.use_thc);
  detail::read(j, "use_hierarchy", a.use_hierarchy);
  detail::read(j, "use_window", a.use_window);
  return a;
}

inline json to_json(const LabelSpace& l) { return {{"names", l.names}, {"neutral_index", l.neutral_index}}; }

inline json to_json(const ModelConfig& c) {
  return {{"model",
           {{"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"d_ffn", c.d_ffn},
            {"text_layers", c.text_layers},
            {"audio_layers", c.audio_layers},
            {"vision_layers", c.vision_layers},
            {"max_conversation", c.max_conversation},
            {"dropout", c.dropout},
            {"init_seed", c.init_seed},
            {"freeze_embeddings", c.freeze_embeddings},
            {"corpus_vocab", c.corpus_vocab},
            {"audio_dim", c.audio_dim},
            {"vision_dim", c.vision_dim},
            {"labels", to_json(c.labels)}}},
          {"prompt", {{"template", c.prompt_template}, {"x_capacity", c.x_capacity}}},
          {"thc", to_json(c.thc)},
          {"ablation", to_json(c.ablation)}};
}

// Reads the "model", "prompt", "thc" and "ablation" sections of `root`.
inline ModelConfig model_from_json(const json& root, ModelConfig c = {}) {
  if (root.contains("model")) {
    const json& m = root["model"];
    detail::reject_unknown(m, "model",
                           {"d_model", "n_heads", "d_ffn", "text_layers", "audio_layers", "vision_layers",
                            "max_conversation", "dropout", "init_seed", "freeze_embeddings", "corpus_vocab",
                            "audio_dim", "vision_dim", "labels"});
    detail::read(m, "d_model", c.d_model);
    detail::read(m, "n_heads", c.n_heads);
    detail::read(m, "d_ffn", c.d_ffn);
    detail::read(m, "text_layers", c.text_layers);
    detail::read(m, "audio_layers", c.audio_layers);
    detail::read(m, "vision_layers", c.vision_layers);
    detail::read(m, "max_conversation", c.max_conversation);
    detail::read(m, "dropout", c.dropout);
    detail::read(m, "init_seed", c.init_seed);
    detail::read(m, "freeze_embeddings", c.freeze_embeddings);
    detail::read(m, "corpus_vocab", c.corpus_vocab);
    detail::read(m, "audio_dim", c.audio_dim);
    detail::read(m, "vision_dim", c.vision_dim);
    if (m.contains("labels")) {
      const json& l = m["labels"];
      detail::reject_unknown(l, "model.labels", {"names", "neutral_index"});
      detail::read(l, "names", c.labels.names);
      detail::read(l, "neutral_index", c.labels.neutral_index);
    }
  }
  if (root.contains("prompt")) {
    const json& p = root["prompt"];
    detail::reject_unknown(p, "prompt", {"template", "x_capacity"});
    detail::read(p, "template", c.prompt_template);
    detail::read(p, "x_capacity", c.x_capacity);
  }
  if (root.contains("thc")) c.thc = thc_from_json(root["thc"], c.thc);
  if (root.contains("ablation")) c.ablation = ablation_from_json(root["ablation"], c.ablation);
  return c;
}

inline json to_json(const SynthConfig& s) {
  return {{"n_train", s.n_train},
          {"n_valid", s.n_valid},
          {"n_test", s.n_test},
          {"min_utterances", s.min_utterances},
          {"max_utterances", s.max_utterances},
          {"n_labels", s.n_labels},
          {"neutral_index", s.neutral_index},
          {"vocab_size", s.vocab_size},
          {"audio_dim", s.audio_dim},
          {"vision_dim", s.vision_dim},
          {"audio_len", s.audio_len},
          {"vision_len", s.vision_len},
          {"cause_offset_range", s.cause_offset_range},
          {"min_tokens", s.min_tokens},
          {"max_tokens", s.max_tokens},
          {"events_per_label", s.events_per_label},
          {"neutral_prob", s.neutral_prob},
          {"shift_scale", s.shift_scale},
          {"noise", s.noise},
          {"seed", s.seed}};
}

inline SynthConfig synth_from_json(const json& j, SynthConfig s = {}) {
  detail::reject_unknown(j, "synth",
                         {"n_train", "n_valid", "n_test", "min_utterances", "max_utterances", "n_labels",
                          "neutral_index", "vocab_size", "audio_dim", "vision_dim", "audio_len", "vision_len",
                          "cause_offset_range", "min_tokens", "max_tokens", "events_per_label", "neutral_prob",
                          "shift_scale", "noise", "seed"});
  detail::read(j, "n_train", s.n_train);
  detail::read(j, "n_valid", s.n_valid);
  detail::read(j, "n_test", s.n_test);
  detail::read(j, "min_utterances", s.min_utterances);
  detail::read(j, "max_utterances", s.max_utterances);
  detail::read(j, "n_labels", s.n_labels);
  detail::read(j, "neutral_index", s.neutral_index);
  detail::read(j, "vocab_size", s.vocab_size);
  detail::read(j, "audio_dim", s.audio_dim);
  detail::read(j, "vision_dim", s.vision_dim);
  detail::read(j, "audio_len", s.audio_len);
  detail::read(j, "vision_len", s.vision_len);
  detail::read(j, "cause_offset_range", s.cause_offset_range);
  detail::read(j, "min_tokens", s.min_tokens);
  detail::read(j, "max_tokens", s.max_tokens);
  detail::read(j, "events_per_label", s.events_per_label);
  detail::read(j, "neutral_prob", s.neutral_prob);
  detail::read(j, "shift_scale", s.shift_scale);
  detail::read(j, "noise", s.noise);
  detail::read(j, "seed", s.seed);
  return s;
}

inline json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},       {"batch_size", t.batch_size}, {"lr_encoder", t.lr_encoder},
          {"lr_other", t.lr_other},   {"warmup_fraction", t.warmup_fraction},
          {"beta1", t.beta1},         {"beta2", t.beta2},           {"adam_eps", t.adam_eps},
          {"seed", t.seed},           {"patience", t.patience}};
}

inline TrainConfig train_from_json(const json& j, TrainConfig t = {}) {
  detail::reject_unknown(j, "train",
                         {"epochs", "batch_size", "lr_encoder", "lr_other", "warmup_fraction", "beta1", "beta2",
                          "adam_eps", "seed", "patience"});
  detail::read(j, "epochs", t.epochs);
  detail::read(j, "batch_size", t.batch_size);
  detail::read(j, "lr_encoder", t.lr_encoder);
  detail::read(j, "lr_other", t.lr_other);
  detail::read(j, "warmup_fraction", t.warmup_fraction);
  detail::read(j, "beta1", t.beta1);
  detail::read(j, "beta2", t.beta2);
  detail::read(j, "adam_eps", t.adam_eps);
  detail::read(j, "seed", t.seed);
  detail::read(j, "patience", t.patience);
  return t;
}

// UNIMEEC_SEED, when set, replaces every seed in the config.
inline void apply_seed_override(Config& c) {
  const char* env = std::getenv("UNIMEEC_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("UNIMEEC_SEED is not an unsigned integer: ") + env);
  c.synth.seed = v;
  c.model.init_seed = v;
  c.train.seed = v;
}

inline Config config_from_json(const json& root) {
  detail::reject_unknown(root, "config",
                         {"synth", "model", "prompt", "thc", "ablation", "train", "ablate", "gradcheck"});
  Config c;
  if (root.contains("synth")) c.synth = synth_from_json(root["synth"]);
  c.model = model_from_json(root);
  if (root.contains("train")) c.train = train_from_json(root["train"]);
  if (root.contains("ablate")) {
    const json& a = root["ablate"];
    detail::reject_unknown(a, "ablate", {"rows"});
    detail::read(a, "rows", c.ablation_rows);
  }
  if (root.contains("gradcheck")) {
    const json& g = root["gradcheck"];
    detail::reject_unknown(g, "gradcheck", {"step", "threshold"});
    detail::read(g, "step", c.gradcheck.step);
    detail::read(g, "threshold", c.gradcheck.threshold);
    if (!(c.gradcheck.step > 0.0) || !(c.gradcheck.threshold > 0.0))
      throw ConfigError("gradcheck: step and threshold must be > 0");
  }
  apply_seed_override(c);
  return c;
}

inline json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

inline Config load_config(const std::string& path) { return config_from_json(load_config_json(path)); }

// Fills corpus-derived fields left at 0 and checks the rest against `corpus`.
inline ModelConfig resolve_for_corpus(ModelConfig c, const Corpus& corpus) {
  auto first_dim = [&](bool audio) -> int {
    for (Split s : {Split::train, Split::valid, Split::test})
      for (const auto& conv : corpus.split(s))
        for (const auto& u : conv.utterances) return static_cast<int>(audio ? u.audio.cols() : u.vision.cols());
    return 0;
  };
  if (c.corpus_vocab == 0) c.corpus_vocab = corpus.token_bound();
  else if (corpus.token_bound() > c.corpus_vocab)
    throw ConfigError("corpus uses token ids beyond model.corpus_vocab");
  const int a = first_dim(true), v = first_dim(false);
  if (c.audio_dim == 0) c.audio_dim = a;
  else if (a != 0 && a != c.audio_dim) throw ConfigError("corpus audio dimension differs from model.audio_dim");
  if (c.vision_dim == 0) c.vision_dim = v;
  else if (v != 0 && v != c.vision_dim) throw ConfigError("corpus vision dimension differs from model.vision_dim");
  if (c.labels.names.empty()) c.labels = corpus.labels;
  else if (!(c.labels == corpus.labels)) throw ConfigError("corpus label space differs from model.labels");
  if (static_cast<int>(corpus.longest_conversation()) > c.max_conversation)
    throw ConfigError("corpus has a conversation longer than model.max_conversation");
  c.check();
  return c;
}

}  // namespace unimeec
