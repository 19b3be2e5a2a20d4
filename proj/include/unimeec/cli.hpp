#pragma once

// Command-line front end. Subcommands:
//   synth      --out <jsonl> [--config <json>]
//   train      --data <jsonl> --out <dir> [--config <json>]
//   eval       --data <jsonl> --checkpoint <bin> --report <json>
//              [--split train|valid|test] [--pair-mode strict|position] [--config <json>]
//   gradcheck  [--config <json>]
//   ablate     --data <jsonl> --out <dir> [--config <json>] [--rows a,b,...]
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "unimeec/ablation.hpp"
#include "unimeec/gradcheck.hpp"
#include "unimeec/trainer.hpp"

namespace unimeec {

namespace detail {

inline Config config_or_default(const std::string& path) {
  if (!path.empty()) return load_config(path);
  Config c;
  apply_seed_override(c);
  return c;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw ConfigError("--split must be train|valid|test");
}

// "w/o MECPE" -> "wo_mecpe"
inline std::string row_file_stem(const std::string& row) {
  std::string out;
  for (char c : row) {
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (c == ' ' && !out.empty() && out.back() != '_') out += '_';
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline int cmd_synth(const std::string& config, const std::string& out_path, std::ostream& out) {
  const Config c = config_or_default(config);
  const Corpus corpus = synth_generate(c.synth);
  save_corpus(corpus, out_path);
  out << "wrote " << corpus.train.size() << "/" << corpus.valid.size() << "/" << corpus.test.size()
      << " conversations to " << out_path << "\n";
  return 0;
}

inline int cmd_train(const std::string& config, const std::string& data, const std::string& dir, std::ostream& out) {
  const Config c = config_or_default(config);
  const Corpus corpus = load_corpus(data);
  Model model(resolve_for_corpus(c.model, corpus));
  std::filesystem::create_directories(dir);
  std::ofstream log(dir + "/log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw Error("cannot open log in " + dir);
  TrainOptions opt;
  opt.log = &log;
  opt.checkpoint_path = dir + "/checkpoint.bin";
  const TrainResult r = train(model, corpus, c.train, opt);
  out << "epochs " << r.epochs.size() << ", best epoch " << r.best_epoch << ", best valid wf1 " << std::setprecision(6)
      << r.best_valid_wf1 << (r.stopped_early ? " (stopped early)" : "") << "\n";
  return 0;
}

inline int cmd_eval(const std::string& config, const std::string& data, const std::string& checkpoint,
                    const std::string& report_path, const std::string& split, const std::string& pair_mode,
                    std::ostream& out) {
  Model model = load_checkpoint(checkpoint);
  const Corpus corpus = load_corpus(data);
  try {
    resolve_for_corpus(model.config(), corpus);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config mismatch between checkpoint and data: ") + e.what());
  }
  if (!config.empty()) {
    ModelConfig wanted = resolve_for_corpus(load_config(config).model, corpus);
    wanted.init_seed = model.config().init_seed;
    if (!(wanted == model.config()))
      throw ConfigError("config mismatch: checkpoint model configuration differs from " + config);
  }
  const auto& rows = corpus.split(parse_split(split));
  if (rows.empty()) throw Error("eval: split " + split + " is empty");
  const EvalResult r = evaluate(model, rows, parse_pair_mode(pair_mode));
  write_text(report_path, to_json(r.report).dump(2) + "\n");
  out << "acc " << r.report.emotion.acc << " wf1 " << r.report.emotion.wf1 << " cause_f1 " << r.report.cause.f1
      << " pair_f1 " << r.report.pair.f1 << "\n";
  return 0;
}

// Tiny defaults, overlaid with any sections of the given config.
inline int cmd_gradcheck(const std::string& config, std::ostream& out) {
  ModelConfig mc = tiny_gradcheck_model();
  SynthConfig sc = tiny_gradcheck_corpus();
  GradcheckConfig gc;
  if (!config.empty()) {
    const json root = load_config_json(config);
    gc = config_from_json(root).gradcheck;  // validates every section
    mc = model_from_json(root, mc);
    if (root.contains("synth")) sc = synth_from_json(root["synth"], sc);
  }
  Config seeds{sc, mc, {}, gc, {}};
  apply_seed_override(seeds);
  const Corpus corpus = synth_generate(seeds.synth);
  Model model(resolve_for_corpus(seeds.model, corpus));
  const GradCheckResult r = gradcheck(model, corpus.train.front(), {gc.step, gc.threshold});
  out << "max relative gradient error " << std::scientific << std::setprecision(3) << r.max_rel_error << " over "
      << r.checked << " scalars (worst: " << r.worst_parameter << "[" << r.worst_index << "])\n";
  if (!r.passed(gc.threshold)) {
    out << "FAIL: above threshold " << gc.threshold << "\n";
    return 1;
  }
  return 0;
}

inline int cmd_ablate(const std::string& config, const std::string& data, const std::string& dir,
                      const std::string& rows_flag, std::ostream& out) {
  const Config c = config_or_default(config);
  const Corpus corpus = load_corpus(data);
  std::vector<std::string> rows = !rows_flag.empty()          ? split_list(rows_flag)
                                  : !c.ablation_rows.empty() ? c.ablation_rows
                                                              : standard_ablation_rows();
  for (const auto& r : rows) ablation_row(r);  // reject unknown names before any training
  std::filesystem::create_directories(dir);
  json table = json::array();
  run_ablation(c.model, c.train, corpus, rows, [&](const AblationResult& r) {
    write_text(dir + "/" + row_file_stem(r.name) + ".report.json", to_json(r.report).dump(2) + "\n");
    table.push_back(to_json(r));
    out << std::left << std::setw(14) << r.name << " acc " << std::fixed << std::setprecision(4)
        << r.report.emotion.acc << " wf1 " << r.report.emotion.wf1 << " cause_f1 " << r.report.cause.f1
        << " pair_f1 " << r.report.pair.f1 << "\n";
  });
  write_text(dir + "/ablation.json", table.dump(2) + "\n");
  return 0;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"unimeec: joint emotion recognition and emotion-cause extraction"};
  app.require_subcommand(1);
  std::string config, data, out_path, checkpoint, report, split = "test", pair_mode = "strict", rows;

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus");
  synth->add_option("--config", config, "config JSON");
  synth->add_option("--out", out_path, "output JSONL")->required();

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", config, "config JSON");
  train_cmd->add_option("--data", data, "corpus JSONL")->required();
  train_cmd->add_option("--out", out_path, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config, "config JSON to check against the checkpoint");
  eval->add_option("--data", data, "corpus JSONL")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--report", report, "output report JSON")->required();
  eval->add_option("--split", split, "train|valid|test");
  eval->add_option("--pair-mode", pair_mode, "strict|position");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--config", config, "config JSON");

  auto* ablate = app.add_subcommand("ablate", "run the ablation grid");
  ablate->add_option("--config", config, "config JSON");
  ablate->add_option("--data", data, "corpus JSONL")->required();
  ablate->add_option("--out", out_path, "output directory")->required();
  ablate->add_option("--rows", rows, "comma-separated row names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return detail::cmd_synth(config, out_path, out);
    if (train_cmd->parsed()) return detail::cmd_train(config, data, out_path, out);
    if (eval->parsed()) return detail::cmd_eval(config, data, checkpoint, report, split, pair_mode, out);
    if (grad->parsed()) return detail::cmd_gradcheck(config, out);
    if (ablate->parsed()) return detail::cmd_ablate(config, data, out_path, rows, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace unimeec
