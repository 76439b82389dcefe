// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: gen, train, eval, stream, spotting.
//
// Exit codes: 0 ok, 2 usage, 3 data/format, 4 numeric divergence (including a
// streamed/offline mismatch under --verify). Failures print one line to
// stderr: `error command=<cmd> kind=<kind> message="<text>"`.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sslu/data.hpp"
#include "sslu/decoder.hpp"
#include "sslu/encoder.hpp"
#include "sslu/errors.hpp"
#include "sslu/eval.hpp"
#include "sslu/training.hpp"

namespace sslu::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

inline constexpr const char* kOutDirEnv = "SSLU_OUT_DIR";

inline std::string default_out_dir() {
  const char* v = std::getenv(kOutDirEnv);
  return v && *v ? v : "sslu_out";
}

struct UsageError : Error {
  using Error::Error;
  const char* kind() const noexcept override { return "usage"; }
};

struct GenOptions {
  std::uint64_t seed = 1;
  std::string out;
  std::string sizes = "2000,200,400";
  std::size_t feature_dim = 8;
};

struct TrainOptions {
  std::string config;
  std::optional<std::string> mode;
  std::optional<std::string> train_split;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string data;
  std::string out;
};

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string test_split = "S1";
  std::string out;
};

struct StreamOptions {
  std::string checkpoint;
  std::string input;
  std::size_t index = 0;
  std::size_t chunk_frames = 16;
  bool verify = false;
};

inline CorpusSizes parse_sizes(const std::string& s) {
  std::vector<std::size_t> v;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long long n = std::stoll(part, &used);
      if (used != part.size() || n < 1) throw std::invalid_argument(part);
      v.push_back(static_cast<std::size_t>(n));
    } catch (const std::exception&) {
      throw UsageError("--sizes: '" + part + "' is not a positive integer");
    }
  }
  if (v.size() != 3) throw UsageError("--sizes expects train,val,test");
  CorpusSizes c;
  c.train = v[0];
  c.val = v[1];
  c.test = v[2];
  return c;
}

inline int cmd_gen(const GenOptions& o, std::ostream& out) {
  GeneratorConfig g;
  g.feature_dim = o.feature_dim;
  const World w = make_world(o.seed, g);
  const Corpora c = build_corpora(w, parse_sizes(o.sizes));
  for (const auto& [corpus, splits] : c) {
    for (const auto& [split, d] : splits) {
      save_dataset(d, o.out);
      out << corpus << '/' << split << '\t' << d.utterances.size() << '\n';
    }
  }
  return kExitOk;
}

inline TrainingConfig resolve_training_config(const TrainOptions& o) {
  TrainingConfig cfg;
  if (!o.config.empty()) {
    try {
      cfg = training_config_from_json(nlohmann::json::parse(io::read_file(o.config)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("config " + o.config + ": " + e.what());
    }
  }
  if (o.mode) cfg.mode = parse_training_mode(*o.mode);
  if (o.train_split) cfg.train_split = *o.train_split;
  if (o.seed) cfg.seed = *o.seed;
  if (o.deterministic) {
    cfg.threads = 1;
  } else if (o.config.empty()) {
    cfg.threads = std::max(1u, std::thread::hardware_concurrency());
  }
  return cfg;
}

inline int cmd_train(const TrainOptions& o, std::ostream& out) {
  const TrainingConfig cfg = resolve_training_config(o);
  static const std::vector<std::string> splits{"S1", "M2", "M3", "MM"};
  if (std::find(splits.begin(), splits.end(), cfg.train_split) == splits.end()) {
    throw UsageError("--train-split must be one of S1, M2, M3, MM");
  }
  std::map<std::string, Dataset> ds;
  auto need = [&](const std::string& corpus, const std::string& split) -> const Dataset* {
    const std::string key = corpus + "/" + split;
    if (!ds.count(key)) ds.emplace(key, load_dataset(o.data, corpus, split));
    return &ds.at(key);
  };
  PipelineData pd;
  pd.train = need(cfg.train_split, "train");
  pd.val = need(cfg.train_split, "val");
  if (cfg.mode != TrainingMode::kCtcOnly) {
    pd.char_train = need("CHAR", "train");
    pd.char_val = need("CHAR", "val");
  }
  if (cfg.mode == TrainingMode::kFull) {
    pd.single_train = need("S1", "train");
    pd.single_val = need("S1", "val");
  }
  const PipelineResult r = run_pipeline(cfg, pd);
  std::filesystem::create_directories(o.out);
  const auto dir = std::filesystem::path(o.out);
  save_checkpoint(r.model, (dir / "checkpoint.sslu").string());
  io::write_file((dir / "train_log.csv").string(), format_log_csv(r.log));
  nlohmann::json resolved = training_config_to_json(cfg);
  resolved.erase("threads");  // execution detail, not a hyperparameter
  io::write_file((dir / "config.json").string(), resolved.dump(2) + "\n");
  out << "best_val_accuracy\t" << r.best_val_accuracy << '\n';
  return kExitOk;
}

struct Decoded {
  std::vector<LabelSequence> predictions;
  std::vector<LabelSequence> references;
  std::vector<DecodeResult> results;
};

inline Decoded decode_dataset(const EncoderModel& m, const Dataset& d) {
  if (d.vocab_size() != m.config.vocab_size || d.feature_dim != m.config.feature_dim) {
    throw DataError("dataset " + d.corpus + "/" + d.split + " does not match the checkpoint vocabulary or feature dim");
  }
  Decoded out;
  for (const auto& u : d.utterances) {
    const LogProbLattice lat = encoder_forward(apply_cmvn(u.features.frames, m.cmvn), m);
    out.results.push_back(decode_offline(lat, static_cast<int>(m.config.blank_index)));
    out.predictions.push_back(out.results.back().labels);
    out.references.push_back(u.intent_labels);
  }
  return out;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const EncoderModel m = load_checkpoint(o.checkpoint);
  const Dataset d = load_dataset(o.data, o.test_split, "test");
  const Decoded dec = decode_dataset(m, d);
  const double acc = sequence_accuracy(dec.predictions, dec.references);
  std::filesystem::create_directories(o.out);
  const auto dir = std::filesystem::path(o.out);
  const std::vector<std::pair<std::string, double>> rows{{"accuracy", acc},
                                                         {"utterances", static_cast<double>(d.utterances.size())}};
  io::write_file((dir / ("eval_" + o.test_split + "_accuracy.csv")).string(), metrics_csv(rows));
  io::write_file((dir / ("eval_" + o.test_split + "_confusion.csv")).string(),
                 confusion_csv(confusion_matrix(dec.predictions, dec.references, m.config.vocab_size)));
  out << "accuracy\t" << acc << '\n';
  return kExitOk;
}

// Spotting events of a decoded test set, each paired with the template length
// (in sub-units) of the reference intent it is matched against.
struct SpottingData {
  std::vector<SpottingEvent> events;
  std::vector<double> lengths;
};

inline SpottingData collect_spotting(const Decoded& dec, const Dataset& d, const FrameGeometry& geom) {
  SpottingData s;
  for (std::size_t i = 0; i < d.utterances.size(); ++i) {
    const Utterance& u = d.utterances[i];
    const auto em = dec.results[i].emissions();
    const auto ev = spotting_positions(em, u.boundaries_ms, geom);
    for (std::size_t k = 0; k < ev.size(); ++k) {
      s.events.push_back(ev[k]);
      s.lengths.push_back(k < u.intent_labels.size() ? static_cast<double>(template_length(d, u.intent_labels[k]))
                                                     : std::numeric_limits<double>::quiet_NaN());
    }
  }
  return s;
}

inline int cmd_spotting(const EvalOptions& o, std::ostream& out) {
  const EncoderModel m = load_checkpoint(o.checkpoint);
  const Dataset d = load_dataset(o.data, o.test_split, "test");
  const SpottingData sd = collect_spotting(decode_dataset(m, d), d, FrameGeometry::of(m.config));
  const auto& events = sd.events;
  const auto& lengths = sd.lengths;
  const SpottingReport rep = early_spotting_report(events);
  const LengthPositionSeries lp = length_vs_position(events, lengths);
  std::filesystem::create_directories(o.out);
  const auto dir = std::filesystem::path(o.out);
  const std::string stem = "spotting_" + o.test_split;
  std::string summary = spotting_summary_csv(rep);
  std::ostringstream extra;
  extra.precision(17);
  extra << "spearman_length_position," << lp.spearman << '\n';
  io::write_file((dir / (stem + "_summary.csv")).string(), summary + extra.str());
  io::write_file((dir / (stem + "_histogram.csv")).string(), histogram_csv(rep));
  io::write_file((dir / (stem + "_length_position.csv")).string(), length_position_csv(lp));
  out << "fraction_early\t" << rep.fraction_early << "\nspearman\t" << lp.spearman << '\n';
  return kExitOk;
}

// Feeds one utterance from a record file through the streaming encoder in
// fixed-size chunks, printing each emission as soon as it is decoded.
inline int cmd_stream(const StreamOptions& o, std::ostream& out) {
  if (o.chunk_frames == 0) throw UsageError("--chunk-frames must be >= 1");
  const EncoderModel m = load_checkpoint(o.checkpoint);
  const std::vector<Utterance> utts = parse_records(io::read_file(o.input), m.config.hop_ms);
  if (o.index >= utts.size()) {
    throw DataError("--index " + std::to_string(o.index) + " out of range (file has " + std::to_string(utts.size()) +
                    " utterances)");
  }
  const Tensor2 x = apply_cmvn(utts[o.index].features.frames, m.cmvn);
  const FrameGeometry geom = FrameGeometry::of(m.config);
  const int blank = static_cast<int>(m.config.blank_index);

  EncoderState enc = EncoderState::start(m);
  DecoderState dec(blank);
  LogProbLattice streamed(0, m.config.output_dim());
  out << "frame\ttime_ms\tlabel\n" << std::flush;
  auto consume = [&](const LogProbLattice& rows) {
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      streamed.append_row(rows.row(r));
      if (auto e = greedy_step(rows.row(r), dec)) {
        out << e->frame << '\t' << geom.emit_ms(e->frame) << '\t' << e->label << '\n' << std::flush;
      }
    }
  };
  for (std::size_t pos = 0; pos < x.rows(); pos += o.chunk_frames) {
    const std::size_t n = std::min(o.chunk_frames, x.rows() - pos);
    Tensor2 chunk(0, x.cols());
    for (std::size_t i = 0; i < n; ++i) chunk.append_row(x.row(pos + i));
    consume(encoder_stream_push(chunk, enc, m));
  }
  consume(encoder_stream_close(enc, m));

  if (o.verify) {
    const LogProbLattice batch = encoder_forward(x, m);
    const DecodeResult offline = decode_offline(batch, blank);
    const bool same_shape = batch.same_shape(streamed);
    const double diff = same_shape ? max_abs_diff(batch, streamed) : std::numeric_limits<double>::infinity();
    if (!same_shape || offline.labels != dec.emitted || offline.frames != dec.emit_frames || diff > 1e-12) {
      std::ostringstream msg;
      msg << "streamed output differs from offline decode (max lattice diff " << diff << ")";
      throw NumericError(msg.str());
    }
    out << "# verified: " << dec.emitted.size() << " emissions match offline decode\n";
  }
  return kExitOk;
}

inline std::string quote(const std::string& s) {
  std::string q = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') q += '\\';
    q += c == '\n' ? ' ' : c;
  }
  return q + "\"";
}

inline int report(std::ostream& err, const std::string& cmd, const std::string& kind, const std::string& msg, int code) {
  err << "error command=" << (cmd.empty() ? "-" : cmd) << " kind=" << kind << " message=" << quote(msg) << '\n';
  return code;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Streaming spoken-intent recognition toolkit"};
  app.require_subcommand(1);

  GenOptions gen;
  gen.out = default_out_dir() + "/data";
  auto* g = app.add_subcommand("gen", "generate all synthetic corpora");
  g->add_option("--seed", gen.seed, "generator seed");
  g->add_option("--out", gen.out, "output directory");
  g->add_option("--sizes", gen.sizes, "single-intent split sizes train,val,test");
  g->add_option("--feature-dim", gen.feature_dim, "feature dimension")->check(CLI::PositiveNumber);

  TrainOptions train;
  train.data = default_out_dir() + "/data";
  train.out = default_out_dir() + "/train";
  auto* t = app.add_subcommand("train", "run the training pipeline");
  t->add_option("--config", train.config, "JSON training config");
  t->add_option("--mode", train.mode, "ctc_only | asr_ctc | full")
      ->check(CLI::IsMember({"ctc_only", "asr_ctc", "full"}));
  t->add_option("--train-split", train.train_split, "S1 | M2 | M3 | MM")->check(CLI::IsMember({"S1", "M2", "M3", "MM"}));
  t->add_option("--seed", train.seed, "training seed");
  t->add_flag("--deterministic", train.deterministic, "single-threaded execution");
  t->add_option("--data", train.data, "dataset directory");
  t->add_option("--out", train.out, "output directory");

  EvalOptions ev;
  ev.data = default_out_dir() + "/data";
  ev.out = default_out_dir() + "/eval";
  auto* e = app.add_subcommand("eval", "offline decode and sequence accuracy");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--test-split", ev.test_split, "S1 | M2 | M3 | MM")->check(CLI::IsMember({"S1", "M2", "M3", "MM"}));
  e->add_option("--data", ev.data, "dataset directory");
  e->add_option("--out", ev.out, "output directory");

  EvalOptions sp;
  sp.data = ev.data;
  sp.out = default_out_dir() + "/spotting";
  auto* s = app.add_subcommand("spotting", "early-spotting statistics");
  s->add_option("--checkpoint", sp.checkpoint, "checkpoint file")->required();
  s->add_option("--test-split", sp.test_split, "S1 | M2 | M3 | MM")->check(CLI::IsMember({"S1", "M2", "M3", "MM"}));
  s->add_option("--data", sp.data, "dataset directory");
  s->add_option("--out", sp.out, "output directory");

  StreamOptions st;
  auto* r = app.add_subcommand("stream", "chunked streaming decode of one utterance");
  r->add_option("--checkpoint", st.checkpoint, "checkpoint file")->required();
  r->add_option("--input", st.input, "dataset .records file")->required();
  r->add_option("--index", st.index, "utterance index in the file");
  r->add_option("--chunk-frames", st.chunk_frames, "frames per chunk");
  r->add_flag("--verify", st.verify, "compare with offline decode; exit 4 on mismatch");

  std::string cmd;
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    return report(err, "", "usage", ex.what(), kExitUsage);
  }
  try {
    if (g->parsed()) {
      cmd = "gen";
      return cmd_gen(gen, out);
    }
    if (t->parsed()) {
      cmd = "train";
      return cmd_train(train, out);
    }
    if (e->parsed()) {
      cmd = "eval";
      return cmd_eval(ev, out);
    }
    if (s->parsed()) {
      cmd = "spotting";
      return cmd_spotting(sp, out);
    }
    if (r->parsed()) {
      cmd = "stream";
      return cmd_stream(st, out);
    }
  } catch (const UsageError& ex) {
    return report(err, cmd, ex.kind(), ex.what(), kExitUsage);
  } catch (const NumericError& ex) {
    return report(err, cmd, ex.kind(), ex.what(), kExitNumeric);
  } catch (const Error& ex) {
    return report(err, cmd, ex.kind(), ex.what(), kExitData);
  } catch (const std::filesystem::filesystem_error& ex) {
    return report(err, cmd, "io", ex.what(), kExitData);
  }
  return kExitUsage;
}

}  // namespace sslu::cli
