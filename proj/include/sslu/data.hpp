// SPDX-License-Identifier: Apache-2.0
//
// Synthetic spoken-command corpora.
//
// A seeded "world" fixes a sub-unit alphabet (one prototype feature vector per
// unit), one template of 3-8 units per intent, and disjoint speaker pools for
// train/val/test. An utterance renders each unit of its template as a run of
// speaker-coloured noisy prototype frames between stretches of near-zero
// silence. Multi-intent utterances concatenate single-intent renders from the
// same speaker with a silence gap.
//
// Every utterance draws from its own generator seeded by (seed, corpus,
// split, index), so output never depends on generation order.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sslu/binary_io.hpp"
#include "sslu/errors.hpp"
#include "sslu/tensor.hpp"
#include "sslu/types.hpp"

namespace sslu {

struct GeneratorConfig {
  std::size_t feature_dim = 8;
  double hop_ms = 10.0;
  std::size_t vocab_size = 12;
  std::size_t num_units = 16;
  std::size_t template_min = 3;
  std::size_t template_max = 8;
  std::size_t unit_frames_min = 5;
  std::size_t unit_frames_max = 15;
  std::size_t silence_min = 5;
  std::size_t silence_max = 20;
  std::size_t gap_min = 10;
  std::size_t gap_max = 30;
  double noise_std = 0.6;
  double speaker_offset_std = 0.25;
  double speaker_gain_min = 0.85;
  double speaker_gain_max = 1.15;
  double speaker_accent_std = 0.2;
  double silence_amplitude = 0.05;
  double energy_threshold = 0.01;
  std::size_t train_speakers = 48;
  std::size_t val_speakers = 8;
  std::size_t test_speakers = 8;
};

struct IntentSpec {
  int id = 0;
  std::vector<int> units;
  std::size_t frames_min = 5;
  std::size_t frames_max = 15;
  friend bool operator==(const IntentSpec&, const IntentSpec&) = default;
};

struct Speaker {
  int id = 0;
  double gain = 1.0;
  std::vector<double> offset;  // D
  Tensor2 accent;              // num_units x D
};

struct World {
  GeneratorConfig config;
  std::uint64_t seed = 0;
  Tensor2 prototypes;  // num_units x D
  std::vector<IntentSpec> intents;
  std::vector<Speaker> speakers;
  std::map<std::string, std::vector<int>> speaker_pools;  // split -> speaker ids

  const Speaker& speaker(int id) const { return speakers.at(static_cast<std::size_t>(id)); }
};

struct Utterance {
  FeatureSequence features;
  LabelSequence intent_labels;
  LabelSequence char_labels;
  std::vector<double> boundaries_ms;  // end of the last speech frame of each intent
  int speaker = 0;

  friend bool operator==(const Utterance& a, const Utterance& b) {
    return a.features.frames == b.features.frames && a.intent_labels == b.intent_labels &&
           a.char_labels == b.char_labels && a.boundaries_ms == b.boundaries_ms && a.speaker == b.speaker;
  }
};

// Seed for one item of one split; independent of generation order.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::string_view corpus, std::string_view split,
                                   std::uint64_t index) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                                   static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  for (char ch : corpus) words.push_back(static_cast<unsigned char>(ch));
  words.push_back(0xFFu);
  for (char ch : split) words.push_back(static_cast<unsigned char>(ch));
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

inline std::size_t uniform_count(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double frame_energy(std::span<const double> frame) {
  double e = 0.0;
  for (double v : frame) e += v * v;
  return e / static_cast<double>(frame.size());
}

inline World make_world(std::uint64_t seed, const GeneratorConfig& cfg = {}) {
  if (cfg.template_min < 1 || cfg.template_min > cfg.template_max) throw DataError("generator: bad template range");
  if (cfg.num_units < 2) throw DataError("generator: need at least two sub-units");
  if (cfg.silence_amplitude * cfg.silence_amplitude >= cfg.energy_threshold) {
    throw DataError("generator: silence amplitude must stay below the energy threshold");
  }
  World w;
  w.config = cfg;
  w.seed = seed;
  std::mt19937_64 rng = derived_rng(seed, "world", "", 0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  w.prototypes = Tensor2(cfg.num_units, cfg.feature_dim);
  for (double& v : w.prototypes.values()) v = gauss(rng);

  std::set<std::vector<int>> seen;
  std::uniform_int_distribution<int> unit(0, static_cast<int>(cfg.num_units) - 1);
  for (std::size_t i = 0; i < cfg.vocab_size; ++i) {
    IntentSpec spec{static_cast<int>(i), {}, cfg.unit_frames_min, cfg.unit_frames_max};
    do {
      spec.units.clear();
      const std::size_t len = uniform_count(rng, cfg.template_min, cfg.template_max);
      while (spec.units.size() < len) {
        const int u = unit(rng);
        if (spec.units.empty() || spec.units.back() != u) spec.units.push_back(u);
      }
    } while (!seen.insert(spec.units).second);
    w.intents.push_back(std::move(spec));
  }

  const std::array<std::pair<const char*, std::size_t>, 3> pools{
      {{"train", cfg.train_speakers}, {"val", cfg.val_speakers}, {"test", cfg.test_speakers}}};
  std::uniform_real_distribution<double> gain(cfg.speaker_gain_min, cfg.speaker_gain_max);
  for (const auto& [name, count] : pools) {
    for (std::size_t k = 0; k < count; ++k) {
      Speaker s;
      s.id = static_cast<int>(w.speakers.size());
      s.gain = gain(rng);
      s.offset.resize(cfg.feature_dim);
      for (double& v : s.offset) v = cfg.speaker_offset_std * gauss(rng);
      s.accent = Tensor2(cfg.num_units, cfg.feature_dim);
      for (double& v : s.accent.values()) v = cfg.speaker_accent_std * gauss(rng);
      w.speaker_pools[name].push_back(s.id);
      w.speakers.push_back(std::move(s));
    }
  }
  return w;
}

namespace detail {

inline void append_silence(Tensor2& frames, std::size_t n, double amplitude, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  std::vector<double> f(frames.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : f) v = u(rng);
    frames.append_row(f);
  }
}

}  // namespace detail

inline Utterance generate_utterance(std::mt19937_64& rng, const IntentSpec& intent, const Speaker& spk,
                                    const World& w) {
  const GeneratorConfig& cfg = w.config;
  if (intent.units.empty()) throw DataError("generate_utterance: intent template is empty");
  Utterance u;
  u.speaker = spk.id;
  u.intent_labels = {intent.id};
  u.char_labels = intent.units;
  u.features.frame_ms = cfg.hop_ms;
  Tensor2 frames(0, cfg.feature_dim);

  detail::append_silence(frames, uniform_count(rng, cfg.silence_min, cfg.silence_max), cfg.silence_amplitude, rng);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  std::vector<double> f(cfg.feature_dim);
  for (int unit : intent.units) {
    const auto uu = static_cast<std::size_t>(unit);
    const std::size_t len = uniform_count(rng, intent.frames_min, intent.frames_max);
    for (std::size_t k = 0; k < len; ++k) {
      do {
        for (std::size_t d = 0; d < cfg.feature_dim; ++d) {
          f[d] = spk.gain * (w.prototypes(uu, d) + spk.accent(uu, d)) + spk.offset[d] + noise(rng);
        }
      } while (frame_energy(f) <= cfg.energy_threshold);
      frames.append_row(f);
    }
  }
  u.boundaries_ms = {static_cast<double>(frames.rows()) * cfg.hop_ms};
  detail::append_silence(frames, uniform_count(rng, cfg.silence_min, cfg.silence_max), cfg.silence_amplitude, rng);
  u.features.frames = std::move(frames);
  return u;
}

// Joins same-speaker utterances with a silence gap drawn from [gap_min, gap_max].
inline Utterance concat_utterances(std::span<const Utterance> utts, std::size_t gap_min, std::size_t gap_max,
                                   double silence_amplitude, std::mt19937_64& rng) {
  if (utts.empty()) throw DataError("concat_utterances: nothing to concatenate");
  for (const auto& u : utts) {
    if (u.speaker != utts.front().speaker) throw DataError("concat_utterances: mixed speakers");
  }
  Utterance out = utts.front();
  for (std::size_t i = 1; i < utts.size(); ++i) {
    detail::append_silence(out.features.frames, uniform_count(rng, gap_min, gap_max), silence_amplitude, rng);
    const double offset = static_cast<double>(out.features.frames.rows()) * out.features.frame_ms;
    const Utterance& next = utts[i];
    for (std::size_t t = 0; t < next.features.frames.rows(); ++t) out.features.frames.append_row(next.features.frames.row(t));
    out.intent_labels.insert(out.intent_labels.end(), next.intent_labels.begin(), next.intent_labels.end());
    out.char_labels.insert(out.char_labels.end(), next.char_labels.begin(), next.char_labels.end());
    for (double b : next.boundaries_ms) out.boundaries_ms.push_back(b + offset);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpora.

struct Dataset {
  std::string corpus;  // CHAR, S1, M2, M3, MM
  std::string split;   // train, val, test
  std::uint64_t seed = 0;
  std::size_t feature_dim = 0;
  double hop_ms = 10.0;
  std::vector<IntentSpec> intents;
  std::vector<Utterance> utterances;

  std::size_t vocab_size() const { return intents.size(); }
};

struct CorpusSizes {
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 400;
  double multi_factor = 1.5;
  double mm_fraction = 0.4;

  std::size_t single(std::string_view split) const {
    return split == "train" ? train : split == "val" ? val : test;
  }
  std::size_t multi(std::string_view split) const {
    return static_cast<std::size_t>(std::llround(multi_factor * static_cast<double>(single(split))));
  }
};

using Corpora = std::map<std::string, std::map<std::string, Dataset>>;

inline constexpr std::array<const char*, 3> kSplits{"train", "val", "test"};
inline constexpr std::array<const char*, 5> kCorpora{"CHAR", "S1", "M2", "M3", "MM"};

namespace detail {

inline Dataset empty_dataset(const World& w, std::string corpus, std::string split) {
  return {std::move(corpus), std::move(split), w.seed, w.config.feature_dim, w.config.hop_ms, w.intents, {}};
}

inline Utterance render_sequence(const World& w, std::span<const int> intents, std::mt19937_64& rng,
                                 const std::vector<int>& pool) {
  const int spk = pool[uniform_count(rng, 0, pool.size() - 1)];
  std::vector<Utterance> parts;
  for (int i : intents) parts.push_back(generate_utterance(rng, w.intents.at(static_cast<std::size_t>(i)), w.speaker(spk), w));
  return concat_utterances(parts, w.config.gap_min, w.config.gap_max, w.config.silence_amplitude, rng);
}

// Every ordered k-tuple of intents, visited in shuffled rounds so each tuple
// occurs once before any repeats.
inline std::vector<std::vector<int>> stratified_tuples(std::size_t vocab, std::size_t k, std::size_t count,
                                                       std::mt19937_64& rng) {
  std::size_t total = 1;
  for (std::size_t i = 0; i < k; ++i) total *= vocab;
  std::vector<std::size_t> order(total);
  std::vector<std::vector<int>> out;
  while (out.size() < count) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t code : order) {
      if (out.size() == count) break;
      std::vector<int> tuple(k);
      for (std::size_t i = k; i-- > 0;) {
        tuple[i] = static_cast<int>(code % vocab);
        code /= vocab;
      }
      out.push_back(std::move(tuple));
    }
  }
  return out;
}

inline Dataset build_multi(const World& w, const std::string& corpus, const std::string& split, std::size_t k,
                           std::size_t n) {
  Dataset d = empty_dataset(w, corpus, split);
  std::mt19937_64 plan = derived_rng(w.seed, corpus, split + "/plan", 0);
  const auto tuples = stratified_tuples(w.intents.size(), k, n, plan);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng = derived_rng(w.seed, corpus, split, i);
    d.utterances.push_back(render_sequence(w, tuples[i], rng, w.speaker_pools.at(split)));
  }
  return d;
}

inline Dataset build_mixture(const World& w, const std::string& split, double fraction,
                             std::initializer_list<const Dataset*> sources) {
  Dataset d = empty_dataset(w, "MM", split);
  std::mt19937_64 rng = derived_rng(w.seed, "MM", split, 0);
  for (const Dataset* src : sources) {
    std::vector<std::size_t> idx(src->utterances.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    idx.resize(take);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) d.utterances.push_back(src->utterances[i]);
  }
  std::shuffle(d.utterances.begin(), d.utterances.end(), rng);
  return d;
}

}  // namespace detail

inline Corpora build_corpora(const World& w, const CorpusSizes& sizes = {}) {
  Corpora c;
  for (const char* split : kSplits) {
    c["CHAR"][split] = detail::build_multi(w, "CHAR", split, 1, sizes.single(split));
    c["S1"][split] = detail::build_multi(w, "S1", split, 1, sizes.single(split));
    c["M2"][split] = detail::build_multi(w, "M2", split, 2, sizes.multi(split));
    c["M3"][split] = detail::build_multi(w, "M3", split, 3, sizes.multi(split));
    c["MM"][split] = detail::build_mixture(w, split, sizes.mm_fraction,
                                           {&c["S1"][split], &c["M2"][split], &c["M3"][split]});
  }
  return c;
}

// ---------------------------------------------------------------------------
// Normalisation.

inline CmvnStats compute_cmvn(std::span<const Utterance> utts) {
  if (utts.empty()) throw DataError("compute_cmvn: no utterances");
  const std::size_t D = utts.front().features.dim();
  std::vector<double> sum(D, 0.0);
  std::size_t n = 0;
  for (const auto& u : utts) {
    const Tensor2& f = u.features.frames;
    if (f.cols() != D) throw DataError("compute_cmvn: inconsistent feature dims");
    for (std::size_t t = 0; t < f.rows(); ++t) {
      for (std::size_t d = 0; d < D; ++d) sum[d] += f(t, d);
    }
    n += f.rows();
  }
  if (n == 0) throw DataError("compute_cmvn: no frames");
  CmvnStats s;
  s.mean.resize(D);
  for (std::size_t d = 0; d < D; ++d) s.mean[d] = sum[d] / static_cast<double>(n);
  std::vector<double> sq(D, 0.0);
  for (const auto& u : utts) {
    const Tensor2& f = u.features.frames;
    for (std::size_t t = 0; t < f.rows(); ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const double c = f(t, d) - s.mean[d];
        sq[d] += c * c;
      }
    }
  }
  s.stddev.resize(D);
  for (std::size_t d = 0; d < D; ++d) s.stddev[d] = std::sqrt(sq[d] / static_cast<double>(n));
  return s;
}

inline Tensor2 apply_cmvn(const Tensor2& features, const CmvnStats& stats) {
  if (stats.empty()) return features;
  if (features.cols() != stats.mean.size() && features.rows() > 0) {
    throw DimensionError("apply_cmvn: features of dim " + std::to_string(features.cols()) + ", stats of dim " +
                         std::to_string(stats.mean.size()));
  }
  constexpr double floor = 1e-8;
  Tensor2 out = features;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    for (std::size_t d = 0; d < out.cols(); ++d) {
      out(t, d) = (out(t, d) - stats.mean[d]) / std::max(stats.stddev[d], floor);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation. Records: "SSLUDSET", u32 version, u64 count, then per
// utterance u32 T, D, U, speaker, C; U label ids; C unit ids; U f64
// boundaries; T*D f64 frames (row-major). All little-endian.

inline constexpr std::string_view kDatasetMagic = "SSLUDSET";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string serialize_records(std::span<const Utterance> utts) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u64(utts.size());
  for (const auto& u : utts) {
    const Tensor2& f = u.features.frames;
    w.u32(static_cast<std::uint32_t>(f.rows()));
    w.u32(static_cast<std::uint32_t>(f.cols()));
    w.u32(static_cast<std::uint32_t>(u.intent_labels.size()));
    w.u32(static_cast<std::uint32_t>(u.speaker));
    w.u32(static_cast<std::uint32_t>(u.char_labels.size()));
    for (int l : u.intent_labels) w.u32(static_cast<std::uint32_t>(l));
    for (int c : u.char_labels) w.u32(static_cast<std::uint32_t>(c));
    for (double b : u.boundaries_ms) w.f64(b);
    for (double v : f.values()) w.f64(v);
  }
  return w.take();
}

inline std::vector<Utterance> parse_records(std::string_view bytes, double hop_ms) {
  io::ByteReader r(bytes);
  if (r.remaining() < kDatasetMagic.size() || r.bytes(kDatasetMagic.size()) != kDatasetMagic) {
    throw FormatError("dataset records: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset records: unsupported version " + std::to_string(version));
  }
  const std::uint64_t count = r.u64();
  std::vector<Utterance> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    Utterance u;
    const std::size_t T = r.u32(), D = r.u32(), U = r.u32();
    u.speaker = static_cast<int>(r.u32());
    const std::size_t C = r.u32();
    for (std::size_t k = 0; k < U; ++k) u.intent_labels.push_back(static_cast<int>(r.u32()));
    for (std::size_t k = 0; k < C; ++k) u.char_labels.push_back(static_cast<int>(r.u32()));
    for (std::size_t k = 0; k < U; ++k) u.boundaries_ms.push_back(r.f64());
    if (r.remaining() / 8 < T * D) throw FormatError("dataset records: truncated frames in record " + std::to_string(i));
    std::vector<double> vals(T * D);
    for (double& v : vals) v = r.f64();
    u.features.frames = Tensor2(T, D, std::move(vals));
    u.features.frame_ms = hop_ms;
    out.push_back(std::move(u));
  }
  if (!r.at_end()) throw FormatError("dataset records: trailing bytes");
  return out;
}

inline nlohmann::json make_manifest(const Dataset& d) {
  std::vector<std::size_t> dist(d.intents.size(), 0);
  std::set<int> speakers;
  for (const auto& u : d.utterances) {
    for (int l : u.intent_labels) {
      if (l >= 0 && static_cast<std::size_t>(l) < dist.size()) ++dist[static_cast<std::size_t>(l)];
    }
    speakers.insert(u.speaker);
  }
  nlohmann::json intents = nlohmann::json::array();
  for (const auto& i : d.intents) {
    intents.push_back({{"id", i.id}, {"units", i.units}, {"frames_min", i.frames_min}, {"frames_max", i.frames_max}});
  }
  return {{"format", "sslu-dataset"},
          {"version", kDatasetVersion},
          {"corpus", d.corpus},
          {"split", d.split},
          {"seed", d.seed},
          {"count", d.utterances.size()},
          {"feature_dim", d.feature_dim},
          {"hop_ms", d.hop_ms},
          {"intent_distribution", dist},
          {"speakers", std::vector<int>(speakers.begin(), speakers.end())},
          {"intents", intents}};
}

inline std::string manifest_path(const std::string& dir, const std::string& corpus, const std::string& split) {
  return (std::filesystem::path(dir) / corpus / (split + ".manifest.json")).string();
}
inline std::string records_path(const std::string& dir, const std::string& corpus, const std::string& split) {
  return (std::filesystem::path(dir) / corpus / (split + ".records")).string();
}

inline void save_dataset(const Dataset& d, const std::string& dir) {
  std::filesystem::create_directories(std::filesystem::path(dir) / d.corpus);
  io::write_file(manifest_path(dir, d.corpus, d.split), make_manifest(d).dump(2) + "\n");
  io::write_file(records_path(dir, d.corpus, d.split), serialize_records(d.utterances));
}

inline Dataset dataset_from_manifest(const nlohmann::json& m) {
  Dataset d;
  try {
    if (m.at("format") != "sslu-dataset") throw FormatError("dataset manifest: unknown format");
    if (m.at("version").get<std::uint32_t>() != kDatasetVersion) {
      throw FormatError("dataset manifest: unsupported version " + m.at("version").dump());
    }
    d.corpus = m.at("corpus");
    d.split = m.at("split");
    d.seed = m.at("seed");
    d.feature_dim = m.at("feature_dim");
    d.hop_ms = m.at("hop_ms");
    for (const auto& i : m.at("intents")) {
      d.intents.push_back({i.at("id"), i.at("units").get<std::vector<int>>(), i.at("frames_min"), i.at("frames_max")});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
  return d;
}

inline Dataset load_dataset(const std::string& dir, const std::string& corpus, const std::string& split) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_file(manifest_path(dir, corpus, split)));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("dataset manifest " + manifest_path(dir, corpus, split) + ": " + e.what());
  }
  Dataset d = dataset_from_manifest(m);
  d.utterances = parse_records(io::read_file(records_path(dir, corpus, split)), d.hop_ms);
  if (d.utterances.size() != m.at("count").get<std::size_t>()) {
    throw DataError("dataset " + corpus + "/" + split + ": manifest count does not match records");
  }
  for (const auto& u : d.utterances) {
    if (u.features.dim() != d.feature_dim && u.features.length() > 0) {
      throw DataError("dataset " + corpus + "/" + split + ": record feature dim differs from manifest");
    }
  }
  return d;
}

// Template length (in sub-units) of one intent.
inline std::size_t template_length(const Dataset& d, int intent) {
  return d.intents.at(static_cast<std::size_t>(intent)).units.size();
}

}  // namespace sslu
