// SPDX-License-Identifier: Apache-2.0
//
// Optimisation pipeline:
//   1. character-level CTC training of the first LSTMP layer with a throwaway
//      output head; the layer is then frozen,
//   2. cross-entropy on the final lattice step for single-intent utterances,
//   3. CTC fine-tuning on intent sequences.
// Each phase uses per-sequence graphs, batch-averaged gradients, global norm
// clipping and AdamW.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sslu/autodiff.hpp"
#include "sslu/ctc.hpp"
#include "sslu/data.hpp"
#include "sslu/decoder.hpp"
#include "sslu/encoder.hpp"
#include "sslu/errors.hpp"

namespace sslu {

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
};

struct OptimizerState {
  OptimizerConfig config;
  std::vector<Tensor2> first_moment;
  std::vector<Tensor2> second_moment;
  std::uint64_t step = 0;
  std::size_t skipped_updates = 0;
};

inline OptimizerState make_optimizer(std::span<Parameter* const> params, const OptimizerConfig& cfg = {}) {
  OptimizerState st;
  st.config = cfg;
  for (const Parameter* p : params) {
    st.first_moment.emplace_back(p->value.rows(), p->value.cols());
    st.second_moment.emplace_back(p->value.rows(), p->value.cols());
  }
  return st;
}

// AdamW with bias correction; decay acts on the weights directly and skips
// frozen parameters and biases. A non-finite gradient skips the whole update.
// Returns whether the update was applied.
inline bool adamw_step(std::span<Parameter* const> params, const GradientMap& grads, OptimizerState& st) {
  if (st.first_moment.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer state tracks " + std::to_string(st.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  if (!grads.all_finite()) {
    ++st.skipped_updates;
    return false;
  }
  const OptimizerConfig& c = st.config;
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.trainable) continue;
    const Tensor2* g = grads.find(p);
    if (g == nullptr) continue;
    if (!g->same_shape(p.value)) throw DimensionError("adamw_step: gradient shape mismatch for " + p.name);
    Tensor2& m = st.first_moment[k];
    Tensor2& v = st.second_moment[k];
    const double decay = p.decays ? c.learning_rate * c.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * (*g)[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * (*g)[i] * (*g)[i];
      p.value[i] -= decay * p.value[i];
      p.value[i] -= c.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.epsilon);
    }
  }
  return true;
}

inline void clip_gradients(GradientMap& grads, std::span<Parameter* const> params, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = std::sqrt(grads.squared_norm(params));
  if (norm > max_norm) grads.scale(max_norm / norm);
}

struct Schedule {
  std::size_t asr_epochs = 30;
  std::size_t ce_epochs = 10;
  std::size_t ctc_epochs = 60;
  std::size_t batch_size = 16;
  std::size_t patience = 10;
};

enum class TrainingMode { kCtcOnly, kAsrCtc, kFull };

inline std::string to_string(TrainingMode m) {
  switch (m) {
    case TrainingMode::kCtcOnly: return "ctc_only";
    case TrainingMode::kAsrCtc: return "asr_ctc";
    case TrainingMode::kFull: return "full";
  }
  return "?";
}

inline TrainingMode parse_training_mode(std::string_view s) {
  if (s == "ctc_only") return TrainingMode::kCtcOnly;
  if (s == "asr_ctc") return TrainingMode::kAsrCtc;
  if (s == "full") return TrainingMode::kFull;
  throw DataError("unknown training mode '" + std::string(s) + "' (expected ctc_only, asr_ctc or full)");
}

struct TrainingConfig {
  EncoderConfig encoder;
  OptimizerConfig optimizer;
  // The character-CTC stage barely moves in 30 desk-scale epochs at 1e-4.
  double asr_learning_rate = 1e-3;
  Schedule schedule;
  double dropout = 0.1;
  std::uint64_t seed = 1;
  TrainingMode mode = TrainingMode::kFull;
  std::string train_split = "S1";
  // Worker threads per batch; results do not depend on this value.
  std::size_t threads = 1;
  // Fraction of infeasible training sequences tolerated per epoch.
  double max_skip_fraction = 0.01;
};

inline constexpr int kTrainingConfigVersion = 1;

inline nlohmann::json training_config_to_json(const TrainingConfig& c) {
  return {{"version", kTrainingConfigVersion},
          {"encoder", encoder_config_to_json(c.encoder)},
          {"optimizer",
           {{"learning_rate", c.optimizer.learning_rate},
            {"asr_learning_rate", c.asr_learning_rate},
            {"weight_decay", c.optimizer.weight_decay},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon},
            {"clip_norm", c.optimizer.clip_norm}}},
          {"schedule",
           {{"asr_epochs", c.schedule.asr_epochs},
            {"ce_epochs", c.schedule.ce_epochs},
            {"ctc_epochs", c.schedule.ctc_epochs},
            {"batch_size", c.schedule.batch_size},
            {"patience", c.schedule.patience}}},
          {"dropout", c.dropout},
          {"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"train_split", c.train_split},
          {"threads", c.threads},
          {"max_skip_fraction", c.max_skip_fraction}};
}

// Missing keys keep their defaults; a different version is rejected.
inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig c;
  try {
    if (!j.is_object()) throw DataError("training config: expected a JSON object");
    const int version = j.value("version", kTrainingConfigVersion);
    if (version != kTrainingConfigVersion) {
      throw FormatError("training config: unsupported version " + std::to_string(version));
    }
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.asr_learning_rate = o.value("asr_learning_rate", c.asr_learning_rate);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
      c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.schedule.asr_epochs = s.value("asr_epochs", c.schedule.asr_epochs);
      c.schedule.ce_epochs = s.value("ce_epochs", c.schedule.ce_epochs);
      c.schedule.ctc_epochs = s.value("ctc_epochs", c.schedule.ctc_epochs);
      c.schedule.batch_size = s.value("batch_size", c.schedule.batch_size);
      c.schedule.patience = s.value("patience", c.schedule.patience);
    }
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
    c.mode = parse_training_mode(j.value("mode", to_string(c.mode)));
    c.train_split = j.value("train_split", c.train_split);
    c.threads = j.value("threads", c.threads);
    c.max_skip_fraction = j.value("max_skip_fraction", c.max_skip_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("training config: ") + e.what());
  }
  if (c.schedule.batch_size == 0) throw DataError("training config: batch_size must be >= 1");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw DataError("training config: dropout must be in [0, 1)");
  return c;
}

struct LogRow {
  std::size_t epoch = 0;
  std::string phase;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  std::size_t skipped = 0;
};

inline std::string format_log_csv(std::span<const LogRow> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,phase,train_loss,val_accuracy,skipped\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.phase << ',' << r.train_loss << ',' << r.val_accuracy << ',' << r.skipped << '\n';
  }
  return os.str();
}

// A training sequence with normalised features.
struct Example {
  Tensor2 features;
  LabelSequence labels;
  // Output of a frozen first layer, filled by cache_first_layer().
  std::optional<Tensor2> first_layer;
};

inline std::vector<Example> make_examples(std::span<const Utterance> utts, const CmvnStats& cmvn,
                                          bool use_char_labels = false) {
  std::vector<Example> out;
  out.reserve(utts.size());
  for (const auto& u : utts) {
    out.push_back({apply_cmvn(u.features.frames, cmvn), use_char_labels ? u.char_labels : u.intent_labels, {}});
  }
  return out;
}

inline void cache_first_layer(std::vector<Example>& examples, const EncoderModel& m) {
  if (!m.layers.front().frozen) return;
  for (auto& e : examples) e.first_layer = first_layer_forward(e.features, m);
}

inline LogProbLattice model_lattice(const Example& e, const EncoderModel& m) {
  if (e.features.rows() == 0) return LogProbLattice(0, m.config.output_dim());
  if (e.first_layer) return log_softmax_rows(head_logits(upper_layers_forward(*e.first_layer, m), m));
  return encoder_forward(e.features, m);
}

// Loss builder for one example: returns a 1x1 loss on the tape or throws
// InfeasibleError for sequences that cannot be trained.
using LossBuilder = std::function<Var(Tape&, const Example&, std::mt19937_64&)>;

struct EpochStats {
  double mean_loss = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
  std::size_t skipped_updates = 0;
};

namespace detail {

struct ExampleOutcome {
  double loss = 0.0;
  GradientMap grads;
  bool skipped = false;
};

inline ExampleOutcome run_example(const LossBuilder& build, const Example& e, std::uint64_t seed) {
  ExampleOutcome out;
  std::mt19937_64 rng(seed);
  try {
    Tape t;
    Var loss = build(t, e, rng);
    out.loss = loss.value()[0];
    if (!std::isfinite(out.loss)) {
      out.skipped = true;
      return out;
    }
    out.grads = t.backward(loss);
  } catch (const InfeasibleError&) {
    out.skipped = true;
  }
  return out;
}

}  // namespace detail

// One pass over `examples` in a shuffled order. Each example gets its own
// dropout seed drawn up front, and gradients are merged in batch order, so the
// result does not depend on `threads`.
inline EpochStats run_epoch(std::span<const Example> examples, std::span<Parameter* const> params,
                            OptimizerState& opt, const LossBuilder& build, std::mt19937_64& rng,
                            std::size_t batch_size, std::size_t threads = 1) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  EpochStats stats;
  double loss_sum = 0.0;
  const std::size_t skipped_before = opt.skipped_updates;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    std::vector<std::uint64_t> seeds(n);
    for (auto& s : seeds) s = rng();
    std::vector<detail::ExampleOutcome> outcomes(n);
    auto work = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) outcomes[i] = detail::run_example(build, examples[order[start + i]], seeds[i]);
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    if (workers == 1) {
      work(0, n);
    } else {
      std::vector<std::jthread> pool;
      const std::size_t per = (n + workers - 1) / workers;
      for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * per, hi = std::min(n, lo + per);
        if (lo < hi) pool.emplace_back(work, lo, hi);
      }
    }
    GradientMap batch;
    std::size_t used = 0;
    for (const auto& o : outcomes) {
      if (o.skipped) {
        ++stats.skipped;
        continue;
      }
      batch.merge(o.grads, params);
      loss_sum += o.loss;
      ++used;
    }
    if (used == 0) continue;
    stats.used += used;
    batch.scale(1.0 / static_cast<double>(used));
    clip_gradients(batch, params, opt.config.clip_norm);
    adamw_step(params, batch, opt);
  }
  stats.mean_loss = stats.used ? loss_sum / static_cast<double>(stats.used) : std::numeric_limits<double>::quiet_NaN();
  stats.skipped_updates = opt.skipped_updates - skipped_before;
  return stats;
}

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;  // CTC loss over feasible sequences
};

inline Evaluation evaluate_ctc(std::span<const Example> examples, const EncoderModel& m) {
  Evaluation ev;
  if (examples.empty()) return ev;
  std::size_t correct = 0, feasible = 0;
  double loss = 0.0;
  const int blank = static_cast<int>(m.config.blank_index);
  for (const auto& e : examples) {
    const LogProbLattice lat = model_lattice(e, m);
    if (decode_offline(lat, blank).labels == e.labels) ++correct;
    try {
      loss += ctc_loss(lat, e.labels, blank).loss;
      ++feasible;
    } catch (const InfeasibleError&) {
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
  ev.mean_loss = feasible ? loss / static_cast<double>(feasible) : std::numeric_limits<double>::infinity();
  return ev;
}

struct PhaseResult {
  std::vector<LogRow> log;
  double best_val_accuracy = 0.0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

namespace detail {

inline std::vector<Parameter*> trainable(const std::vector<Parameter*>& ps) {
  std::vector<Parameter*> out;
  for (Parameter* p : ps) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

inline std::vector<Tensor2> snapshot(std::span<Parameter* const> ps) {
  std::vector<Tensor2> s;
  for (const Parameter* p : ps) s.push_back(p->value);
  return s;
}

inline void restore(std::span<Parameter* const> ps, const std::vector<Tensor2>& s) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s[i];
}

}  // namespace detail

// Trains layer 0 with a temporary unit-level head under CTC on char_labels,
// keeps the epoch with the lowest validation loss, then freezes layer 0.
// Divergence (two consecutive non-finite epochs) aborts.
inline PhaseResult pretrain_asr(EncoderModel& model, std::span<const Utterance> train, std::span<const Utterance> val,
                                std::size_t num_units, const TrainingConfig& cfg) {
  PhaseResult res;
  model.layers.front().set_frozen(false);
  std::mt19937_64 rng = derived_rng(cfg.seed, "train", "asr", 0);
  AffineLayer head = make_affine_layer("asr_head", model.config.proj_dim, num_units + 1, rng);
  const int blank = static_cast<int>(num_units);
  auto train_ex = make_examples(train, model.cmvn, true);
  auto val_ex = make_examples(val, model.cmvn, true);

  LstmpLayer& layer = model.layers.front();
  std::vector<Parameter*> params{&layer.w_input, &layer.w_recur, &layer.bias, &layer.w_proj, &head.weight, &head.bias};
  OptimizerConfig ocfg = cfg.optimizer;
  ocfg.learning_rate = cfg.asr_learning_rate;
  OptimizerState opt = make_optimizer(params, ocfg);
  const ForwardOptions fopt{cfg.dropout, nullptr, nullptr};

  LossBuilder build = [&](Tape& t, const Example& e, std::mt19937_64& r) {
    ForwardOptions o = fopt;
    o.rng = &r;
    Var x = t.constant(stack_frames(e.features, model.config.stack_left, model.config.frame_skip));
    Var y = apply_dropout(lstmp_sequence(t, x, layer), o);
    return ctc_loss(affine(t, y, head), e.labels, blank);
  };

  auto val_stats = [&]() {
    std::size_t correct = 0, n = 0;
    double loss = 0.0;
    for (const auto& e : val_ex) {
      const Tensor2 logits = affine(first_layer_forward(e.features, model), head.weight.value, head.bias.value.values());
      const Tensor2 lat = log_softmax_rows(logits);
      if (decode_offline(lat, blank).labels == e.labels) ++correct;
      try {
        loss += ctc_loss(lat, e.labels, blank).loss;
        ++n;
      } catch (const InfeasibleError&) {
      }
    }
    return std::pair{val_ex.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(val_ex.size()),
                     n ? loss / static_cast<double>(n) : std::numeric_limits<double>::infinity()};
  };

  std::vector<Tensor2> best = detail::snapshot(params);
  int bad_epochs = 0;
  for (std::size_t epoch = 1; epoch <= cfg.schedule.asr_epochs; ++epoch) {
    const EpochStats st = run_epoch(train_ex, params, opt, build, rng, cfg.schedule.batch_size, cfg.threads);
    if (!std::isfinite(st.mean_loss)) {
      if (++bad_epochs >= 2) {
        throw DivergenceError("pretrain_asr: loss not finite for two consecutive epochs (epoch " +
                              std::to_string(epoch) + ", skipped updates " + std::to_string(opt.skipped_updates) + ")");
      }
    } else {
      bad_epochs = 0;
    }
    const auto [acc, vloss] = val_stats();
    res.log.push_back({epoch, "asr", st.mean_loss, acc, st.skipped});
    if (vloss < res.best_val_loss) {
      res.best_val_loss = vloss;
      res.best_val_accuracy = acc;
      res.best_epoch = epoch;
      best = detail::snapshot(params);
    }
  }
  detail::restore(params, best);
  layer.set_frozen(true);
  return res;
}

// Cross-entropy on the last lattice step over the V intent outputs (blank
// excluded). Layer 0 must already be frozen when ASR pre-training is used;
// whatever is frozen stays untouched.
inline PhaseResult pretrain_ce(EncoderModel& model, std::span<const Utterance> train, std::span<const Utterance> val,
                               const TrainingConfig& cfg) {
  PhaseResult res;
  for (const auto& u : train) {
    if (u.intent_labels.size() != 1) throw DataError("pretrain_ce: utterance with " + std::to_string(u.intent_labels.size()) + " intents; CE pre-training is single-intent");
  }
  std::mt19937_64 rng = derived_rng(cfg.seed, "train", "ce", 0);
  auto train_ex = make_examples(train, model.cmvn);
  auto val_ex = make_examples(val, model.cmvn);
  cache_first_layer(train_ex, model);
  cache_first_layer(val_ex, model);
  const std::vector<Parameter*> params = detail::trainable(model.parameters());
  OptimizerState opt = make_optimizer(params, cfg.optimizer);
  const std::size_t V = model.config.vocab_size;

  LossBuilder build = [&](Tape& t, const Example& e, std::mt19937_64& r) {
    ForwardOptions o{cfg.dropout, &r, e.first_layer ? &*e.first_layer : nullptr};
    Var logits = encoder_logits(t, e.features, model, o);
    const std::size_t last = logits.value().rows() - 1;
    Var ls = ad::log_softmax_rows(ad::slice_cols(ad::row(logits, last), 0, V));
    return ad::scale(ad::pick(ls, 0, static_cast<std::size_t>(e.labels.front())), -1.0);
  };

  for (std::size_t epoch = 1; epoch <= cfg.schedule.ce_epochs; ++epoch) {
    const EpochStats st = run_epoch(train_ex, params, opt, build, rng, cfg.schedule.batch_size, cfg.threads);
    std::size_t correct = 0;
    for (const auto& e : val_ex) {
      const Tensor2 top = upper_layers_forward(e.first_layer ? *e.first_layer : first_layer_forward(e.features, model), model);
      const Tensor2 logits = head_logits(top, model);
      const auto last = logits.row(logits.rows() - 1).first(V);
      if (argmax(last) == e.labels.front()) ++correct;
    }
    const double acc = val_ex.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(val_ex.size());
    res.log.push_back({epoch, "ce", st.mean_loss, acc, st.skipped});
    res.best_val_accuracy = std::max(res.best_val_accuracy, acc);
    res.best_epoch = epoch;
  }
  return res;
}

// CTC fine-tuning with early stopping on validation sequence accuracy; the
// best epoch (ties broken by lower validation loss) is restored at the end.
inline PhaseResult train_ctc(EncoderModel& model, std::span<const Utterance> train, std::span<const Utterance> val,
                             const TrainingConfig& cfg) {
  PhaseResult res;
  std::mt19937_64 rng = derived_rng(cfg.seed, "train", "ctc", 0);
  auto train_ex = make_examples(train, model.cmvn);
  auto val_ex = make_examples(val, model.cmvn);
  cache_first_layer(train_ex, model);
  cache_first_layer(val_ex, model);
  const std::vector<Parameter*> params = detail::trainable(model.parameters());
  OptimizerState opt = make_optimizer(params, cfg.optimizer);
  const int blank = static_cast<int>(model.config.blank_index);

  LossBuilder build = [&](Tape& t, const Example& e, std::mt19937_64& r) {
    ForwardOptions o{cfg.dropout, &r, e.first_layer ? &*e.first_layer : nullptr};
    return ctc_loss(encoder_logits(t, e.features, model, o), e.labels, blank);
  };

  const Evaluation initial = evaluate_ctc(val_ex, model);
  res.best_val_accuracy = initial.accuracy;
  res.best_val_loss = initial.mean_loss;
  std::vector<Tensor2> best = detail::snapshot(params);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.schedule.ctc_epochs; ++epoch) {
    const EpochStats st = run_epoch(train_ex, params, opt, build, rng, cfg.schedule.batch_size, cfg.threads);
    if (!train_ex.empty() &&
        static_cast<double>(st.skipped) > cfg.max_skip_fraction * static_cast<double>(train_ex.size())) {
      throw DataError("train_ctc: " + std::to_string(st.skipped) + " of " + std::to_string(train_ex.size()) +
                      " sequences infeasible for the lattice length; reduction factors too large for this data");
    }
    const Evaluation ev = evaluate_ctc(val_ex, model);
    res.log.push_back({epoch, "ctc", st.mean_loss, ev.accuracy, st.skipped});
    const bool better = ev.accuracy > res.best_val_accuracy ||
                        (ev.accuracy == res.best_val_accuracy && ev.mean_loss < res.best_val_loss);
    if (better) {
      res.best_val_accuracy = ev.accuracy;
      res.best_val_loss = ev.mean_loss;
      res.best_epoch = epoch;
      best = detail::snapshot(params);
      since_best = 0;
    } else if (++since_best >= cfg.schedule.patience) {
      break;
    }
  }
  detail::restore(params, best);
  return res;
}

struct PipelineData {
  const Dataset* char_train = nullptr;
  const Dataset* char_val = nullptr;
  const Dataset* single_train = nullptr;  // CE pre-training
  const Dataset* single_val = nullptr;
  const Dataset* train = nullptr;  // CTC fine-tuning
  const Dataset* val = nullptr;
};

struct PipelineResult {
  EncoderModel model;
  std::vector<LogRow> log;
  double best_val_accuracy = 0.0;
};

inline std::size_t count_units(const Dataset& d) {
  int mx = -1;
  for (const auto& i : d.intents) {
    for (int u : i.units) mx = std::max(mx, u);
  }
  return static_cast<std::size_t>(mx + 1);
}

// Result of the ASR stage: an initialised model with a frozen first layer.
struct AsrStage {
  EncoderModel model;
  std::vector<LogRow> log;
};

inline EncoderModel initial_model(const TrainingConfig& cfg, const PipelineData& data) {
  if (data.train == nullptr || data.val == nullptr) throw DataError("run_pipeline: training split missing");
  EncoderConfig ecfg = cfg.encoder;
  ecfg.vocab_size = data.train->vocab_size();
  ecfg.blank_index = ecfg.vocab_size;
  ecfg.feature_dim = data.train->feature_dim;
  ecfg.hop_ms = data.train->hop_ms;
  EncoderModel m = make_encoder(ecfg, cfg.seed);
  m.cmvn = compute_cmvn(data.train->utterances);
  return m;
}

inline AsrStage run_asr_stage(const TrainingConfig& cfg, const PipelineData& data) {
  if (data.char_train == nullptr || data.char_val == nullptr) throw DataError("run_pipeline: CHAR corpus missing");
  AsrStage st{initial_model(cfg, data), {}};
  st.log = pretrain_asr(st.model, data.char_train->utterances, data.char_val->utterances,
                        count_units(*data.char_train), cfg)
               .log;
  return st;
}

// Pre-training (if the mode asks for it) followed by CTC fine-tuning. The ASR
// stage may be supplied precomputed (from run_asr_stage with the same
// configuration and data); the result is then identical.
inline PipelineResult run_pipeline(const TrainingConfig& cfg, const PipelineData& data,
                                   const AsrStage* asr = nullptr) {
  PipelineResult out;
  if (cfg.mode != TrainingMode::kCtcOnly) {
    const AsrStage st = asr != nullptr ? *asr : run_asr_stage(cfg, data);
    const EncoderModel fresh = initial_model(cfg, data);
    if (!st.model.layers.front().frozen || !(st.model.config == fresh.config) || !(st.model.cmvn == fresh.cmvn)) {
      throw ContractViolation("run_pipeline: ASR stage does not match this configuration");
    }
    out.model = st.model;
    out.log = st.log;
  } else {
    out.model = initial_model(cfg, data);
  }
  if (cfg.mode == TrainingMode::kFull) {
    if (data.single_train == nullptr || data.single_val == nullptr) throw DataError("run_pipeline: S1 corpus missing");
    auto r = pretrain_ce(out.model, data.single_train->utterances, data.single_val->utterances, cfg);
    out.log.insert(out.log.end(), r.log.begin(), r.log.end());
  }
  auto r = train_ctc(out.model, data.train->utterances, data.val->utterances, cfg);
  out.log.insert(out.log.end(), r.log.begin(), r.log.end());
  out.best_val_accuracy = r.best_val_accuracy;
  return out;
}

}  // namespace sslu
