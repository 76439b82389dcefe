// SPDX-License-Identifier: Apache-2.0
//
// Unidirectional LSTMP encoder with frame stacking at the input and time
// reduction between layers, followed by a two-layer output head.
//
//   features -> stack_frames(left, skip) -> LSTMP_0
//            -> [time_reduce(lambda_i) -> LSTMP_{i+1}] for each reduction
//            -> tanh(affine) -> affine -> log_softmax
//
// Output width is V+1; the blank symbol occupies the last slot (index V).
#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sslu/autodiff.hpp"
#include "sslu/binary_io.hpp"
#include "sslu/errors.hpp"
#include "sslu/tensor.hpp"
#include "sslu/types.hpp"

namespace sslu {

// T' x (V+1) per-frame log-probabilities.
using LogProbLattice = Tensor2;

struct EncoderConfig {
  std::size_t feature_dim = 8;
  std::size_t stack_left = 7;
  std::size_t frame_skip = 3;
  // One entry per layer after the first; the input of layer i+1 is the output
  // of layer i regrouped by reductions[i].
  std::vector<std::size_t> reductions{4, 4};
  std::size_t hidden_dim = 64;
  std::size_t proj_dim = 32;
  std::size_t head_dim = 32;
  std::size_t vocab_size = 12;
  std::size_t blank_index = 12;
  double hop_ms = 10.0;

  std::size_t num_layers() const { return reductions.size() + 1; }
  std::size_t output_dim() const { return vocab_size + 1; }
  std::size_t stacked_dim() const { return feature_dim * (stack_left + 1); }
  std::size_t layer_input_dim(std::size_t layer) const {
    return layer == 0 ? stacked_dim() : proj_dim * reductions[layer - 1];
  }

  void validate() const {
    if (frame_skip < 1) throw DataError("encoder config: frame_skip must be >= 1");
    for (std::size_t r : reductions) {
      if (r < 1) throw DataError("encoder config: reduction factors must be >= 1");
    }
    if (feature_dim == 0 || hidden_dim == 0 || proj_dim == 0 || head_dim == 0 || vocab_size == 0) {
      throw DataError("encoder config: dimensions must be positive");
    }
    if (blank_index != vocab_size) {
      throw DataError("encoder config: blank must occupy the last output slot (" +
                      std::to_string(vocab_size) + "), got " + std::to_string(blank_index));
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Output frames of the encoder for an input of `frames` feature frames.
inline std::size_t encoder_output_length(std::size_t frames, const EncoderConfig& cfg) {
  if (frames == 0) return 0;
  std::size_t n = (frames + cfg.frame_skip - 1) / cfg.frame_skip;
  for (std::size_t r : cfg.reductions) n = (n + r - 1) / r;
  return n;
}

// Input frames consumed per output step.
inline std::size_t frames_per_output_step(const EncoderConfig& cfg) {
  return std::accumulate(cfg.reductions.begin(), cfg.reductions.end(), cfg.frame_skip,
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline double ms_per_output_step(const EncoderConfig& cfg) {
  return static_cast<double>(frames_per_output_step(cfg)) * cfg.hop_ms;
}

// Frame t' of the result (taken at input frame t = t' * skip) concatenates
// input frames t-left .. t; positions before the start repeat frame 0.
inline Tensor2 stack_frames(const Tensor2& seq, std::size_t left, std::size_t skip) {
  if (skip < 1) throw DimensionError("stack_frames: skip must be >= 1");
  const std::size_t T = seq.rows(), D = seq.cols();
  if (T == 0) return Tensor2(0, D * (left + 1));
  const std::size_t out_len = (T + skip - 1) / skip;
  Tensor2 out(out_len, D * (left + 1));
  for (std::size_t o = 0; o < out_len; ++o) {
    const std::size_t t = o * skip;
    auto dst = out.row(o);
    for (std::size_t k = 0; k <= left; ++k) {
      const std::size_t src = t + k >= left ? t + k - left : 0;
      std::copy(seq.row(src).begin(), seq.row(src).end(), dst.begin() + static_cast<std::ptrdiff_t>(k * D));
    }
  }
  return out;
}

// Concatenates non-overlapping windows of `factor` frames; the final partial
// window repeats its last frame.
inline Tensor2 time_reduce(const Tensor2& seq, std::size_t factor) {
  if (factor < 1) throw DimensionError("time_reduce: factor must be >= 1");
  const std::size_t T = seq.rows(), D = seq.cols();
  const std::size_t out_len = (T + factor - 1) / factor;
  Tensor2 out(out_len, D * factor);
  for (std::size_t w = 0; w < out_len; ++w) {
    for (std::size_t k = 0; k < factor; ++k) {
      const std::size_t src = std::min(w * factor + k, T - 1);
      std::copy(seq.row(src).begin(), seq.row(src).end(),
                out.row(w).begin() + static_cast<std::ptrdiff_t>(k * D));
    }
  }
  return out;
}

struct AffineLayer {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out
};

// LSTM with a linear projection of the hidden output. Gates are laid out as
// [input | forget | cell | output] along the columns of the weight matrices;
// both the next layer and the recurrence consume the projected output.
struct LstmpLayer {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t proj_dim = 0;
  Parameter w_input;   // input_dim x 4H
  Parameter w_recur;   // proj_dim x 4H
  Parameter bias;      // 1 x 4H
  Parameter w_proj;    // H x proj_dim
  bool frozen = false;

  void set_frozen(bool f) {
    frozen = f;
    for (Parameter* p : {&w_input, &w_recur, &bias, &w_proj}) p->trainable = !f;
  }
};

struct LstmpState {
  std::vector<double> cell;  // H
  std::vector<double> proj;  // P, the layer output

  static LstmpState zeros(const LstmpLayer& l) {
    return {std::vector<double>(l.hidden_dim, 0.0), std::vector<double>(l.proj_dim, 0.0)};
  }
};

struct EncoderModel {
  EncoderConfig config;
  std::vector<LstmpLayer> layers;
  AffineLayer head_hidden;
  AffineLayer head_out;
  CmvnStats cmvn;

  EncoderModel() = default;
  EncoderModel(const EncoderModel&) = default;
  EncoderModel& operator=(const EncoderModel&) = default;

  // Fixed order; optimisers and checkpoints rely on it.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (auto& l : layers) {
      for (Parameter* p : {&l.w_input, &l.w_recur, &l.bias, &l.w_proj}) ps.push_back(p);
    }
    for (Parameter* p : {&head_hidden.weight, &head_hidden.bias, &head_out.weight, &head_out.bias}) {
      ps.push_back(p);
    }
    return ps;
  }
  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> ps;
    for (Parameter* p : const_cast<EncoderModel*>(this)->parameters()) ps.push_back(p);
    return ps;
  }
};

namespace detail {

inline Parameter make_param(std::string name, std::size_t rows, std::size_t cols, double range,
                            std::mt19937_64& rng, bool decays = true) {
  Parameter p{std::move(name), Tensor2(rows, cols), true, decays};
  if (range > 0.0) {
    std::uniform_real_distribution<double> u(-range, range);
    for (double& v : p.value.values()) v = u(rng);
  }
  return p;
}

}  // namespace detail

// Uniform(-r, r) with r = 1/sqrt(fan_in); biases zero except the forget gate (+1).
inline LstmpLayer make_lstmp_layer(const std::string& prefix, std::size_t input_dim, std::size_t hidden,
                                   std::size_t proj, std::mt19937_64& rng) {
  LstmpLayer l;
  l.input_dim = input_dim;
  l.hidden_dim = hidden;
  l.proj_dim = proj;
  const double r_gate = 1.0 / std::sqrt(static_cast<double>(input_dim + proj));
  l.w_input = detail::make_param(prefix + ".w_input", input_dim, 4 * hidden, r_gate, rng);
  l.w_recur = detail::make_param(prefix + ".w_recur", proj, 4 * hidden, r_gate, rng);
  l.bias = detail::make_param(prefix + ".bias", 1, 4 * hidden, 0.0, rng, false);
  for (std::size_t j = hidden; j < 2 * hidden; ++j) l.bias.value[j] = 1.0;
  l.w_proj = detail::make_param(prefix + ".w_proj", hidden, proj, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  return l;
}

inline AffineLayer make_affine_layer(const std::string& prefix, std::size_t in, std::size_t out,
                                     std::mt19937_64& rng) {
  return {detail::make_param(prefix + ".weight", in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng),
          detail::make_param(prefix + ".bias", 1, out, 0.0, rng, false)};
}

inline EncoderModel make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  EncoderModel m;
  m.config = cfg;
  for (std::size_t i = 0; i < cfg.num_layers(); ++i) {
    m.layers.push_back(make_lstmp_layer("layer" + std::to_string(i), cfg.layer_input_dim(i), cfg.hidden_dim,
                                        cfg.proj_dim, rng));
  }
  m.head_hidden = make_affine_layer("head_hidden", cfg.proj_dim, cfg.head_dim, rng);
  m.head_out = make_affine_layer("head_out", cfg.head_dim, cfg.output_dim(), rng);
  return m;
}

// ---------------------------------------------------------------------------
// Plain (inference) evaluation.

inline LstmpState lstmp_step(std::span<const double> x, const LstmpLayer& layer, const LstmpState& prev) {
  if (x.size() != layer.input_dim) {
    throw DimensionError("lstmp_step: input of " + std::to_string(x.size()) + " for layer expecting " +
                         std::to_string(layer.input_dim));
  }
  const std::size_t H = layer.hidden_dim, P = layer.proj_dim;
  // Same association as the tape path: (x W + b) + r U.
  Tensor2 z = affine(Tensor2(1, x.size(), std::vector<double>(x.begin(), x.end())), layer.w_input.value,
                     layer.bias.value.values());
  Tensor2 rec = matmul(Tensor2(1, P, prev.proj), layer.w_recur.value);
  for (std::size_t j = 0; j < z.size(); ++j) z[j] += rec[j];

  LstmpState next;
  next.cell.resize(H);
  Tensor2 h(1, H);
  for (std::size_t j = 0; j < H; ++j) {
    const double i_g = sigmoid(z[j]);
    const double f_g = sigmoid(z[H + j]);
    const double c_g = std::tanh(z[2 * H + j]);
    const double o_g = sigmoid(z[3 * H + j]);
    next.cell[j] = f_g * prev.cell[j] + i_g * c_g;
    h[j] = o_g * std::tanh(next.cell[j]);
  }
  Tensor2 r = matmul(h, layer.w_proj.value);
  next.proj = r.storage();
  return next;
}

inline Tensor2 lstmp_forward(const Tensor2& seq, const LstmpLayer& layer) {
  Tensor2 out(0, layer.proj_dim);
  LstmpState st = LstmpState::zeros(layer);
  for (std::size_t t = 0; t < seq.rows(); ++t) {
    st = lstmp_step(seq.row(t), layer, st);
    out.append_row(st.proj);
  }
  return out;
}

inline Tensor2 head_logits(const Tensor2& top, const EncoderModel& m) {
  Tensor2 h = affine(top, m.head_hidden.weight.value, m.head_hidden.bias.value.values());
  for (double& v : h.values()) v = std::tanh(v);
  return affine(h, m.head_out.weight.value, m.head_out.bias.value.values());
}

namespace detail {
inline void check_input_dim(const Tensor2& features, const EncoderConfig& cfg) {
  if (features.cols() != cfg.feature_dim && !(features.rows() == 0)) {
    throw DimensionError("encoder: features of dim " + std::to_string(features.cols()) + ", model expects " +
                         std::to_string(cfg.feature_dim));
  }
}
}  // namespace detail

// Output of the first LSTMP layer on stacked, skipped frames.
inline Tensor2 first_layer_forward(const Tensor2& features, const EncoderModel& m) {
  detail::check_input_dim(features, m.config);
  return lstmp_forward(stack_frames(features, m.config.stack_left, m.config.frame_skip), m.layers.front());
}

// Input of the head (last LSTMP layer output) given the first layer output.
inline Tensor2 upper_layers_forward(Tensor2 y, const EncoderModel& m) {
  for (std::size_t i = 1; i < m.layers.size(); ++i) {
    y = lstmp_forward(time_reduce(y, m.config.reductions[i - 1]), m.layers[i]);
  }
  return y;
}

inline LogProbLattice encoder_forward(const Tensor2& features, const EncoderModel& m) {
  if (features.rows() == 0) return LogProbLattice(0, m.config.output_dim());
  return log_softmax_rows(head_logits(upper_layers_forward(first_layer_forward(features, m), m), m));
}

// ---------------------------------------------------------------------------
// Differentiable evaluation on a tape.

inline Var affine(Tape& t, Var x, const AffineLayer& l) {
  return ad::add_row(ad::matmul(x, t.param(l.weight)), t.param(l.bias));
}

// Runs a layer over all rows of `x` and returns the stacked projected outputs.
inline Var lstmp_sequence(Tape& t, Var x, const LstmpLayer& layer) {
  if (x.value().cols() != layer.input_dim) {
    throw DimensionError("lstmp_sequence: input " + x.value().shape() + " for layer expecting " +
                         std::to_string(layer.input_dim) + " columns");
  }
  const std::size_t H = layer.hidden_dim;
  Var xw = ad::add_row(ad::matmul(x, t.param(layer.w_input)), t.param(layer.bias));
  Var w_recur = t.param(layer.w_recur);
  Var w_proj = t.param(layer.w_proj);
  Var r = t.constant(Tensor2(1, layer.proj_dim));
  Var c = t.constant(Tensor2(1, H));
  std::vector<Var> outputs;
  outputs.reserve(x.value().rows());
  for (std::size_t step = 0; step < x.value().rows(); ++step) {
    Var z = ad::add(ad::row(xw, step), ad::matmul(r, w_recur));
    Var in_gate = ad::sigmoid(ad::slice_cols(z, 0, H));
    Var forget = ad::sigmoid(ad::slice_cols(z, H, 2 * H));
    Var cand = ad::tanh(ad::slice_cols(z, 2 * H, 3 * H));
    Var out_gate = ad::sigmoid(ad::slice_cols(z, 3 * H, 4 * H));
    c = ad::add(ad::mul(forget, c), ad::mul(in_gate, cand));
    Var h = ad::mul(out_gate, ad::tanh(c));
    r = ad::matmul(h, w_proj);
    outputs.push_back(r);
  }
  return ad::stack_rows(outputs);
}

struct ForwardOptions {
  // Inverted dropout on every LSTMP layer output; 0 disables it.
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  // Precomputed output of a frozen first layer for these features.
  const Tensor2* first_layer_output = nullptr;
};

inline Var apply_dropout(Var y, const ForwardOptions& opt) {
  if (opt.dropout <= 0.0 || opt.rng == nullptr) return y;
  const double keep = 1.0 - opt.dropout;
  std::bernoulli_distribution coin(keep);
  Tensor2 m(y.value().rows(), y.value().cols());
  for (double& v : m.values()) v = coin(*opt.rng) ? 1.0 / keep : 0.0;
  return ad::mask(y, std::move(m));
}

// Pre-softmax T' x (V+1) logits.
inline Var encoder_logits(Tape& t, const Tensor2& features, const EncoderModel& m,
                          const ForwardOptions& opt = {}) {
  Var y;
  if (opt.first_layer_output != nullptr) {
    if (!m.layers.front().frozen) {
      throw ContractViolation("encoder_logits: cached first-layer output requires a frozen first layer");
    }
    y = t.constant(*opt.first_layer_output);
  } else {
    detail::check_input_dim(features, m.config);
    Var x = t.constant(stack_frames(features, m.config.stack_left, m.config.frame_skip));
    y = lstmp_sequence(t, x, m.layers.front());
  }
  y = apply_dropout(y, opt);
  for (std::size_t i = 1; i < m.layers.size(); ++i) {
    y = lstmp_sequence(t, ad::regroup_rows(y, m.config.reductions[i - 1]), m.layers[i]);
    y = apply_dropout(y, opt);
  }
  return affine(t, ad::tanh(affine(t, y, m.head_hidden)), m.head_out);
}

// ---------------------------------------------------------------------------
// Streaming.

struct EncoderState {
  std::size_t frames_seen = 0;
  std::vector<double> first_frame;
  std::deque<std::vector<double>> recent;  // last stack_left + 1 input frames
  std::vector<LstmpState> layers;
  std::vector<std::vector<std::vector<double>>> pending;  // per reduction, buffered layer outputs
  bool closed = false;

  static EncoderState start(const EncoderModel& m) {
    EncoderState s;
    for (const auto& l : m.layers) s.layers.push_back(LstmpState::zeros(l));
    s.pending.resize(m.config.reductions.size());
    return s;
  }
};

namespace detail {

inline void feed_layer(std::size_t layer, std::span<const double> x, EncoderState& st, const EncoderModel& m,
                       Tensor2& rows_out) {
  st.layers[layer] = lstmp_step(x, m.layers[layer], st.layers[layer]);
  const std::vector<double>& y = st.layers[layer].proj;
  if (layer + 1 == m.layers.size()) {
    Tensor2 lp = log_softmax_rows(head_logits(Tensor2(1, y.size(), y), m));
    rows_out.append_row(lp.row(0));
    return;
  }
  auto& buf = st.pending[layer];
  buf.push_back(y);
  if (buf.size() == m.config.reductions[layer]) {
    std::vector<double> cat;
    for (const auto& v : buf) cat.insert(cat.end(), v.begin(), v.end());
    buf.clear();
    feed_layer(layer + 1, cat, st, m, rows_out);
  }
}

}  // namespace detail

// Consumes a chunk of input frames and returns the lattice rows that became
// computable. Rows depending on a final partial reduction window are only
// produced by encoder_stream_close().
inline LogProbLattice encoder_stream_push(const Tensor2& chunk, EncoderState& st, const EncoderModel& m) {
  if (st.closed) throw ContractViolation("encoder_stream_push: stream already closed");
  detail::check_input_dim(chunk, m.config);
  const auto& cfg = m.config;
  LogProbLattice rows(0, cfg.output_dim());
  for (std::size_t i = 0; i < chunk.rows(); ++i) {
    auto frame = chunk.row(i);
    if (st.frames_seen == 0) st.first_frame.assign(frame.begin(), frame.end());
    st.recent.emplace_back(frame.begin(), frame.end());
    if (st.recent.size() > cfg.stack_left + 1) st.recent.pop_front();
    const std::size_t t = st.frames_seen++;
    if (t % cfg.frame_skip != 0) continue;
    std::vector<double> stacked;
    stacked.reserve(cfg.stacked_dim());
    const std::size_t have = st.recent.size();  // frames t-have+1 .. t
    for (std::size_t k = 0; k <= cfg.stack_left; ++k) {
      const std::size_t back = cfg.stack_left - k;  // offset before t
      const auto& src = back < have ? st.recent[have - 1 - back] : st.first_frame;
      stacked.insert(stacked.end(), src.begin(), src.end());
    }
    detail::feed_layer(0, stacked, st, m, rows);
  }
  return rows;
}

// Flushes partial reduction windows (padding with their last frame) and
// closes the stream.
inline LogProbLattice encoder_stream_close(EncoderState& st, const EncoderModel& m) {
  if (st.closed) throw ContractViolation("encoder_stream_close: stream already closed");
  st.closed = true;
  LogProbLattice rows(0, m.config.output_dim());
  for (std::size_t r = 0; r < st.pending.size(); ++r) {
    auto& buf = st.pending[r];
    if (buf.empty()) continue;
    const std::vector<double> last = buf.back();
    while (buf.size() < m.config.reductions[r]) buf.push_back(last);
    std::vector<double> cat;
    for (const auto& v : buf) cat.insert(cat.end(), v.begin(), v.end());
    buf.clear();
    detail::feed_layer(r + 1, cat, st, m, rows);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints: "SSLUCKPT", u32 version, u64 header length, JSON header, then
// every tensor listed in the header as little-endian f64 in header order.

inline constexpr std::string_view kCheckpointMagic = "SSLUCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"feature_dim", c.feature_dim}, {"stack_left", c.stack_left}, {"frame_skip", c.frame_skip},
          {"reductions", c.reductions},   {"hidden_dim", c.hidden_dim}, {"proj_dim", c.proj_dim},
          {"head_dim", c.head_dim},       {"vocab_size", c.vocab_size}, {"blank_index", c.blank_index},
          {"hop_ms", c.hop_ms}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.stack_left = j.value("stack_left", c.stack_left);
    c.frame_skip = j.value("frame_skip", c.frame_skip);
    c.reductions = j.value("reductions", c.reductions);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.proj_dim = j.value("proj_dim", c.proj_dim);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.blank_index = j.value("blank_index", c.vocab_size);
    c.hop_ms = j.value("hop_ms", c.hop_ms);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::string serialize_checkpoint(const EncoderModel& m) {
  nlohmann::json header;
  header["config"] = encoder_config_to_json(m.config);
  std::vector<bool> frozen;
  for (const auto& l : m.layers) frozen.push_back(l.frozen);
  header["frozen_layers"] = frozen;

  std::vector<std::pair<std::string, const Tensor2*>> tensors;
  for (const Parameter* p : m.parameters()) tensors.emplace_back(p->name, &p->value);
  Tensor2 cmvn_mean, cmvn_std;
  if (!m.cmvn.empty()) {
    cmvn_mean = Tensor2::row_vector(m.cmvn.mean);
    cmvn_std = Tensor2::row_vector(m.cmvn.stddev);
    tensors.emplace_back("cmvn.mean", &cmvn_mean);
    tensors.emplace_back("cmvn.stddev", &cmvn_std);
  }
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : tensors) table.push_back({{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}});
  header["tensors"] = table;

  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const std::string h = header.dump();
  w.u64(h.size());
  w.bytes(h);
  for (const auto& [name, t] : tensors) {
    for (double v : t->values()) w.f64(v);
  }
  return w.take();
}

namespace detail {

inline EncoderModel parse_checkpoint_unchecked(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = r.u64();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(static_cast<std::size_t>(hlen)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header: ") + e.what());
  }
  EncoderModel m = make_encoder(encoder_config_from_json(header.at("config")), 0);

  std::vector<Parameter*> params = m.parameters();
  std::size_t next_param = 0;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    const std::size_t rows = entry.at("rows"), cols = entry.at("cols");
    std::vector<double> vals(rows * cols);
    for (double& v : vals) v = r.f64();
    Tensor2 t(rows, cols, std::move(vals));
    if (name == "cmvn.mean") {
      m.cmvn.mean = t.storage();
    } else if (name == "cmvn.stddev") {
      m.cmvn.stddev = t.storage();
    } else {
      if (next_param >= params.size() || params[next_param]->name != name) {
        throw FormatError("checkpoint: unexpected tensor " + name);
      }
      Parameter& p = *params[next_param++];
      if (!p.value.same_shape(t)) {
        throw FormatError("checkpoint: tensor " + name + " has shape " + t.shape() + ", config implies " +
                          p.value.shape());
      }
      p.value = std::move(t);
    }
  }
  if (next_param != params.size()) throw FormatError("checkpoint: missing parameter tensors");
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  const auto frozen = header.at("frozen_layers").get<std::vector<bool>>();
  if (frozen.size() != m.layers.size()) throw FormatError("checkpoint: frozen marker count mismatch");
  for (std::size_t i = 0; i < frozen.size(); ++i) m.layers[i].set_frozen(frozen[i]);
  if (m.cmvn.mean.size() != m.cmvn.stddev.size()) throw FormatError("checkpoint: inconsistent CMVN stats");
  return m;
}

}  // namespace detail

inline EncoderModel parse_checkpoint(std::string_view bytes) {
  try {
    return detail::parse_checkpoint_unchecked(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

inline void save_checkpoint(const EncoderModel& m, const std::string& path) {
  io::write_file(path, serialize_checkpoint(m));
}

inline EncoderModel load_checkpoint(const std::string& path) { return parse_checkpoint(io::read_file(path)); }

}  // namespace sslu
