// SPDX-License-Identifier: Apache-2.0
//
// Greedy streaming CTC decoding. A label fires on the first frame whose argmax
// switches to it from anything else; blank frames reset the evidence so the
// same label can fire again later.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "sslu/encoder.hpp"
#include "sslu/tensor.hpp"
#include "sslu/types.hpp"

namespace sslu {

// Removes consecutive duplicates, then blanks.
inline LabelSequence collapse(std::span<const int> frame_labels, int blank) {
  LabelSequence out;
  int prev = -1;
  bool first = true;
  for (int s : frame_labels) {
    if ((first || s != prev) && s != blank) out.push_back(s);
    prev = s;
    first = false;
  }
  return out;
}

// Lowest index wins ties.
inline int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

struct Emission {
  int label = 0;
  std::size_t frame = 0;  // lattice row index
  friend bool operator==(const Emission&, const Emission&) = default;
};

struct DecoderState {
  int blank = 0;
  std::optional<int> previous;
  LabelSequence emitted;
  std::vector<std::size_t> emit_frames;
  std::size_t next_frame = 0;

  explicit DecoderState(int blank_symbol) : blank(blank_symbol) {}
};

inline std::optional<Emission> greedy_step(std::span<const double> lattice_row, DecoderState& st) {
  const int a = argmax(lattice_row);
  const std::size_t frame = st.next_frame++;
  const bool fire = a != st.blank && (!st.previous || *st.previous != a);
  st.previous = a;
  if (!fire) return std::nullopt;
  st.emitted.push_back(a);
  st.emit_frames.push_back(frame);
  return Emission{a, frame};
}

struct DecodeResult {
  LabelSequence labels;
  std::vector<std::size_t> frames;

  std::vector<Emission> emissions() const {
    std::vector<Emission> e;
    for (std::size_t i = 0; i < labels.size(); ++i) e.push_back({labels[i], frames[i]});
    return e;
  }
  friend bool operator==(const DecodeResult&, const DecodeResult&) = default;
};

inline DecodeResult decode_offline(const Tensor2& lattice, int blank) {
  DecoderState st(blank);
  for (std::size_t t = 0; t < lattice.rows(); ++t) greedy_step(lattice.row(t), st);
  return {st.emitted, st.emit_frames};
}

// Maps lattice rows back to input time.
struct FrameGeometry {
  double hop_ms = 10.0;
  std::size_t frame_skip = 3;
  std::vector<std::size_t> reductions{4, 4};

  static FrameGeometry of(const EncoderConfig& c) { return {c.hop_ms, c.frame_skip, c.reductions}; }

  double ms_per_step() const {
    double f = hop_ms * static_cast<double>(frame_skip);
    for (std::size_t r : reductions) f *= static_cast<double>(r);
    return f;
  }
  // End of the input span covered by output step `frame`.
  double emit_ms(std::size_t frame) const { return static_cast<double>(frame + 1) * ms_per_step(); }
};

struct SpottingEvent {
  int label = 0;
  std::size_t emit_frame = 0;
  double emit_ms = 0.0;
  double boundary_ms = std::numeric_limits<double>::quiet_NaN();
  bool matched = false;

  // Negative means the label fired before the intent's last speech frame.
  double relative_ms() const { return emit_ms - boundary_ms; }
};

// Pairs the i-th emission with the i-th boundary. Surplus emissions are kept
// with matched=false; surplus boundaries are dropped.
inline std::vector<SpottingEvent> spotting_positions(std::span<const Emission> emissions,
                                                     std::span<const double> boundaries_ms,
                                                     const FrameGeometry& geom) {
  std::vector<SpottingEvent> events;
  for (std::size_t i = 0; i < emissions.size(); ++i) {
    SpottingEvent e;
    e.label = emissions[i].label;
    e.emit_frame = emissions[i].frame;
    e.emit_ms = geom.emit_ms(emissions[i].frame);
    if (i < boundaries_ms.size()) {
      e.boundary_ms = boundaries_ms[i];
      e.matched = true;
    }
    events.push_back(e);
  }
  return events;
}

}  // namespace sslu
