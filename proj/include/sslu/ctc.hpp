// SPDX-License-Identifier: Apache-2.0
//
// Connectionist temporal classification loss.
//
// The lattice is T x (V+1) per-frame log-probabilities. Targets are expanded
// to blank, l1, blank, l2, ..., blank and the forward/backward variables are
// computed in log space. The brute-force path enumeration is kept alongside
// as an independent reference for small instances.
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sslu/autodiff.hpp"
#include "sslu/errors.hpp"
#include "sslu/tensor.hpp"
#include "sslu/types.hpp"

namespace sslu {

struct ExtendedLabels {
  std::vector<int> symbols;
  int blank = 0;

  std::size_t size() const { return symbols.size(); }
  int operator[](std::size_t s) const { return symbols[s]; }
};

inline ExtendedLabels expand_with_blanks(std::span<const int> labels, int blank) {
  ExtendedLabels ext;
  ext.blank = blank;
  ext.symbols.reserve(2 * labels.size() + 1);
  ext.symbols.push_back(blank);
  for (int l : labels) {
    if (l == blank) throw DataError("expand_with_blanks: label sequence contains the blank symbol");
    ext.symbols.push_back(l);
    ext.symbols.push_back(blank);
  }
  return ext;
}

// Shortest lattice that can carry `labels`: one frame per label plus one
// separating blank per adjacent repeat.
inline std::size_t ctc_min_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++n;
  }
  return n;
}

struct AlphaBeta {
  Tensor2 alpha;  // T x S, log space
  Tensor2 beta;   // T x S, log space; beta[t,s] includes the emission at t
  double log_likelihood = 0.0;
};

struct CtcResult {
  double loss = 0.0;
  Tensor2 gradient;  // d loss / d lattice entry
};

namespace detail {

inline void check_ctc_inputs(const Tensor2& lattice, std::span<const int> labels, int blank) {
  if (blank < 0 || static_cast<std::size_t>(blank) >= lattice.cols()) {
    throw DimensionError("ctc: blank index " + std::to_string(blank) + " outside lattice width " +
                         std::to_string(lattice.cols()));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= lattice.cols() || l == blank) {
      throw DataError("ctc: label " + std::to_string(l) + " invalid for lattice width " +
                      std::to_string(lattice.cols()));
    }
  }
  const std::size_t need = ctc_min_frames(labels);
  if (lattice.rows() < need || lattice.rows() == 0) {
    throw InfeasibleError("ctc: " + std::to_string(labels.size()) + " labels need at least " +
                          std::to_string(std::max<std::size_t>(need, 1)) + " frames, lattice has " +
                          std::to_string(lattice.rows()));
  }
}

inline bool can_skip(const ExtendedLabels& ext, std::size_t s) {
  return s >= 2 && ext[s] != ext.blank && ext[s] != ext[s - 2];
}

}  // namespace detail

inline AlphaBeta ctc_alpha_beta(const Tensor2& lattice, const ExtendedLabels& ext) {
  std::vector<int> labels;
  for (std::size_t s = 1; s < ext.size(); s += 2) labels.push_back(ext[s]);
  detail::check_ctc_inputs(lattice, labels, ext.blank);

  constexpr double ninf = -std::numeric_limits<double>::infinity();
  const std::size_t T = lattice.rows(), S = ext.size();
  AlphaBeta ab{Tensor2(T, S, ninf), Tensor2(T, S, ninf), ninf};
  auto emit = [&](std::size_t t, std::size_t s) { return lattice(t, static_cast<std::size_t>(ext[s])); };

  ab.alpha(0, 0) = emit(0, 0);
  if (S > 1) ab.alpha(0, 1) = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = ab.alpha(t - 1, s);
      if (s >= 1) acc = logaddexp(acc, ab.alpha(t - 1, s - 1));
      if (detail::can_skip(ext, s)) acc = logaddexp(acc, ab.alpha(t - 1, s - 2));
      ab.alpha(t, s) = acc == ninf ? ninf : acc + emit(t, s);
    }
  }

  ab.beta(T - 1, S - 1) = emit(T - 1, S - 1);
  if (S > 1) ab.beta(T - 1, S - 2) = emit(T - 1, S - 2);
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = ab.beta(t + 1, s);
      if (s + 1 < S) acc = logaddexp(acc, ab.beta(t + 1, s + 1));
      if (s + 2 < S && detail::can_skip(ext, s + 2)) acc = logaddexp(acc, ab.beta(t + 1, s + 2));
      ab.beta(t, s) = acc == ninf ? ninf : acc + emit(t, s);
    }
  }

  ab.log_likelihood = ab.alpha(T - 1, S - 1);
  if (S > 1) ab.log_likelihood = logaddexp(ab.log_likelihood, ab.alpha(T - 1, S - 2));
  return ab;
}

// Log-occupancy alpha+beta-emission of state s at frame t; -inf if unreachable.
inline double ctc_state_occupancy(const AlphaBeta& ab, const Tensor2& lattice, const ExtendedLabels& ext,
                                  std::size_t t, std::size_t s) {
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  const double a = ab.alpha(t, s), b = ab.beta(t, s);
  const double e = lattice(t, static_cast<std::size_t>(ext[s]));
  if (a == ninf || b == ninf || e == ninf) return ninf;
  return a + b - e;
}

// Negative log-likelihood of `labels` and its gradient with respect to the
// lattice log-probabilities (minus the posterior state occupancy).
inline CtcResult ctc_loss(const Tensor2& lattice, std::span<const int> labels, int blank) {
  const ExtendedLabels ext = expand_with_blanks(labels, blank);
  const AlphaBeta ab = ctc_alpha_beta(lattice, ext);
  if (!std::isfinite(ab.log_likelihood)) {
    throw InfeasibleError("ctc: label sequence has zero probability under the lattice");
  }
  CtcResult r;
  r.loss = -ab.log_likelihood;
  r.gradient = Tensor2(lattice.rows(), lattice.cols());
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> acc(lattice.cols());
  for (std::size_t t = 0; t < lattice.rows(); ++t) {
    std::fill(acc.begin(), acc.end(), ninf);
    for (std::size_t s = 0; s < ext.size(); ++s) {
      const auto k = static_cast<std::size_t>(ext[s]);
      acc[k] = logaddexp(acc[k], ctc_state_occupancy(ab, lattice, ext, t, s));
    }
    for (std::size_t k = 0; k < acc.size(); ++k) {
      r.gradient(t, k) = acc[k] == ninf ? 0.0 : -std::exp(acc[k] - ab.log_likelihood);
    }
  }
  return r;
}

// Same loss on unnormalised logits; the gradient takes the fused
// softmax-minus-occupancy form.
inline CtcResult ctc_loss_from_logits(const Tensor2& logits, std::span<const int> labels, int blank) {
  const Tensor2 lattice = log_softmax_rows(logits);
  CtcResult r = ctc_loss(lattice, labels, blank);
  for (std::size_t i = 0; i < r.gradient.size(); ++i) r.gradient[i] += std::exp(lattice[i]);
  return r;
}

// Reference value by enumerating all (V+1)^T frame paths.
inline double ctc_loss_bruteforce(const Tensor2& lattice, std::span<const int> labels, int blank) {
  const std::size_t T = lattice.rows(), K = lattice.cols();
  constexpr double limit = 1e7;
  if (std::pow(static_cast<double>(K), static_cast<double>(T)) > limit) {
    throw ContractViolation("ctc_loss_bruteforce: " + std::to_string(K) + "^" + std::to_string(T) +
                            " paths exceeds enumeration guard");
  }
  std::vector<std::size_t> path(T, 0);
  std::vector<int> collapsed;
  long double total = 0.0L;
  for (;;) {
    collapsed.clear();
    int prev = -1;
    for (std::size_t t = 0; t < T; ++t) {
      const int sym = static_cast<int>(path[t]);
      if (sym != prev && sym != blank) collapsed.push_back(sym);
      prev = sym;
    }
    if (collapsed.size() == labels.size() && std::equal(collapsed.begin(), collapsed.end(), labels.begin())) {
      long double p = 1.0L;
      for (std::size_t t = 0; t < T; ++t) p *= std::exp(static_cast<long double>(lattice(t, path[t])));
      total += p;
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == K) path[t++] = 0;
    if (t == T) break;
  }
  return static_cast<double>(-std::log(total));
}

// CTC loss node on a logits matrix (log_softmax fused into the loss).
inline Var ctc_loss(Var logits, std::span<const int> labels, int blank) {
  CtcResult r = ctc_loss_from_logits(logits.value(), labels, blank);
  const std::size_t il = logits.id();
  return logits.tape().record(Tensor2(1, 1, r.loss), logits.requires_grad(),
                              [il, g = std::move(r.gradient)](Tape& tp, std::size_t, const Tensor2& up) {
                                Tensor2& gl = tp.grad_buffer(il);
                                for (std::size_t i = 0; i < g.size(); ++i) gl[i] += up[0] * g[i];
                              });
}

}  // namespace sslu
