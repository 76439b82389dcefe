// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over Tensor2 values.
//
// A Tape records every operation of one forward pass in creation order, which
// is already a topological order, so backward() is a single reverse sweep.
// Parameters enter the tape through Tape::param(); each parameter maps to one
// leaf per tape, so a weight reused at every time step accumulates its
// gradient additively on that leaf and is reported once in the GradientMap.
#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sslu/errors.hpp"
#include "sslu/tensor.hpp"

namespace sslu {

struct Parameter {
  std::string name;
  Tensor2 value;
  bool trainable = true;
  // Biases are exempt from weight decay.
  bool decays = true;
};

// Gradients keyed by parameter identity. Aggregates (norms, merges) must
// iterate a caller-supplied parameter list so summation order is fixed.
class GradientMap {
 public:
  const Tensor2* find(const Parameter& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
  }
  Tensor2& at(const Parameter& p) {
    auto [it, inserted] = grads_.try_emplace(&p);
    if (inserted) it->second = Tensor2(p.value.rows(), p.value.cols());
    return it->second;
  }
  void set(const Parameter& p, Tensor2 g) { grads_[&p] = std::move(g); }
  bool empty() const { return grads_.empty(); }
  std::size_t size() const { return grads_.size(); }

  // this += other, parameter by parameter in the given order.
  void merge(const GradientMap& other, std::span<Parameter* const> order) {
    for (const Parameter* p : order) {
      const Tensor2* g = other.find(*p);
      if (!g) continue;
      Tensor2& dst = at(*p);
      for (std::size_t i = 0; i < g->size(); ++i) dst[i] += (*g)[i];
    }
  }

  void scale(double s) {
    for (auto& [p, g] : grads_) {
      for (double& v : g.values()) v *= s;
    }
  }

  double squared_norm(std::span<Parameter* const> order) const {
    double s = 0.0;
    for (const Parameter* p : order) {
      if (const Tensor2* g = find(*p)) {
        for (double v : g->values()) s += v * v;
      }
    }
    return s;
  }

  bool all_finite() const {
    for (const auto& [p, g] : grads_) {
      if (!g.all_finite()) return false;
    }
    return true;
  }

 private:
  std::unordered_map<const Parameter*, Tensor2> grads_;
};

class Tape;

class Var {
 public:
  Var() = default;
  const Tensor2& value() const;
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self, const Tensor2& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor2 v) { return record(std::move(v), false, nullptr); }

  // Differentiable leaf whose gradient is read back with grad().
  Var input(Tensor2 v) { return record(std::move(v), true, nullptr); }

  // Parameter leaf; frozen parameters become constants. The value is not copied.
  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Node& n = nodes_.emplace_back();
    n.value = &p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    const std::size_t id = nodes_.size() - 1;
    param_nodes_.emplace(&p, id);
    return Var(this, id);
  }

  Var record(Tensor2 value, bool requires_grad, Backprop fn) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.value = &n.owned;
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(fn);
    return Var(this, nodes_.size() - 1);
  }

  const Tensor2& value(std::size_t id) const { return *nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Zero-initialised on first use.
  Tensor2& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value->empty()) n.grad = Tensor2(n.value->rows(), n.value->cols());
    return n.grad;
  }

  const Tensor2& grad(Var v) const {
    if (!backward_done_) throw ContractViolation("Tape::grad before backward()");
    return nodes_[v.id()].grad;
  }

  GradientMap backward(Var loss) {
    if (loss.tape_ != this) throw ContractViolation("backward: loss belongs to another tape");
    if (backward_done_) {
      throw ContractViolation("backward: graph already differentiated; call reset() first");
    }
    const Tensor2& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw DimensionError("backward: loss must be 1x1, got " + lv.shape());
    }
    backward_done_ = true;
    GradientMap out;
    if (!nodes_[loss.id()].requires_grad) return out;
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backprop) n.backprop(*this, id, n.grad);
    }
    for (const auto& [p, id] : param_nodes_) {
      const Node& n = nodes_[id];
      if (n.requires_grad && !n.grad.empty()) out.set(*p, n.grad);
    }
    return out;
  }

  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor2 owned;
    const Tensor2* value = nullptr;
    Tensor2 grad;
    bool requires_grad = false;
    Backprop backprop;
    const Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool backward_done_ = false;
};

inline const Tensor2& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace ad {

namespace detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractViolation(std::string(op) + ": operands on different tapes");
  return a.tape();
}

inline void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (!a.same_shape(b)) throw DimensionError(std::string(op) + ": " + a.shape() + " vs " + b.shape());
}

// Elementwise unary op whose derivative is expressed through its output.
template <typename F, typename DF>
Var unary(Var a, F f, DF dfdy) {
  Tape& t = a.tape();
  const Tensor2& x = a.value();
  Tensor2 y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(), [ia, dfdy](Tape& tp, std::size_t self, const Tensor2& g) {
    const Tensor2& yv = tp.value(self);
    Tensor2& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdy(yv[i]);
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  Tensor2 out = sslu::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return t.record(std::move(out), ra || rb, [ia, ib, ra, rb](Tape& tp, std::size_t, const Tensor2& g) {
    const Tensor2& av = tp.value(ia);
    const Tensor2& bv = tp.value(ib);
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    if (ra) {
      Tensor2& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = g.row(i).data();
        double* gar = ga.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
          const double* br = bv.row(p).data();
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += gr[j] * br[j];
          gar[p] += s;
        }
      }
    }
    if (rb) {
      Tensor2& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = g.row(i).data();
        const double* ar = av.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
          const double a_ip = ar[p];
          if (a_ip == 0.0) continue;
          double* gbr = gb.row(p).data();
          for (std::size_t j = 0; j < m; ++j) gbr[j] += a_ip * gr[j];
        }
      }
    }
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor2 out = a.value();
  const Tensor2& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return t.record(std::move(out), ra || rb, [ia, ib, ra, rb](Tape& tp, std::size_t, const Tensor2& g) {
    if (ra) {
      Tensor2& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (rb) {
      Tensor2& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

// a (n x m) + bias (1 x m) broadcast over rows.
inline Var add_row(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias, "add_row");
  const Tensor2& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != a.value().cols()) {
    throw DimensionError("add_row: " + a.value().shape() + " + bias " + bv.shape());
  }
  Tensor2 out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
  }
  const std::size_t ia = a.id(), ib = bias.id();
  const bool ra = a.requires_grad(), rb = bias.requires_grad();
  return t.record(std::move(out), ra || rb, [ia, ib, ra, rb](Tape& tp, std::size_t, const Tensor2& g) {
    if (ra) {
      Tensor2& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (rb) {
      Tensor2& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto r = g.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
      }
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor2 out = a.value();
  const Tensor2& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return t.record(std::move(out), ra || rb, [ia, ib, ra, rb](Tape& tp, std::size_t, const Tensor2& g) {
    if (ra) {
      const Tensor2& bv2 = tp.value(ib);
      Tensor2& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (rb) {
      const Tensor2& av2 = tp.value(ia);
      Tensor2& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

// Elementwise product with a constant tensor (dropout masks).
inline Var mask(Var a, Tensor2 m) {
  detail::require_same_shape(a.value(), m, "mask");
  Tensor2 out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(),
                         [ia, m = std::move(m)](Tape& tp, std::size_t, const Tensor2& g) {
                           Tensor2& ga = tp.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * m[i];
                         });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, [](double x) { return sslu::sigmoid(x); },
                       [](double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double y) { return 1.0 - y * y; });
}

inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  const Tensor2& x = a.value();
  if (c0 > c1 || c1 > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") of " + x.shape());
  }
  const std::size_t w = c1 - c0;
  Tensor2 out(x.rows(), w);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::copy_n(x.row(i).begin() + static_cast<std::ptrdiff_t>(c0), w, out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, c0, w](Tape& tp, std::size_t, const Tensor2& g) {
    Tensor2& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < w; ++j) ga(i, c0 + j) += g(i, j);
    }
  });
}

inline Var row(Var a, std::size_t r) {
  const Tensor2& x = a.value();
  if (r >= x.rows()) throw DimensionError("row: " + std::to_string(r) + " of " + x.shape());
  Tensor2 out = Tensor2::row_vector(x.row(r));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, r](Tape& tp, std::size_t, const Tensor2& g) {
    auto gr = tp.grad_buffer(ia).row(r);
    for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += g[j];
  });
}

// Stacks 1 x m row vectors into an n x m matrix.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  Tape& t = rows.front().tape();
  const std::size_t m = rows.front().value().cols();
  Tensor2 out;
  std::vector<std::size_t> ids;
  bool any = false;
  for (const Var& v : rows) {
    if (v.value().rows() != 1 || v.value().cols() != m) {
      throw DimensionError("stack_rows: row " + v.value().shape() + ", expected 1x" + std::to_string(m));
    }
    out.append_row(v.value().row(0));
    ids.push_back(v.id());
    any = any || v.requires_grad();
  }
  return t.record(std::move(out), any, [ids = std::move(ids)](Tape& tp, std::size_t, const Tensor2& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!tp.requires_grad(ids[i])) continue;
      auto gr = tp.grad_buffer(ids[i]).row(0);
      auto src = g.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += src[j];
    }
  });
}

// Concatenates matrices with equal row counts along the column axis.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  Tape& t = parts.front().tape();
  const std::size_t n = parts.front().value().rows();
  std::size_t total = 0;
  bool any = false;
  for (const Var& v : parts) {
    if (v.value().rows() != n) {
      throw DimensionError("concat_cols: " + v.value().shape() + " with " + std::to_string(n) + " rows");
    }
    total += v.value().cols();
    any = any || v.requires_grad();
  }
  Tensor2 out(n, total);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, offset)
  std::size_t off = 0;
  for (const Var& v : parts) {
    const Tensor2& x = v.value();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(x.row(i).begin(), x.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(off));
    }
    spans.emplace_back(v.id(), off);
    off += x.cols();
  }
  return t.record(std::move(out), any, [spans = std::move(spans)](Tape& tp, std::size_t, const Tensor2& g) {
    for (const auto& [id, o] : spans) {
      if (!tp.requires_grad(id)) continue;
      Tensor2& gi = tp.grad_buffer(id);
      for (std::size_t i = 0; i < gi.rows(); ++i) {
        for (std::size_t j = 0; j < gi.cols(); ++j) gi(i, j) += g(i, o + j);
      }
    }
  });
}

// Concatenates each window of `factor` consecutive rows into one row; the last
// partial window repeats its final row. Output is ceil(n/factor) x (m*factor).
inline Var regroup_rows(Var a, std::size_t factor) {
  if (factor == 0) throw DimensionError("regroup_rows: factor must be >= 1");
  const Tensor2& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  const std::size_t out_rows = (n + factor - 1) / factor;
  Tensor2 out(out_rows, m * factor);
  std::vector<std::size_t> src(out_rows * factor);
  for (std::size_t w = 0; w < out_rows; ++w) {
    for (std::size_t k = 0; k < factor; ++k) {
      const std::size_t s = std::min(w * factor + k, n - 1);
      src[w * factor + k] = s;
      std::copy(x.row(s).begin(), x.row(s).end(), out.row(w).begin() + static_cast<std::ptrdiff_t>(k * m));
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(),
                         [ia, m, factor, src = std::move(src)](Tape& tp, std::size_t, const Tensor2& g) {
                           Tensor2& ga = tp.grad_buffer(ia);
                           for (std::size_t w = 0; w < g.rows(); ++w) {
                             for (std::size_t k = 0; k < factor; ++k) {
                               auto dst = ga.row(src[w * factor + k]);
                               for (std::size_t j = 0; j < m; ++j) dst[j] += g(w, k * m + j);
                             }
                           }
                         });
}

inline Var log_softmax_rows(Var a) {
  Tensor2 out = sslu::log_softmax_rows(a.value());
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia](Tape& tp, std::size_t self, const Tensor2& g) {
    const Tensor2& ls = tp.value(self);
    Tensor2& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) - std::exp(ls(i, j)) * gs;
    }
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor2(1, 1, s), a.requires_grad(), [ia](Tape& tp, std::size_t, const Tensor2& g) {
    Tensor2& ga = tp.grad_buffer(ia);
    for (double& v : ga.values()) v += g[0];
  });
}

inline Var pick(Var a, std::size_t r, std::size_t c) {
  const Tensor2& x = a.value();
  if (r >= x.rows() || c >= x.cols()) {
    throw DimensionError("pick: (" + std::to_string(r) + "," + std::to_string(c) + ") of " + x.shape());
  }
  const std::size_t ia = a.id();
  return a.tape().record(Tensor2(1, 1, x(r, c)), a.requires_grad(), [ia, r, c](Tape& tp, std::size_t, const Tensor2& g) {
    tp.grad_buffer(ia)(r, c) += g[0];
  });
}

}  // namespace ad

// Largest relative discrepancy between tape gradients and central differences,
// |analytic - numeric| / max(1, |analytic|, |numeric|), over every entry of
// every listed parameter.
inline double grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                         double eps = 1e-5) {
  if (!(eps > 0.0)) throw ContractViolation("grad_check: step must be positive");
  auto evaluate = [&f]() {
    Tape t;
    const Var loss = f(t);
    const double v = loss.value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };

  GradientMap analytic;
  {
    Tape t;
    const Var loss = f(t);
    if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: objective is not finite");
    analytic = t.backward(loss);
  }

  double worst = 0.0;
  for (Parameter* p : params) {
    const Tensor2* g = analytic.find(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double up = evaluate();
      p->value[i] = orig - eps;
      const double down = evaluate();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g ? (*g)[i] : 0.0;
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace sslu
