#pragma once

#include <cmath>
#include <type_traits>
#include <functional>
#include <span>
#include <vector>

#include "revcol/tape.hpp"

// Multi-level reversible unit. A network is a chain of columns; each column
// holds m feature maps ("slots"), and slot t of the next column is
//
//   x_t = F_t(wired inputs) + gamma (.) x_{t-m}
//
// which is inverted exactly as  x_{t-m} = gamma^-1 (.) (x_t - F_t(...)).
// Because F_t re-evaluation is bitwise deterministic, a discarded column can
// be reconstructed from its successor, and the backward pass only ever holds
// two adjacent columns plus one column's recompute graph.
namespace revcol {

template <class T>
struct GammaScale {
  Tensor<T> values;  // one learnable scale per channel
  T floor = static_cast<T>(1e-3);
  std::int32_t param_id = -1;

  static GammaScale ones(std::int64_t channels, T floor = static_cast<T>(1e-3)) {
    GammaScale g;
    g.values = Tensor<T>::full({channels}, T(1));
    g.floor = floor;
    return g;
  }

  // Truncates magnitudes to the floor, preserving sign. Re-applied after
  // every optimizer update so inversion stays numerically safe.
  void clamp() {
    T* p = values.data();
    for (std::int64_t i = 0; i < values.numel(); ++i) {
      if (std::abs(p[i]) < floor) p[i] = p[i] < T(0) ? -floor : floor;
    }
  }

  void check() const {
    const T* p = values.data();
    for (std::int64_t i = 0; i < values.numel(); ++i)
      if (std::abs(p[i]) < floor)
        throw ValueError("gamma scale magnitude " + std::to_string(static_cast<double>(p[i])) +
                         " below floor " + std::to_string(static_cast<double>(floor)) +
                         " at channel " + std::to_string(i));
  }
};

enum class UnitArity { full, simplified };

// The m per-level feature maps of one column; index 0 = level 1.
template <class T>
using ColumnState = std::vector<Tensor<T>>;

struct ReversibleUnitConfig {
  int order = 4;  // m >= 2
  UnitArity arity = UnitArity::simplified;
  std::vector<Shape> slot_shapes;  // fixed across groups; shapes may differ within a group

  // The shape constraint holds between groups, not within one: every column
  // must carry exactly these slot shapes.
  template <class T>
  void check_state(const ColumnState<T>& state) const {
    if (static_cast<int>(slot_shapes.size()) != order)
      throw ConfigError("reversible unit: expected one slot shape per level");
    if (static_cast<int>(state.size()) != order)
      throw ShapeError("column state has " + std::to_string(state.size()) + " slots, expected " +
                       std::to_string(order));
    for (int s = 0; s < order; ++s)
      if (state[static_cast<std::size_t>(s)].dims() != slot_shapes[static_cast<std::size_t>(s)])
        throw ShapeError("slot " + std::to_string(s + 1) + " has shape " +
                         shape_str(state[static_cast<std::size_t>(s)].dims()) + ", expected " +
                         shape_str(slot_shapes[static_cast<std::size_t>(s)]));
  }
};

enum class StepDirection { forward, inverse };

// ----------------------------------------------------- flat step forms ---

// m = 2 unit. forward: other = x_{t-2}, returns x_t = F(x_{t-1}) + g·x_{t-2}.
// inverse: other = x_t, returns x_{t-2} = g^-1·(x_t - F(x_{t-1})).
template <class T, class F>
Tensor<T> revnet_step(const Tensor<T>& x_prev1, const Tensor<T>& other, F&& f,
                      const GammaScale<T>& gamma, StepDirection dir) {
  Tensor<T> fx = f(std::span<const Tensor<T>>(&x_prev1, 1));
  fx.check_same_shape(other, "revnet_step");
  if (dir == StepDirection::forward)
    return kernels::add_fwd(fx, kernels::mul_channel_fwd(other, gamma.values));
  gamma.check();
  return kernels::mul_channel_fwd(kernels::sub_fwd(other, fx), kernels::reciprocal(gamma.values));
}

// x_t = F(x_{t-1}, ..., x_{t-m+1}) + gamma (.) x_{t-m}
template <class T, class F>
Tensor<T> reversible_forward_step(std::span<const Tensor<T>> f_inputs, const Tensor<T>& x_t_minus_m,
                                  F&& f, const GammaScale<T>& gamma) {
  for (const auto& t : f_inputs)
    if (!t.defined()) throw ValueError("reversible_forward_step: missing wired input");
  Tensor<T> fx = f(f_inputs);
  fx.check_same_shape(x_t_minus_m, "reversible_forward_step");
  return kernels::add_fwd(fx, kernels::mul_channel_fwd(x_t_minus_m, gamma.values));
}

// x_{t-m} = gamma^-1 (.) (x_t - F(...)). Division uses a reciprocal computed
// once and the same channel-wise multiply kernel as the forward direction.
template <class T, class F>
Tensor<T> reversible_inverse_step(const Tensor<T>& x_t, std::span<const Tensor<T>> f_inputs, F&& f,
                                  const GammaScale<T>& gamma) {
  gamma.check();
  Tensor<T> fx = f(f_inputs);
  Tensor<T> out =
      kernels::mul_channel_fwd(kernels::sub_fwd(x_t, fx), kernels::reciprocal(gamma.values));
  if (!out.all_finite()) throw ValueError("reversible_inverse_step: non-finite reconstruction value");
  return out;
}

// ------------------------------------------------------- column chains ---

// Bank concept (duck-typed, see ToyBank in the tests and the model's
// ColumnBank):
//   int order() const                      number of slots m
//   UnitArity arity() const
//   bool first_column_plain() const        column 1 is plain feed-forward
//   bool has_level0() const                slot 1 reads an external level-0 input
//   Value<T> eval(Tape<T>&, int col, int slot, std::span<const Value<T>> inputs)
//   GammaScale<T>& gamma(int col, int slot)     col >= 2

namespace detail {

// Assembles the wired F inputs for one slot. `cur` holds the slots of the
// column being produced (or, during inversion, the known successor column);
// `prev` holds the predecessor column.
template <class T, class Bank>
std::vector<Value<T>> wire_inputs(Bank& bank, int col, int slot, const std::vector<Value<T>>& cur,
                                  const std::vector<Value<T>>& prev, const Value<T>* level0) {
  const int m = bank.order();
  std::vector<Value<T>> in;
  if (bank.arity() == UnitArity::simplified) {
    // x_{t-1}: the lower slot of the current column (level 0 for slot 1).
    if (slot == 1) {
      if (bank.has_level0() && level0)
        in.push_back(*level0);
      else
        in.push_back(prev.at(static_cast<std::size_t>(m - 1)));
    } else {
      in.push_back(cur.at(static_cast<std::size_t>(slot - 2)));
    }
    // x_{t-m+1}: the next-higher slot of the previous column.
    if (slot < m && col >= 2) in.push_back(prev.at(static_cast<std::size_t>(slot)));
  } else {
    for (int j = 1; j <= m - 1; ++j) {
      const int lvl = slot - j;
      if (lvl >= 1)
        in.push_back(cur.at(static_cast<std::size_t>(lvl - 1)));
      else
        in.push_back(prev.at(static_cast<std::size_t>(m + lvl - 1)));
    }
  }
  for (const auto& v : in)
    if (!v.v.defined()) throw ValueError("reversible chain: missing wired input for slot " +
                                         std::to_string(slot) + " of column " + std::to_string(col));
  return in;
}

template <class T>
std::vector<Value<T>> as_values(const std::vector<Tensor<T>>& ts) {
  std::vector<Value<T>> vs;
  vs.reserve(ts.size());
  for (const auto& t : ts) vs.push_back({t, -1});
  return vs;
}

}  // namespace detail

// Produces all m slots of column `col` from its predecessor.
template <class T, class Bank>
std::vector<Value<T>> column_forward(Tape<T>& tape, Bank& bank, int col,
                                     const std::vector<Value<T>>& prev,
                                     const std::type_identity_t<Value<T>>* level0) {
  const int m = bank.order();
  std::vector<Value<T>> cur;
  cur.reserve(static_cast<std::size_t>(m));
  for (int s = 1; s <= m; ++s) {
    auto inputs = detail::wire_inputs<T>(bank, col, s, cur, prev, level0);
    Value<T> fx = bank.eval(tape, col, s, std::span<const Value<T>>(inputs));
    auto& gs = bank.gamma(col, s);
    Value<T> gv = tape.leaf(gs.values, gs.param_id);
    cur.push_back(tape.add(fx, tape.mul_channel(prev.at(static_cast<std::size_t>(s - 1)), gv)));
  }
  return cur;
}

// Column 1 when the chain starts with a plain feed-forward column: no gamma
// path and no previous column, each slot is F of the slot below it.
template <class T, class Bank>
std::vector<Value<T>> column_forward_first(Tape<T>& tape, Bank& bank, const Value<T>& level0) {
  const int m = bank.order();
  std::vector<Value<T>> cur;
  cur.reserve(static_cast<std::size_t>(m));
  for (int s = 1; s <= m; ++s) {
    std::vector<Value<T>> inputs{s == 1 ? level0 : cur.back()};
    cur.push_back(bank.eval(tape, 1, s, std::span<const Value<T>>(inputs)));
  }
  return cur;
}

// Inverts one column transition: given column `col`, recovers column col-1.
// Must run in descending slot order m, m-1, ..., 1: inverting slot s needs
// the already-reconstructed slot s+1 of the previous column as an F input
// (slot m's F takes no previous-column input and is inverted first).
template <class T, class Bank>
ColumnState<T> reconstruct_column(Bank& bank, int col, const ColumnState<T>& next,
                                  const std::type_identity_t<Tensor<T>>* level0) {
  const int m = bank.order();
  if (static_cast<int>(next.size()) != m)
    throw ShapeError("reconstruct_column: expected " + std::to_string(m) + " slots, got " +
                     std::to_string(next.size()));
  Tape<T> paused(false);
  std::vector<Value<T>> cur = detail::as_values(next);
  std::vector<Value<T>> prev(static_cast<std::size_t>(m));
  Value<T> l0 = level0 ? Value<T>{*level0, -1} : Value<T>{};
  for (int s = m; s >= 1; --s) {
    auto& gs = bank.gamma(col, s);
    gs.check();
    auto inputs = detail::wire_inputs<T>(bank, col, s, cur, prev, level0 ? &l0 : nullptr);
    Value<T> fx = bank.eval(paused, col, s, std::span<const Value<T>>(inputs));
    Tensor<T> rec = kernels::mul_channel_fwd(kernels::sub_fwd(next[static_cast<std::size_t>(s - 1)], fx.v),
                                             kernels::reciprocal(gs.values));
    if (!rec.all_finite())
      throw ValueError("reconstruct_column: non-finite reconstruction at slot " + std::to_string(s) +
                       " of column " + std::to_string(col - 1));
    prev[static_cast<std::size_t>(s - 1)] = {std::move(rec), -1};
  }
  std::vector<Tensor<T>> out;
  out.reserve(prev.size());
  for (auto& v : prev) out.push_back(std::move(v.v));
  return out;
}

// Taped variant of one full column step on plain tensors.
template <class T, class Bank>
ColumnState<T> simplified_column_step(Bank& bank, int col, const ColumnState<T>& prev,
                                      const std::type_identity_t<Tensor<T>>* level0) {
  Tape<T> paused(false);
  auto prev_v = detail::as_values(prev);
  Value<T> l0 = level0 ? Value<T>{*level0, -1} : Value<T>{};
  auto cur = column_forward(paused, bank, col, prev_v, level0 ? &l0 : nullptr);
  std::vector<Tensor<T>> out;
  out.reserve(cur.size());
  for (auto& v : cur) out.push_back(std::move(v.v));
  return out;
}

template <class T>
struct ReversibleBackwardResult {
  Tensor<T> level0_grad;                     // accumulated over every column's slot-1 F
  std::vector<Tensor<T>> initial_state_grad; // only when the chain starts from an external state
};

// Memory-efficient backward. Precondition: the forward pass ran with the
// tape paused, retaining only the level-0 input and the last column. Sweeps
// i = COL..2: reconstructs column i-1, re-runs column i's step with a
// recording tape, backpropagates the incoming slot gradients through it and
// merges the gamma-path and F-path contributions into column i-1's slot
// gradients. `tap_cb(col, state, sink)` lets the caller attach extra
// upstream gradients (supervision heads) at any column, including the last.
template <class T, class Bank, class TapCb>
ReversibleBackwardResult<T> reversible_backward(Bank& bank, int columns,
                                                const std::type_identity_t<Tensor<T>>* level0,
                                                const ColumnState<T>& last_state,
                                                std::vector<Tensor<T>> upstream, TapCb&& tap_cb,
                                                GradSink<T>& sink) {
  const int m = bank.order();
  if (static_cast<int>(upstream.size()) != m) upstream.resize(static_cast<std::size_t>(m));

  auto merge = [m](std::vector<Tensor<T>>& into, std::vector<Tensor<T>>&& extra) {
    if (extra.empty()) return;
    for (int s = 0; s < m; ++s) {
      if (!extra[static_cast<std::size_t>(s)].defined()) continue;
      if (into[static_cast<std::size_t>(s)].defined())
        into[static_cast<std::size_t>(s)].add_(extra[static_cast<std::size_t>(s)]);
      else
        into[static_cast<std::size_t>(s)] = std::move(extra[static_cast<std::size_t>(s)]);
    }
  };

  std::vector<Tensor<T>> cur = last_state;
  std::vector<Tensor<T>> g = std::move(upstream);
  merge(g, tap_cb(columns, cur, sink));

  Tensor<T> level0_grad;
  auto add_level0_grad = [&](Tensor<T>&& extra) {
    if (!extra.defined()) return;
    if (level0_grad.defined())
      level0_grad.add_(extra);
    else
      level0_grad = std::move(extra);
  };

  for (int col = columns; col >= 2; --col) {
    std::vector<Tensor<T>> prev = reconstruct_column(bank, col, cur, level0);

    // Re-run this transition with recording and pull gradients through it.
    {
      Tape<T> tape(true);
      std::vector<Value<T>> prev_v;
      prev_v.reserve(static_cast<std::size_t>(m));
      for (auto& t : prev) prev_v.push_back(tape.leaf(t));
      Value<T> l0 = level0 ? tape.leaf(*level0) : Value<T>{};
      auto cur_v = column_forward(tape, bank, col, prev_v, level0 ? &l0 : nullptr);
      for (int s = 0; s < m; ++s)
        if (g[static_cast<std::size_t>(s)].defined())
          tape.seed(cur_v[static_cast<std::size_t>(s)], std::move(g[static_cast<std::size_t>(s)]));
      tape.run_backward(&sink);
      std::vector<Tensor<T>> gprev(static_cast<std::size_t>(m));
      for (int s = 0; s < m; ++s) gprev[static_cast<std::size_t>(s)] = tape.grad_of(prev_v[static_cast<std::size_t>(s)]);
      if (level0) add_level0_grad(tape.grad_of(l0));
      g = std::move(gprev);
    }

    merge(g, tap_cb(col - 1, prev, sink));
    cur = std::move(prev);
  }

  if (bank.first_column_plain()) {
    if (!level0) throw ValueError("reversible_backward: plain first column requires a level-0 input");
    Tape<T> tape(true);
    Value<T> l0 = tape.leaf(*level0);
    auto cur_v = column_forward_first(tape, bank, l0);
    for (int s = 0; s < m; ++s)
      if (g[static_cast<std::size_t>(s)].defined())
        tape.seed(cur_v[static_cast<std::size_t>(s)], std::move(g[static_cast<std::size_t>(s)]));
    tape.run_backward(&sink);
    add_level0_grad(tape.grad_of(l0));
    return {std::move(level0_grad), {}};
  }
  return {std::move(level0_grad), std::move(g)};
}

// Convenience no-op tap callback.
template <class T>
inline auto no_taps() {
  return [](int, const std::vector<Tensor<T>>&, GradSink<T>&) { return std::vector<Tensor<T>>{}; };
}

}  // namespace revcol
